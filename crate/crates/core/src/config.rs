//! Run configuration and its flat `key = value` text format.
//!
//! Keys use dotted namespaces (`window.rho_star`, `probes.staleness_limit`).
//! Lines starting with `#` are comments. Unknown keys are rejected and every
//! default is materialized when a config is serialized.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ledger::CostModel;
use crate::opd::Aggregation;
use crate::policy::{Family, Vocabulary};
use crate::probe::{Execution, ProbeConfig, RoundBudget};
use crate::window::{Fallback, WindowConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Adwin,
    OpdFull,
    OpdFixed(usize),
    FastOpd { start: usize, increment: usize },
    SeqKd,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split(':');
        let head = parts.next()?;
        let nums: Option<Vec<usize>> = parts.map(|p| p.trim().parse().ok()).collect();
        let nums = nums?;
        match (head.trim(), nums.as_slice()) {
            ("adwin", []) => Some(Mode::Adwin),
            ("opd-full", []) => Some(Mode::OpdFull),
            ("opd-fixed", [l]) => Some(Mode::OpdFixed(*l)),
            ("fast-opd", [start, increment]) => Some(Mode::FastOpd {
                start: *start,
                increment: *increment,
            }),
            ("seqkd", []) => Some(Mode::SeqKd),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Mode::Adwin => "adwin".into(),
            Mode::OpdFull => "opd-full".into(),
            Mode::OpdFixed(l) => format!("opd-fixed:{l}"),
            Mode::FastOpd { start, increment } => format!("fast-opd:{start}:{increment}"),
            Mode::SeqKd => "seqkd".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Identity,
    DiagonalFisher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub family: String,
    pub vocab: usize,
    pub eos_id: u32,
    pub order: usize,
    pub buckets: usize,
}

impl PolicyConfig {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab, self.eos_id)
    }

    pub fn family(&self) -> Result<Family> {
        match self.family.as_str() {
            "ngram" => Ok(Family::NgramSoftmax { order: self.order }),
            "linear" => Ok(Family::LinearSoftmax {
                buckets: self.buckets,
            }),
            other => Err(Error::InvalidConfig {
                key: "policy.family".into(),
                message: format!("unknown family `{other}`"),
            }),
        }
    }
}

/// How a policy is initialized when no checkpoint is given.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    /// Logits drawn uniformly from `[-scale, scale]`.
    pub scale: f64,
    /// Added to the eos logit of every context row.
    pub eos_bias: f64,
    pub seed: u64,
    /// Optional checkpoint path; empty means none.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub horizon: usize,
    pub seed: u64,
    pub temperature: f64,
    pub aggregation: Aggregation,
    pub policy: PolicyConfig,
    pub student: InitConfig,
    pub teacher: InitConfig,
    /// `host:port` of a remote teacher; empty for in-process.
    pub teacher_endpoint: String,
    /// Score with top-k renormalized remote distributions when > 0.
    pub teacher_topk: usize,
    pub prompt_count: usize,
    pub prompt_length: usize,
    pub window: WindowConfig,
    pub probes: ProbeConfig,
    pub probes_enabled: bool,
    pub metric: MetricKind,
    pub cost: CostModel,
    pub eval_rollouts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let horizon = 256;
        Self {
            mode: Mode::Adwin,
            batch_size: 32,
            steps: 200,
            learning_rate: 0.5,
            momentum: 0.0,
            horizon,
            seed: 0,
            temperature: 1.0,
            aggregation: Aggregation::PerSequence,
            policy: PolicyConfig {
                family: "ngram".into(),
                vocab: 8,
                eos_id: 0,
                order: 1,
                buckets: 8,
            },
            student: InitConfig {
                scale: 0.0,
                eos_bias: -3.0,
                seed: 1,
                checkpoint: String::new(),
            },
            teacher: InitConfig {
                scale: 3.0,
                eos_bias: -3.0,
                seed: 2,
                checkpoint: String::new(),
            },
            teacher_endpoint: String::new(),
            teacher_topk: 0,
            prompt_count: 8,
            prompt_length: 2,
            window: WindowConfig {
                l_max: horizon,
                ..WindowConfig::default()
            },
            probes: ProbeConfig::default(),
            probes_enabled: true,
            metric: MetricKind::Identity,
            cost: CostModel::default(),
            eval_rollouts: 256,
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "mode",
    "batch_size",
    "steps",
    "learning_rate",
    "momentum",
    "horizon",
    "seed",
    "temperature",
    "aggregation",
    "policy.family",
    "policy.vocab",
    "policy.eos_id",
    "policy.order",
    "policy.buckets",
    "student.scale",
    "student.eos_bias",
    "student.seed",
    "student.checkpoint",
    "teacher.scale",
    "teacher.eos_bias",
    "teacher.seed",
    "teacher.checkpoint",
    "teacher.endpoint",
    "teacher.topk",
    "prompts.count",
    "prompts.length",
    "window.candidates",
    "window.rho_star",
    "window.fallback",
    "window.initial",
    "window.metric",
    "probes.enabled",
    "probes.batch_size",
    "probes.staleness_limit",
    "probes.round_budget",
    "probes.discard_on_force",
    "probes.execution",
    "cost.gen",
    "cost.score",
    "cost.grad",
    "eval.rollouts",
];

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(key, format!("expected boolean, got `{value}`"))),
    }
}

fn real(x: f64) -> String {
    format!("{x:?}")
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => {
                self.mode = Mode::parse(v).ok_or_else(|| {
                    invalid(
                        key,
                        format!("`{v}` (expected adwin | opd-full | opd-fixed:L | fast-opd:START:INC | seqkd)"),
                    )
                })?
            }
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "horizon" => self.horizon = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "aggregation" => {
                self.aggregation = match v {
                    "sequence" => Aggregation::PerSequence,
                    "token" => Aggregation::PerToken,
                    _ => return Err(invalid(key, format!("`{v}` (expected sequence | token)"))),
                }
            }
            "policy.family" => self.policy.family = v.to_string(),
            "policy.vocab" => self.policy.vocab = parse_num(key, v)?,
            "policy.eos_id" => self.policy.eos_id = parse_num(key, v)?,
            "policy.order" => self.policy.order = parse_num(key, v)?,
            "policy.buckets" => self.policy.buckets = parse_num(key, v)?,
            "student.scale" => self.student.scale = parse_num(key, v)?,
            "student.eos_bias" => self.student.eos_bias = parse_num(key, v)?,
            "student.seed" => self.student.seed = parse_num(key, v)?,
            "student.checkpoint" => self.student.checkpoint = v.to_string(),
            "teacher.scale" => self.teacher.scale = parse_num(key, v)?,
            "teacher.eos_bias" => self.teacher.eos_bias = parse_num(key, v)?,
            "teacher.seed" => self.teacher.seed = parse_num(key, v)?,
            "teacher.checkpoint" => self.teacher.checkpoint = v.to_string(),
            "teacher.endpoint" => self.teacher_endpoint = v.to_string(),
            "teacher.topk" => self.teacher_topk = parse_num(key, v)?,
            "prompts.count" => self.prompt_count = parse_num(key, v)?,
            "prompts.length" => self.prompt_length = parse_num(key, v)?,
            "window.candidates" => {
                self.window.candidates = v
                    .split(',')
                    .map(|c| parse_num(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "window.rho_star" => self.window.rho_star = parse_num(key, v)?,
            "window.fallback" => {
                self.window.fallback = Fallback::parse(v).ok_or_else(|| {
                    invalid(key, format!("`{v}` (expected use-l-max | keep-current)"))
                })?
            }
            "window.initial" => {
                self.window.initial = if v == "max" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "window.metric" => {
                self.metric = match v {
                    "identity" => MetricKind::Identity,
                    "diagonal-fisher" => MetricKind::DiagonalFisher,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("`{v}` (expected identity | diagonal-fisher)"),
                        ))
                    }
                }
            }
            "probes.enabled" => self.probes_enabled = parse_bool(key, v)?,
            "probes.batch_size" => self.probes.probe_batch_size = parse_num(key, v)?,
            "probes.staleness_limit" => self.probes.staleness_limit = parse_num(key, v)?,
            "probes.round_budget" => {
                self.probes.round_budget = if v == "sync" {
                    RoundBudget::SyncRollout
                } else {
                    RoundBudget::Tokens(parse_num(key, v)?)
                }
            }
            "probes.discard_on_force" => self.probes.discard_on_force = parse_bool(key, v)?,
            "probes.execution" => {
                self.probes.execution = match v {
                    "virtual-async" => Execution::VirtualAsync,
                    "background" => Execution::Background,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("`{v}` (expected virtual-async | background)"),
                        ))
                    }
                }
            }
            "cost.gen" => self.cost.cost_per_student_token_gen = parse_num(key, v)?,
            "cost.score" => self.cost.cost_per_teacher_token_score = parse_num(key, v)?,
            "cost.grad" => self.cost.cost_per_grad_token = parse_num(key, v)?,
            "eval.rollouts" => self.eval_rollouts = parse_num(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        self.window.l_max = self.horizon;
        Ok(())
    }

    /// Current value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "mode" => self.mode.label(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "learning_rate" => real(self.learning_rate),
            "momentum" => real(self.momentum),
            "horizon" => self.horizon.to_string(),
            "seed" => self.seed.to_string(),
            "temperature" => real(self.temperature),
            "aggregation" => self.aggregation.name().into(),
            "policy.family" => self.policy.family.clone(),
            "policy.vocab" => self.policy.vocab.to_string(),
            "policy.eos_id" => self.policy.eos_id.to_string(),
            "policy.order" => self.policy.order.to_string(),
            "policy.buckets" => self.policy.buckets.to_string(),
            "student.scale" => real(self.student.scale),
            "student.eos_bias" => real(self.student.eos_bias),
            "student.seed" => self.student.seed.to_string(),
            "student.checkpoint" => self.student.checkpoint.clone(),
            "teacher.scale" => real(self.teacher.scale),
            "teacher.eos_bias" => real(self.teacher.eos_bias),
            "teacher.seed" => self.teacher.seed.to_string(),
            "teacher.checkpoint" => self.teacher.checkpoint.clone(),
            "teacher.endpoint" => self.teacher_endpoint.clone(),
            "teacher.topk" => self.teacher_topk.to_string(),
            "prompts.count" => self.prompt_count.to_string(),
            "prompts.length" => self.prompt_length.to_string(),
            "window.candidates" => self
                .window
                .candidates
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "window.rho_star" => real(self.window.rho_star),
            "window.fallback" => self.window.fallback.name().into(),
            "window.initial" => self
                .window
                .initial
                .map_or_else(|| "max".to_string(), |i| i.to_string()),
            "window.metric" => match self.metric {
                MetricKind::Identity => "identity".into(),
                MetricKind::DiagonalFisher => "diagonal-fisher".into(),
            },
            "probes.enabled" => self.probes_enabled.to_string(),
            "probes.batch_size" => self.probes.probe_batch_size.to_string(),
            "probes.staleness_limit" => self.probes.staleness_limit.to_string(),
            "probes.round_budget" => match self.probes.round_budget {
                RoundBudget::SyncRollout => "sync".into(),
                RoundBudget::Tokens(n) => n.to_string(),
            },
            "probes.discard_on_force" => self.probes.discard_on_force.to_string(),
            "probes.execution" => self.probes.execution.name().into(),
            "cost.gen" => real(self.cost.cost_per_student_token_gen),
            "cost.score" => real(self.cost.cost_per_teacher_token_score),
            "cost.grad" => real(self.cost.cost_per_grad_token),
            "eval.rollouts" => self.eval_rollouts.to_string(),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    /// Fully materialized `key = value` text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// Parses config text, then applies `overrides` (`key=value`) last.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::ConfigParse {
                    line: idx + 1,
                    message: "empty key".into(),
                });
            }
            cfg.set(key, value)?;
        }
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| {
                invalid(o, "override must have the form key=value".to_string())
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, n: usize| {
            if n == 0 {
                Err(invalid(key, "must be >= 1"))
            } else {
                Ok(())
            }
        };
        positive("batch_size", self.batch_size)?;
        positive("horizon", self.horizon)?;
        positive("probes.batch_size", self.probes.probe_batch_size)?;
        positive("probes.staleness_limit", self.probes.staleness_limit)?;
        positive("prompts.count", self.prompt_count)?;
        positive("eval.rollouts", self.eval_rollouts)?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must be in [0, 1)"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(invalid("temperature", "must be > 0"));
        }
        if !self.cost.is_valid() {
            return Err(invalid("cost.gen", "all cost rates must be > 0"));
        }
        for (key, x) in [
            ("student.scale", self.student.scale),
            ("student.eos_bias", self.student.eos_bias),
            ("teacher.scale", self.teacher.scale),
            ("teacher.eos_bias", self.teacher.eos_bias),
        ] {
            if !x.is_finite() {
                return Err(invalid(key, "must be finite"));
            }
        }
        self.policy
            .vocabulary()
            .map_err(|e| invalid("policy.vocab", e.to_string()))?;
        let family = self.policy.family()?;
        family
            .dimension(&self.policy.vocabulary()?)
            .map_err(|e| invalid("policy.order", e.to_string()))?;
        match self.mode {
            Mode::OpdFixed(l) if l == 0 || l > self.horizon => {
                return Err(invalid("mode", format!("fixed window {l} not in [1, horizon]")))
            }
            Mode::FastOpd { start, increment } if start == 0 || increment == 0 => {
                return Err(invalid("mode", "fast-opd start and increment must be >= 1"))
            }
            _ => {}
        }
        if self.window.l_max != self.horizon {
            return Err(invalid("horizon", "window horizon out of sync"));
        }
        self.window.validate()
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }
}
