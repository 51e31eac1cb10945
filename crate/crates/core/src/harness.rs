//! Run directories, manifests and canned experiment recipes.
//!
//! A run directory holds `manifest.txt` (resolved config plus provenance as
//! comment lines), `metrics.jsonl` and `checkpoint.bin`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;

use crate::checkpoint::save_checkpoint;
use crate::config::{Mode, TrainConfig};
use crate::diagnostics::{drift_curves, loss_position_cdf, prefix_mask_experiment};
use crate::error::{Error, Result};
use crate::metrics::{int_field, parse_stream, tag_of, MetricsWriter, Record};
use crate::sampling::sample_prefix;
use crate::trainer::{
    build_student, build_teacher, header_record, run_trainer, PromptSource, RunOutput, Trainer,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit code for an error: 2 for configuration problems, 3 for a
/// numerical abort, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ConfigParse { .. }
        | Error::UnknownKey(_)
        | Error::InvalidConfig { .. }
        | Error::UnknownRecipe(_) => 2,
        Error::NumericalAbort { .. } => 3,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub code_version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub teacher_approximation: String,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, teacher_approximation: Option<String>) -> Self {
        Self {
            config: config.clone(),
            code_version: CODE_VERSION.to_string(),
            seed: config.seed,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            teacher_approximation: teacher_approximation.unwrap_or_else(|| "none".into()),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "# code_version = {}\n# created_at = {}\n# teacher_approximation = {}\n{}",
            self.code_version,
            self.created_at,
            self.teacher_approximation,
            self.config.to_text()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config = TrainConfig::parse(text, &[])?;
        let meta = |key: &str| {
            text.lines()
                .filter_map(|l| l.strip_prefix('#'))
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| Error::ConfigParse {
                    line: 0,
                    message: format!("manifest lacks `{key}`"),
                })
        };
        let created_at = meta("created_at")?.parse().map_err(|_| Error::ConfigParse {
            line: 0,
            message: "bad created_at".into(),
        })?;
        Ok(Self {
            seed: config.seed,
            config,
            code_version: meta("code_version")?,
            created_at,
            teacher_approximation: meta("teacher_approximation")?,
        })
    }
}

fn create_sink(dir: &Path) -> Result<MetricsWriter<BufWriter<File>>> {
    fs::create_dir_all(dir)?;
    Ok(MetricsWriter::new(BufWriter::new(File::create(
        dir.join(METRICS_FILE),
    )?)))
}

/// Trains with `config`, writing a complete run directory.
pub fn run_to_dir(config: &TrainConfig, dir: &Path) -> Result<RunOutput> {
    let trainer = Trainer::from_config(config.clone())?;
    let manifest = RunManifest::new(config, trainer.teacher().approximation());
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    let mut metrics = create_sink(dir)?;
    let out = run_trainer(trainer, &mut metrics)?;
    save_checkpoint(&out.student, &dir.join(CHECKPOINT_FILE)).map_err(|e| match e {
        Error::Io(source) => Error::StepIo {
            step: out.steps.len(),
            source,
        },
        other => other,
    })?;
    Ok(out)
}

/// Checks presence of all run files and that the manifest seed matches the
/// metrics header.
pub fn validate_run_dir(dir: &Path) -> Result<RunManifest> {
    for f in [MANIFEST_FILE, METRICS_FILE, CHECKPOINT_FILE] {
        if !dir.join(f).is_file() {
            return Err(Error::ReportMismatch(format!(
                "{} missing from {}",
                f,
                dir.display()
            )));
        }
    }
    let manifest = RunManifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let records = parse_stream(&fs::read_to_string(dir.join(METRICS_FILE))?)?;
    let header = records
        .iter()
        .find(|r| tag_of(r) == "header")
        .ok_or_else(|| Error::ReportMismatch("metrics stream has no header".into()))?;
    if int_field(header, "seed") != Some(manifest.seed as i64) {
        return Err(Error::ReportMismatch(format!(
            "manifest seed {} not found in metrics header",
            manifest.seed
        )));
    }
    crate::checkpoint::load_checkpoint(
        &dir.join(CHECKPOINT_FILE),
        manifest.config.policy.eos_id,
    )?;
    Ok(manifest)
}

/// What a recipe run computes.
#[derive(Debug, Clone, PartialEq)]
pub enum RunKind {
    Train,
    /// Branching factor and top-k survival on student rollouts.
    Drift { ks: Vec<usize>, rollouts: usize },
    LossCdf { rollouts: usize },
    Cascade { mask_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub config: TrainConfig,
    pub kind: RunKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSet {
    pub name: String,
    pub runs: Vec<RunSpec>,
}

pub const RECIPES: [&str; 7] = [
    "fig2-drift",
    "fig4-horizon",
    "fig5-cosine",
    "fig7-losscdf",
    "fig8-cascade",
    "table-ablate-windows",
    "table-ablate-rho",
];

/// Powers of two from 4 strictly below `horizon` (or `horizon / 2` when
/// the horizon is too short for that).
pub fn power_candidates(horizon: usize) -> Vec<usize> {
    let c: Vec<usize> = std::iter::successors(Some(4usize), |x| Some(x * 2))
        .take_while(|&x| x < horizon)
        .collect();
    if c.is_empty() {
        vec![(horizon / 2).max(1)]
    } else {
        c
    }
}

/// Sets the horizon and a matching candidate grid.
pub fn with_horizon(mut config: TrainConfig, horizon: usize) -> TrainConfig {
    config.horizon = horizon;
    config.window.l_max = horizon;
    config.window.candidates = power_candidates(horizon);
    config.window.initial = None;
    config
}

/// The small drift setting the recipes are built on: V=8 bigram policies,
/// a peaked teacher and a near-uniform student, horizon 64.
pub fn toy_drift_config() -> TrainConfig {
    let mut c = with_horizon(TrainConfig::default(), 64);
    c.policy.vocab = 8;
    c.policy.order = 1;
    c.batch_size = 32;
    c.steps = 300;
    c.probes.probe_batch_size = 32;
    c.probes.staleness_limit = 4;
    c
}

const SEEDS: [u64; 4] = [0, 1, 2, 3];

fn seeded(base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = base.clone();
    c.seed = seed;
    c
}

/// Run set for a named recipe, built on `base`.
pub fn recipe(name: &str, base: &TrainConfig) -> Result<RunSet> {
    let mut runs = Vec::new();
    let mut push = |label: String, config: TrainConfig, kind: RunKind| {
        runs.push(RunSpec {
            label,
            config,
            kind,
        })
    };
    match name {
        "fig2-drift" => {
            let v = base.policy.vocab;
            let ks: Vec<usize> = [1, 2, v / 2, v]
                .into_iter()
                .filter(|&k| k >= 1)
                .fold(Vec::new(), |mut acc, k| {
                    if !acc.contains(&k) {
                        acc.push(k);
                    }
                    acc
                });
            for s in SEEDS {
                push(
                    format!("drift-s{s}"),
                    seeded(base, s),
                    RunKind::Drift {
                        ks: ks.clone(),
                        rollouts: 2048,
                    },
                );
            }
        }
        "fig4-horizon" => {
            for s in SEEDS {
                for mode in [Mode::Adwin, Mode::OpdFull] {
                    let mut c = seeded(base, s);
                    c.mode = mode;
                    push(format!("{}-s{s}", mode.label()), c, RunKind::Train);
                }
            }
        }
        "fig5-cosine" => {
            for s in SEEDS {
                let mut c = seeded(base, s);
                c.mode = Mode::Adwin;
                push(format!("adwin-s{s}"), c, RunKind::Train);
            }
        }
        "fig7-losscdf" => {
            for s in SEEDS {
                push(
                    format!("losscdf-s{s}"),
                    seeded(base, s),
                    RunKind::LossCdf { rollouts: 2048 },
                );
            }
        }
        "fig8-cascade" => {
            let mask_len = (base.horizon / 8).max(1);
            for s in SEEDS {
                push(
                    format!("cascade-s{s}"),
                    seeded(base, s),
                    RunKind::Cascade { mask_len },
                );
            }
        }
        "table-ablate-windows" => {
            for &l in &base.window.candidates {
                let mut c = base.clone();
                c.mode = Mode::OpdFixed(l);
                push(format!("fixed-{l}"), c, RunKind::Train);
            }
            let mut c = base.clone();
            c.mode = Mode::Adwin;
            push("adwin".into(), c, RunKind::Train);
        }
        "table-ablate-rho" => {
            for rho in [0.5, 0.6, std::f64::consts::FRAC_1_SQRT_2, 0.8] {
                let mut c = base.clone();
                c.mode = Mode::Adwin;
                c.window.rho_star = rho;
                push(format!("rho-{rho:.4}"), c, RunKind::Train);
            }
        }
        other => return Err(Error::UnknownRecipe(other.to_string())),
    }
    Ok(RunSet {
        name: name.to_string(),
        runs,
    })
}

/// Executes one recipe run into `dir`.
pub fn execute_run(spec: &RunSpec, dir: &Path) -> Result<()> {
    let config = &spec.config;
    if spec.kind == RunKind::Train {
        run_to_dir(config, dir)?;
        return Ok(());
    }
    config.validate()?;
    let teacher = build_teacher(config)?;
    let student = build_student(config)?;
    let manifest = RunManifest::new(config, teacher.approximation());
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    let mut metrics = create_sink(dir)?;
    metrics.write(&header_record(config, teacher.approximation()))?;
    let prompts = PromptSource::generate(
        config.prompt_count,
        config.prompt_length,
        student.vocab(),
        config.seed,
    );
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut sample = |n: usize| {
        (0..n)
            .map(|i| {
                sample_prefix(
                    &student,
                    prompts.get(i),
                    config.horizon,
                    config.horizon,
                    config.temperature,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()
    };
    let records: Vec<Record> = match &spec.kind {
        RunKind::Train => unreachable!(),
        RunKind::Drift { ks, rollouts } => {
            let seqs: Vec<_> = sample(*rollouts)?.into_iter().map(|s| s.sequence).collect();
            drift_curves(teacher.as_ref(), &seqs, ks)?.records()
        }
        RunKind::LossCdf { rollouts } => {
            let batch = sample(*rollouts)?
                .into_iter()
                .map(|s| crate::opd::score_sampled(&student, teacher.as_ref(), s))
                .collect::<Result<Vec<_>>>()?;
            let cdf = loss_position_cdf(&batch)?.unwrap_or_default();
            cdf.iter()
                .enumerate()
                .map(|(t, f)| {
                    Record::new("curve")
                        .with("series", "loss_cdf")
                        .with("position", t)
                        .with("value", *f)
                })
                .collect()
        }
        RunKind::Cascade { mask_len } => prefix_mask_experiment(config, *mask_len)?.records(),
    };
    for r in &records {
        metrics.write(r)?;
    }
    metrics.flush()?;
    save_checkpoint(&student, &dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

/// Executes every run of a set into `root/<label>`; returns the directories.
pub fn execute_recipe(set: &RunSet, root: &Path) -> Result<Vec<PathBuf>> {
    set.runs
        .iter()
        .map(|spec| {
            let dir = root.join(&spec.label);
            execute_run(spec, &dir)?;
            Ok(dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_shapes() {
        let base = toy_drift_config();
        let set = recipe("table-ablate-windows", &base).unwrap();
        assert_eq!(set.runs.len(), base.window.candidates.len() + 1);
        assert_eq!(set.runs.last().unwrap().config.mode, Mode::Adwin);
        let rho = recipe("table-ablate-rho", &base).unwrap();
        let rhos: Vec<f64> = rho.runs.iter().map(|r| r.config.window.rho_star).collect();
        assert_eq!(rhos, vec![0.5, 0.6, std::f64::consts::FRAC_1_SQRT_2, 0.8]);
        assert!(matches!(recipe("fig9", &base), Err(Error::UnknownRecipe(_))));
        for name in RECIPES {
            for run in recipe(name, &base).unwrap().runs {
                run.config.validate().unwrap();
            }
        }
    }

    #[test]
    fn candidates_cover_horizon() {
        assert_eq!(power_candidates(64), vec![4, 8, 16, 32]);
        assert_eq!(power_candidates(20), vec![4, 8, 16]);
        assert_eq!(power_candidates(3), vec![1]);
    }

    #[test]
    fn manifest_roundtrip() {
        let mut c = toy_drift_config();
        c.window.rho_star = 0.8;
        let m = RunManifest::new(&c, Some("topk:4".into()));
        let back = RunManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_text().contains("window.rho_star = 0.8"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::UnknownKey("x".into())), 2);
        assert_eq!(
            exit_code(&Error::NumericalAbort {
                step: 1,
                message: String::new()
            }),
            3
        );
        assert_eq!(exit_code(&Error::EmptyBatch), 1);
    }
}
