//! Training orchestration: the synchronous prefix-update path, the probe
//! lifecycle, window decisions and the baseline modes.
//!
//! One step at index `s`:
//!
//! 1. the synchronous path samples `batch_size` student rollouts truncated at
//!    the current window `L_s`, scores them and computes the token-local
//!    gradient; concurrently (background mode) or afterwards (virtual-async)
//!    the probe path extends pending probes and force-completes stale ones
//!    under the step-start parameters;
//! 2. one optimizer update is applied;
//! 3. unfinished prefixes of the batch are enqueued as probes born at `s`;
//! 4. any drained probe batch is re-scored under the updated student,
//!    audited, and the resulting decision sets `L_{s+1}`.
//!
//! Both execution modes consume the same random streams in the same order,
//! so their observable results are identical.

use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audit::{audit_candidates, audit_token_count, estimate_diagonal_fisher, MetricSpec};
use crate::bridge::RemoteTeacher;
use crate::checkpoint::load_checkpoint;
use crate::config::{InitConfig, MetricKind, Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::ledger::{Ledger, LedgerEntry, LedgerTotals};
use crate::metrics::{ledger_record, MetricsWriter, Record};
use crate::opd::{opd_gradient_gamma0_with, score_sampled, seqkd_gradient, ScoredRollout};
use crate::policy::{
    teacher_freeze, Family, GradientVector, PolicyParams, TeacherPolicy, TokenId, TokenSequence,
    Vocabulary,
};
use crate::probe::{Execution, ForceOutcome, PoolStats, ProbePool};
use crate::sampling::{sample_prefix, sample_token, SampledSequence};
use crate::window::{decide, schedule_fast_opd, WindowDecision};

const SYNC_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fixed finite prompt set cycled deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSource {
    prompts: Vec<Vec<TokenId>>,
}

impl PromptSource {
    /// `count` prompts of `length` non-eos tokens drawn from `seed`.
    pub fn generate(count: usize, length: usize, vocab: Vocabulary, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let choices: Vec<TokenId> = (0..vocab.size() as TokenId)
            .filter(|&t| t != vocab.eos_id())
            .collect();
        let prompts = (0..count.max(1))
            .map(|_| {
                (0..length)
                    .map(|_| choices[rng.random_range(0..choices.len())])
                    .collect()
            })
            .collect();
        Self { prompts }
    }

    pub fn fixed(prompts: Vec<Vec<TokenId>>) -> Self {
        assert!(!prompts.is_empty(), "prompt set must be nonempty");
        Self { prompts }
    }

    pub fn get(&self, i: usize) -> &[TokenId] {
        &self.prompts[i % self.prompts.len()]
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Random-uniform logits in `[-scale, scale]` plus an eos bias on every
/// token row.
pub fn init_params(family: Family, vocab: Vocabulary, init: &InitConfig) -> Result<PolicyParams> {
    let mut params = PolicyParams::zeros(family, vocab)?;
    if init.scale > 0.0 {
        let mut rng = stream_rng(init.seed, 0);
        for v in params.values.iter_mut() {
            *v = rng.random_range(-init.scale..=init.scale);
        }
    }
    let token_rows = match family {
        Family::NgramSoftmax { .. } => params.rows(),
        // Only the last-token rows; the length-bucket rows stay unbiased so
        // the bias is applied once per context.
        Family::LinearSoftmax { .. } => vocab.size() + 1,
    };
    let eos = vocab.eos_id() as usize;
    for r in 0..token_rows {
        params.row_mut(r)[eos] += init.eos_bias;
    }
    Ok(params)
}

fn load_or_init(config: &TrainConfig, init: &InitConfig) -> Result<PolicyParams> {
    let vocab = config.policy.vocabulary()?;
    if init.checkpoint.is_empty() {
        init_params(config.policy.family()?, vocab, init)
    } else {
        let p = load_checkpoint(std::path::Path::new(&init.checkpoint), vocab.eos_id())?;
        if p.vocab().size() != vocab.size() {
            return Err(Error::VocabularyMismatch {
                student: vocab.size(),
                teacher: p.vocab().size(),
            });
        }
        Ok(p)
    }
}

pub fn build_student(config: &TrainConfig) -> Result<PolicyParams> {
    let student = load_or_init(config, &config.student)?;
    if student.family() != config.policy.family()? {
        return Err(Error::FamilyMismatch(format!(
            "student checkpoint is {:?}, config says {:?}",
            student.family(),
            config.policy.family()?
        )));
    }
    Ok(student)
}

/// In-process teacher parameters (checkpoint or constructed).
pub fn teacher_params(config: &TrainConfig) -> Result<PolicyParams> {
    load_or_init(config, &config.teacher)
}

pub fn build_teacher(config: &TrainConfig) -> Result<Arc<dyn TeacherPolicy>> {
    if !config.teacher_endpoint.is_empty() {
        let mut remote = RemoteTeacher::connect(
            &config.teacher_endpoint,
            config.policy.vocabulary()?,
            Duration::from_secs(10),
        )?;
        if config.teacher_topk > 0 {
            remote = remote.with_topk(config.teacher_topk);
        }
        return Ok(Arc::new(remote));
    }
    Ok(Arc::new(teacher_freeze(&teacher_params(config)?)))
}

/// Plain gradient descent `params - learning_rate · grad`.
pub fn optimizer_update(
    params: &PolicyParams,
    grad: &GradientVector,
    learning_rate: f64,
) -> Result<PolicyParams> {
    params.check_gradient(grad)?;
    if !grad.is_finite() || !learning_rate.is_finite() {
        return Err(Error::NonFinite("optimizer input".into()));
    }
    let mut out = params.clone();
    for (p, g) in out.values.iter_mut().zip(&grad.values) {
        *p -= learning_rate * g;
    }
    Ok(out)
}

/// SGD with optional heavy-ball momentum (off when `momentum == 0`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, dim: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: vec![0.0; dim],
        }
    }

    pub fn apply(&mut self, params: &mut PolicyParams, grad: &GradientVector) -> Result<()> {
        if self.momentum == 0.0 {
            *params = optimizer_update(params, grad, self.learning_rate)?;
            return Ok(());
        }
        params.check_gradient(grad)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        for ((p, v), g) in params
            .values
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(&grad.values)
        {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
        Ok(())
    }
}

/// Per-step observables.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub window_used: usize,
    /// Mean over rollouts of `Σ c_t` on the trained positions.
    pub loss: f64,
    pub grad_norm: f64,
    pub tokens_generated_sync: usize,
    pub tokens_generated_probe: usize,
    pub tokens_audit: usize,
    pub enqueued: usize,
    pub force: ForceOutcome,
    pub audited: usize,
    pub decision: Option<WindowDecision>,
    pub pool: PoolStats,
    pub max_pending_age: usize,
    pub ledger: LedgerEntry,
    /// FNV-1a digest of the synchronous batch tokens.
    pub batch_digest: u64,
}

pub fn fnv1a(batch: &[ScoredRollout]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for r in batch {
        for &t in r.sequence.prompt.iter().chain(&r.sequence.response) {
            eat(t as u64);
        }
        eat(u64::MAX);
    }
    h
}

struct SyncOutcome {
    batch: Vec<ScoredRollout>,
    grad: GradientVector,
    loss: f64,
    tokens: usize,
}

/// Samples a sequence token-by-token from a teacher's conditionals.
pub fn sample_from_teacher<R: Rng + ?Sized>(
    teacher: &dyn TeacherPolicy,
    prompt: &[TokenId],
    horizon: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    let eos = teacher.vocabulary().eos_id();
    let mut seq = TokenSequence::new(prompt.to_vec());
    while !seq.terminated && seq.len() < horizon {
        let dist = teacher.distribution(seq.context(seq.len()))?;
        let tok = sample_token(&dist, temperature, rng);
        seq.response.push(tok);
        seq.terminated = tok == eos || seq.len() >= horizon;
    }
    Ok(seq)
}

fn sync_path(
    student: &PolicyParams,
    teacher: &dyn TeacherPolicy,
    prompts: &PromptSource,
    config: &TrainConfig,
    step: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SyncOutcome> {
    let n = config.batch_size;
    let mut batch = Vec::with_capacity(n);
    let grad;
    if config.mode == Mode::SeqKd {
        let mut seqs = Vec::with_capacity(n);
        for i in 0..n {
            let prompt = prompts.get(step * n + i);
            seqs.push(sample_from_teacher(
                teacher,
                prompt,
                config.horizon,
                config.temperature,
                rng,
            )?);
        }
        grad = seqkd_gradient(student, &seqs)?;
        for seq in seqs {
            batch.push(crate::opd::score_rollout(student, teacher, &seq)?);
        }
    } else {
        for i in 0..n {
            let prompt = prompts.get(step * n + i);
            let sampled: SampledSequence =
                sample_prefix(student, prompt, window, config.horizon, config.temperature, rng)?;
            batch.push(score_sampled(student, teacher, sampled)?);
        }
        grad = opd_gradient_gamma0_with(student, &batch, None, config.aggregation)?;
    }
    let tokens = batch.iter().map(|r| r.len()).sum();
    let loss = batch.iter().map(|r| r.total_cost(None)).sum::<f64>() / n as f64;
    Ok(SyncOutcome {
        batch,
        grad,
        loss,
        tokens,
    })
}

struct ProbeOutcome {
    tokens: usize,
    force: ForceOutcome,
}

fn probe_path(
    pool: &mut ProbePool,
    student: &PolicyParams,
    teacher: &dyn TeacherPolicy,
    config: &TrainConfig,
    step: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeOutcome> {
    let budget = config
        .probes
        .round_budget
        .resolve(config.batch_size, window);
    let tokens = pool.extend_round(student, teacher, budget, config.temperature, rng)?;
    let force = pool.force_stale(student, teacher, &config.probes, step, config.temperature, rng)?;
    Ok(ProbeOutcome {
        tokens: tokens + force.tokens,
        force,
    })
}

pub struct Trainer {
    config: TrainConfig,
    student: PolicyParams,
    teacher: Arc<dyn TeacherPolicy>,
    prompts: PromptSource,
    optimizer: Sgd,
    window: usize,
    pool: ProbePool,
    ledger: Ledger,
    step: usize,
    sync_rng: ChaCha8Rng,
    probe_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        student: PolicyParams,
        teacher: Arc<dyn TeacherPolicy>,
        prompts: PromptSource,
    ) -> Result<Self> {
        config.validate()?;
        if student.vocab().size() != teacher.vocabulary().size() {
            return Err(Error::VocabularyMismatch {
                student: student.vocab().size(),
                teacher: teacher.vocabulary().size(),
            });
        }
        let optimizer = Sgd::new(config.learning_rate, config.momentum, student.dim());
        Ok(Self {
            window: config.window.initial_window(),
            ledger: Ledger::new(config.cost),
            sync_rng: stream_rng(config.seed, SYNC_STREAM),
            probe_rng: stream_rng(config.seed, PROBE_STREAM),
            config,
            student,
            teacher,
            prompts,
            optimizer,
            pool: ProbePool::new(),
            step: 0,
        })
    }

    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let student = build_student(&config)?;
        let teacher = build_teacher(&config)?;
        let prompts = PromptSource::generate(
            config.prompt_count,
            config.prompt_length,
            student.vocab(),
            config.seed,
        );
        Self::new(config, student, teacher, prompts)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn student(&self) -> &PolicyParams {
        &self.student
    }

    pub fn teacher(&self) -> &Arc<dyn TeacherPolicy> {
        &self.teacher
    }

    pub fn prompts(&self) -> &PromptSource {
        &self.prompts
    }

    pub fn pool(&self) -> &ProbePool {
        &self.pool
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn probes_active(&self) -> bool {
        self.config.mode == Mode::Adwin && self.config.probes_enabled
    }

    /// Window the next step will train on.
    pub fn current_window(&self) -> usize {
        let h = self.config.horizon;
        match self.config.mode {
            Mode::Adwin => self.window.min(h),
            Mode::OpdFull | Mode::SeqKd => h,
            Mode::OpdFixed(l) => l,
            Mode::FastOpd { start, increment } => schedule_fast_opd(self.step, start, increment, h),
        }
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let window = self.current_window();
        let probes = self.probes_active();
        let Self {
            config,
            student,
            teacher,
            prompts,
            pool,
            sync_rng,
            probe_rng,
            ..
        } = self;
        let teacher: &dyn TeacherPolicy = teacher.as_ref();
        let student_ref: &PolicyParams = student;

        let (sync, probe) = match config.probes.execution {
            Execution::Background if probes => std::thread::scope(|s| {
                let worker = s.spawn(|| {
                    probe_path(pool, student_ref, teacher, config, step, window, probe_rng)
                });
                let sync = sync_path(student_ref, teacher, prompts, config, step, window, sync_rng);
                let probe = worker.join().expect("probe worker panicked");
                (sync, probe)
            }),
            _ => {
                let sync = sync_path(student_ref, teacher, prompts, config, step, window, sync_rng);
                let probe = if probes {
                    probe_path(pool, student_ref, teacher, config, step, window, probe_rng)
                } else {
                    Ok(ProbeOutcome {
                        tokens: 0,
                        force: ForceOutcome::default(),
                    })
                };
                (sync, probe)
            }
        };
        let sync = sync?;
        let probe = probe?;

        if !sync.grad.is_finite() || !sync.loss.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                message: format!(
                    "non-finite gradient or loss (loss = {}, window = {window})",
                    sync.loss
                ),
            });
        }
        let grad_norm = sync.grad.norm();
        self.optimizer.apply(&mut self.student, &sync.grad)?;
        if !self.student.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalAbort {
                step,
                message: format!("parameters overflowed (grad norm = {grad_norm})"),
            });
        }

        let mut enqueued = 0;
        let mut audited = 0;
        let mut tokens_audit = 0;
        let mut decision = None;
        if probes {
            enqueued = self
                .pool
                .enqueue_probes(
                    &sync.batch,
                    &self.config.probes,
                    self.config.horizon,
                    step,
                    &mut self.probe_rng,
                )
                .len();
            let mut drained = self
                .pool
                .drain_completed(self.config.probes.probe_batch_size)
                .unwrap_or_default();
            drained.extend(self.pool.release_stale(step, self.config.probes.staleness_limit));
            if !drained.is_empty() {
                let probe_step = drained.iter().map(|r| r.birth_step).min().unwrap_or(step);
                let mut audit_batch: Vec<ScoredRollout> =
                    drained.into_iter().map(|r| r.rollout).collect();
                for r in audit_batch.iter_mut() {
                    r.rescore_student(&self.student);
                }
                let metric = match self.config.metric {
                    MetricKind::Identity => MetricSpec::Identity,
                    MetricKind::DiagonalFisher => {
                        estimate_diagonal_fisher(&self.student, &audit_batch)?
                    }
                };
                let candidates = &self.config.window.candidates;
                let reports = audit_candidates(
                    &self.student,
                    &audit_batch,
                    candidates,
                    &metric,
                    self.config.window.rho_star,
                )?;
                let d = decide(&self.config.window, &reports, window, step, probe_step)?;
                self.window = d.chosen;
                audited = audit_batch.len();
                tokens_audit = audit_token_count(&audit_batch, candidates);
                decision = Some(d);
            }
            // A full-horizon step leaves nothing unfinished to probe; once the
            // pool is empty, drop back to the largest candidate so new probes
            // can be collected.
            let h = self.config.horizon;
            if window >= h && self.window >= h && self.pool.is_empty() {
                if let Some(&largest) = self.config.window.candidates.iter().rev().find(|&&c| c < h) {
                    self.window = largest;
                }
            }
        }

        let ledger = self
            .ledger
            .charge_step(step, sync.tokens, probe.tokens, tokens_audit);
        self.step += 1;
        Ok(StepRecord {
            step,
            window_used: window,
            loss: sync.loss,
            grad_norm,
            tokens_generated_sync: sync.tokens,
            tokens_generated_probe: probe.tokens,
            tokens_audit,
            enqueued,
            force: probe.force,
            audited,
            decision,
            pool: self.pool.stats(step),
            max_pending_age: self.pool.max_pending_age(step),
            ledger,
            batch_digest: fnv1a(&sync.batch),
        })
    }
}

/// Metrics records describing one step.
pub fn step_records(rec: &StepRecord, probes: bool) -> Vec<Record> {
    let mut out = vec![Record::new("step")
        .with("step", rec.step)
        .with("window", rec.window_used)
        .with("loss", rec.loss)
        .with("grad_norm", rec.grad_norm)
        .with("sync_tokens", rec.tokens_generated_sync)
        .with("probe_tokens", rec.tokens_generated_probe)
        .with("audit_tokens", rec.tokens_audit)
        .with("batch_digest", format!("{:016x}", rec.batch_digest))];
    if probes {
        out.push(
            Record::new("probe")
                .with("step", rec.step)
                .with("occupancy", rec.pool.occupancy)
                .with("pending", rec.pool.pending)
                .with("done", rec.pool.done)
                .with("max_age", rec.pool.max_age)
                .with("mean_age", rec.pool.mean_age)
                .with("max_pending_age", rec.max_pending_age)
                .with("enqueued", rec.enqueued)
                .with("forced", rec.force.forced)
                .with("discarded", rec.force.discarded)
                .with("audited", rec.audited),
        );
    }
    if let Some(d) = &rec.decision {
        out.push(
            Record::new("decision")
                .with("step", d.step)
                .with("chosen", d.chosen)
                .with("previous", rec.window_used)
                .with("fallback_used", d.fallback_used)
                .with("probe_step", d.probe_step),
        );
        for r in &d.reports {
            out.push(
                Record::new("alignment")
                    .with("step", d.step)
                    .with("candidate", r.candidate_length)
                    .with("micro", r.micro_cos)
                    .with("macro", r.macro_cos)
                    .with("macro_skipped", r.macro_skipped)
                    .with("snr", r.snr)
                    .with("admissible", r.admissible),
            );
        }
    }
    out.push(ledger_record(&rec.ledger));
    out
}

/// Full-horizon evaluation of a student against the teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    /// `Σ c / Σ tokens` over all evaluation rollouts.
    pub mean_token_cost: f64,
    pub mean_sequence_cost: f64,
    pub mean_length: f64,
    pub mean_teacher_logp: f64,
}

pub fn evaluate(
    student: &PolicyParams,
    teacher: &dyn TeacherPolicy,
    prompts: &PromptSource,
    rollouts: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalStats> {
    let mut cost = 0.0;
    let mut tlp = 0.0;
    let mut tokens = 0usize;
    for i in 0..rollouts {
        let s = sample_prefix(student, prompts.get(i), horizon, horizon, 1.0, rng)?;
        let r = score_sampled(student, teacher, s)?;
        cost += r.cost.iter().sum::<f64>();
        tlp += r.teacher_logp.iter().sum::<f64>();
        tokens += r.len();
    }
    let n = rollouts.max(1) as f64;
    let t = tokens.max(1) as f64;
    Ok(EvalStats {
        mean_token_cost: cost / t,
        mean_sequence_cost: cost / n,
        mean_length: tokens as f64 / n,
        mean_teacher_logp: tlp / t,
    })
}

pub fn evaluate_trainer(trainer: &Trainer) -> Result<EvalStats> {
    let c = trainer.config();
    let mut rng = stream_rng(c.seed, EVAL_STREAM);
    evaluate(
        trainer.student(),
        trainer.teacher().as_ref(),
        trainer.prompts(),
        c.eval_rollouts,
        c.horizon,
        &mut rng,
    )
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub student: PolicyParams,
    pub steps: Vec<StepRecord>,
    pub totals: LedgerTotals,
    pub initial_eval: EvalStats,
    pub final_eval: EvalStats,
}

impl RunOutput {
    pub fn mean_window(&self, last: usize) -> f64 {
        let tail = &self.steps[self.steps.len().saturating_sub(last)..];
        tail.iter().map(|s| s.window_used as f64).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn eval_record(tag: &str, e: &EvalStats) -> Record {
    Record::new(tag)
        .with("mean_token_cost", e.mean_token_cost)
        .with("mean_sequence_cost", e.mean_sequence_cost)
        .with("mean_length", e.mean_length)
        .with("mean_teacher_logp", e.mean_teacher_logp)
}

/// Header record; carries the seed for run-directory cross-checks.
pub fn header_record(config: &TrainConfig, approximation: Option<String>) -> Record {
    Record::new("header")
        .with("seed", config.seed)
        .with("code_version", env!("CARGO_PKG_VERSION"))
        .with("mode", config.mode.label())
        .with("horizon", config.horizon)
        .with("batch_size", config.batch_size)
        .with("steps", config.steps)
        .with("teacher_approximation", approximation.unwrap_or_else(|| "none".into()))
}

/// Runs all configured steps, streaming records into `metrics`.
pub fn run_trainer<W: Write>(
    mut trainer: Trainer,
    metrics: &mut MetricsWriter<W>,
) -> Result<RunOutput> {
    let config = trainer.config().clone();
    let probes = trainer.probes_active();
    metrics.write(&header_record(&config, trainer.teacher().approximation()))?;
    let initial_eval = evaluate_trainer(&trainer)?;
    metrics.write(&eval_record("eval_initial", &initial_eval))?;
    metrics.flush()?;
    let mut steps = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let rec = match trainer.train_step() {
            Ok(r) => r,
            Err(e @ Error::NumericalAbort { .. }) => {
                metrics.write(&Record::new("abort").with("message", e.to_string()))?;
                metrics.flush()?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        for r in step_records(&rec, probes) {
            metrics.write(&r)?;
        }
        metrics.flush()?;
        steps.push(rec);
    }
    let final_eval = evaluate_trainer(&trainer)?;
    metrics.write(&eval_record("eval_final", &final_eval))?;
    let totals = trainer.ledger().totals();
    metrics.write(
        &Record::new("summary")
            .with("steps", steps.len())
            .with("sync_total", totals.sync)
            .with("probe_total", totals.probe)
            .with("audit_total", totals.audit)
            .with("grand_total", totals.grand),
    )?;
    metrics.flush()?;
    Ok(RunOutput {
        student: trainer.student().clone(),
        steps,
        totals,
        initial_eval,
        final_eval,
    })
}

/// Builds a trainer from `config` and runs it, writing metrics to `sink`.
pub fn run<W: Write>(config: &TrainConfig, sink: W) -> Result<(RunOutput, W)> {
    let trainer = Trainer::from_config(config.clone())?;
    let mut metrics = MetricsWriter::new(sink);
    let out = run_trainer(trainer, &mut metrics)?;
    Ok((out, metrics.into_inner()))
}
