//! Per-token distillation costs and the on-policy gradient estimators.
//!
//! For a student rollout the step cost is `c_t = log π_θ(y_t) - log π_φ(y_t)`.
//! The token-local estimator is `(1/N) Σ_i Σ_{t<L} c_t ∇ log π_θ(y_t)`; the
//! discounted estimator replaces `c_t` by the return-to-go
//! `G_t = Σ_{t'≥t} γ^{t'-t} c_{t'}`. Gradients are ascent directions of the
//! cost, so a descent step is `θ - η g`.

use crate::error::{Error, Result};
use crate::policy::{GradientVector, PolicyParams, TeacherPolicy, TokenSequence};
use crate::sampling::SampledSequence;

const STALENESS_TOL: f64 = 1e-9;

/// A rollout with student and teacher log-probs and per-position costs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRollout {
    pub sequence: TokenSequence,
    pub student_logp: Vec<f64>,
    pub teacher_logp: Vec<f64>,
    pub cost: Vec<f64>,
}

impl ScoredRollout {
    pub fn new(sequence: TokenSequence, student_logp: Vec<f64>, teacher_logp: Vec<f64>) -> Self {
        debug_assert_eq!(student_logp.len(), sequence.len());
        debug_assert_eq!(teacher_logp.len(), sequence.len());
        let cost = student_logp
            .iter()
            .zip(&teacher_logp)
            .map(|(s, t)| s - t)
            .collect();
        Self {
            sequence,
            student_logp,
            teacher_logp,
            cost,
        }
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    /// Token-local reward `r_t = -c_t`.
    pub fn rewards(&self) -> Vec<f64> {
        self.cost.iter().map(|c| -c).collect()
    }

    pub fn total_cost(&self, window: Option<usize>) -> f64 {
        self.cost[..clip(window, self.len())].iter().sum()
    }

    /// Recomputes every student log-prob (and cost) under `student`.
    pub fn rescore_student(&mut self, student: &PolicyParams) {
        for t in 0..self.len() {
            let lp = student
                .distribution(self.sequence.context(t))
                .log_prob(self.sequence.response[t]);
            self.student_logp[t] = lp;
            self.cost[t] = lp - self.teacher_logp[t];
        }
    }

    /// Appends teacher-scored continuation tokens already pushed onto
    /// `sequence`.
    pub fn extend_scores(
        &mut self,
        student_logp: &[f64],
        teacher: &dyn TeacherPolicy,
    ) -> Result<()> {
        let from = self.student_logp.len();
        let teacher_logp = teacher.response_logprobs(&self.sequence, from)?;
        for (s, t) in student_logp.iter().zip(&teacher_logp) {
            self.student_logp.push(*s);
            self.teacher_logp.push(*t);
            self.cost.push(s - t);
        }
        Ok(())
    }
}

fn clip(window: Option<usize>, len: usize) -> usize {
    window.map_or(len, |w| w.min(len))
}

fn check_vocab(student: &PolicyParams, teacher: &dyn TeacherPolicy) -> Result<()> {
    let (s, t) = (student.vocab().size(), teacher.vocabulary().size());
    if s != t {
        return Err(Error::VocabularyMismatch {
            student: s,
            teacher: t,
        });
    }
    Ok(())
}

/// Scores `seq` under both policies.
pub fn score_rollout(
    student: &PolicyParams,
    teacher: &dyn TeacherPolicy,
    seq: &TokenSequence,
) -> Result<ScoredRollout> {
    check_vocab(student, teacher)?;
    seq.validate(&student.vocab())?;
    let student_logp = (0..seq.len())
        .map(|t| {
            student
                .distribution(seq.context(t))
                .log_prob(seq.response[t])
        })
        .collect();
    let teacher_logp = teacher.response_logprobs(seq, 0)?;
    Ok(ScoredRollout::new(seq.clone(), student_logp, teacher_logp))
}

/// Scores a freshly sampled sequence, reusing the log-probs recorded during
/// sampling.
pub fn score_sampled(
    student: &PolicyParams,
    teacher: &dyn TeacherPolicy,
    sampled: SampledSequence,
) -> Result<ScoredRollout> {
    check_vocab(student, teacher)?;
    let teacher_logp = teacher.response_logprobs(&sampled.sequence, 0)?;
    Ok(ScoredRollout::new(
        sampled.sequence,
        sampled.student_logp,
        teacher_logp,
    ))
}

/// How per-rollout sums are combined across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Divide by the number of rollouts.
    #[default]
    PerSequence,
    /// Divide by the number of accumulated token terms.
    PerToken,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::PerSequence => "sequence",
            Aggregation::PerToken => "token",
        }
    }
}

/// Number of gradient-accumulation terms for a window: `Σ min(L, len_i)`.
pub fn accumulation_terms(batch: &[ScoredRollout], window: Option<usize>) -> usize {
    batch.iter().map(|r| clip(window, r.len())).sum()
}

fn spot_check(student: &PolicyParams, batch: &[ScoredRollout]) -> Result<()> {
    for (i, r) in batch.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        let position = (i.wrapping_mul(2_654_435_761) ^ r.len()) % r.len();
        let current = student
            .distribution(r.sequence.context(position))
            .log_prob(r.sequence.response[position]);
        let stored = r.student_logp[position];
        if !((current - stored).abs() <= STALENESS_TOL) {
            return Err(Error::StaleRollout {
                index: i,
                position,
                stored,
                current,
            });
        }
    }
    Ok(())
}

/// Adds `Σ_{t<cutoff} weight_t ∇ log π(y_t)` for one rollout into `out`.
/// Invokes `snapshot(t, out)` after each accumulated position `t + 1`.
pub(crate) fn accumulate_rollout(
    student: &PolicyParams,
    seq: &TokenSequence,
    weights: &[f64],
    cutoff: usize,
    out: &mut [f64],
    mut snapshot: impl FnMut(usize, &[f64]),
) {
    for t in 0..cutoff {
        let ctx = seq.context(t);
        let dist = student.distribution(ctx);
        student.accumulate_logprob_grad(ctx, &dist, seq.response[t], weights[t], out);
        snapshot(t + 1, out);
    }
}

/// Gradient of one rollout's windowed weighted score sum.
pub fn rollout_gradient(
    student: &PolicyParams,
    rollout: &ScoredRollout,
    window: Option<usize>,
) -> GradientVector {
    let mut g = GradientVector::zeros(student.dim());
    let cutoff = clip(window, rollout.len());
    accumulate_rollout(
        student,
        &rollout.sequence,
        &rollout.cost,
        cutoff,
        &mut g.values,
        |_, _| {},
    );
    g.sample_count = 1;
    g
}

/// Token-local (γ=0) estimator, averaged over rollouts.
pub fn opd_gradient_gamma0(
    student: &PolicyParams,
    batch: &[ScoredRollout],
    window: Option<usize>,
) -> Result<GradientVector> {
    opd_gradient_gamma0_with(student, batch, window, Aggregation::PerSequence)
}

pub fn opd_gradient_gamma0_with(
    student: &PolicyParams,
    batch: &[ScoredRollout],
    window: Option<usize>,
    aggregation: Aggregation,
) -> Result<GradientVector> {
    spot_check(student, batch)?;
    let per_rollout: Vec<GradientVector> = batch
        .iter()
        .map(|r| rollout_gradient(student, r, window))
        .collect();
    Ok(combine(
        student.dim(),
        &per_rollout,
        accumulation_terms(batch, window),
        aggregation,
    ))
}

/// Sums per-rollout vectors in batch order and normalizes.
pub(crate) fn combine(
    dim: usize,
    per_rollout: &[GradientVector],
    terms: usize,
    aggregation: Aggregation,
) -> GradientVector {
    let mut total = GradientVector::zeros(dim);
    for g in per_rollout {
        total.add_assign(g);
    }
    let denom = match aggregation {
        Aggregation::PerSequence => per_rollout.len(),
        Aggregation::PerToken => terms,
    };
    if denom > 0 {
        total.scale(1.0 / denom as f64);
    }
    total
}

/// Return-to-go `G_t = Σ_{t'≥t} γ^{t'-t} c_{t'}`.
pub fn returns_to_go(cost: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; cost.len()];
    let mut acc = 0.0;
    for t in (0..cost.len()).rev() {
        acc = cost[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Discounted return-to-go estimator averaged over rollouts.
pub fn opd_gradient_discounted(
    student: &PolicyParams,
    batch: &[ScoredRollout],
    gamma: f64,
) -> Result<GradientVector> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::OutOfRange(format!("gamma {gamma} not in [0, 1]")));
    }
    spot_check(student, batch)?;
    let per_rollout: Vec<GradientVector> = batch
        .iter()
        .map(|r| {
            let weights = if gamma == 0.0 {
                r.cost.clone()
            } else {
                returns_to_go(&r.cost, gamma)
            };
            let mut g = GradientVector::zeros(student.dim());
            accumulate_rollout(student, &r.sequence, &weights, r.len(), &mut g.values, |_, _| {});
            g.sample_count = 1;
            g
        })
        .collect();
    Ok(combine(
        student.dim(),
        &per_rollout,
        accumulation_terms(batch, None),
        Aggregation::PerSequence,
    ))
}

/// Mean negative log-likelihood gradient on teacher-generated sequences:
/// `-(1/N) Σ_i Σ_t ∇ log π_θ(y_t)`.
pub fn seqkd_gradient(
    student: &PolicyParams,
    teacher_batch: &[TokenSequence],
) -> Result<GradientVector> {
    if teacher_batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let vocab = student.vocab();
    let mut total = GradientVector::zeros(student.dim());
    for seq in teacher_batch {
        seq.validate(&vocab)?;
        let weights = vec![-1.0; seq.len()];
        accumulate_rollout(student, seq, &weights, seq.len(), &mut total.values, |_, _| {});
        total.sample_count += 1;
    }
    total.scale(1.0 / teacher_batch.len() as f64);
    Ok(total)
}
