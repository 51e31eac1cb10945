//! Post-hoc drift measurements: teacher branching factor, top-k survival,
//! per-position loss CDF, and the prefix-masked cascade run.
//!
//! Position indices are response positions. Survival curves carry one extra
//! leading entry for "before any token", which is always 1.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::Record;
use crate::opd::{opd_gradient_gamma0_with, score_sampled, ScoredRollout};
use crate::policy::{TeacherPolicy, TokenId, TokenSequence};
use crate::sampling::sample_prefix;
use crate::trainer::{build_student, build_teacher, stream_rng, PromptSource, Sgd};

/// 1-based rank of `token` in descending-probability order; ties are broken
/// by token id ascending.
pub fn teacher_rank(log_probs: &[f64], token: TokenId) -> usize {
    let t = token as usize;
    let p = log_probs[t];
    1 + log_probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < t))
        .count()
}

/// Mean over rollouts reaching each position of `exp(H[teacher(·|ctx)])`.
/// Positions no rollout reaches are `None`.
pub fn branching_factor(
    teacher: &dyn TeacherPolicy,
    rollouts: &[TokenSequence],
) -> Result<Vec<Option<f64>>> {
    if rollouts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let horizon = rollouts.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut sum = vec![0.0; horizon];
    let mut count = vec![0usize; horizon];
    for seq in rollouts {
        for t in 0..seq.len() {
            let d = teacher.distribution(seq.context(t))?;
            sum[t] += d.entropy().exp();
            count[t] += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// Teacher ranks of every realized response token.
pub fn realized_ranks(
    teacher: &dyn TeacherPolicy,
    rollouts: &[TokenSequence],
) -> Result<Vec<Vec<usize>>> {
    rollouts
        .iter()
        .map(|seq| {
            (0..seq.len())
                .map(|t| {
                    let d = teacher.distribution(seq.context(t))?;
                    Ok(teacher_rank(&d.log_probs, seq.response[t]))
                })
                .collect()
        })
        .collect()
}

/// Survival from precomputed ranks; entry `T` is the fraction of rollouts
/// with no rank above `k` among their first `T` tokens. A rollout that ended
/// early keeps the status it had at its end.
pub fn survival_from_ranks(ranks: &[Vec<usize>], k: usize) -> Vec<f64> {
    let horizon = ranks.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut rejected_at = vec![0usize; horizon + 1];
    for r in ranks {
        if let Some(t) = r.iter().position(|&x| x > k) {
            rejected_at[t + 1] += 1;
        }
    }
    let n = ranks.len().max(1) as f64;
    let mut alive = ranks.len();
    rejected_at
        .iter()
        .map(|&d| {
            alive -= d;
            alive as f64 / n
        })
        .collect()
}

pub fn topk_survival(
    teacher: &dyn TeacherPolicy,
    rollouts: &[TokenSequence],
    k: usize,
) -> Result<Vec<f64>> {
    let v = teacher.vocabulary().size();
    if k == 0 || k > v {
        return Err(Error::OutOfRange(format!("rank {k} outside 1..={v}")));
    }
    if rollouts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(survival_from_ranks(&realized_ranks(teacher, rollouts)?, k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftCurves {
    pub per_position_bf: Vec<Option<f64>>,
    /// `(k, survival)` pairs; each survival curve starts with the pre-token 1.
    pub survival: Vec<(usize, Vec<f64>)>,
    pub n_rollouts: usize,
}

impl DriftCurves {
    pub fn cumulative_rejection(&self, k: usize) -> Option<Vec<f64>> {
        self.survival
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, s)| s.iter().map(|x| 1.0 - x).collect())
    }

    /// Tabular `(position, value, series)` records.
    pub fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (t, bf) in self.per_position_bf.iter().enumerate() {
            out.push(
                Record::new("curve")
                    .with("series", "branching_factor")
                    .with("position", t)
                    .with("value", *bf),
            );
        }
        for (k, s) in &self.survival {
            for (t, v) in s.iter().enumerate() {
                out.push(
                    Record::new("curve")
                        .with("series", format!("survival_k{k}"))
                        .with("position", t)
                        .with("value", *v),
                );
            }
        }
        out
    }
}

pub fn drift_curves(
    teacher: &dyn TeacherPolicy,
    rollouts: &[TokenSequence],
    ks: &[usize],
) -> Result<DriftCurves> {
    let per_position_bf = branching_factor(teacher, rollouts)?;
    let v = teacher.vocabulary().size();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > v) {
        return Err(Error::OutOfRange(format!("rank {k} outside 1..={v}")));
    }
    let ranks = realized_ranks(teacher, rollouts)?;
    Ok(DriftCurves {
        per_position_bf,
        survival: ks.iter().map(|&k| (k, survival_from_ranks(&ranks, k))).collect(),
        n_rollouts: rollouts.len(),
    })
}

/// `F(t) = Σ_{t'≤t} Σ_i |c_{i,t'}| / ΣΣ |c|`; `None` when every cost is 0.
pub fn loss_position_cdf(batch: &[ScoredRollout]) -> Result<Option<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let horizon = batch.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut per_pos = vec![0.0; horizon];
    for r in batch {
        for (t, c) in r.cost.iter().enumerate() {
            per_pos[t] += c.abs();
        }
    }
    let total: f64 = per_pos.iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = per_pos
        .iter()
        .map(|x| {
            acc += x;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    Ok(Some(cdf))
}

/// Samples `n` full-horizon student rollouts and scores them.
pub fn student_batch<R: Rng + ?Sized>(
    config: &TrainConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ScoredRollout>> {
    let student = build_student(config)?;
    let teacher = build_teacher(config)?;
    let prompts = PromptSource::generate(
        config.prompt_count,
        config.prompt_length,
        student.vocab(),
        config.seed,
    );
    (0..n)
        .map(|i| {
            let s = sample_prefix(
                &student,
                prompts.get(i),
                config.horizon,
                config.horizon,
                config.temperature,
                rng,
            )?;
            score_sampled(&student, teacher.as_ref(), s)
        })
        .collect()
}

/// Per-step mean teacher log-probability on the trained prefix and on the
/// untrained suffix. Index 0 is the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeCurves {
    pub mask_len: usize,
    pub prefix: Vec<f64>,
    pub suffix: Vec<f64>,
}

impl CascadeCurves {
    pub fn records(&self) -> Vec<Record> {
        self.prefix
            .iter()
            .zip(&self.suffix)
            .enumerate()
            .map(|(s, (p, q))| {
                Record::new("cascade")
                    .with("step", s)
                    .with("mask_len", self.mask_len)
                    .with("prefix_teacher_logp", *p)
                    .with("suffix_teacher_logp", *q)
            })
            .collect()
    }
}

fn region_means(batch: &[ScoredRollout], mask_len: usize) -> (f64, f64) {
    let (mut ps, mut pn, mut ss, mut sn) = (0.0, 0usize, 0.0, 0usize);
    for r in batch {
        for (t, lp) in r.teacher_logp.iter().enumerate() {
            if t < mask_len {
                ps += lp;
                pn += 1;
            } else {
                ss += lp;
                sn += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (mean(ps, pn), mean(ss, sn))
}

/// Trains on the first `mask_len` positions of full-horizon rollouts and
/// tracks teacher log-probability on both regions. Each point is measured
/// on a fixed-seed evaluation batch of `config.eval_rollouts` rollouts.
pub fn prefix_mask_experiment(config: &TrainConfig, mask_len: usize) -> Result<CascadeCurves> {
    if mask_len == 0 || mask_len >= config.horizon {
        return Err(Error::InvalidConfig {
            key: "mask_len".into(),
            message: format!("must be in 1..{}", config.horizon),
        });
    }
    config.validate()?;
    let mut student = build_student(config)?;
    let teacher = build_teacher(config)?;
    let prompts = PromptSource::generate(
        config.prompt_count,
        config.prompt_length,
        student.vocab(),
        config.seed,
    );
    let mut train_rng = stream_rng(config.seed, 1);
    let mut opt = Sgd::new(config.learning_rate, config.momentum, student.dim());
    let measure = |student: &crate::policy::PolicyParams| -> Result<(f64, f64)> {
        let mut rng = stream_rng(config.seed, 3);
        let batch = (0..config.eval_rollouts.max(1))
            .map(|i| {
                let s = sample_prefix(
                    student,
                    prompts.get(i),
                    config.horizon,
                    config.horizon,
                    config.temperature,
                    &mut rng,
                )?;
                score_sampled(student, teacher.as_ref(), s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(region_means(&batch, mask_len))
    };
    let (p0, s0) = measure(&student)?;
    let mut prefix = vec![p0];
    let mut suffix = vec![s0];
    let n = config.batch_size;
    for step in 0..config.steps {
        let batch = (0..n)
            .map(|i| {
                let s = sample_prefix(
                    &student,
                    prompts.get(step * n + i),
                    config.horizon,
                    config.horizon,
                    config.temperature,
                    &mut train_rng,
                )?;
                score_sampled(&student, teacher.as_ref(), s)
            })
            .collect::<Result<Vec<_>>>()?;
        let grad = opd_gradient_gamma0_with(&student, &batch, Some(mask_len), config.aggregation)?;
        if !grad.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                message: "non-finite gradient".into(),
            });
        }
        opt.apply(&mut student, &grad)?;
        let (p, s) = measure(&student)?;
        prefix.push(p);
        suffix.push(s);
    }
    Ok(CascadeCurves {
        mask_len,
        prefix,
        suffix,
    })
}
