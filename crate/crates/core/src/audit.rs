//! Prefix/full gradient alignment: metric-aware cosines, micro and macro
//! consensus, the SNR transform and relative descent utility.
//!
//! Undefined alignments (a vector whose M-norm underflows) are `None`.

use crate::error::{Error, Result};
use crate::opd::{accumulate_rollout, accumulation_terms, combine, Aggregation, ScoredRollout};
use crate::policy::{GradientVector, PolicyParams};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;
/// Floor applied to diagonal metric entries.
pub const FISHER_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum MetricSpec {
    #[default]
    Identity,
    DiagonalFisher(Vec<f64>),
}

impl MetricSpec {
    /// A diagonal metric with entries floored at [`FISHER_FLOOR`].
    pub fn diagonal(entries: Vec<f64>) -> Self {
        MetricSpec::DiagonalFisher(entries.into_iter().map(|d| d.max(FISHER_FLOOR)).collect())
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricSpec::Identity => "identity",
            MetricSpec::DiagonalFisher(_) => "diagonal-fisher",
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self {
            MetricSpec::DiagonalFisher(d) if d.len() != dim => Err(Error::DimensionMismatch {
                left: d.len(),
                right: dim,
            }),
            _ => Ok(()),
        }
    }

    /// `⟨u, v⟩_M`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            MetricSpec::Identity => u.iter().zip(v).map(|(a, b)| a * b).sum(),
            MetricSpec::DiagonalFisher(d) => {
                u.iter().zip(v).zip(d).map(|((a, b), m)| a * m * b).sum()
            }
        }
    }

    /// `M⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            MetricSpec::Identity => v.to_vec(),
            MetricSpec::DiagonalFisher(d) => v.iter().zip(d).map(|(x, m)| x / m).collect(),
        }
    }
}

fn check_pair(u: &GradientVector, v: &GradientVector, metric: &MetricSpec) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    metric.check_dim(u.dim())
}

fn cosine_raw(u: &[f64], v: &[f64], metric: &MetricSpec) -> Option<f64> {
    let uu = metric.inner(u, u);
    let vv = metric.inner(v, v);
    if uu.sqrt() < NORM_EPS || vv.sqrt() < NORM_EPS {
        return None;
    }
    let uv = metric.inner(u, v);
    Some((uv / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// `⟨u,v⟩_M / (‖u‖_M ‖v‖_M)`, or `None` if either norm is below 1e-12.
pub fn cosine(u: &GradientVector, v: &GradientVector, metric: &MetricSpec) -> Result<Option<f64>> {
    check_pair(u, v, metric)?;
    Ok(cosine_raw(&u.values, &v.values, metric))
}

/// `ρ² / (1 - ρ²)`; infinite at `|ρ| = 1`.
pub fn snr(rho: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::OutOfRange(format!("alignment {rho} not in [-1, 1]")));
    }
    let r2 = rho * rho;
    if r2 >= 1.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(r2 / (1.0 - r2))
    }
}

/// `[cos_M(d, M⁻¹g)]₊²`, the fraction of the optimal local decrease that
/// the direction `d` achieves.
pub fn relative_utility(
    d: &GradientVector,
    g: &GradientVector,
    metric: &MetricSpec,
) -> Result<Option<f64>> {
    check_pair(d, g, metric)?;
    let natural = metric.solve(&g.values);
    Ok(cosine_raw(&d.values, &natural, metric).map(|c| c.max(0.0).powi(2)))
}

/// Diagonal empirical Fisher: mean over all batch positions of `g_t²`,
/// floored at [`FISHER_FLOOR`].
pub fn estimate_diagonal_fisher(
    student: &PolicyParams,
    batch: &[ScoredRollout],
) -> Result<MetricSpec> {
    let positions: usize = batch.iter().map(|r| r.len()).sum();
    if positions == 0 {
        return Err(Error::EmptyBatch);
    }
    let dim = student.dim();
    let mut sum_sq = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    for r in batch {
        for t in 0..r.len() {
            let ctx = r.sequence.context(t);
            let dist = student.distribution(ctx);
            scratch.iter_mut().for_each(|v| *v = 0.0);
            student.accumulate_logprob_grad(ctx, &dist, r.sequence.response[t], 1.0, &mut scratch);
            for (s, g) in sum_sq.iter_mut().zip(&scratch) {
                *s += g * g;
            }
        }
    }
    let n = positions as f64;
    Ok(MetricSpec::diagonal(sum_sq.into_iter().map(|s| s / n).collect()))
}

/// Per-rollout prefix gradients at each cutoff plus the full gradient.
struct PrefixGradients {
    /// `prefixes[c][i]`: rollout `i` truncated at `candidates[c]`.
    prefixes: Vec<Vec<GradientVector>>,
    full: Vec<GradientVector>,
}

fn prefix_gradients(
    student: &PolicyParams,
    batch: &[ScoredRollout],
    candidates: &[usize],
) -> PrefixGradients {
    let dim = student.dim();
    let mut prefixes = vec![Vec::with_capacity(batch.len()); candidates.len()];
    let mut full = Vec::with_capacity(batch.len());
    for r in batch {
        let mut acc = GradientVector::zeros(dim);
        acc.sample_count = 1;
        let mut snaps: Vec<Option<GradientVector>> = vec![None; candidates.len()];
        for (c, &len) in candidates.iter().enumerate() {
            if len == 0 {
                snaps[c] = Some(acc.clone());
            }
        }
        accumulate_rollout(
            student,
            &r.sequence,
            &r.cost,
            r.len(),
            &mut acc.values,
            |done, values| {
                for (c, &len) in candidates.iter().enumerate() {
                    if len == done {
                        snaps[c] = Some(GradientVector {
                            values: values.to_vec(),
                            sample_count: 1,
                        });
                    }
                }
            },
        );
        for (c, snap) in snaps.into_iter().enumerate() {
            prefixes[c].push(snap.unwrap_or_else(|| acc.clone()));
        }
        full.push(acc);
    }
    PrefixGradients { prefixes, full }
}

/// Macro alignment with the number of per-rollout cosines skipped as
/// undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroAlignment {
    pub value: Option<f64>,
    pub skipped: usize,
}

fn macro_of(prefix: &[GradientVector], full: &[GradientVector], metric: &MetricSpec) -> MacroAlignment {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0;
    for (p, f) in prefix.iter().zip(full) {
        match cosine_raw(&p.values, &f.values, metric) {
            Some(c) => {
                sum += c;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    MacroAlignment {
        value: (n > 0).then(|| sum / n as f64),
        skipped,
    }
}

fn check_batch(student: &PolicyParams, batch: &[ScoredRollout], metric: &MetricSpec) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    metric.check_dim(student.dim())
}

/// Cosine between the batch-aggregated prefix gradient at `candidate` and
/// the batch-aggregated full gradient.
pub fn micro_prefix_alignment(
    student: &PolicyParams,
    probe_batch: &[ScoredRollout],
    candidate: usize,
    metric: &MetricSpec,
) -> Result<Option<f64>> {
    check_batch(student, probe_batch, metric)?;
    let pg = prefix_gradients(student, probe_batch, &[candidate]);
    let dim = student.dim();
    let prefix = combine(dim, &pg.prefixes[0], 0, Aggregation::PerSequence);
    let full = combine(dim, &pg.full, 0, Aggregation::PerSequence);
    Ok(cosine_raw(&prefix.values, &full.values, metric))
}

/// Mean of per-rollout prefix/full cosines, skipping undefined ones.
pub fn macro_prefix_alignment(
    student: &PolicyParams,
    probe_batch: &[ScoredRollout],
    candidate: usize,
    metric: &MetricSpec,
) -> Result<MacroAlignment> {
    check_batch(student, probe_batch, metric)?;
    let pg = prefix_gradients(student, probe_batch, &[candidate]);
    Ok(macro_of(&pg.prefixes[0], &pg.full, metric))
}

/// Audit verdict for one candidate window.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub candidate_length: usize,
    pub micro_cos: Option<f64>,
    pub macro_cos: Option<f64>,
    pub macro_skipped: usize,
    /// `None` when the micro cosine is undefined.
    pub snr: Option<f64>,
    pub admissible: bool,
}

impl AlignmentReport {
    pub fn new(
        candidate_length: usize,
        micro_cos: Option<f64>,
        macro_cos: Option<f64>,
        rho_star: f64,
    ) -> Self {
        let snr = micro_cos.map(|c| snr(c.clamp(-1.0, 1.0)).unwrap_or(f64::INFINITY));
        Self {
            candidate_length,
            micro_cos,
            macro_cos,
            macro_skipped: 0,
            snr,
            admissible: micro_cos.is_some_and(|c| c >= rho_star),
        }
    }
}

/// Audits every candidate on one probe batch. Equivalent to calling
/// [`micro_prefix_alignment`] and [`macro_prefix_alignment`] per candidate,
/// with a single pass over the batch.
pub fn audit_candidates(
    student: &PolicyParams,
    probe_batch: &[ScoredRollout],
    candidates: &[usize],
    metric: &MetricSpec,
    rho_star: f64,
) -> Result<Vec<AlignmentReport>> {
    check_batch(student, probe_batch, metric)?;
    let pg = prefix_gradients(student, probe_batch, candidates);
    let dim = student.dim();
    let full = combine(dim, &pg.full, 0, Aggregation::PerSequence);
    Ok(candidates
        .iter()
        .zip(&pg.prefixes)
        .map(|(&len, prefix)| {
            let agg = combine(dim, prefix, 0, Aggregation::PerSequence);
            let micro = cosine_raw(&agg.values, &full.values, metric);
            let mac = macro_of(prefix, &pg.full, metric);
            let mut report = AlignmentReport::new(len, micro, mac.value, rho_star);
            report.macro_skipped = mac.skipped;
            report
        })
        .collect())
}

/// Token count re-processed by one audit: a full re-score of every probe
/// plus one gradient pass per candidate window.
pub fn audit_token_count(batch: &[ScoredRollout], candidates: &[usize]) -> usize {
    accumulation_terms(batch, None)
        + candidates
            .iter()
            .map(|&l| accumulation_terms(batch, Some(l)))
            .sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector::from_values(v.to_vec())
    }

    #[test]
    fn cosine_basics() {
        let id = MetricSpec::Identity;
        let u = gv(&[0.3, -1.2, 2.0]);
        assert_eq!(cosine(&u, &u, &id).unwrap(), Some(1.0));
        assert_eq!(cosine(&gv(&[1.0, 0.0]), &gv(&[0.0, 1.0]), &id).unwrap(), Some(0.0));
        let m = MetricSpec::diagonal(vec![1.0, 3.0]);
        let c = cosine(&gv(&[1.0, 0.0]), &gv(&[1.0, 1.0]), &m).unwrap().unwrap();
        assert!((c - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_undefined_and_mismatch() {
        let id = MetricSpec::Identity;
        assert_eq!(cosine(&gv(&[0.0, 0.0]), &gv(&[1.0, 0.0]), &id).unwrap(), None);
        assert_eq!(cosine(&gv(&[1e-13, 0.0]), &gv(&[1.0, 0.0]), &id).unwrap(), None);
        assert!(cosine(&gv(&[1.0]), &gv(&[1.0, 0.0]), &id).is_err());
        let m = MetricSpec::diagonal(vec![1.0]);
        assert!(cosine(&gv(&[1.0, 2.0]), &gv(&[1.0, 0.0]), &m).is_err());
    }

    #[test]
    fn snr_values() {
        assert_eq!(snr(0.0).unwrap(), 0.0);
        assert!((snr(std::f64::consts::FRAC_1_SQRT_2).unwrap() - 1.0).abs() < 1e-12);
        assert!((snr(0.8).unwrap() - 16.0 / 9.0).abs() < 1e-12);
        assert_eq!(snr(1.0).unwrap(), f64::INFINITY);
        assert_eq!(snr(-1.0).unwrap(), f64::INFINITY);
        assert!(snr(1.0000001).is_err());
        assert!(snr(f64::NAN).is_err());
    }

    #[test]
    fn relative_utility_values() {
        let id = MetricSpec::Identity;
        let g = gv(&[1.0, 0.0]);
        assert_eq!(relative_utility(&g, &g, &id).unwrap(), Some(1.0));
        assert_eq!(relative_utility(&gv(&[0.0, 2.0]), &g, &id).unwrap(), Some(0.0));
        let u = relative_utility(&gv(&[1.0, 1.0]), &g, &id).unwrap().unwrap();
        assert!((u - 0.5).abs() < 1e-15);
        // Negative alignment clips to zero.
        assert_eq!(relative_utility(&gv(&[-1.0, 0.0]), &g, &id).unwrap(), Some(0.0));
        assert_eq!(relative_utility(&gv(&[0.0, 0.0]), &g, &id).unwrap(), None);
    }

    #[test]
    fn natural_gradient_direction_has_full_utility() {
        let m = MetricSpec::diagonal(vec![2.0, 0.5, 4.0]);
        let g = gv(&[1.0, -2.0, 0.5]);
        let d = gv(&m.solve(&g.values));
        let u = relative_utility(&d, &g, &m).unwrap().unwrap();
        assert!((u - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_floor() {
        match MetricSpec::diagonal(vec![0.0, 1.0]) {
            MetricSpec::DiagonalFisher(d) => assert_eq!(d, vec![FISHER_FLOOR, 1.0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn report_admissibility() {
        let r = AlignmentReport::new(8, Some(0.8), Some(0.5), 0.7);
        assert!(r.admissible);
        assert!((r.snr.unwrap() - 16.0 / 9.0).abs() < 1e-12);
        let r = AlignmentReport::new(8, None, None, 0.7);
        assert!(!r.admissible);
        assert_eq!(r.snr, None);
    }
}
