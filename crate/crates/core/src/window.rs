//! Window selection: shortest admissible candidate, fallbacks and the
//! linear Fast-OPD baseline schedule.

use crate::audit::AlignmentReport;
use crate::error::{Error, Result};

/// `√2/2`, the alignment at which the prefix-aligned component's SNR is 1.
pub fn default_threshold() -> f64 {
    std::f64::consts::FRAC_1_SQRT_2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fallback {
    #[default]
    UseLMax,
    KeepCurrent,
}

impl Fallback {
    pub fn name(&self) -> &'static str {
        match self {
            Fallback::UseLMax => "use-l-max",
            Fallback::KeepCurrent => "keep-current",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "use-l-max" => Some(Fallback::UseLMax),
            "keep-current" => Some(Fallback::KeepCurrent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    pub candidates: Vec<usize>,
    pub l_max: usize,
    pub rho_star: f64,
    pub fallback: Fallback,
    /// Window used before the first audit batch returns; `None` means the
    /// largest candidate.
    pub initial: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            candidates: vec![4, 8, 16, 32, 64, 128],
            l_max: 256,
            rho_star: default_threshold(),
            fallback: Fallback::UseLMax,
            initial: None,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::InvalidConfig {
                key: key.to_string(),
                message,
            })
        };
        if self.candidates.is_empty() {
            return bad("window.candidates", "empty candidate list".into());
        }
        if self.candidates[0] == 0 {
            return bad("window.candidates", "candidates must be >= 1".into());
        }
        if self.candidates.windows(2).any(|w| w[0] >= w[1]) {
            return bad(
                "window.candidates",
                format!("not strictly ascending: {:?}", self.candidates),
            );
        }
        if *self.candidates.last().unwrap() > self.l_max {
            return bad(
                "window.candidates",
                format!("largest candidate exceeds horizon {}", self.l_max),
            );
        }
        if !(self.rho_star > 0.0 && self.rho_star < 1.0) {
            return bad("window.rho_star", format!("{} not in (0, 1)", self.rho_star));
        }
        if let Some(i) = self.initial {
            if i == 0 || i > self.l_max {
                return bad("window.initial", format!("{i} not in [1, {}]", self.l_max));
            }
        }
        Ok(())
    }

    pub fn initial_window(&self) -> usize {
        self.initial
            .unwrap_or_else(|| *self.candidates.last().expect("validated"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowDecision {
    pub step: usize,
    pub chosen: usize,
    pub reports: Vec<AlignmentReport>,
    pub fallback_used: bool,
    /// Birth step of the oldest probe in the audited batch.
    pub probe_step: usize,
}

/// `min { L ∈ candidates : ρ(L) ≥ ρ* }`, else the configured fallback.
/// Admissibility is re-evaluated against `config.rho_star`; undefined
/// alignments are inadmissible.
pub fn decide(
    config: &WindowConfig,
    reports: &[AlignmentReport],
    current: usize,
    step: usize,
    probe_step: usize,
) -> Result<WindowDecision> {
    if reports.len() != config.candidates.len() {
        return Err(Error::ReportMismatch(format!(
            "{} reports for {} candidates",
            reports.len(),
            config.candidates.len()
        )));
    }
    let mut reports = reports.to_vec();
    for (r, &c) in reports.iter_mut().zip(&config.candidates) {
        if r.candidate_length != c {
            return Err(Error::ReportMismatch(format!(
                "report for length {} where candidate {c} expected",
                r.candidate_length
            )));
        }
        r.admissible = r.micro_cos.is_some_and(|m| m >= config.rho_star);
    }
    let admissible = reports
        .iter()
        .filter(|r| r.admissible)
        .map(|r| r.candidate_length)
        .min();
    let (chosen, fallback_used) = match admissible {
        Some(l) => (l, false),
        None => match config.fallback {
            Fallback::UseLMax => (config.l_max, true),
            Fallback::KeepCurrent => (current, true),
        },
    };
    Ok(WindowDecision {
        step,
        chosen,
        reports,
        fallback_used,
        probe_step,
    })
}

/// Linear schedule `min(start + increment · step, l_max)`.
pub fn schedule_fast_opd(step: usize, start: usize, increment: usize, l_max: usize) -> usize {
    increment
        .checked_mul(step)
        .and_then(|x| x.checked_add(start))
        .map_or(l_max, |w| w.min(l_max))
}
