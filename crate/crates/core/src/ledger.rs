//! Abstract compute accounting in per-token rate units.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub cost_per_student_token_gen: f64,
    pub cost_per_teacher_token_score: f64,
    pub cost_per_grad_token: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            cost_per_student_token_gen: 1.0,
            cost_per_teacher_token_score: 1.0,
            cost_per_grad_token: 2.0,
        }
    }
}

impl CostModel {
    pub fn is_valid(&self) -> bool {
        [
            self.cost_per_student_token_gen,
            self.cost_per_teacher_token_score,
            self.cost_per_grad_token,
        ]
        .iter()
        .all(|r| r.is_finite() && *r > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LedgerEntry {
    pub step: usize,
    pub sync_cost: f64,
    pub probe_cost: f64,
    pub audit_cost: f64,
    pub cumulative: f64,
}

impl LedgerEntry {
    pub fn total(&self) -> f64 {
        self.sync_cost + self.probe_cost + self.audit_cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LedgerTotals {
    pub sync: f64,
    pub probe: f64,
    pub audit: f64,
    pub grand: f64,
}

/// Append-only per-run ledger.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    pub model: CostModel,
    entries: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn new(model: CostModel) -> Self {
        Self {
            model,
            entries: Vec::new(),
        }
    }

    pub fn cumulative(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.cumulative)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Charges one step. Synchronous tokens pay generation, scoring and
    /// gradient; probe tokens pay generation and scoring; audit tokens pay
    /// scoring and gradient.
    pub fn charge_step(
        &mut self,
        step: usize,
        sync_tokens: usize,
        probe_tokens: usize,
        audit_tokens: usize,
    ) -> LedgerEntry {
        let m = &self.model;
        let sync_cost = sync_tokens as f64
            * (m.cost_per_student_token_gen + m.cost_per_teacher_token_score + m.cost_per_grad_token);
        let probe_cost =
            probe_tokens as f64 * (m.cost_per_student_token_gen + m.cost_per_teacher_token_score);
        let audit_cost =
            audit_tokens as f64 * (m.cost_per_teacher_token_score + m.cost_per_grad_token);
        let entry = LedgerEntry {
            step,
            sync_cost,
            probe_cost,
            audit_cost,
            cumulative: self.cumulative() + sync_cost + probe_cost + audit_cost,
        };
        self.entries.push(entry);
        entry
    }

    pub fn totals(&self) -> LedgerTotals {
        summarize(&self.entries)
    }
}

pub fn summarize(entries: &[LedgerEntry]) -> LedgerTotals {
    let mut t = LedgerTotals::default();
    for e in entries {
        t.sync += e.sync_cost;
        t.probe += e.probe_cost;
        t.audit += e.audit_cost;
        t.grand += e.total();
    }
    t
}
