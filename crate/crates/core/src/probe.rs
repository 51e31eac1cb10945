//! Delayed full-horizon probes.
//!
//! Unfinished prefixes from a synchronous batch are enqueued as probes and
//! continued toward the maximum horizon in budgeted rounds, oldest first.
//! A probe whose age reaches the staleness limit is completed immediately.
//! Completed probes are drained in audit batches.

use rand::Rng;

use crate::error::Result;
use crate::opd::ScoredRollout;
use crate::policy::{PolicyParams, TeacherPolicy};
use crate::sampling::extend_sequence;

/// Token budget for one extension round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundBudget {
    /// `batch_size × current window`, the synchronous rollout budget.
    #[default]
    SyncRollout,
    Tokens(usize),
}

impl RoundBudget {
    pub fn resolve(&self, batch_size: usize, window: usize) -> usize {
        match *self {
            RoundBudget::SyncRollout => batch_size * window,
            RoundBudget::Tokens(n) => n,
        }
    }
}

/// Where extension rounds execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Inside the trainer loop at fixed points.
    #[default]
    VirtualAsync,
    /// On a worker thread concurrent with the synchronous update.
    Background,
}

impl Execution {
    pub fn name(&self) -> &'static str {
        match self {
            Execution::VirtualAsync => "virtual-async",
            Execution::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub probe_batch_size: usize,
    pub staleness_limit: usize,
    pub round_budget: RoundBudget,
    /// Drop stale probes instead of force-completing them.
    pub discard_on_force: bool,
    pub execution: Execution,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probe_batch_size: 64,
            staleness_limit: 5,
            round_budget: RoundBudget::SyncRollout,
            discard_on_force: false,
            execution: Execution::VirtualAsync,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub rollout: ScoredRollout,
    pub birth_step: usize,
    pub target: usize,
}

impl ProbeRecord {
    pub fn extended_to(&self) -> usize {
        self.rollout.len()
    }

    pub fn done(&self) -> bool {
        self.rollout.sequence.terminated || self.rollout.len() >= self.target
    }

    pub fn staleness(&self, now: usize) -> usize {
        now.saturating_sub(self.birth_step)
    }

    pub fn remaining(&self) -> usize {
        if self.done() {
            0
        } else {
            self.target - self.rollout.len()
        }
    }
}

/// Outcome of a forced-completion pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForceOutcome {
    pub forced: usize,
    pub discarded: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoolStats {
    pub occupancy: usize,
    pub pending: usize,
    pub done: usize,
    pub max_age: usize,
    pub mean_age: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ProbePool {
    /// Kept in birth order.
    records: Vec<ProbeRecord>,
    pub forced_total: usize,
}

impl ProbePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ProbeRecord] {
        &self.records
    }

    /// Inserts a record directly, keeping birth order.
    pub fn insert(&mut self, record: ProbeRecord) {
        let at = self
            .records
            .partition_point(|r| r.birth_step <= record.birth_step);
        self.records.insert(at, record);
    }

    /// Samples up to `probe_batch_size` unfinished rollouts uniformly without
    /// replacement. Returns the selected batch indices in ascending order.
    pub fn enqueue_probes<R: Rng + ?Sized>(
        &mut self,
        sync_batch: &[ScoredRollout],
        config: &ProbeConfig,
        l_max: usize,
        step: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let unfinished: Vec<usize> = sync_batch
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.sequence.terminated && r.len() < l_max)
            .map(|(i, _)| i)
            .collect();
        let mut chosen: Vec<usize> = if unfinished.len() <= config.probe_batch_size {
            unfinished
        } else {
            rand::seq::index::sample(rng, unfinished.len(), config.probe_batch_size)
                .into_iter()
                .map(|k| unfinished[k])
                .collect()
        };
        chosen.sort_unstable();
        for &i in &chosen {
            self.insert(ProbeRecord {
                rollout: sync_batch[i].clone(),
                birth_step: step,
                target: l_max,
            });
        }
        chosen
    }

    fn extend_one<R: Rng + ?Sized>(
        record: &mut ProbeRecord,
        student: &PolicyParams,
        teacher: &dyn TeacherPolicy,
        max_new: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<usize> {
        let logps = extend_sequence(
            student,
            &mut record.rollout.sequence,
            max_new,
            record.target,
            temperature,
            rng,
        );
        record.rollout.extend_scores(&logps, teacher)?;
        Ok(logps.len())
    }

    /// Continues pending probes oldest-first under `student`, consuming at
    /// most `budget` tokens. Returns the number of tokens generated.
    pub fn extend_round<R: Rng + ?Sized>(
        &mut self,
        student: &PolicyParams,
        teacher: &dyn TeacherPolicy,
        budget: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<usize> {
        let mut left = budget;
        for record in self.records.iter_mut() {
            if left == 0 {
                break;
            }
            if record.done() {
                continue;
            }
            let take = record.remaining().min(left);
            left -= Self::extend_one(record, student, teacher, take, temperature, rng)?;
        }
        Ok(budget - left)
    }

    /// Completes (or discards) every pending probe with age `≥ limit`,
    /// ignoring the round budget.
    pub fn force_stale<R: Rng + ?Sized>(
        &mut self,
        student: &PolicyParams,
        teacher: &dyn TeacherPolicy,
        config: &ProbeConfig,
        step: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<ForceOutcome> {
        let limit = config.staleness_limit;
        let mut out = ForceOutcome::default();
        if config.discard_on_force {
            let before = self.records.len();
            self.records
                .retain(|r| r.done() || r.staleness(step) < limit);
            out.discarded = before - self.records.len();
        } else {
            for record in self.records.iter_mut() {
                if !record.done() && record.staleness(step) >= limit {
                    let need = record.remaining();
                    out.tokens +=
                        Self::extend_one(record, student, teacher, need, temperature, rng)?;
                    out.forced += 1;
                }
            }
        }
        self.forced_total += out.forced;
        Ok(out)
    }

    /// Removes and returns the oldest `min_batch` completed probes once at
    /// least that many are done.
    pub fn drain_completed(&mut self, min_batch: usize) -> Option<Vec<ProbeRecord>> {
        let min_batch = min_batch.max(1);
        let done = self.records.iter().filter(|r| r.done()).count();
        if done < min_batch {
            return None;
        }
        let mut taken = 0;
        let mut batch = Vec::with_capacity(min_batch);
        let mut kept = Vec::with_capacity(self.records.len() - min_batch);
        for r in self.records.drain(..) {
            if taken < min_batch && r.done() {
                taken += 1;
                batch.push(r);
            } else {
                kept.push(r);
            }
        }
        self.records = kept;
        Some(batch)
    }

    /// Removes completed probes whose age has reached `limit`; they cannot
    /// wait for a full audit batch without exceeding the staleness bound.
    pub fn release_stale(&mut self, step: usize, limit: usize) -> Vec<ProbeRecord> {
        let (out, kept): (Vec<_>, Vec<_>) = self
            .records
            .drain(..)
            .partition(|r| r.done() && r.staleness(step) >= limit);
        self.records = kept;
        out
    }

    pub fn stats(&self, now: usize) -> PoolStats {
        let ages: Vec<usize> = self.records.iter().map(|r| r.staleness(now)).collect();
        let done = self.records.iter().filter(|r| r.done()).count();
        PoolStats {
            occupancy: self.records.len(),
            pending: self.records.len() - done,
            done,
            max_age: ages.iter().copied().max().unwrap_or(0),
            mean_age: if ages.is_empty() {
                0.0
            } else {
                ages.iter().sum::<usize>() as f64 / ages.len() as f64
            },
        }
    }

    /// Largest age among probes still awaiting extension.
    pub fn max_pending_age(&self, now: usize) -> usize {
        self.records
            .iter()
            .filter(|r| !r.done())
            .map(|r| r.staleness(now))
            .max()
            .unwrap_or(0)
    }
}
