//! Independent reference computations for the integration tests. Nothing
//! here calls into the library's gradient or scoring code.

#![allow(dead_code)]

use adwin_core::policy::{Family, PolicyParams, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Order-1 table policy over `v` tokens; row `v` is the empty-context row.
#[derive(Debug, Clone)]
pub struct Bigram {
    pub v: usize,
    pub table: Vec<f64>,
}

impl Bigram {
    pub fn random(v: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..(v + 1) * v)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Self { v, table }
    }

    pub fn params(&self) -> PolicyParams {
        PolicyParams::new(
            Family::NgramSoftmax { order: 1 },
            Vocabulary::new(self.v, 0).unwrap(),
            self.table.clone(),
        )
        .unwrap()
    }

    pub fn probs(&self, prev: usize) -> Vec<f64> {
        softmax(&self.table[prev * self.v..(prev + 1) * self.v])
    }

    pub fn logp(&self, prev: usize, tok: usize) -> f64 {
        self.probs(prev)[tok].ln()
    }

    /// `∇ log p(tok | prev)`: one-hot minus probabilities on row `prev`.
    pub fn score(&self, prev: usize, tok: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.table.len()];
        let p = self.probs(prev);
        for j in 0..self.v {
            g[prev * self.v + j] = if j == tok { 1.0 } else { 0.0 } - p[j];
        }
        g
    }
}

/// A complete response with its probability under the student.
#[derive(Debug, Clone)]
pub struct Path {
    pub tokens: Vec<usize>,
    pub prob: f64,
}

/// All responses of length ≤ `horizon` after `prompt_last`, stopping at eos
/// (token 0).
pub fn enumerate(student: &Bigram, prompt_last: usize, horizon: usize) -> Vec<Path> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<usize>::new(), 1.0)];
    while let Some((tokens, prob)) = stack.pop() {
        let done = tokens.len() == horizon || tokens.last() == Some(&0);
        if done {
            out.push(Path { tokens, prob });
            continue;
        }
        let prev = *tokens.last().unwrap_or(&prompt_last);
        for (tok, p) in student.probs(prev).into_iter().enumerate() {
            let mut t = tokens.clone();
            t.push(tok);
            stack.push((t, prob * p));
        }
    }
    out
}

pub fn step_costs(student: &Bigram, teacher: &Bigram, prompt_last: usize, tokens: &[usize]) -> Vec<f64> {
    let mut prev = prompt_last;
    tokens
        .iter()
        .map(|&t| {
            let c = student.logp(prev, t) - teacher.logp(prev, t);
            prev = t;
            c
        })
        .collect()
}

/// Exact expectation of `Σ_t w_t ∇ log π(y_t)` with `w` derived from the
/// step costs by `weights`.
pub fn exact_expectation(
    student: &Bigram,
    teacher: &Bigram,
    prompt_last: usize,
    horizon: usize,
    weights: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let mut g = vec![0.0; student.table.len()];
    for path in enumerate(student, prompt_last, horizon) {
        let w = weights(&step_costs(student, teacher, prompt_last, &path.tokens));
        let mut prev = prompt_last;
        for (t, &tok) in path.tokens.iter().enumerate() {
            for (gi, si) in g.iter_mut().zip(student.score(prev, tok)) {
                *gi += path.prob * w[t] * si;
            }
            prev = tok;
        }
    }
    g
}

/// Sequence-level reverse KL `Σ_y P(y) Σ_t c_t`.
pub fn reverse_kl(student: &Bigram, teacher: &Bigram, prompt_last: usize, horizon: usize) -> f64 {
    enumerate(student, prompt_last, horizon)
        .iter()
        .map(|p| p.prob * step_costs(student, teacher, prompt_last, &p.tokens).iter().sum::<f64>())
        .sum()
}

/// Componentwise sample mean and standard error.
pub fn mean_se(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m) / (n - 1.0);
        }
    }
    let se = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, se)
}

/// Largest `|a - b| / se` over components with nonzero standard error, and
/// whether zero-SE components match exactly.
pub fn max_z(a: &[f64], b: &[f64], se: &[f64]) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for ((x, y), s) in a.iter().zip(b).zip(se) {
        if *s == 0.0 {
            exact &= (x - y).abs() <= 1e-12;
        } else {
            worst = worst.max((x - y).abs() / s);
        }
    }
    (worst, exact)
}
