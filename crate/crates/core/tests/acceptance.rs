//! Acceptance checks. Each criterion prints one `PASS`/`FAIL` line with its
//! measured values; the test fails if any criterion fails.

mod common;

use std::f64::consts::FRAC_1_SQRT_2;
use std::time::Instant;

use adwin_core::audit::{audit_candidates, snr, AlignmentReport, MetricSpec};
use adwin_core::config::{Mode, TrainConfig};
use adwin_core::diagnostics::{drift_curves, prefix_mask_experiment, topk_survival};
use adwin_core::harness::{power_candidates, toy_drift_config, with_horizon};
use adwin_core::metrics::{int_field, parse_stream, tag_of};
use adwin_core::opd::{opd_gradient_gamma0, rollout_gradient, score_sampled, ScoredRollout};
use adwin_core::policy::{
    teacher_freeze, Family, PolicyParams, TokenSequence, Vocabulary,
};
use adwin_core::probe::RoundBudget;
use adwin_core::sampling::sample_rollout;
use adwin_core::trainer::{build_student, build_teacher, run, step_records, Trainer};
use adwin_core::window::{decide, Fallback, WindowConfig};
use common::{exact_expectation, max_z, mean_se, Bigram};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sample_scored(
    student: &PolicyParams,
    teacher: &PolicyParams,
    prompt: &[u32],
    horizon: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ScoredRollout> {
    let frozen = teacher_freeze(teacher);
    (0..n)
        .map(|_| {
            let s = sample_rollout(student, prompt, horizon, rng).unwrap();
            score_sampled(student, &frozen, s).unwrap()
        })
        .collect()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let student = Bigram::random(3, 1.0, 11);
    let teacher = Bigram::random(3, 1.0, 12);
    let exact = exact_expectation(&student, &teacher, 1, 2, |c| c.to_vec());
    let sp = student.params();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = sample_scored(&sp, &teacher.params(), &[1], 2, 200_000, &mut rng);
    let per: Vec<Vec<f64>> = batch
        .iter()
        .map(|r| rollout_gradient(&sp, r, None).values)
        .collect();
    let (mean, se) = mean_se(&per);
    let (z, exact_zero) = max_z(&mean, &exact, &se);
    let batched = opd_gradient_gamma0(&sp, &batch, None).unwrap();
    let agree = batched
        .values
        .iter()
        .zip(&mean)
        .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    let secs = start.elapsed().as_secs_f64();
    outcome(
        z <= 3.0 && exact_zero && agree && secs < 60.0,
        format!("max |z| = {z:.3} (tol 3), batch mean agrees = {agree}, {secs:.1}s (limit 60s)"),
    )
}

fn score_identities() -> Outcome {
    let horizon = 3;
    let mut worst: f64 = 0.0;
    let mut exact_ok = true;
    for pair in 0..5u64 {
        let student = Bigram::random(3, 1.0, 100 + pair);
        let teacher = Bigram::random(3, 1.5, 200 + pair);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + pair);
        let n = 200_000;
        let mut zero_score = Vec::with_capacity(n);
        let mut past = vec![Vec::with_capacity(n); 3];
        let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
        for _ in 0..n {
            // Direct sampling from the reference bigram.
            let mut prev = 1usize;
            let mut toks = Vec::new();
            while toks.len() < horizon && toks.last() != Some(&0) {
                let p = student.probs(prev);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut tok = p.len() - 1;
                for (j, pj) in p.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        tok = j;
                        break;
                    }
                }
                toks.push(tok);
                prev = tok;
            }
            let cost = common::step_costs(&student, &teacher, 1, &toks);
            let mut prev = 1usize;
            let scores: Vec<Vec<f64>> = toks
                .iter()
                .map(|&t| {
                    let s = student.score(prev, t);
                    prev = t;
                    s
                })
                .collect();
            let mut total = vec![0.0; student.table.len()];
            for s in &scores {
                for (a, b) in total.iter_mut().zip(s) {
                    *a += b;
                }
            }
            zero_score.push(total);
            for (k, &(tp, t)) in pairs.iter().enumerate() {
                let v = if t < toks.len() {
                    scores[t].iter().map(|x| x * cost[tp]).collect()
                } else {
                    vec![0.0; student.table.len()]
                };
                past[k].push(v);
            }
        }
        let zero = vec![0.0; student.table.len()];
        for samples in std::iter::once(&zero_score).chain(past.iter()) {
            let (m, se) = mean_se(samples);
            let (z, e) = max_z(&m, &zero, &se);
            worst = worst.max(z);
            exact_ok &= e;
        }
    }
    outcome(
        worst <= 4.0 && exact_ok,
        format!("max |z| over 5 pairs x 4 identities = {worst:.3} (tol 4)"),
    )
}

fn finite_difference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let v = rng.random_range(2..7usize);
        let vocab = Vocabulary::new(v, 0).unwrap();
        let family = if draw % 2 == 0 {
            Family::NgramSoftmax {
                order: rng.random_range(1..3),
            }
        } else {
            Family::LinearSoftmax {
                buckets: rng.random_range(1..5),
            }
        };
        let dim = family.dimension(&vocab).unwrap();
        let values = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut p = PolicyParams::new(family, vocab, values).unwrap();
        let mut seq = TokenSequence::new(vec![rng.random_range(1..v as u32)]);
        for _ in 0..rng.random_range(1..8) {
            seq.response.push(rng.random_range(0..v as u32));
        }
        let pos = rng.random_range(0..seq.len());
        let tok = rng.random_range(0..v as u32);
        let g = p.logprob_grad(&seq, pos, tok).unwrap();
        let h = 1e-5;
        for i in 0..dim {
            let x = p.values[i];
            p.values[i] = x + h;
            let up = p.distribution(seq.context(pos)).log_prob(tok);
            p.values[i] = x - h;
            let down = p.distribution(seq.context(pos)).log_prob(tok);
            p.values[i] = x;
            let fd = (up - down) / (2.0 * h);
            let rel = (g.values[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    outcome(
        worst <= 1e-6,
        format!("max relative error = {worst:.2e} (tol 1e-6)"),
    )
}

fn threshold_algebra() -> Outcome {
    let snr_err = (snr(FRAC_1_SQRT_2).unwrap() - 1.0).abs();
    let cfg = WindowConfig {
        candidates: vec![4, 8],
        l_max: 16,
        rho_star: FRAC_1_SQRT_2,
        fallback: Fallback::UseLMax,
        initial: None,
    };
    let reports = |rho: f64| {
        vec![
            AlignmentReport::new(4, Some(rho), None, FRAC_1_SQRT_2),
            AlignmentReport::new(8, Some(1.0), None, FRAC_1_SQRT_2),
        ]
    };
    let at = decide(&cfg, &reports(FRAC_1_SQRT_2), 8, 0, 0).unwrap().chosen;
    let below = decide(&cfg, &reports(FRAC_1_SQRT_2 - 1e-9), 8, 0, 0)
        .unwrap()
        .chosen;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..7usize);
        let mut cands: Vec<usize> = Vec::new();
        let mut c = 0;
        for _ in 0..k {
            c += rng.random_range(1..20);
            cands.push(c);
        }
        let l_max = c + rng.random_range(0..10);
        let rho_star = rng.random_range(0.05..0.95);
        let fallback = if rng.random_bool(0.5) {
            Fallback::UseLMax
        } else {
            Fallback::KeepCurrent
        };
        let cfg = WindowConfig {
            candidates: cands.clone(),
            l_max,
            rho_star,
            fallback,
            initial: None,
        };
        let rhos: Vec<Option<f64>> = cands
            .iter()
            .map(|_| match rng.random_range(0..4) {
                0 => None,
                1 => Some(rho_star),
                _ => Some(rng.random_range(-1.0..1.0)),
            })
            .collect();
        let reps: Vec<_> = cands
            .iter()
            .zip(&rhos)
            .map(|(&l, &r)| AlignmentReport::new(l, r, r, 0.5))
            .collect();
        let current = cands[rng.random_range(0..k)];
        let got = decide(&cfg, &reps, current, 0, 0).unwrap().chosen;
        let brute = cands
            .iter()
            .zip(&rhos)
            .filter(|(_, r)| r.is_some_and(|r| r >= rho_star))
            .map(|(&l, _)| l)
            .min()
            .unwrap_or(match fallback {
                Fallback::UseLMax => l_max,
                Fallback::KeepCurrent => current,
            });
        mismatches += (got != brute) as usize;
    }
    outcome(
        snr_err <= 1e-12 && at == 4 && below == 8 && mismatches == 0,
        format!(
            "|snr - 1| = {snr_err:.1e}, at threshold -> {at}, just below -> {below}, \
             brute-force mismatches = {mismatches}/1000"
        ),
    )
}

fn drift_scenario(seed: u64) -> TrainConfig {
    let mut c = toy_drift_config();
    c.seed = seed;
    c.student.scale = 0.5;
    c.student.seed = 1000 + seed;
    c.teacher.seed = 2000 + seed;
    c
}

fn micro_vs_macro() -> Outcome {
    let mut cands = power_candidates(64);
    cands.push(64);
    let n_seeds = 64;
    let mut micro = vec![0.0; cands.len()];
    let mut macro_ = vec![0.0; cands.len()];
    let mut full_exact = true;
    for seed in 0..n_seeds {
        let c = drift_scenario(seed);
        let student = build_student(&c).unwrap();
        let teacher = build_teacher(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<ScoredRollout> = (0..64)
            .map(|_| {
                let s = sample_rollout(&student, &[1, 2], 64, &mut rng).unwrap();
                score_sampled(&student, teacher.as_ref(), s).unwrap()
            })
            .collect();
        let reps =
            audit_candidates(&student, &batch, &cands, &MetricSpec::Identity, FRAC_1_SQRT_2)
                .unwrap();
        for (i, r) in reps.iter().enumerate() {
            micro[i] += r.micro_cos.unwrap() / n_seeds as f64;
            macro_[i] += r.macro_cos.unwrap() / n_seeds as f64;
        }
        full_exact &= reps.last().unwrap().micro_cos == Some(1.0);
    }
    let dominates = micro.iter().zip(&macro_).all(|(a, b)| a >= b);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    outcome(
        dominates && micro[0] > 0.0 && full_exact,
        format!(
            "L={:?} micro=[{}] macro=[{}] full-length exactly 1 = {full_exact}",
            cands,
            fmt(&micro),
            fmt(&macro_)
        ),
    )
}

fn survival_curves() -> Outcome {
    // Drifted student against the peaked teacher.
    let c = drift_scenario(0);
    let student = build_student(&c).unwrap();
    let teacher = build_teacher(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs: Vec<TokenSequence> = (0..2048)
        .map(|_| sample_rollout(&student, &[1, 2], 64, &mut rng).unwrap().sequence)
        .collect();
    let curves = drift_curves(teacher.as_ref(), &seqs, &[1, 2, 4, 8]).unwrap();
    let mut monotone = true;
    for (_, s) in &curves.survival {
        monotone &= s[0] == 1.0 && s.windows(2).all(|w| w[1] <= w[0]);
    }
    for w in curves.survival.windows(2) {
        monotone &= w[0].1.iter().zip(&w[1].1).all(|(a, b)| a <= b);
    }
    let rej = curves.cumulative_rejection(1).unwrap();
    let grows = rej.windows(2).all(|w| w[1] >= w[0]) && *rej.last().unwrap() > rej[1];

    // Uniform teacher and uniform draws, V = 4, k = 2.
    let vocab = Vocabulary::new(4, 0).unwrap();
    let uniform = teacher_freeze(&PolicyParams::zeros(Family::NgramSoftmax { order: 1 }, vocab).unwrap());
    let n = 50_000;
    let t_max = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws: Vec<TokenSequence> = (0..n)
        .map(|_| TokenSequence {
            prompt: vec![1],
            response: (0..t_max).map(|_| rng.random_range(0..4)).collect(),
            terminated: false,
        })
        .collect();
    let s = topk_survival(&uniform, &draws, 2).unwrap();
    let mut worst: f64 = 0.0;
    for (t, &x) in s.iter().enumerate().skip(1) {
        let p = 0.5f64.powi(t as i32);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        worst = worst.max((x - p).abs() / se);
    }
    outcome(
        monotone && grows && worst <= 3.0,
        format!(
            "monotone = {monotone}, rejection k=1 grows {:.3} -> {:.3}, uniform (1/2)^T max |z| = {worst:.3} (tol 3)",
            rej[1],
            rej.last().unwrap()
        ),
    )
}

fn horizon_and_cost() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let mut a = toy_drift_config();
        a.seed = seed;
        a.mode = Mode::Adwin;
        let mut b = a.clone();
        b.mode = Mode::OpdFull;
        let (ra, _) = run(&a, std::io::sink()).unwrap();
        let (rb, _) = run(&b, std::io::sink()).unwrap();
        let win = ra.mean_window(ra.steps.len());
        let ca = ra.final_eval.mean_token_cost;
        let cb = rb.final_eval.mean_token_cost;
        let ok = win < a.horizon as f64 && ra.totals.sync < rb.totals.sync && ca <= 1.1 * cb;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: window {win:.1}/{} sync {:.0} vs {:.0}, cost {ca:.4} vs {cb:.4}",
            a.horizon, ra.totals.sync, rb.totals.sync
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        pass && secs < 300.0,
        format!("{}; {secs:.1}s (limit 300s)", lines.join("; ")),
    )
}

fn staleness_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = 0;
    let mut forced_total = 0;
    let mut logged_total = 0;
    for cfg_i in 0..50 {
        let horizon = rng.random_range(8..40);
        let mut c = with_horizon(TrainConfig::default(), horizon);
        c.seed = cfg_i;
        c.policy.vocab = rng.random_range(3..9);
        c.policy.order = rng.random_range(1..3);
        c.student.eos_bias = rng.random_range(-4.0..0.0);
        c.batch_size = rng.random_range(2..12);
        c.steps = 12;
        c.eval_rollouts = 4;
        c.probes.probe_batch_size = rng.random_range(1..10);
        c.probes.staleness_limit = rng.random_range(1..5);
        c.probes.round_budget = RoundBudget::Tokens(rng.random_range(0..6));
        c.probes.discard_on_force = rng.random_bool(0.3);
        let limit = c.probes.staleness_limit;
        let mut t = Trainer::from_config(c).unwrap();
        for step in 0..12 {
            let rec = t.train_step().unwrap();
            violations += t
                .pool()
                .records()
                .iter()
                .filter(|r| r.staleness(step) > limit)
                .count();
            forced_total += rec.force.forced;
            for r in step_records(&rec, true) {
                if r.tag == "probe" {
                    let parsed = parse_stream(&r.to_line()).unwrap();
                    logged_total += int_field(&parsed[0], "forced").unwrap() as usize;
                }
            }
        }
    }
    outcome(
        violations == 0 && forced_total > 0 && logged_total == forced_total,
        format!(
            "violations = {violations}, forced = {forced_total}, logged = {logged_total} over 50 configs"
        ),
    )
}

fn determinism() -> Outcome {
    let mut c = toy_drift_config();
    c.steps = 60;
    c.seed = 4;
    let (_, a) = run(&c, Vec::new()).unwrap();
    let (_, b) = run(&c, Vec::new()).unwrap();
    let decisions = parse_stream(std::str::from_utf8(&a).unwrap())
        .unwrap()
        .iter()
        .filter(|r| tag_of(r) == "decision")
        .count();
    outcome(
        a == b && decisions > 0,
        format!("{} bytes, identical = {}, {decisions} decisions", a.len(), a == b),
    )
}

fn cascade() -> Outcome {
    let mut c = drift_scenario(0);
    c.steps = 150;
    c.eval_rollouts = 256;
    let mask = c.horizon / 8;
    let curves = prefix_mask_experiment(&c, mask).unwrap();
    let s0 = curves.suffix[0];
    let s1 = *curves.suffix.last().unwrap();
    let p0 = curves.prefix[0];
    let p1 = *curves.prefix.last().unwrap();
    outcome(
        s1 > s0,
        format!("mask {mask}: prefix {p0:.4} -> {p1:.4}, suffix {s0:.4} -> {s1:.4}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient-oracle", gradient_oracle),
        ("score-identities", score_identities),
        ("finite-difference", finite_difference),
        ("threshold-algebra", threshold_algebra),
        ("micro-vs-macro-cosine", micro_vs_macro),
        ("topk-survival", survival_curves),
        ("horizon-and-cost", horizon_and_cost),
        ("staleness", staleness_fuzz),
        ("determinism", determinism),
        ("prefix-cascade", cascade),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let o = f();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
