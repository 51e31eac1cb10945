use adwin_core::audit::{cosine, snr, AlignmentReport, MetricSpec};
use adwin_core::checkpoint::{read_checkpoint, write_checkpoint};
use adwin_core::config::TrainConfig;
use adwin_core::diagnostics::{loss_position_cdf, survival_from_ranks};
use adwin_core::ledger::{summarize, CostModel, Ledger};
use adwin_core::metrics::{parse_stream, real_field, Record};
use adwin_core::opd::ScoredRollout;
use adwin_core::policy::{
    Family, GradientVector, PolicyParams, TokenSequence, Vocabulary,
};
use adwin_core::window::{decide, Fallback, WindowConfig};
use proptest::prelude::*;

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![
        (1usize..3).prop_map(|order| Family::NgramSoftmax { order }),
        (1usize..5).prop_map(|buckets| Family::LinearSoftmax { buckets }),
    ]
}

fn params() -> impl Strategy<Value = PolicyParams> {
    (2usize..6, family()).prop_flat_map(|(v, f)| {
        let vocab = Vocabulary::new(v, 0).unwrap();
        let dim = f.dimension(&vocab).unwrap();
        prop::collection::vec(-8.0f64..8.0, dim)
            .prop_map(move |vals| PolicyParams::new(f, vocab, vals).unwrap())
    })
}

proptest! {
    #[test]
    fn conditionals_normalize(p in params(), ctx in prop::collection::vec(0u32..2, 0..6)) {
        let d = p.distribution(adwin_core::policy::Context::flat(&ctx));
        prop_assert!((d.total_mass() - 1.0).abs() < 1e-12);
        let e = d.entropy();
        prop_assert!(e >= -1e-12 && e <= (p.vocab().size() as f64).ln() + 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(p in params()) {
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice(), 0).unwrap();
        prop_assert_eq!(back.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        p.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.family(), p.family());
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        u in prop::collection::vec(-10.0f64..10.0, 1..12),
        seed in prop::collection::vec(-10.0f64..10.0, 12),
    ) {
        let v: Vec<f64> = seed[..u.len()].to_vec();
        let a = GradientVector::from_values(u.clone());
        let b = GradientVector::from_values(v);
        let ab = cosine(&a, &b, &MetricSpec::Identity).unwrap();
        let ba = cosine(&b, &a, &MetricSpec::Identity).unwrap();
        prop_assert_eq!(ab, ba);
        if let Some(c) = ab {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
        if a.norm() >= 1e-12 {
            prop_assert_eq!(cosine(&a, &a, &MetricSpec::Identity).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn snr_is_monotone(a in 0.0f64..0.999, b in 0.0f64..0.999) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(snr(lo).unwrap() <= snr(hi).unwrap());
    }

    #[test]
    fn decision_is_min_admissible(
        rhos in prop::collection::vec(prop::option::of(-1.0f64..1.0), 1..6),
        rho_star in 0.01f64..0.99,
        keep in any::<bool>(),
    ) {
        let candidates: Vec<usize> = (0..rhos.len()).map(|i| 4 << i).collect();
        let l_max = 4 << rhos.len();
        let cfg = WindowConfig {
            candidates: candidates.clone(),
            l_max,
            rho_star,
            fallback: if keep { Fallback::KeepCurrent } else { Fallback::UseLMax },
            initial: None,
        };
        let reports: Vec<_> = candidates.iter().zip(&rhos)
            .map(|(&l, &r)| AlignmentReport::new(l, r, None, rho_star)).collect();
        let d = decide(&cfg, &reports, candidates[0], 3, 1).unwrap();
        let admissible: Vec<usize> = candidates.iter().zip(&rhos)
            .filter(|(_, r)| r.is_some_and(|r| r >= rho_star)).map(|(&l, _)| l).collect();
        match admissible.first() {
            Some(&l) => { prop_assert_eq!(d.chosen, l); prop_assert!(!d.fallback_used); }
            None => {
                prop_assert!(d.fallback_used);
                prop_assert_eq!(d.chosen, if keep { candidates[0] } else { l_max });
            }
        }
    }

    #[test]
    fn survival_monotone_in_position_and_rank(
        ranks in prop::collection::vec(prop::collection::vec(1usize..6, 0..10), 1..20),
    ) {
        let mut prev: Option<Vec<f64>> = None;
        for k in 1..=5 {
            let s = survival_from_ranks(&ranks, k);
            prop_assert_eq!(s[0], 1.0);
            prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
            let rej: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
            prop_assert!(rej.iter().zip(&s).all(|(r, x)| r + x == 1.0));
            if let Some(p) = &prev {
                prop_assert!(p.iter().zip(&s).all(|(a, b)| a <= b));
            }
            prev = Some(s);
        }
        prop_assert!(prev.unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn loss_cdf_monotone_to_one(
        costs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 1..10), 1..8),
    ) {
        let batch: Vec<ScoredRollout> = costs.iter().map(|c| ScoredRollout {
            sequence: TokenSequence { prompt: vec![1], response: vec![1; c.len()], terminated: false },
            student_logp: c.clone(),
            teacher_logp: vec![0.0; c.len()],
            cost: c.clone(),
        }).collect();
        if let Some(f) = loss_position_cdf(&batch).unwrap() {
            prop_assert!(f.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!((f.last().unwrap() - 1.0).abs() <= 1e-12);
            // Two-pass oracle.
            let horizon = f.len();
            let total: f64 = costs.iter().flatten().map(|c| c.abs()).sum();
            for t in 0..horizon {
                let part: f64 = costs.iter().map(|c| c.iter().take(t + 1).map(|x| x.abs()).sum::<f64>()).sum();
                prop_assert!((f[t] - part / total).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ledger_totals_are_exact_sums(
        rows in prop::collection::vec((0usize..500, 0usize..500, 0usize..500), 0..30),
    ) {
        let mut l = Ledger::new(CostModel::default());
        let mut last = 0.0;
        for (i, &(s, p, a)) in rows.iter().enumerate() {
            let e = l.charge_step(i, s, p, a);
            prop_assert_eq!(e.sync_cost, s as f64 * 4.0);
            prop_assert_eq!(e.probe_cost, p as f64 * 2.0);
            prop_assert_eq!(e.audit_cost, a as f64 * 3.0);
            prop_assert!(e.cumulative >= last);
            last = e.cumulative;
        }
        let t = summarize(l.entries());
        prop_assert_eq!(t.grand, t.sync + t.probe + t.audit);
        prop_assert_eq!(t.grand, last);
    }

    #[test]
    fn reals_replay_exactly(x in any::<f64>()) {
        let line = Record::new("r").with("x", x).to_line();
        let parsed = parse_stream(&line).unwrap();
        let back = real_field(&parsed[0], "x").unwrap();
        if x.is_nan() {
            prop_assert!(back.is_nan());
        } else {
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn config_text_roundtrip(
        rho in 0.05f64..0.95, lr in 0.001f64..2.0, batch in 1usize..64, limit in 1usize..9,
    ) {
        let overrides = vec![
            format!("window.rho_star={rho}"),
            format!("learning_rate={lr}"),
            format!("batch_size={batch}"),
            format!("probes.staleness_limit={limit}"),
        ];
        let c = TrainConfig::parse("", &overrides).unwrap();
        let back = TrainConfig::parse(&c.to_text(), &[]).unwrap();
        prop_assert_eq!(back, c);
    }
}
