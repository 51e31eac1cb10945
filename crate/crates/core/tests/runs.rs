use std::fs;

use adwin_core::config::{Mode, TrainConfig};
use adwin_core::harness::{
    execute_recipe, recipe, run_to_dir, toy_drift_config, validate_run_dir, CHECKPOINT_FILE,
    METRICS_FILE,
};
use adwin_core::metrics::{parse_stream, real_field, replay_totals, tag_of};
use adwin_core::trainer::{build_student, run};
use adwin_core::Error;

fn tiny(mode: Mode) -> TrainConfig {
    let mut c = toy_drift_config();
    c.mode = mode;
    c.steps = 20;
    c.batch_size = 8;
    c.eval_rollouts = 16;
    c.probes.probe_batch_size = 4;
    c
}

#[test]
fn run_directory_is_complete_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Mode::Adwin);
    c.seed = 1234;
    let out = run_to_dir(&c, dir.path()).unwrap();
    let m = validate_run_dir(dir.path()).unwrap();
    assert_eq!(m.seed, 1234);
    assert_eq!(m.config, c);
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let totals = replay_totals(&text).unwrap();
    assert_eq!(totals, out.totals);
    let ckpt = adwin_core::checkpoint::load_checkpoint(&dir.path().join(CHECKPOINT_FILE), 0).unwrap();
    assert_eq!(ckpt, out.student);
}

#[test]
fn validator_catches_missing_and_inconsistent_files() {
    let dir = tempfile::tempdir().unwrap();
    run_to_dir(&tiny(Mode::OpdFull), dir.path()).unwrap();
    let manifest = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("seed = 0", "seed = 99")).unwrap();
    assert!(matches!(validate_run_dir(dir.path()), Err(Error::ReportMismatch(_))));
    fs::remove_file(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(validate_run_dir(dir.path()).is_err());
}

#[test]
fn opd_full_charges_no_probe_or_audit_cost() {
    let (out, bytes) = run(&tiny(Mode::OpdFull), Vec::new()).unwrap();
    assert_eq!(out.totals.probe, 0.0);
    assert_eq!(out.totals.audit, 0.0);
    let records = parse_stream(std::str::from_utf8(&bytes).unwrap()).unwrap();
    assert!(records.iter().all(|r| tag_of(r) != "decision"));
}

#[test]
fn adwin_windows_follow_decisions() {
    let (out, bytes) = run(&tiny(Mode::Adwin), Vec::new()).unwrap();
    for pair in out.steps.windows(2) {
        if let Some(d) = &pair[0].decision {
            // Either the decision itself or the re-entry after a full-horizon step.
            let reentry = d.chosen == 64 && pair[0].window_used == 64 && pair[1].window_used == 32;
            assert!(pair[1].window_used == d.chosen || reentry);
        }
    }
    let records = parse_stream(std::str::from_utf8(&bytes).unwrap()).unwrap();
    let alignments = records.iter().filter(|r| tag_of(r) == "alignment").count();
    let decisions = records.iter().filter(|r| tag_of(r) == "decision").count();
    assert_eq!(alignments, decisions * 4);
    for r in records.iter().filter(|r| tag_of(r) == "step") {
        let w = real_field(r, "window").unwrap() as usize;
        let sync = real_field(r, "sync_tokens").unwrap() as usize;
        assert!(sync <= 8 * w);
    }
}

#[test]
fn baselines_run() {
    for mode in [
        Mode::OpdFixed(8),
        Mode::FastOpd { start: 4, increment: 8 },
        Mode::SeqKd,
    ] {
        let (out, _) = run(&tiny(mode), Vec::new()).unwrap();
        assert_eq!(out.steps.len(), 20);
        assert!(out.final_eval.mean_token_cost.is_finite());
    }
}

#[test]
fn training_reduces_cost() {
    let mut c = tiny(Mode::OpdFull);
    c.steps = 60;
    let (out, _) = run(&c, Vec::new()).unwrap();
    assert!(out.final_eval.mean_token_cost < out.initial_eval.mean_token_cost);
}

#[test]
fn linear_family_trains() {
    let mut c = tiny(Mode::Adwin);
    c.policy.family = "linear".into();
    c.policy.buckets = 4;
    let (out, _) = run(&c, Vec::new()).unwrap();
    assert!(out.final_eval.mean_token_cost < out.initial_eval.mean_token_cost);
}

#[test]
fn numerical_abort_is_reported() {
    let mut c = tiny(Mode::OpdFull);
    c.learning_rate = 1.7e308;
    c.steps = 5;
    let mut sink = Vec::new();
    let trainer = adwin_core::trainer::Trainer::from_config(c).unwrap();
    let mut w = adwin_core::metrics::MetricsWriter::new(&mut sink);
    let err = adwin_core::trainer::run_trainer(trainer, &mut w).unwrap_err();
    assert!(matches!(err, Error::NumericalAbort { .. }), "{err:?}");
    assert_eq!(adwin_core::harness::exit_code(&err), 3);
    let text = String::from_utf8(sink).unwrap();
    assert!(text.lines().last().unwrap().contains("\"tag\":\"abort\""));
}

#[test]
fn config_errors_carry_context() {
    match TrainConfig::parse("batch_size = 4\nwindow.candidates = 8,4\n", &[]) {
        Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "window.candidates"),
        other => panic!("{other:?}"),
    }
    match TrainConfig::parse("steps = 3\ngarbage\n", &[]) {
        Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        TrainConfig::parse("", &["no.such.key=1".into()]),
        Err(Error::UnknownKey(_))
    ));
    let c = TrainConfig::parse("", &["window.rho_star=0.8".into()]).unwrap();
    assert!(c.to_text().contains("window.rho_star = 0.8"));
}

#[test]
fn zero_steps_keeps_initialization() {
    let mut c = tiny(Mode::Adwin);
    c.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = run_to_dir(&c, dir.path()).unwrap();
    assert_eq!(out.student, build_student(&c).unwrap());
    validate_run_dir(dir.path()).unwrap();
}

#[test]
fn small_recipes_execute() {
    let mut base = toy_drift_config();
    base.horizon = 16;
    base.window.l_max = 16;
    base.window.candidates = vec![4, 8];
    base.steps = 3;
    base.batch_size = 4;
    base.eval_rollouts = 4;
    let root = tempfile::tempdir().unwrap();
    for name in ["fig2-drift", "fig7-losscdf", "fig8-cascade", "table-ablate-windows"] {
        let mut set = recipe(name, &base).unwrap();
        set.runs.truncate(2);
        for r in set.runs.iter_mut() {
            if let adwin_core::harness::RunKind::Drift { rollouts, .. }
            | adwin_core::harness::RunKind::LossCdf { rollouts } = &mut r.kind
            {
                *rollouts = 32;
            }
        }
        let dirs = execute_recipe(&set, &root.path().join(name)).unwrap();
        for d in dirs {
            validate_run_dir(&d).unwrap();
        }
    }
}
