use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use adwin_core::audit::{audit_candidates, estimate_diagonal_fisher, MetricSpec};
use adwin_core::bridge::PolicyServer;
use adwin_core::checkpoint::save_checkpoint;
use adwin_core::config::{MetricKind, TrainConfig};
use adwin_core::diagnostics::{drift_curves, loss_position_cdf, prefix_mask_experiment, student_batch};
use adwin_core::harness::{
    execute_recipe, exit_code, power_candidates, recipe, run_to_dir, validate_run_dir, RECIPES,
};
use adwin_core::metrics::{MetricsWriter, Record};
use adwin_core::trainer::{build_student, build_teacher, header_record, run_trainer, teacher_params, Trainer};
use adwin_core::window::decide;
use adwin_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

#[derive(Parser, Debug)]
#[command(name = "adwin", version, about = "Adaptive-window on-policy distillation on toy policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a student; writes a run directory or explicit metrics/checkpoint files.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory (manifest.txt, metrics.jsonl, checkpoint.bin).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit prefix/full alignment of the configured student on fresh rollouts.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Number of full-horizon probe rollouts.
        #[arg(long, default_value_t = 64)]
        probes: usize,
    },
    /// Drift measurements on student rollouts.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        what: Diagnosis,
        #[arg(long, default_value_t = 2048)]
        rollouts: usize,
        /// Ranks for survival curves.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        k: Vec<usize>,
        /// Trained prefix length for the cascade run (default horizon/8).
        #[arg(long)]
        mask_len: Option<usize>,
    },
    /// Run a canned experiment recipe.
    Recipe {
        /// One of the recipe names; `list` prints them.
        name: String,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Check a run directory for completeness and consistency.
    Validate { dir: PathBuf },
    /// Serve the configured teacher over the remote policy protocol.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7070")]
        bind: String,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Diagnosis {
    Drift,
    Losscdf,
    Cascade,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PolicyKind {
    Ngram,
    Linear,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// adwin | opd-full | opd-fixed:L | fast-opd:START:INC | seqkd
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<usize>,
    #[arg(long)]
    rho_star: Option<f64>,
    #[arg(long)]
    probe_batch: Option<usize>,
    #[arg(long)]
    staleness: Option<usize>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long, conflicts_with = "background")]
    virtual_async: bool,
    #[arg(long)]
    background: bool,
    #[arg(long)]
    teacher_endpoint: Option<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: String| o.push(format!("{k}={v}"));
        if let Some(v) = &self.mode {
            put("mode", v.clone());
        }
        if let Some(v) = self.seed {
            put("seed", v.to_string());
        }
        if let Some(v) = self.steps {
            put("steps", v.to_string());
        }
        if let Some(v) = self.batch {
            put("batch_size", v.to_string());
        }
        if let Some(v) = self.horizon {
            put("horizon", v.to_string());
            if self.candidates.is_empty() {
                put("window.candidates", join(&power_candidates(v)));
            }
        }
        if !self.candidates.is_empty() {
            put("window.candidates", join(&self.candidates));
        }
        if let Some(v) = self.rho_star {
            put("window.rho_star", v.to_string());
        }
        if let Some(v) = self.probe_batch {
            put("probes.batch_size", v.to_string());
        }
        if let Some(v) = self.staleness {
            put("probes.staleness_limit", v.to_string());
        }
        if let Some(p) = self.policy {
            let name = match p {
                PolicyKind::Ngram => "ngram",
                PolicyKind::Linear => "linear",
            };
            put("policy.family", name.into());
        }
        if let Some(v) = self.vocab {
            put("policy.vocab", v.to_string());
        }
        if let Some(v) = self.order {
            put("policy.order", v.to_string());
        }
        if self.virtual_async {
            put("probes.execution", "virtual-async".into());
        }
        if self.background {
            put("probes.execution", "background".into());
        }
        if let Some(v) = &self.teacher_endpoint {
            put("teacher.endpoint", v.clone());
        }
        o.extend(self.set.iter().cloned());
        o
    }

    fn config(&self) -> Result<TrainConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        TrainConfig::parse(&text, &self.overrides())
    }

    fn sink(&self) -> Result<MetricsWriter<Box<dyn Write>>> {
        let w: Box<dyn Write> = match &self.metrics_out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(io::stdout().lock()),
        };
        Ok(MetricsWriter::new(w))
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn train(common: &Common, out: Option<&PathBuf>) -> Result<()> {
    let config = common.config()?;
    if let Some(dir) = out {
        let r = run_to_dir(&config, dir)?;
        if let Some(p) = &common.checkpoint_out {
            save_checkpoint(&r.student, p)?;
        }
        eprintln!(
            "{} steps, final per-token cost {:.6}, sync cost {:.0}, grand {:.0} -> {}",
            r.steps.len(),
            r.final_eval.mean_token_cost,
            r.totals.sync,
            r.totals.grand,
            dir.display()
        );
        return Ok(());
    }
    let trainer = Trainer::from_config(config)?;
    let mut sink = common.sink()?;
    let r = run_trainer(trainer, &mut sink)?;
    if let Some(p) = &common.checkpoint_out {
        save_checkpoint(&r.student, p)?;
    }
    Ok(())
}

fn audit(common: &Common, probes: usize) -> Result<()> {
    let config = common.config()?;
    let student = build_student(&config)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let batch = student_batch(&config, probes, &mut rng)?;
    let metric = match config.metric {
        MetricKind::Identity => MetricSpec::Identity,
        MetricKind::DiagonalFisher => estimate_diagonal_fisher(&student, &batch)?,
    };
    let cands = &config.window.candidates;
    let reports = audit_candidates(&student, &batch, cands, &metric, config.window.rho_star)?;
    let d = decide(&config.window, &reports, config.window.initial_window(), 0, 0)?;
    let mut sink = common.sink()?;
    sink.write(&header_record(&config, None))?;
    for r in &d.reports {
        sink.write(
            &Record::new("alignment")
                .with("candidate", r.candidate_length)
                .with("micro", r.micro_cos)
                .with("macro", r.macro_cos)
                .with("macro_skipped", r.macro_skipped)
                .with("snr", r.snr)
                .with("admissible", r.admissible),
        )?;
    }
    sink.write(
        &Record::new("decision")
            .with("chosen", d.chosen)
            .with("fallback_used", d.fallback_used),
    )?;
    sink.flush()
}

fn diagnose(
    common: &Common,
    what: Diagnosis,
    rollouts: usize,
    k: &[usize],
    mask_len: Option<usize>,
) -> Result<()> {
    let config = common.config()?;
    let mut sink = common.sink()?;
    let teacher = build_teacher(&config)?;
    sink.write(&header_record(&config, teacher.approximation()))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let records = match what {
        Diagnosis::Drift => {
            let seqs: Vec<_> = student_batch(&config, rollouts, &mut rng)?
                .into_iter()
                .map(|r| r.sequence)
                .collect();
            drift_curves(teacher.as_ref(), &seqs, k)?.records()
        }
        Diagnosis::Losscdf => {
            let batch = student_batch(&config, rollouts, &mut rng)?;
            loss_position_cdf(&batch)?
                .unwrap_or_default()
                .iter()
                .enumerate()
                .map(|(t, f)| {
                    Record::new("curve")
                        .with("series", "loss_cdf")
                        .with("position", t)
                        .with("value", *f)
                })
                .collect()
        }
        Diagnosis::Cascade => {
            let m = mask_len.unwrap_or((config.horizon / 8).max(1));
            prefix_mask_experiment(&config, m)?.records()
        }
    };
    for r in &records {
        sink.write(r)?;
    }
    sink.flush()
}

fn run_recipe(name: &str, common: &Common, out: &std::path::Path) -> Result<()> {
    if name == "list" {
        for r in RECIPES {
            println!("{r}");
        }
        return Ok(());
    }
    let base = if common.config.is_none() && common.overrides().is_empty() {
        adwin_core::harness::toy_drift_config()
    } else {
        common.config()?
    };
    let set = recipe(name, &base)?;
    let dirs = execute_recipe(&set, &out.join(name))?;
    for d in dirs {
        validate_run_dir(&d)?;
        println!("{}", d.display());
    }
    Ok(())
}

fn serve(common: &Common, bind: &str) -> Result<()> {
    let config = common.config()?;
    let server = PolicyServer::spawn(teacher_params(&config)?, bind)?;
    eprintln!("serving teacher (vocab {}) on {}", config.policy.vocab, server.endpoint());
    loop {
        std::thread::park();
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => train(&common, out.as_ref()),
        Command::Audit { common, probes } => audit(&common, probes),
        Command::Diagnose {
            common,
            what,
            rollouts,
            k,
            mask_len,
        } => diagnose(&common, what, rollouts, &k, mask_len),
        Command::Recipe { name, common, out } => run_recipe(&name, &common, &out),
        Command::Validate { dir } => {
            let m = validate_run_dir(&dir)?;
            println!("ok: seed {} code {}", m.seed, m.code_version);
            Ok(())
        }
        Command::Serve { common, bind } => serve(&common, &bind),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if let Error::NumericalAbort { .. } = e {
                eprintln!("run aborted; partial metrics were flushed");
            }
            ExitCode::from(code as u8)
        }
    }
}
