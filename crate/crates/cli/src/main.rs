//! `amda`: generate corpora, train, evaluate, and run ablation and sweep grids.
//!
//! Exit codes: 0 success, 1 usage, 2 config, 3 runtime.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amda_core::checkpoint::Checkpoint;
use amda_core::config::TrainConfig;
use amda_core::corpus::{generate, CorpusReader, Domain, ScenarioSpec, Split};
use amda_core::experiment::{
    ablation_plan, persist_run, run, run_plan, sweep_plan, EventLog, ExperimentResult, PlanRow, SweepParam,
    SWEEP_VALUES,
};
use amda_core::trainer::Trainer;
use amda_core::{gradsuite, AmdaError};
use clap::{Parser, Subcommand};
use serde_json::json;

/// Replaces the output directory of every subcommand that writes one.
const OUT_DIR_ENV: &str = "AMDA_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "amda",
    version,
    about = "Adversarial multi-modal domain adaptation for video grounding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain corpus
    Generate {
        scenario: PathBuf,
        out_dir: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one configuration and evaluate it on both test splits
    Train {
        config: PathBuf,
        corpus: PathBuf,
        out_dir: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one corpus split
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Both domains when omitted
        #[arg(long)]
        domain: Option<Domain>,
    },
    /// Finite-difference check of every differentiable op and loss
    Gradcheck {
        #[arg(long, default_value_t = gradsuite::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = gradsuite::DEFAULT_INSTANCES)]
        instances: u64,
    },
    /// Loss-component grid (8 rows) and discriminator-modality grid (6 rows)
    Ablate {
        config: PathBuf,
        corpus: PathBuf,
        out_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Sweep the margin or the mask ratio
    Sweep {
        config: PathBuf,
        corpus: PathBuf,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Defaults to `sweep-<param>`
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn out_dir(given: Option<PathBuf>, fallback: impl FnOnce() -> Option<PathBuf>) -> Result<PathBuf, AmdaError> {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .or(given)
        .or_else(fallback)
        .ok_or_else(|| AmdaError::Config(format!("no output directory given and {OUT_DIR_ENV} is unset")))
}

fn read_text(path: &Path) -> Result<String, AmdaError> {
    std::fs::read_to_string(path).map_err(|e| AmdaError::io(path, e))
}

fn load_config(path: &Path) -> Result<TrainConfig, AmdaError> {
    TrainConfig::from_toml(&read_text(path)?).map_err(|e| match e {
        AmdaError::Config(m) => AmdaError::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

fn cmd_generate(scenario: &Path, out: Option<PathBuf>, force: bool) -> Result<(), AmdaError> {
    let spec = ScenarioSpec::from_toml(&read_text(scenario)?).map_err(|e| match e {
        AmdaError::Config(m) => AmdaError::Config(format!("{}: {m}", scenario.display())),
        e => e,
    })?;
    let dir = out_dir(out, || None)?;
    let hash = spec.hash();
    let mut log = EventLog::open(&dir, &hash, force)?;
    log.write("job_start", json!({"command": "generate", "scenario": spec}))?;
    let corpus = generate(&spec)?;
    corpus.write(&dir)?;
    log.write("job_end", json!({"samples": corpus.samples.len()}))?;
    println!("wrote {} samples to {}", corpus.samples.len(), dir.display());
    Ok(())
}

fn cmd_train(config: &Path, corpus: &Path, out: Option<PathBuf>, force: bool) -> Result<(), AmdaError> {
    let cfg = load_config(config)?;
    let reader = CorpusReader::open(corpus)?;
    let dir = out_dir(out, || None)?;
    let mut log = EventLog::open(&dir, &cfg.hash(), force)?;
    log.write(
        "job_start",
        json!({"command": "train", "config": cfg, "corpus": reader.spec().hash()}),
    )?;
    let mut records = Vec::new();
    let outcome = run(&reader, &cfg, |r| {
        eprintln!("epoch {:>3}  loss {:.4}", r.epoch, r.mean.total);
        records.push(serde_json::to_value(r).expect("record serializes"));
    })?;
    for r in records {
        log.write("epoch", json!({"record": r}))?;
    }
    persist_run(&dir, &outcome)?;
    let mut result = ExperimentResult::default();
    for report in outcome.source.iter().chain(outcome.target.iter()) {
        result.push("train", "1", report.clone());
    }
    result.write(&dir)?;
    log.write("job_end", json!({"source": outcome.source, "target": outcome.target}))?;
    print!("{}", result.results_csv());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, corpus: &Path, split: Split, domain: Option<Domain>) -> Result<(), AmdaError> {
    let ck = Checkpoint::load(checkpoint)?;
    let reader = CorpusReader::open(corpus)?;
    let spec = reader.spec();
    if (spec.visual_dim, spec.text_dim) != (ck.dims.visual_dim, ck.dims.text_dim) {
        return Err(AmdaError::Dimension(format!(
            "checkpoint expects visual/text widths {}/{}, corpus {} has {}/{}",
            ck.dims.visual_dim,
            ck.dims.text_dim,
            corpus.display(),
            spec.visual_dim,
            spec.text_dim
        )));
    }
    let trainer = Trainer::from_checkpoint(&ck)?;
    let domains = match domain {
        Some(d) => vec![d],
        None => vec![Domain::Source, Domain::Target],
    };
    let mut result = ExperimentResult::default();
    for d in domains {
        let samples = reader.load(d, split, amda_core::corpus::Access::Eval)?;
        if let Some(report) = trainer.evaluate_split(&samples)? {
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            result.push("eval", "1", report);
        }
    }
    print!("{}", result.results_csv());
    Ok(())
}

fn cmd_gradcheck(tol: f64, instances: u64) -> Result<bool, AmdaError> {
    let reports = gradsuite::run(tol, instances)?;
    println!(
        "{:<40} {:>9} {:>8} {:>8} {:>12} {:>10}  status",
        "case", "instances", "checked", "skipped", "max rel err", "tol"
    );
    for r in &reports {
        println!(
            "{:<40} {:>9} {:>8} {:>8} {:>12.3e} {:>10.1e}  {}",
            r.name,
            r.instances,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.tol,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} cases passed", reports.len() - failed, reports.len());
    Ok(failed == 0)
}

fn cmd_grid(
    command: &str,
    config: &Path,
    corpus: &Path,
    dir: PathBuf,
    force: bool,
    plan: impl FnOnce(&TrainConfig) -> Result<Vec<PlanRow>, AmdaError>,
) -> Result<(), AmdaError> {
    let cfg = load_config(config)?;
    let plan = plan(&cfg)?;
    let reader = CorpusReader::open(corpus)?;
    let mut log = EventLog::open(&dir, &cfg.hash(), force)?;
    log.write(
        "job_start",
        json!({"command": command, "config": cfg, "runs": plan.len()}),
    )?;
    let result = run_plan(&reader, &plan, &dir, &mut log)?;
    result.write(&dir)?;
    log.write("job_end", json!({"reports": result.reports.len()}))?;
    print!("{}", result.summary_csv());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool, AmdaError> {
    match cli.command {
        Command::Generate {
            scenario,
            out_dir,
            force,
        } => cmd_generate(&scenario, out_dir, force)?,
        Command::Train {
            config,
            corpus,
            out_dir,
            force,
        } => cmd_train(&config, &corpus, out_dir, force)?,
        Command::Eval {
            checkpoint,
            corpus,
            split,
            domain,
        } => cmd_eval(&checkpoint, &corpus, split, domain)?,
        Command::Gradcheck { tol, instances } => return cmd_gradcheck(tol, instances),
        Command::Ablate {
            config,
            corpus,
            out_dir: out,
            seeds,
            force,
        } => {
            let dir = out_dir(out, || None)?;
            cmd_grid("ablate", &config, &corpus, dir, force, |c| Ok(ablation_plan(c, &seeds)))?
        }
        Command::Sweep {
            config,
            corpus,
            param,
            values,
            seeds,
            out,
            force,
        } => {
            let dir = out_dir(out, || Some(PathBuf::from(format!("sweep-{param}"))))?;
            let values = if values.is_empty() {
                SWEEP_VALUES.to_vec()
            } else {
                values
            };
            cmd_grid("sweep", &config, &corpus, dir, force, |c| {
                sweep_plan(c, param, &values, &seeds)
            })?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                AmdaError::Config(_) => 2,
                _ => 3,
            })
        }
    }
}
