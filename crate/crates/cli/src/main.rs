//! `vrloop`: streaming, federated and gradient-check runs from one TOML
//! config, plus a renderer for finished runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vrloop_core::config::{ConfigError, RunConfig};
use vrloop_core::federated::{check_equivalence, run_federation, FederatedError};
use vrloop_core::learner::{checkpoint, CategoricalLearner, DiffusionLearner};
use vrloop_core::pipeline::{run_benchmark, summary_csv, MetricsLog, Mode};
use vrloop_core::trainer::gradcheck::standard_suite;
use vrloop_core::trainer::StepRecord;

#[derive(Parser)]
#[command(name = "vrloop", version, about = "Verifier-driven continual preference training on a synthetic scene world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Baseline, stream, then trained evaluation on a held-out set.
    Stream(RunArgs),
    /// Rounds of local client streams averaged into global adapters.
    Federated(RunArgs),
    /// Finite-difference check of every loss variant's gradient.
    Gradcheck(RunArgs),
    /// Render the table and pair economy of a finished stream run.
    Report {
        /// Output directory of a `stream` run.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory; must be absent or empty.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's pipeline mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(mode) = args.mode {
        config.pipeline.mode = match mode {
            ModeArg::Sync => Mode::Sync,
            ModeArg::Async => Mode::Async,
        };
    }
    config.validate()?;
    Ok(config)
}

/// Creates `dir`, refusing to reuse one that already has contents.
fn fresh_dir(dir: &Path) -> Result<(), Failure> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
        if entries.next().is_some() {
            return Err(Failure::Config(format!("output directory {} is not empty", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn steps_jsonl(steps: &[StepRecord]) -> String {
    steps.iter().map(|s| serde_json::to_string(s).expect("step serializes") + "\n").collect()
}

fn cmd_stream(args: &RunArgs) -> Result<(), Failure> {
    let config = load(args)?;
    let dir = config.output_dir.clone();
    fresh_dir(&dir)?;
    write(&dir, "config.toml", config.to_toml())?;
    let model = config.model().map_err(|e| Failure::Config(e.to_string()))?;
    let initial = config.initial_snapshot(&model);
    match run_benchmark(&config.stream_settings(), &model, initial) {
        Ok(outcome) => {
            let summary = outcome.log.summary.clone().expect("finished run has a summary");
            write(&dir, "metrics.jsonl", outcome.log.to_jsonl())?;
            write(&dir, "train.jsonl", steps_jsonl(&outcome.steps))?;
            write(&dir, "summary.csv", summary_csv(&summary))?;
            checkpoint::save(&outcome.final_snapshot.params, &dir.join("checkpoint.bin")).map_err(runtime)?;
            print!("{}", report::render(&summary));
            println!("logs written to {}", dir.display());
            Ok(())
        }
        Err(failure) => {
            write(&dir, "metrics.jsonl", failure.log.to_jsonl())?;
            write(&dir, "train.jsonl", steps_jsonl(&failure.steps))?;
            Err(Failure::Runtime(format!("stream aborted after {} prompts: {}", failure.log.prompts.len(), failure.error)))
        }
    }
}

fn federated_failure(e: FederatedError) -> Failure {
    match e {
        FederatedError::Config(m) => Failure::Config(m),
        other => runtime(other),
    }
}

fn cmd_federated(args: &RunArgs) -> Result<(), Failure> {
    let config = load(args)?;
    let dir = config.output_dir.clone();
    fresh_dir(&dir)?;
    write(&dir, "config.toml", config.to_toml())?;
    let model = config.model().map_err(|e| Failure::Config(e.to_string()))?;
    let initial = config.initial_snapshot(&model);
    let settings = config.stream_settings();
    let fed = config.federated;
    let outcome = run_federation(&settings, &fed, &model, initial.clone()).map_err(federated_failure)?;
    write(&dir, "ledger.jsonl", outcome.ledger_jsonl())?;
    checkpoint::save(&outcome.global, &dir.join("checkpoint.bin")).map_err(runtime)?;
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
    println!("baseline global rate {}", pct(outcome.baseline.overall()));
    for r in &outcome.ledger {
        let pairs: usize = r.clients.iter().map(|c| c.pairs).sum();
        let failed = r.clients.iter().filter(|c| c.error.is_some()).count();
        println!("round {}: global rate {}, {} pairs, {} failed clients", r.round, pct(r.global_rate), pairs, failed);
    }
    if fed.check_equivalence {
        let verdict = check_equivalence(&settings, &fed, &model, initial).map_err(federated_failure)?;
        write(&dir, "equivalence.json", serde_json::to_string_pretty(&verdict).expect("verdict serializes"))?;
        let word = |b: bool| if b { "identical" } else { "DIFFERENT" };
        println!("single client vs centralized: {}", word(verdict.single_matches_central));
        println!("{} identical clients vs single client: {}", verdict.identical_clients, word(verdict.identical_match_single));
        println!("aggregate under client reordering: {}", word(verdict.permutation_invariant));
        if !verdict.all_hold() {
            return Err(Failure::Runtime("federated equivalence check failed".into()));
        }
    }
    println!("ledger written to {}", dir.display());
    Ok(())
}

fn cmd_gradcheck(args: &RunArgs) -> Result<(), Failure> {
    let config = load(args)?;
    let g = config.gradcheck;
    let categorical = CategoricalLearner::new(config.categorical_config());
    let diffusion = DiffusionLearner::new(config.diffusion_config()).map_err(|e| Failure::Config(e.to_string()))?;
    let suite = standard_suite(&categorical, &diffusion, &config.training_config(), config.seed, g.probes, g.step, g.inject_sign_flip)
        .map_err(runtime)?;
    if let Some(out) = &args.out {
        fresh_dir(out)?;
        write(out, "gradcheck.json", serde_json::to_string_pretty(&suite).expect("report serializes"))?;
    }
    let mut failed = Vec::new();
    for e in &suite {
        let ok = e.report.max_rel_error < g.tolerance;
        println!(
            "{:<32} probes {:>5}  max rel error {:.3e}  {}",
            e.label,
            e.report.probes,
            e.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(e);
        }
    }
    match failed.first() {
        None => Ok(()),
        Some(_) => {
            for e in &failed {
                if let Some(w) = &e.report.worst {
                    println!(
                        "worst in {}: {}[{}, {}] analytic {:.6e} numeric {:.6e}",
                        e.label, w.parameter, w.row, w.col, w.analytic, w.numeric
                    );
                }
            }
            Err(Failure::Runtime(format!("{} of {} gradient checks exceed {:e}", failed.len(), suite.len(), g.tolerance)))
        }
    }
}

fn cmd_report(dir: &Path) -> Result<(), Failure> {
    let path = dir.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let log = MetricsLog::from_jsonl(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let summary = report::recompute(&log);
    print!("{}", report::render(&summary));
    if let Some(stored) = &log.summary {
        if (stored.prompts, stored.pairs, stored.skipped, stored.sessions)
            != (summary.prompts, summary.pairs, summary.skipped, summary.sessions)
        {
            return Err(Failure::Runtime("stored summary disagrees with the per-prompt records".into()));
        }
    }
    if !summary.identities_hold() {
        return Err(Failure::Runtime("pair-economy identities do not hold".into()));
    }
    println!("identities hold: skipped + pair-yielding + exhausted = prompts; pairs = admitted + filtered");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Stream(a) => cmd_stream(a),
        Command::Federated(a) => cmd_federated(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report { dir } => cmd_report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
    }
}
