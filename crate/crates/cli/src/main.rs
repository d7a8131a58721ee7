//! Command line front end: `train`, `sweep`, `oracle` and `ablate`.
//!
//! Exit codes: 0 on success (a collapsed run is still a success and is
//! flagged in its summary), 1 on usage or config errors, 2 when the oracle
//! suite finds a violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vgan::config::{
    apply_overrides, parse_override, parse_run_config, parse_sweep_spec, ConfigError, RunConfig,
};
use vgan::exact::{OracleOptions, SoftmaxVariant};
use vgan::experiment::{
    read_file, replay_instance, run_ablate, run_oracle, run_sweep, run_train, sweep_summary_csv,
    with_jobs, ExperimentError,
};

#[derive(Parser)]
#[command(name = "vgan", version, about = "Variational GAN experiments on synthetic targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics, summary, samples and a checkpoint.
    Train(Common),
    /// Run the randomized collapse sweep described by a sweep spec.
    Sweep(Common),
    /// Run the exact finite-space property suite.
    Oracle(OracleArgs),
    /// Train the four ablation variants on a matched batch budget.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Config file (flat key = value).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct Shared {
    /// Seed; replaces `seed` (or `master_seed` for sweeps).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; replaces `out_dir`.
    #[arg(long, value_name = "PATH")]
    out_dir: Option<PathBuf>,
    /// Replace one config key, e.g. `clipping=off`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for parallel work. Results do not depend on it.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    shared: Shared,
    /// Re-check one serialized failing instance instead of running the suite.
    #[arg(long, value_name = "PATH")]
    replay: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Oracle,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

/// Config text with `--override`, `--seed` and `--out-dir` folded in, plus
/// the overrides to echo in the summary. The output directory is left out
/// of the echo so that summaries do not depend on where they are written.
fn load(path: &Path, shared: &Shared, seed_key: &str) -> Result<(String, Vec<String>), Failure> {
    let src = read_file(path)?;
    let mut overrides = shared.overrides.clone();
    if let Some(s) = shared.seed {
        // seeds beyond the signed range are written as strings
        overrides.push(if i64::try_from(s).is_ok() {
            format!("{seed_key}={s}")
        } else {
            format!("{seed_key}=\"{s}\"")
        });
    }
    let mut all = overrides.clone();
    if let Some(d) = &shared.out_dir {
        all.push(format!("out_dir={:?}", d.to_string_lossy()));
    }
    let text = apply_overrides(&src, &all).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok((text, overrides))
}

fn config_error(path: &Path, e: ConfigError) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn train_cmd(args: &Common) -> Result<(), Failure> {
    let (text, overrides) = load(&args.config, &args.shared, "seed")?;
    let config: RunConfig = parse_run_config(&text).map_err(|e| config_error(&args.config, e))?;
    let out = with_jobs(args.shared.jobs, || run_train(&config, &overrides))??;
    let s = out.record.summary(config.mode.name());
    let fe = s.final_eval.as_ref();
    println!(
        "iterations {} batches {} modes {}/{} sliced_w {} collapsed {}{}",
        s.iterations_completed,
        s.total_batches,
        fe.map_or(0, |e| e.modes_covered),
        fe.map_or(0, |e| e.n_modes),
        fe.and_then(|e| e.sliced_w).map_or("-".into(), |w| format!("{w:.4}")),
        s.collapsed,
        s.aborted.map(|a| format!(" (aborted: {a})")).unwrap_or_default()
    );
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn sweep_cmd(args: &Common) -> Result<(), Failure> {
    let (text, _) = load(&args.config, &args.shared, "master_seed")?;
    let spec = parse_sweep_spec(&text).map_err(|e| config_error(&args.config, e))?;
    let dir = spec.base.out_dir.clone();
    let out = with_jobs(args.shared.jobs, || run_sweep(&spec, &dir))??;
    print!("{}", sweep_summary_csv(&out.summary));
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(())
}

fn ablate_cmd(args: &Common) -> Result<(), Failure> {
    let (text, _) = load(&args.config, &args.shared, "seed")?;
    let config = parse_run_config(&text).map_err(|e| config_error(&args.config, e))?;
    let out = with_jobs(args.shared.jobs, || run_ablate(&config))??;
    println!("budget {} batches", out.budget);
    for (v, r) in &out.records {
        let fe = r.final_eval();
        println!(
            "{:<12} iterations {:>6} batches {:>7} modes {}",
            v.name(),
            r.iterations_completed,
            r.total_batches,
            fe.map_or(0, |e| e.modes_covered)
        );
    }
    println!("wrote {}", config.out_dir.join("comparison.csv").display());
    Ok(())
}

fn oracle_options(shared: &Shared) -> Result<OracleOptions, Failure> {
    let mut o = OracleOptions::default();
    if let Some(s) = shared.seed {
        o.seed = s;
    }
    for raw in &shared.overrides {
        let (k, v) = parse_override(raw)?;
        let bad = || Failure::Usage(format!("invalid oracle override `{raw}`"));
        match k.as_str() {
            "instances" => o.instances = v.as_integer().filter(|&i| i >= 0).ok_or_else(bad)? as usize,
            "max_outcomes" => {
                o.max_outcomes = v.as_integer().filter(|&i| (2..=4096).contains(&i)).ok_or_else(bad)? as usize
            }
            "seed" => o.seed = v.as_integer().filter(|&i| i >= 0).ok_or_else(bad)? as u64,
            "softmax" => {
                o.softmax = match v.as_str() {
                    Some("shifted") => SoftmaxVariant::Shifted,
                    Some("unshifted") => SoftmaxVariant::Unshifted,
                    _ => return Err(bad()),
                }
            }
            _ => {
                return Err(Failure::Usage(format!(
                    "unknown oracle key `{k}` (instances, max_outcomes, seed, softmax)"
                )))
            }
        }
    }
    Ok(o)
}

fn oracle_cmd(args: &OracleArgs) -> Result<(), Failure> {
    let options = oracle_options(&args.shared)?;
    if let Some(path) = &args.replay {
        let (lines, ok) = replay_instance(path, options.softmax)?;
        for l in lines {
            println!("{:<26} {}", l.property, l.outcome);
        }
        return if ok { Ok(()) } else { Err(Failure::Oracle) };
    }
    let dir = args.shared.out_dir.clone().unwrap_or_else(|| PathBuf::from("oracle-out"));
    let report = with_jobs(args.shared.jobs, || run_oracle(&options, &dir))??;
    for p in &report.properties {
        println!(
            "{:<26} passed {:>5} failed {:>5} skipped {:>5} worst {:.3e}{}",
            p.name,
            p.passed,
            p.failed,
            p.skipped,
            p.worst,
            if p.asserted { "" } else { " (reported only)" }
        );
    }
    println!("wrote {}", dir.join("oracle_report.json").display());
    if report.passed {
        println!("oracle: PASS ({} instances)", report.instances);
        Ok(())
    } else {
        println!(
            "oracle: FAIL, failing instances in {}",
            dir.join("failing").display()
        );
        Err(Failure::Oracle)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Oracle) => ExitCode::from(2),
    }
}
