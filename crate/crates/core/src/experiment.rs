//! File-producing drivers behind the command line tool. Every artifact is a
//! pure function of its inputs: rows are written in a canonical order and no
//! timestamps or timings are recorded.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{serialize_run_config, ConfigError, Mode, RunConfig, SweepSpec, Variant};
use crate::exact::{
    check_instance, run_oracle_suite, train_exact, Check, OracleInstance, OracleOptions, OracleReport,
    SoftmaxVariant, PROPERTIES,
};
use crate::models::encode_checkpoint;
use crate::rng::{derive_seed, stream};
use crate::vgan::{train, write_metrics_csv, write_samples_csv, TrainError, TrainingConfig, TrainingRecord};

pub const SWEEP_HEADER: &str = "# vgan sweep v1";
pub const SWEEP_SUMMARY_HEADER: &str = "# vgan sweep summary v1";
pub const COMPARISON_HEADER: &str = "# vgan comparison v1";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), ExperimentError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
{
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Runs `f` on a pool of `jobs` threads, or on the global pool when `None`.
/// Outputs never depend on the thread count.
pub fn with_jobs<T: Send>(
    jobs: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, ExperimentError> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| ExperimentError::Pool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn run_engine(mode: Mode, config: &TrainingConfig, dist: &crate::data::DistSpec) -> Result<TrainingRecord, TrainError> {
    match mode {
        Mode::Neural => train(config, dist),
        Mode::Exact => train_exact(config, dist),
    }
}

fn summary_json(record: &TrainingRecord, mode: Mode, overrides: &[String]) -> Result<serde_json::Value, ExperimentError> {
    let mut v = serde_json::to_value(record.summary(mode.name()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("overrides".into(), serde_json::to_value(overrides)?);
    }
    Ok(v)
}

/// What `train` produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub record: TrainingRecord,
    pub files: Vec<PathBuf>,
}

/// Trains once and writes `config.toml`, `metrics.csv`, `summary.json`,
/// `samples.csv` and `checkpoint.bin` into `config.out_dir`.
pub fn run_train(config: &RunConfig, overrides: &[String]) -> Result<TrainOutcome, ExperimentError> {
    let record = run_engine(config.mode, &config.training, &config.dist)?;
    let dir = &config.out_dir;
    create_dir(dir)?;
    let mut files = Vec::new();

    let p = dir.join("config.toml");
    fs::write(&p, serialize_run_config(config)).map_err(io_err(&p))?;
    files.push(p);
    let p = dir.join("metrics.csv");
    write_with(&p, |w| write_metrics_csv(&record, w))?;
    files.push(p);
    let p = dir.join("summary.json");
    write_json(&p, &summary_json(&record, config.mode, overrides)?)?;
    files.push(p);
    if let Some(samples) = &record.final_samples {
        let p = dir.join("samples.csv");
        write_with(&p, |w| write_samples_csv(samples, w))?;
        files.push(p);
    }
    if let Some(ckpt) = &record.checkpoint {
        let p = dir.join("checkpoint.bin");
        fs::write(&p, encode_checkpoint(ckpt)).map_err(io_err(&p))?;
        files.push(p);
    }
    Ok(TrainOutcome { record, files })
}

// ---------------------------------------------------------------------------
// sweep

/// Hyperparameters drawn for one trial, shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialDraw {
    pub lr: f64,
    pub batch_size: usize,
    pub activation: crate::models::Activation,
    pub width: usize,
}

pub fn draw_trial(spec: &SweepSpec, trial: usize) -> TrialDraw {
    let mut rng = stream(derive_seed(spec.master_seed, &[trial as u64]));
    let (lo, hi) = (spec.lr_min.ln(), spec.lr_max.ln());
    let lr = if hi > lo { rng.random_range(lo..hi).exp() } else { spec.lr_min };
    TrialDraw {
        lr,
        batch_size: spec.batch_sizes[rng.random_range(0..spec.batch_sizes.len())],
        activation: spec.activations[rng.random_range(0..spec.activations.len())],
        width: spec.widths[rng.random_range(0..spec.widths.len())],
    }
}

/// The training config of one (trial, variant) cell.
pub fn trial_config(spec: &SweepSpec, trial: usize, variant: Variant) -> TrainingConfig {
    let d = draw_trial(spec, trial);
    let base = &spec.base.training;
    TrainingConfig {
        lr_critic: d.lr,
        lr_generator: d.lr / 2.0,
        batch_size: d.batch_size,
        activation: d.activation,
        hidden: vec![d.width; base.hidden.len()],
        seed: derive_seed(spec.master_seed, &[trial as u64, variant.index()]),
        ..variant.apply(base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub trial: usize,
    pub variant: Variant,
    pub collapsed: bool,
    pub modes_covered: usize,
    pub sliced_w: Option<f64>,
    pub draw: TrialDraw,
    /// Set when the trial failed before training started.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub trials: usize,
    pub collapsed: usize,
    pub collapse_rate: f64,
    pub mean_coverage: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<VariantSummary>,
}

fn run_trial(spec: &SweepSpec, trial: usize, variant: Variant, dir: &Path) -> Result<SweepRow, ExperimentError> {
    let config = trial_config(spec, trial, variant);
    let draw = draw_trial(spec, trial);
    let row = match run_engine(spec.base.mode, &config, &spec.base.dist) {
        Ok(record) => {
            let s = record.summary(spec.base.mode.name());
            let sub = dir.join(format!("trial-{trial:04}-{}", variant.name()));
            create_dir(&sub)?;
            write_json(&sub.join("summary.json"), &s)?;
            let fe = s.final_eval.as_ref();
            SweepRow {
                trial,
                variant,
                collapsed: s.collapsed || s.aborted.is_some(),
                modes_covered: fe.map_or(0, |e| e.modes_covered),
                sliced_w: fe.and_then(|e| e.sliced_w),
                draw,
                error: None,
            }
        }
        Err(e) => SweepRow {
            trial,
            variant,
            collapsed: true,
            modes_covered: 0,
            sliced_w: None,
            draw,
            error: Some(e.to_string()),
        },
    };
    Ok(row)
}

pub fn summarize_sweep(spec: &SweepSpec, rows: &[SweepRow]) -> Vec<VariantSummary> {
    if spec.trials == 0 {
        return Vec::new();
    }
    spec.variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.variant == variant).collect();
            let n = mine.len();
            let collapsed = mine.iter().filter(|r| r.collapsed).count();
            let cov: usize = mine.iter().map(|r| r.modes_covered).sum();
            VariantSummary {
                variant,
                trials: n,
                collapsed,
                collapse_rate: collapsed as f64 / n.max(1) as f64,
                mean_coverage: cov as f64 / n.max(1) as f64,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{SWEEP_HEADER}\ntrial,variant,collapsed,modes_covered,sliced_w,lr_critic,batch_size,activation,width\n"
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.trial,
            r.variant.name(),
            r.collapsed,
            r.modes_covered,
            opt(r.sliced_w),
            r.draw.lr,
            r.draw.batch_size,
            r.draw.activation.name(),
            r.draw.width
        )
        .expect("writing to a String");
    }
    s
}

pub fn sweep_summary_csv(summary: &[VariantSummary]) -> String {
    let mut s = format!("{SWEEP_SUMMARY_HEADER}\nvariant,trials,collapsed,collapse_rate,mean_coverage\n");
    for v in summary {
        writeln!(
            s,
            "{},{},{},{},{}",
            v.variant.name(),
            v.trials,
            v.collapsed,
            v.collapse_rate,
            v.mean_coverage
        )
        .expect("writing to a String");
    }
    s
}

/// Runs every (trial, variant) cell in parallel and writes `sweep.csv`,
/// `sweep_summary.csv` and one `trials/trial-NNNN-VARIANT/summary.json` per
/// cell. Rows are sorted by trial, then variant.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path) -> Result<SweepOutcome, ExperimentError> {
    spec.validate()?;
    let trials_dir = out_dir.join("trials");
    create_dir(&trials_dir)?;
    let cells: Vec<(usize, Variant)> = (0..spec.trials)
        .flat_map(|t| spec.variants.iter().map(move |&v| (t, v)))
        .collect();
    let mut rows = cells
        .par_iter()
        .map(|&(t, v)| run_trial(spec, t, v, &trials_dir))
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by_key(|r| (r.trial, r.variant));
    let summary = summarize_sweep(spec, &rows);
    let p = out_dir.join("sweep.csv");
    fs::write(&p, sweep_csv(&rows)).map_err(io_err(&p))?;
    let p = out_dir.join("sweep_summary.csv");
    fs::write(&p, sweep_summary_csv(&summary)).map_err(io_err(&p))?;
    Ok(SweepOutcome { rows, summary })
}

// ---------------------------------------------------------------------------
// oracle

/// Runs the property suite and writes `oracle_report.json`. Each failing
/// instance is also written to `failing/instance-NNNNN.json` for replay.
pub fn run_oracle(options: &OracleOptions, out_dir: &Path) -> Result<OracleReport, ExperimentError> {
    let report = run_oracle_suite(options);
    create_dir(out_dir)?;
    write_json(&out_dir.join("oracle_report.json"), &report)?;
    if !report.failures.is_empty() {
        let dir = out_dir.join("failing");
        create_dir(&dir)?;
        let mut seen = std::collections::BTreeSet::new();
        for f in &report.failures {
            if seen.insert(f.instance.id) {
                write_json(&dir.join(format!("instance-{:05}.json", f.instance.id)), &f.instance)?;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayLine {
    pub property: String,
    pub asserted: bool,
    pub outcome: String,
    pub error: Option<f64>,
}

/// Re-checks one serialized instance. Returns per-property lines and whether
/// every asserted property passed.
pub fn replay_instance(path: &Path, softmax: SoftmaxVariant) -> Result<(Vec<ReplayLine>, bool), ExperimentError> {
    let inst: OracleInstance = serde_json::from_str(&read_file(path)?)?;
    let checks = check_instance(&inst, softmax);
    let mut ok = true;
    let lines = PROPERTIES
        .iter()
        .zip(checks)
        .map(|(p, c)| {
            let (outcome, error) = match c {
                Check::Pass(e) => ("pass".to_string(), Some(e)),
                Check::Skip => ("skip".to_string(), None),
                Check::Fail(e, d) => {
                    ok &= !p.asserted;
                    (format!("fail: {d}"), e.is_finite().then_some(e))
                }
            };
            ReplayLine {
                property: p.name.to_string(),
                asserted: p.asserted,
                outcome,
                error,
            }
        })
        .collect();
    Ok((lines, ok))
}

// ---------------------------------------------------------------------------
// ablation

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    /// Total batches each variant was allowed.
    pub budget: usize,
    pub records: Vec<(Variant, TrainingRecord)>,
}

/// Iterations that fit `budget` batches under `config`'s schedule.
pub fn iterations_for_budget(config: &TrainingConfig, budget: usize) -> usize {
    budget / config.batches_per_iteration()
}

pub fn comparison_csv(records: &[(Variant, TrainingRecord)]) -> String {
    let mut s = format!(
        "{COMPARISON_HEADER}\nvariant,iter,batches,modes_covered,n_modes,high_quality_fraction,sliced_w,exact_kl\n"
    );
    for (v, r) in records {
        for e in &r.evals {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                v.name(),
                e.iter,
                e.batches,
                e.modes_covered,
                e.n_modes,
                e.high_quality_fraction,
                opt(e.sliced_w),
                opt(e.exact_kl)
            )
            .expect("writing to a String");
        }
    }
    s
}

/// Trains the four variants with the total-batch budget of the full method
/// under the base config (`iterations * (n_critic + n_gen)`), writing
/// `VARIANT/metrics.csv`, `VARIANT/summary.json` and `comparison.csv`.
pub fn run_ablate(config: &RunConfig) -> Result<AblationOutcome, ExperimentError> {
    let base = &config.training;
    let budget = base.iterations * Variant::Full.apply(base).batches_per_iteration();
    let records = Variant::ALL
        .par_iter()
        .map(|&v| {
            let mut c = v.apply(base);
            c.iterations = iterations_for_budget(&c, budget);
            run_engine(config.mode, &c, &config.dist).map(|r| (v, r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dir = &config.out_dir;
    for (v, r) in &records {
        let sub = dir.join(v.name());
        create_dir(&sub)?;
        write_with(&sub.join("metrics.csv"), |w| write_metrics_csv(r, w))?;
        write_json(&sub.join("summary.json"), &r.summary(config.mode.name()))?;
    }
    let p = dir.join("comparison.csv");
    fs::write(&p, comparison_csv(&records)).map_err(io_err(&p))?;
    Ok(AblationOutcome { budget, records })
}
