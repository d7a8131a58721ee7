//! Per-batch training logs, evaluation snapshots and their file formats.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::data::DistSpec;
use crate::diffmath::Matrix;
use crate::metrics::{collapse_report, CollapseReport};
use crate::models::Checkpoint;

use super::TrainingConfig;

pub const METRICS_HEADER: &str = "# vgan metrics v1";
pub const SAMPLES_HEADER: &str = "# vgan samples v1";
const METRICS_COLUMNS: &str = "iter,phase,critic_loss,gen_loss,gp,weight_entropy,grad_norm_phi,grad_norm_theta,ratio_mean,ratio_clipped_frac";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Critic,
    Generator,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Critic => "critic",
            Phase::Generator => "generator",
        }
    }
}

/// One logged batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: usize,
    pub phase: Phase,
    pub critic_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub gp: Option<f64>,
    pub weight_entropy: Option<f64>,
    pub grad_norm_phi: Option<f64>,
    pub grad_norm_theta: Option<f64>,
    pub ratio_mean: Option<f64>,
    pub ratio_clipped_frac: Option<f64>,
    /// Classifier loss before its step; not a CSV column.
    pub classifier_bce: Option<f64>,
}

impl StepLog {
    pub fn new(iter: usize, phase: Phase) -> Self {
        Self {
            iter,
            phase,
            critic_loss: None,
            gen_loss: None,
            gp: None,
            weight_entropy: None,
            grad_norm_phi: None,
            grad_norm_theta: None,
            ratio_mean: None,
            ratio_clipped_frac: None,
            classifier_bce: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    /// Outer iterations completed when the snapshot was taken.
    pub iter: usize,
    pub batches: usize,
    pub modes_covered: usize,
    pub n_modes: usize,
    pub high_quality_fraction: f64,
    pub sliced_w: Option<f64>,
    /// `KL(p_r || p_theta)`, exact engine only.
    pub exact_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub config: TrainingConfig,
    pub dist: DistSpec,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalSnapshot>,
    /// Diagnostic of a run stopped by a non-finite value.
    pub aborted: Option<String>,
    pub stopped_on_collapse: bool,
    pub iterations_completed: usize,
    pub total_batches: usize,
    pub final_samples: Option<Matrix>,
    pub checkpoint: Option<Checkpoint>,
}

impl TrainingRecord {
    pub fn new(config: TrainingConfig, dist: DistSpec) -> Self {
        Self {
            config,
            dist,
            steps: Vec::new(),
            evals: Vec::new(),
            aborted: None,
            stopped_on_collapse: false,
            iterations_completed: 0,
            total_batches: 0,
            final_samples: None,
            checkpoint: None,
        }
    }

    pub fn critic_losses(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.critic_loss).collect()
    }

    pub fn gen_losses(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.gen_loss).collect()
    }

    pub fn final_eval(&self) -> Option<&EvalSnapshot> {
        self.evals.last()
    }

    pub fn summary(&self, engine: &str) -> Summary {
        let collapse = collapse_report(self, &self.config.collapse);
        Summary {
            format: "vgan summary v1".into(),
            engine: engine.into(),
            config: self.config.clone(),
            dist: self.dist.clone(),
            lambda_gp: self.config.lambda_gp,
            reweighting: self.config.reweighting,
            clipping: self.config.clipping,
            iterations_completed: self.iterations_completed,
            total_batches: self.total_batches,
            aborted: self.aborted.clone(),
            stopped_on_collapse: self.stopped_on_collapse,
            collapsed: collapse.collapsed,
            collapse,
            final_eval: self.final_eval().cloned(),
            evals: self.evals.clone(),
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub engine: String,
    pub config: TrainingConfig,
    pub dist: DistSpec,
    pub lambda_gp: f64,
    pub reweighting: bool,
    pub clipping: bool,
    pub iterations_completed: usize,
    pub total_batches: usize,
    pub aborted: Option<String>,
    pub stopped_on_collapse: bool,
    pub collapsed: bool,
    pub collapse: CollapseReport,
    pub final_eval: Option<EvalSnapshot>,
    pub evals: Vec<EvalSnapshot>,
}

fn cell(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        // shortest round-trip representation, stable across runs
        write!(out, "{v}").expect("writing to a String");
    }
}

/// Writes the versioned header, the column line and one row per batch.
pub fn write_metrics_csv<W: Write>(record: &TrainingRecord, mut w: W) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    writeln!(w, "{METRICS_COLUMNS}")?;
    let mut line = String::new();
    for s in &record.steps {
        line.clear();
        write!(line, "{},{}", s.iter, s.phase.name()).expect("writing to a String");
        for v in [
            s.critic_loss,
            s.gen_loss,
            s.gp,
            s.weight_entropy,
            s.grad_norm_phi,
            s.grad_norm_theta,
            s.ratio_mean,
            s.ratio_clipped_frac,
        ] {
            cell(&mut line, v);
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes one generated point per row, columns `x0, x1, ...`.
pub fn write_samples_csv<W: Write>(samples: &Matrix, mut w: W) -> io::Result<()> {
    writeln!(w, "{SAMPLES_HEADER}")?;
    let cols: Vec<String> = (0..samples.cols()).map(|c| format!("x{c}")).collect();
    writeln!(w, "{}", cols.join(","))?;
    for r in 0..samples.rows() {
        let row: Vec<String> = samples.row_slice(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_layout() {
        let mut rec = TrainingRecord::new(TrainingConfig::default(), DistSpec::default());
        rec.steps.push(StepLog {
            critic_loss: Some(-0.5),
            gp: Some(0.25),
            ..StepLog::new(0, Phase::Critic)
        });
        rec.steps.push(StepLog {
            gen_loss: Some(1.0),
            ratio_mean: Some(1.0),
            ratio_clipped_frac: Some(0.0),
            ..StepLog::new(0, Phase::Generator)
        });
        let mut buf = Vec::new();
        write_metrics_csv(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1].split(',').count(), 10);
        assert_eq!(lines[2], "0,critic,-0.5,,0.25,,,,,");
        assert_eq!(lines[3], "0,generator,,1,,,,,1,0");
    }

    #[test]
    fn samples_csv_layout() {
        let m = Matrix::new(2, 2, vec![0.5, -1.0, 2.0, 0.125]);
        let mut buf = Vec::new();
        write_samples_csv(&m, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# vgan samples v1\nx0,x1\n0.5,-1\n2,0.125\n"
        );
    }
}
