//! The training algorithm: importance re-weighted critic steps with a
//! gradient penalty, ratio-clipped generator steps, a real/fake classifier
//! that supplies the ratios, and the outer loop with its ablation switches.

mod losses;
mod optim;
mod record;
mod reference;
mod trainer;

pub use losses::{
    bce_on_tape, clipped_surrogate, clipped_surrogate_on_tape, clipped_terms_on_tape,
    critic_objective, critic_objective_on_tape, gradient_penalty_on_tape, importance_weights,
    ratio_estimate, ratio_on_tape, ImportanceWeights, RatioEstimate, RatioMethod,
};
pub use optim::{annealed_lr, Adam, ADAM_EPS};
pub use record::{
    write_metrics_csv, write_samples_csv, EvalSnapshot, Phase, StepLog, Summary, TrainingRecord,
    METRICS_HEADER,
};
pub use reference::{reference_wgan_gp, ReferenceRun};
pub use trainer::{
    coverage_radius, critic_loss_grad, default_min_count, generator_loss_grad, gradient_penalty, train,
    ClassifierInputs, CriticEval, GenEval, TrainerState, WeightMode, FINAL_SAMPLES,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::diffmath::DiffError;
use crate::metrics::{CollapseCriteria, MetricsError};
use crate::models::{Activation, ModelError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Clip range of the probability ratio.
    pub epsilon: f64,
    /// Inverse temperature on critic scores inside the importance weights.
    pub alpha: f64,
    pub n_critic: usize,
    pub n_gen: usize,
    pub lambda_gp: f64,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub anneal: bool,
    pub batch_size: usize,
    /// Outer iterations.
    pub iterations: usize,
    pub seed: u64,
    pub reweighting: bool,
    pub clipping: bool,
    /// Draw generator-step samples from the snapshot generator instead of the
    /// current one. Only meaningful for the exact engine.
    pub sample_from_old: bool,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Evaluate every this many outer iterations (and always at the start
    /// and the end).
    pub eval_every: usize,
    pub eval_samples: usize,
    pub sliced_projections: usize,
    pub abort_on_collapse: bool,
    pub collapse: CollapseCriteria,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            alpha: 1.0,
            n_critic: 5,
            n_gen: 5,
            lambda_gp: 10.0,
            lr_generator: 5e-5,
            lr_critic: 1e-4,
            lr_classifier: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            anneal: true,
            batch_size: 256,
            iterations: 3000,
            seed: 0,
            reweighting: true,
            clipping: true,
            sample_from_old: false,
            latent_dim: 2,
            hidden: vec![64, 64],
            activation: Activation::LeakyRelu(0.2),
            eval_every: 500,
            eval_samples: 4096,
            sliced_projections: 64,
            abort_on_collapse: false,
            collapse: CollapseCriteria::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), TrainError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(TrainError::InvalidConfig(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        positive("alpha", self.alpha)?;
        if self.n_critic == 0 || self.n_gen == 0 {
            return bad("n_critic and n_gen must be >= 1".into());
        }
        if !(self.lambda_gp.is_finite() && self.lambda_gp >= 0.0) {
            return bad(format!("lambda_gp must be finite and >= 0, got {}", self.lambda_gp));
        }
        positive("lr_generator", self.lr_generator)?;
        positive("lr_critic", self.lr_critic)?;
        positive("lr_classifier", self.lr_classifier)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be non-empty and positive, got {:?}", self.hidden));
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !s.is_finite() {
                return bad("leaky slope must be finite".into());
            }
        }
        if self.eval_every == 0 || self.eval_samples == 0 || self.sliced_projections == 0 {
            return bad("eval_every, eval_samples and sliced_projections must be >= 1".into());
        }
        self.collapse.validate()?;
        Ok(())
    }

    /// Generator plus critic batches consumed by one outer iteration.
    pub fn batches_per_iteration(&self) -> usize {
        self.n_critic + self.n_gen
    }
}
