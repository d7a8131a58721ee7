//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Operations are recorded on a [`Tape`] and evaluated eagerly. Backward
//! passes are themselves recorded as tape nodes, so any gradient can be fed
//! into further computation and differentiated again. That is all the
//! second-order machinery needed for an input-gradient penalty.
//!
//! ```
//! use vgan::diffmath::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0)).unwrap();
//! let y = tape.square(x).unwrap();
//! let g = tape.grad(y, &[x]).unwrap();
//! assert_eq!(g[0].item(), Some(6.0));
//! ```

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Tape, Var};

pub(crate) use tape::sigmoid;

use thiserror::Error;

use crate::models::{Mlp, MlpSpec, ModelParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar output, got {rows}x{cols}")]
    NonScalar { rows: usize, cols: usize },
    #[error("node {0} does not influence the output")]
    Detached(usize),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf and cannot be replaced on replay")]
    NotALeaf(usize),
    #[error("input gradient norm is exactly zero; use a positive norm-smoothing epsilon")]
    DegenerateGradient,
    #[error("finite-difference step {0} outside [1e-6, 1e-4]")]
    InvalidStep(f64),
}

/// Gradient aligned one-to-one with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    values: Vec<f64>,
}

impl Grad {
    pub fn new(values: Vec<f64>) -> Result<Self, DiffError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "grad" });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Norm smoothing used inside the gradient penalty.
pub const NORM_EPS: f64 = 1e-12;

/// Records `mean_i (||d scores_i / d x_i|| - 1)^2` for per-sample scores
/// `scores` (`n x 1`) of inputs `x` (`n x d`), where each score depends only
/// on its own row of `x`.
///
/// The row norm is `sqrt(sum v^2 + eps)`. With `eps == 0` a row whose input
/// gradient is exactly zero is rejected, since the norm has no derivative
/// there.
pub fn input_gradient_penalty(
    tape: &mut Tape,
    scores: Var,
    x: Var,
    eps: f64,
) -> Result<Var, DiffError> {
    let total = tape.sum(scores)?;
    let gx = tape.gradients(total, &[x])?[0].ok_or(DiffError::Detached(x.index()))?;
    if eps == 0.0 {
        let g = tape.value(gx);
        if (0..g.rows()).any(|r| g.row_slice(r).iter().all(|&v| v == 0.0)) {
            return Err(DiffError::DegenerateGradient);
        }
    }
    let norms = tape.row_norm(gx, eps)?;
    let dev = tape.add_scalar(norms, -1.0)?;
    let sq = tape.square(dev)?;
    tape.mean(sq)
}

/// Parameter gradient of the critic penalty `mean (||grad_x f(x)|| - 1)^2`
/// evaluated at the rows of `x`. Returns the penalty value and its gradient.
pub fn grad_through_input_grad(
    spec: &MlpSpec,
    params: &ModelParams,
    x: &Matrix,
    eps: f64,
) -> Result<(f64, Grad), DiffError> {
    let mut tape = Tape::new();
    let critic = Mlp::bind(&mut tape, spec, params)?;
    let xv = tape.leaf(x.clone())?;
    let scores = critic.apply(&mut tape, xv)?;
    let pen = input_gradient_penalty(&mut tape, scores, xv, eps)?;
    let value = tape.scalar(pen)?;
    let grad = critic.grad(&mut tape, pen, true)?;
    Ok((value, grad))
}

/// Largest relative disagreement between `analytic` and central differences
/// of `loss` around `params`.
///
/// Each coordinate's error is `|analytic - fd| / (max(|analytic|, floor) +
/// 1e-12)` with `floor = 1e-3 * max_j |analytic_j|`. The floor keeps
/// coordinates whose true derivative is structurally zero (for instance an
/// output bias under normalized weights) from being judged on rounding noise
/// alone.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64, DiffError>
where
    F: FnMut(&[f64]) -> Result<f64, DiffError>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(DiffError::InvalidStep(h));
    }
    if params.len() != analytic.len() {
        return Err(DiffError::Shape {
            op: "finite_diff_check",
            lhs: (params.len(), 1),
            rhs: (analytic.len(), 1),
        });
    }
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = loss(&probe)?;
        probe[i] = params[i] - h;
        let down = loss(&probe)?;
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(DiffError::NonFinite { op: "finite_diff_check" });
        }
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / (analytic[i].abs().max(floor) + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
