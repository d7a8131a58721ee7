//! Loss terms, each as a plain evaluation over slices and as a tape builder.

use serde::{Deserialize, Serialize};

use crate::diffmath::{input_gradient_penalty, DiffError, Matrix, Tape, Var, NORM_EPS};
use crate::models::{categorical_probs, Mlp};

use super::TrainError;

/// Self-normalized importance weights over a fake batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    weights: Vec<f64>,
    log_z_hat: f64,
}

impl ImportanceWeights {
    /// Equal weights, i.e. the plain critic loss.
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
            log_z_hat: 0.0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Log of the Monte Carlo estimate `(1/n) sum_i exp(alpha f_i)`.
    pub fn log_z_hat(&self) -> f64 {
        self.log_z_hat
    }

    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }
}

/// `w_i = exp(alpha f_i) / sum_j exp(alpha f_j)`, computed with a max shift.
pub fn importance_weights(scores: &[f64], alpha: f64) -> ImportanceWeights {
    let scaled: Vec<f64> = scores.iter().map(|s| alpha * s).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    ImportanceWeights {
        weights: categorical_probs(&scaled),
        log_z_hat: lse - (scores.len() as f64).ln(),
    }
}

/// `mean(real) - sum_i w_i fake_i`, the critic's objective to maximize.
pub fn critic_objective(
    real_scores: &[f64],
    fake_scores: &[f64],
    weights: &ImportanceWeights,
) -> Result<f64, TrainError> {
    if weights.weights.len() != fake_scores.len() {
        return Err(TrainError::Length {
            what: "importance weights",
            expected: fake_scores.len(),
            got: weights.weights.len(),
        });
    }
    if real_scores.is_empty() {
        return Err(TrainError::Length {
            what: "real scores",
            expected: 1,
            got: 0,
        });
    }
    let real = real_scores.iter().sum::<f64>() / real_scores.len() as f64;
    let fake: f64 = weights.weights.iter().zip(fake_scores).map(|(w, f)| w * f).sum();
    Ok(real - fake)
}

/// Records the critic objective. With `weights`, the weights enter as
/// constants (no gradient flows through the normalization); without, the
/// fake term is a plain mean.
pub fn critic_objective_on_tape(
    tape: &mut Tape,
    real_scores: Var,
    fake_scores: Var,
    weights: Option<&ImportanceWeights>,
) -> Result<Var, DiffError> {
    let real = tape.mean(real_scores)?;
    let fake = match weights {
        Some(w) => {
            let wv = tape.leaf(Matrix::column(w.weights.clone()))?;
            let wf = tape.mul(wv, fake_scores)?;
            tape.sum(wf)?
        }
        None => tape.mean(fake_scores)?,
    };
    tape.sub(real, fake)
}

/// `lambda * mean (||grad_x f(x_hat)|| - 1)^2` over interpolates `x_hat`.
pub fn gradient_penalty_on_tape(
    tape: &mut Tape,
    critic: &Mlp,
    x_hat: Var,
    lambda: f64,
) -> Result<Var, DiffError> {
    let scores = critic.apply(tape, x_hat)?;
    let pen = input_gradient_penalty(tape, scores, x_hat, NORM_EPS)?;
    tape.scale(pen, lambda)
}

/// How a probability ratio was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMethod {
    Exact,
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioEstimate {
    pub ratios: Vec<f64>,
    pub method: RatioMethod,
}

impl RatioEstimate {
    pub fn mean(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len().max(1) as f64
    }

    /// Fraction of ratios strictly outside `[1 - eps, 1 + eps]`.
    pub fn clipped_fraction(&self, eps: f64) -> f64 {
        let n = self
            .ratios
            .iter()
            .filter(|&&r| r < 1.0 - eps || r > 1.0 + eps)
            .count();
        n as f64 / self.ratios.len().max(1) as f64
    }
}

/// `r = ((1 - C) C_old) / ((1 - C_old) C)` from clamped classifier outputs.
pub fn ratio_estimate(c_new: &[f64], c_old: &[f64]) -> Result<RatioEstimate, TrainError> {
    if c_new.len() != c_old.len() {
        return Err(TrainError::Length {
            what: "snapshot classifier outputs",
            expected: c_new.len(),
            got: c_old.len(),
        });
    }
    Ok(RatioEstimate {
        ratios: c_new
            .iter()
            .zip(c_old)
            .map(|(&c, &o)| ((1.0 - c) * o) / ((1.0 - o) * c))
            .collect(),
        method: RatioMethod::Classifier,
    })
}

pub fn ratio_on_tape(tape: &mut Tape, c_new: Var, c_old: Var) -> Result<Var, DiffError> {
    let one_minus_new = tape.affine(c_new, -1.0, 1.0)?;
    let num = tape.mul(one_minus_new, c_old)?;
    let one_minus_old = tape.affine(c_old, -1.0, 1.0)?;
    let den = tape.mul(one_minus_old, c_new)?;
    tape.div(num, den)
}

/// `mean_i min(r_i f_i, clip(r_i, 1 - eps, 1 + eps) f_i)`, to maximize.
pub fn clipped_surrogate(ratios: &[f64], scores: &[f64], eps: f64) -> Result<f64, TrainError> {
    if ratios.len() != scores.len() || ratios.is_empty() {
        return Err(TrainError::Length {
            what: "ratios",
            expected: scores.len(),
            got: ratios.len(),
        });
    }
    let s: f64 = ratios
        .iter()
        .zip(scores)
        .map(|(&r, &f)| {
            let a = r * f;
            let b = r.clamp(1.0 - eps, 1.0 + eps) * f;
            if a <= b {
                a
            } else {
                b
            }
        })
        .sum();
    Ok(s / ratios.len() as f64)
}

/// Per-sample `min(r f, clip(r) f)` (not yet averaged).
pub fn clipped_terms_on_tape(tape: &mut Tape, ratios: Var, scores: Var, eps: f64) -> Result<Var, DiffError> {
    let unclipped = tape.mul(ratios, scores)?;
    let r_clip = tape.clip(ratios, 1.0 - eps, 1.0 + eps)?;
    let clipped = tape.mul(r_clip, scores)?;
    tape.min(unclipped, clipped)
}

pub fn clipped_surrogate_on_tape(tape: &mut Tape, ratios: Var, scores: Var, eps: f64) -> Result<Var, DiffError> {
    let terms = clipped_terms_on_tape(tape, ratios, scores, eps)?;
    tape.mean(terms)
}

/// Binary cross-entropy with real labelled 1 and fake labelled 0, from
/// clamped probabilities.
pub fn bce_on_tape(tape: &mut Tape, p_real: Var, p_fake: Var) -> Result<Var, DiffError> {
    let lr = tape.log(p_real)?;
    let lr = tape.mean(lr)?;
    let one_minus = tape.affine(p_fake, -1.0, 1.0)?;
    let lf = tape.log(one_minus)?;
    let lf = tape.mean(lf)?;
    let s = tape.add(lr, lf)?;
    tape.neg(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn weights_examples() {
        let w = importance_weights(&[0.7; 5], 1.0);
        assert!(w.weights().iter().all(|&x| x == 0.2));
        assert!(close(w.log_z_hat(), 0.7, 1e-15));
        let w = importance_weights(&[0.0, 3f64.ln()], 1.0);
        assert!(close(w.weights()[0], 0.25, 1e-15) && close(w.weights()[1], 0.75, 1e-15));
        let w = importance_weights(&[1000.0, 1000.0 + 2f64.ln()], 1.0);
        assert!(close(w.weights()[0], 1.0 / 3.0, 1e-12) && close(w.weights()[1], 2.0 / 3.0, 1e-12));
    }

    #[test]
    fn critic_objective_examples() {
        let w = importance_weights(&[0.0, 3f64.ln()], 1.0);
        let v = critic_objective(&[1.0, 1.0], &[0.0, 3f64.ln()], &w).unwrap();
        // w = (1/4, 3/4): 1 - (3/4) ln 3
        assert!(close(v, 1.0 - 0.75 * 3f64.ln(), 1e-12), "{v}");
        let fake = [0.4; 4];
        let w = importance_weights(&fake, 1.0);
        let v = critic_objective(&[1.0, 2.0, 3.0], &fake, &w).unwrap();
        assert!(close(v, 2.0 - 0.4, 1e-12));
        let s = [0.3, -0.2, 1.5];
        let w = importance_weights(&[5.0, 5.0, 5.0], 1.0);
        assert!(close(critic_objective(&s, &s, &w).unwrap(), 0.0, 1e-15));
        assert!(critic_objective(&s, &s[..2], &w).is_err());
    }

    #[test]
    fn ratio_examples() {
        let r = ratio_estimate(&[0.3, 0.8], &[0.3, 0.8]).unwrap();
        assert!(r.ratios.iter().all(|&x| close(x, 1.0, 1e-15)));
        let r = ratio_estimate(&[0.25], &[0.5]).unwrap();
        assert_eq!(r.ratios, vec![3.0]);
        assert_eq!(r.method, RatioMethod::Classifier);
        let r = ratio_estimate(&[1.0 - 1e-7], &[0.5]).unwrap();
        assert!(r.ratios[0] < 1e-6);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(&[1.0], &[5.0], 0.2).unwrap(), 5.0);
        assert!(close(clipped_surrogate(&[1.5], &[1.0], 0.2).unwrap(), 1.2, 1e-15));
        assert!(close(clipped_surrogate(&[0.5], &[-2.0], 0.2).unwrap(), -1.6, 1e-15));
        assert!(clipped_surrogate(&[1.0, 1.0], &[1.0], 0.2).is_err());
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::column(vec![0.5; 4])).unwrap();
        let b = t.leaf(Matrix::column(vec![0.5; 4])).unwrap();
        let l = bce_on_tape(&mut t, a, b).unwrap();
        // per sample of each class: -ln 0.5; the loss sums the two class means
        assert!(close(t.scalar(l).unwrap(), 2.0 * std::f64::consts::LN_2, 1e-15));
    }

    fn surrogate_r_derivative(r: f64, f: f64, eps: f64) -> f64 {
        let mut t = Tape::new();
        let rv = t.leaf(Matrix::scalar(r)).unwrap();
        let fv = t.leaf(Matrix::scalar(f)).unwrap();
        let s = clipped_surrogate_on_tape(&mut t, rv, fv, eps).unwrap();
        t.grad(s, &[rv]).unwrap()[0].item().unwrap()
    }

    #[test]
    fn trust_region_derivatives() {
        assert_eq!(surrogate_r_derivative(1.5, 2.0, 0.2), 0.0);
        assert_eq!(surrogate_r_derivative(0.5, -2.0, 0.2), 0.0);
        assert_eq!(surrogate_r_derivative(1.5, -2.0, 0.2), -2.0);
        assert_eq!(surrogate_r_derivative(0.5, 2.0, 0.2), 2.0);
        assert_eq!(surrogate_r_derivative(1.1, 3.0, 0.2), 3.0);
    }

    proptest! {
        #[test]
        fn weights_normalized_and_ordered(
            scores in proptest::collection::vec(-50.0f64..50.0, 1..40),
            shift in -500.0f64..500.0,
            alpha in 0.1f64..3.0,
        ) {
            let w = importance_weights(&scores, alpha);
            let s: f64 = w.weights().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(w.weights().iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted: Vec<f64> = scores.iter().map(|x| x + shift).collect();
            let ws = importance_weights(&shifted, alpha);
            for (a, b) in w.weights().iter().zip(ws.weights()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300).max(1.0));
            }
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] > scores[j] && alpha * (scores[i] - scores[j]) > 1e-9 {
                        prop_assert!(w.weights()[i] > w.weights()[j]);
                    }
                }
            }
        }

        #[test]
        fn weights_permutation_equivariant(scores in proptest::collection::vec(-5.0f64..5.0, 2..20), k in 0usize..20) {
            let k = k % scores.len();
            let mut rot = scores.clone();
            rot.rotate_left(k);
            let mut w = importance_weights(&scores, 1.0).weights().to_vec();
            w.rotate_left(k);
            let wr = importance_weights(&rot, 1.0);
            for (a, b) in w.iter().zip(wr.weights()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn surrogate_dominance(r in 0.0f64..3.0, f in -5.0f64..5.0, eps in 0.05f64..0.9) {
            let s = clipped_surrogate(&[r], &[f], eps).unwrap();
            prop_assert!(s <= r * f);
            prop_assert!(s <= r.clamp(1.0 - eps, 1.0 + eps) * f);
            if (1.0 - eps..=1.0 + eps).contains(&r) {
                prop_assert_eq!(s, r * f);
            }
        }

        #[test]
        fn tape_matches_plain(
            r in proptest::collection::vec(0.1f64..3.0, 5),
            f in proptest::collection::vec(-5.0f64..5.0, 5),
        ) {
            let mut t = Tape::new();
            let rv = t.leaf(Matrix::column(r.clone())).unwrap();
            let fv = t.leaf(Matrix::column(f.clone())).unwrap();
            let s = clipped_surrogate_on_tape(&mut t, rv, fv, 0.2).unwrap();
            let plain = clipped_surrogate(&r, &f, 0.2).unwrap();
            prop_assert!((t.scalar(s).unwrap() - plain).abs() <= 1e-12);
        }
    }
}
