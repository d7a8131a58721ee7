//! Exact computations on finite sample spaces: the closed-form auxiliary
//! distribution `q`, the variational objective, KL divergences and their gap
//! bound, EM steps, Bayes-optimal classifiers and exact ratios. Everything is
//! a dense sum, so each quantity doubles as an oracle for its sampled
//! counterpart.

mod oracle;
mod train;

pub use oracle::{
    check_instance, generate_instance, run_oracle_suite, Check, OracleFailure, OracleInstance,
    OracleOptions, OracleReport, Property, PropertyResult, SoftmaxVariant, PROPERTIES,
};
pub use train::{exact_surrogate_loss_grad, train_exact};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Matrix, Tape, Var};
use crate::models::categorical_probs;
use crate::vgan::{RatioEstimate, RatioMethod};

/// Largest outcome count accepted by the oracle engine.
pub const MAX_OUTCOMES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExactError {
    #[error("invalid finite space: {0}")]
    Invalid(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("support violation at outcome {0}")]
    Support(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

fn check_pmf(name: &str, p: &[f64]) -> Result<(), ExactError> {
    if p.is_empty() || p.len() > MAX_OUTCOMES {
        return Err(ExactError::Invalid(format!("{name} must have 1..={MAX_OUTCOMES} entries")));
    }
    if p.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(ExactError::Invalid(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 * p.len().max(1) as f64 {
        return Err(ExactError::Invalid(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// Real pmf, generator logits and critic scores over `K` outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSpace {
    p_r: Vec<f64>,
    logits: Vec<f64>,
    p_theta: Vec<f64>,
    f: Vec<f64>,
}

impl FiniteSpace {
    pub fn new(p_r: Vec<f64>, logits: Vec<f64>, f: Vec<f64>) -> Result<Self, ExactError> {
        check_pmf("p_r", &p_r)?;
        if logits.len() != p_r.len() {
            return Err(ExactError::Length(logits.len(), p_r.len()));
        }
        if f.len() != p_r.len() {
            return Err(ExactError::Length(f.len(), p_r.len()));
        }
        if logits.iter().chain(&f).any(|v| !v.is_finite()) {
            return Err(ExactError::Invalid("logits and scores must be finite".into()));
        }
        let p_theta = categorical_probs(&logits);
        Ok(Self {
            p_r,
            logits,
            p_theta,
            f,
        })
    }

    pub fn k(&self) -> usize {
        self.p_r.len()
    }

    pub fn p_r(&self) -> &[f64] {
        &self.p_r
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn p_theta(&self) -> &[f64] {
        &self.p_theta
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn with_f(&self, f: Vec<f64>) -> Result<Self, ExactError> {
        Self::new(self.p_r.clone(), self.logits.clone(), f)
    }

    /// Replaces the generator with an EM update, keeping its pmf verbatim.
    pub fn with_generator(&self, update: GeneratorUpdate) -> Result<Self, ExactError> {
        if update.p_theta.len() != self.k() || update.logits.len() != self.k() {
            return Err(ExactError::Length(update.p_theta.len(), self.k()));
        }
        Ok(Self {
            logits: update.logits,
            p_theta: update.p_theta,
            ..self.clone()
        })
    }
}

/// The closed-form maximizer `q ∝ p_theta exp(alpha f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QDist {
    pub q: Vec<f64>,
    pub log_z: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn exact_q(space: &FiniteSpace, alpha: f64) -> QDist {
    let l: Vec<f64> = space
        .p_theta
        .iter()
        .zip(&space.f)
        .map(|(&p, &f)| p.ln() + alpha * f)
        .collect();
    let log_z = log_sum_exp(&l);
    let mut q: Vec<f64> = l.iter().map(|v| (v - log_z).exp()).collect();
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= s);
    QDist { q, log_z }
}

/// `KL(p || q) = sum p ln(p / q)` with `0 ln(0 / q) = 0`.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64, ExactError> {
    if p.len() != q.len() {
        return Err(ExactError::Length(p.len(), q.len()));
    }
    let mut s = 0.0;
    for (k, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Err(ExactError::Support(k));
        }
        s += a * (a / b).ln();
    }
    Ok(s)
}

/// `alpha E_q[f] - KL(q || p_theta)`. At `q = exact_q(space, alpha)` this
/// equals `log Z`.
pub fn variational_objective(space: &FiniteSpace, q: &[f64], alpha: f64) -> Result<f64, ExactError> {
    if q.len() != space.k() {
        return Err(ExactError::Length(q.len(), space.k()));
    }
    let e: f64 = q.iter().zip(&space.f).map(|(a, b)| a * b).sum();
    Ok(alpha * e - exact_kl(q, &space.p_theta)?)
}

/// KL asymmetry of `q` against `p_theta` next to its bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBound {
    /// `KL(q || p) - KL(p || q)`.
    pub signed_gap: f64,
    /// `|KL(q || p) - KL(p || q)|`.
    pub gap: f64,
    /// `2 alpha (a + b)` with `-a <= f <= b`, `a, b >= 0` tightest.
    pub bound: f64,
    /// The proven direction: `signed_gap <= bound`.
    pub holds: bool,
    /// The symmetric reading: `gap <= bound`.
    pub symmetric_holds: bool,
}

pub fn reverse_kl_gap_bound(space: &FiniteSpace, alpha: f64) -> Result<GapBound, ExactError> {
    let q = exact_q(space, alpha);
    let fwd = exact_kl(&q.q, &space.p_theta)?;
    let rev = exact_kl(&space.p_theta, &q.q)?;
    let lo = space.f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = space.f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = ((-lo).max(0.0), hi.max(0.0));
    let bound = 2.0 * alpha * (a + b);
    let signed_gap = fwd - rev;
    // rounding slack relative to the KL magnitudes
    let slack = 1e-12 * (1.0 + fwd.abs() + rev.abs());
    Ok(GapBound {
        signed_gap,
        gap: signed_gap.abs(),
        bound,
        holds: signed_gap <= bound + slack,
        symmetric_holds: signed_gap.abs() <= bound + slack,
    })
}

/// Which divergence the M-step minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MStep {
    /// `KL(q || p_theta)`: the unconstrained optimum is `p_theta = q`.
    ForwardKl,
    /// `KL(p_theta || q)` by gradient descent on the logits.
    ReverseKl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorUpdate {
    pub logits: Vec<f64>,
    pub p_theta: Vec<f64>,
}

/// Records `softmax(logits)` and its log on a tape for a `1 x K` row.
pub(crate) fn softmax_on_tape(tape: &mut Tape, logits: Var) -> Result<(Var, Var), DiffError> {
    let k = tape.value(logits).len();
    let max = tape.value(logits).as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = tape.add_scalar(logits, -max)?;
    let e = tape.exp(z)?;
    let s = tape.sum(e)?;
    let ls = tape.log(s)?;
    let ls = tape.fill(ls, 1, k)?;
    let logp = tape.sub(z, ls)?;
    let p = tape.exp(logp)?;
    Ok((p, logp))
}

/// `KL(softmax(logits) || q)` and its gradient in the logits.
pub fn reverse_kl_grad(logits: &[f64], q: &[f64]) -> Result<(f64, Vec<f64>), ExactError> {
    if logits.len() != q.len() {
        return Err(ExactError::Length(logits.len(), q.len()));
    }
    if let Some(k) = q.iter().position(|&v| !(v > 0.0)) {
        return Err(ExactError::Support(k));
    }
    let mut tape = Tape::new();
    let l = tape.leaf(Matrix::row(logits.to_vec()))?;
    let (p, logp) = softmax_on_tape(&mut tape, l)?;
    let lq = tape.leaf(Matrix::row(q.iter().map(|v| v.ln()).collect()))?;
    let d = tape.sub(logp, lq)?;
    let t = tape.mul(p, d)?;
    let kl = tape.sum(t)?;
    let g = tape.grad(kl, &[l])?;
    Ok((tape.scalar(kl)?, g[0].as_slice().to_vec()))
}

/// One E-step followed by an M-step on the generator.
pub fn em_step(
    space: &FiniteSpace,
    alpha: f64,
    m_step: MStep,
    lr: f64,
    steps: usize,
) -> Result<GeneratorUpdate, ExactError> {
    let q = exact_q(space, alpha);
    match m_step {
        MStep::ForwardKl => Ok(GeneratorUpdate {
            logits: q.q.iter().map(|v| v.ln()).collect(),
            p_theta: q.q,
        }),
        MStep::ReverseKl => {
            let mut logits = space.logits.clone();
            for _ in 0..steps {
                let (_, g) = reverse_kl_grad(&logits, &q.q)?;
                for (l, gi) in logits.iter_mut().zip(&g) {
                    *l -= lr * gi;
                }
            }
            Ok(GeneratorUpdate {
                p_theta: categorical_probs(&logits),
                logits,
            })
        }
    }
}

/// `C*_k = p_r_k / (p_r_k + p_theta_k)`; `None` where both vanish.
pub fn bayes_classifier(p_r: &[f64], p_theta: &[f64]) -> Result<Vec<Option<f64>>, ExactError> {
    if p_r.len() != p_theta.len() {
        return Err(ExactError::Length(p_r.len(), p_theta.len()));
    }
    Ok(p_r
        .iter()
        .zip(p_theta)
        .map(|(&r, &t)| (r + t > 0.0).then(|| r / (r + t)))
        .collect())
}

/// `p_new / p_old` per outcome. Outcomes outside both supports get ratio 1.
pub fn exact_ratio(p_new: &[f64], p_old: &[f64]) -> Result<RatioEstimate, ExactError> {
    if p_new.len() != p_old.len() {
        return Err(ExactError::Length(p_new.len(), p_old.len()));
    }
    let mut ratios = Vec::with_capacity(p_new.len());
    for (k, (&n, &o)) in p_new.iter().zip(p_old).enumerate() {
        ratios.push(match (n > 0.0, o > 0.0) {
            (_, true) => n / o,
            (false, false) => 1.0,
            (true, false) => return Err(ExactError::Support(k)),
        });
    }
    Ok(RatioEstimate {
        ratios,
        method: RatioMethod::Exact,
    })
}

/// The classifier ratio built from two Bayes classifiers, at the outcomes
/// where `p_r > 0`. Returns `(outcome, ratio)` pairs.
pub fn classifier_ratio_from_bayes(
    p_r: &[f64],
    p_new: &[f64],
    p_old: &[f64],
) -> Result<Vec<(usize, f64)>, ExactError> {
    let c_new = bayes_classifier(p_r, p_new)?;
    let c_old = bayes_classifier(p_r, p_old)?;
    Ok((0..p_r.len())
        .filter(|&k| p_r[k] > 0.0)
        .filter_map(|k| {
            let (n, o) = (c_new[k]?, c_old[k]?);
            Some((k, ((1.0 - n) * o) / ((1.0 - o) * n)))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_point() -> FiniteSpace {
        FiniteSpace::new(vec![0.5, 0.5], vec![0.0, 0.0], vec![0.0, 3f64.ln()]).unwrap()
    }

    #[test]
    fn q_examples() {
        let q = exact_q(&two_point(), 1.0);
        assert!((q.q[0] - 0.25).abs() < 1e-15 && (q.q[1] - 0.75).abs() < 1e-15);
        assert!((q.log_z.exp() - 2.0).abs() < 1e-14);
        let s = FiniteSpace::new(vec![1.0, 0.0, 0.0], vec![0.3, -1.0, 2.0], vec![4.0; 3]).unwrap();
        let q = exact_q(&s, 1.0);
        for (a, b) in q.q.iter().zip(s.p_theta()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn objective_examples() {
        let s = two_point();
        let q = exact_q(&s, 1.0);
        let l = variational_objective(&s, &q.q, 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((l - q.log_z).abs() < 1e-12);
        let at_p = variational_objective(&s, s.p_theta(), 1.0).unwrap();
        assert!((at_p - 0.5 * 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        assert_eq!(exact_kl(&p, &p).unwrap(), 0.0);
        // 0.25 ln 0.5 + 0.75 ln 1.5
        let a = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((exact_kl(&q, &p).unwrap() - a).abs() < 1e-15);
        assert!((a - 0.130812).abs() < 1e-6);
        let b = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((exact_kl(&p, &q).unwrap() - b).abs() < 1e-15);
        assert!((b - 0.143841).abs() < 1e-6);
        assert_eq!(exact_kl(&[0.5, 0.5], &[1.0, 0.0]), Err(ExactError::Support(1)));
        assert_eq!(exact_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    }

    #[test]
    fn gap_examples() {
        let g = reverse_kl_gap_bound(&two_point(), 1.0).unwrap();
        assert!((g.gap - 0.013029).abs() < 1e-6, "{}", g.gap);
        assert!(g.signed_gap < 0.0);
        assert!((g.bound - 2.0 * 3f64.ln()).abs() < 1e-15);
        assert!(g.holds && g.symmetric_holds);
        let flat = two_point().with_f(vec![1.5, 1.5]).unwrap();
        let g = reverse_kl_gap_bound(&flat, 1.0).unwrap();
        assert!(g.gap < 1e-15 && g.holds);
    }

    #[test]
    fn forward_em_sets_q_bitwise() {
        let s = FiniteSpace::new(vec![0.2, 0.3, 0.5], vec![0.1, -0.4, 1.0], vec![0.5, -2.0, 1.0]).unwrap();
        let q = exact_q(&s, 1.0);
        let u = em_step(&s, 1.0, MStep::ForwardKl, 0.0, 0).unwrap();
        assert_eq!(u.p_theta, q.q);
    }

    #[test]
    fn reverse_kl_at_optimum_has_zero_gradient() {
        let q = categorical_probs(&[0.3, -1.2, 2.0, 0.0]);
        let logits: Vec<f64> = q.iter().map(|v| v.ln()).collect();
        let (kl, g) = reverse_kl_grad(&logits, &q).unwrap();
        assert!(kl.abs() < 1e-15);
        assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn reverse_em_descends() {
        let s = FiniteSpace::new(vec![0.25; 4], vec![0.0; 4], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let q = exact_q(&s, 1.0);
        let before = exact_kl(s.p_theta(), &q.q).unwrap();
        let u = em_step(&s, 1.0, MStep::ReverseKl, 0.5, 50).unwrap();
        let after = exact_kl(&u.p_theta, &q.q).unwrap();
        assert!(after < before * 0.1, "{after} vs {before}");
    }

    #[test]
    fn bayes_and_ratio_examples() {
        assert_eq!(bayes_classifier(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), vec![Some(0.5), Some(0.5)]);
        let c = bayes_classifier(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((c[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[1], Some(0.0));
        assert_eq!(bayes_classifier(&[1.0, 0.0], &[1.0, 0.0]).unwrap()[1], None);
        let r = exact_ratio(&[0.75, 0.25], &[0.25, 0.75]).unwrap();
        assert_eq!(r.ratios, vec![3.0, 1.0 / 3.0]);
        assert_eq!(r.method, RatioMethod::Exact);
        assert_eq!(exact_ratio(&[0.5, 0.5], &[1.0, 0.0]), Err(ExactError::Support(1)));
    }

    proptest! {
        #[test]
        fn q_is_normalized_with_same_support(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..12),
            fs in proptest::collection::vec(-5.0f64..5.0, 12),
            alpha in 0.25f64..3.0,
        ) {
            let k = logits.len();
            let p_r = vec![1.0 / k as f64; k];
            let s = FiniteSpace::new(p_r, logits, fs[..k].to_vec()).unwrap();
            let q = exact_q(&s, alpha);
            prop_assert!((q.q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(q.q.iter().all(|&v| v > 0.0));
            // independent oracle: direct normalization without shifting
            let w: Vec<f64> = s.p_theta().iter().zip(s.f()).map(|(p, f)| p * (alpha * f).exp()).collect();
            let z: f64 = w.iter().sum();
            prop_assert!((q.log_z - z.ln()).abs() <= 1e-12);
            for (a, b) in q.q.iter().zip(&w) {
                prop_assert!((a - b / z).abs() <= 1e-12);
            }
        }

        #[test]
        fn bayes_ratio_identity(
            a in proptest::collection::vec(0.01f64..1.0, 6),
            b in proptest::collection::vec(0.01f64..1.0, 6),
            c in proptest::collection::vec(0.01f64..1.0, 6),
        ) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (p_r, p_new, p_old) = (norm(&a), norm(&b), norm(&c));
            let exact = exact_ratio(&p_new, &p_old).unwrap();
            for (k, r) in classifier_ratio_from_bayes(&p_r, &p_new, &p_old).unwrap() {
                prop_assert!((r - exact.ratios[k]).abs() <= 1e-12 * exact.ratios[k].max(1.0));
            }
        }
    }
}
