//! Randomized property suite over finite spaces. Every instance is a pure
//! function of `(seed, id)` and serializes to JSON for replay.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::finite_diff_check;
use crate::rng::{derive_seed, stream};

use super::train::exact_critic_loss_grad;
use super::{
    classifier_ratio_from_bayes, em_step, exact_q, exact_ratio, exact_surrogate_loss_grad,
    reverse_kl_gap_bound, reverse_kl_grad, variational_objective, ExactError, FiniteSpace,
    GeneratorUpdate, MStep,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInstance {
    pub id: u64,
    pub p_r: Vec<f64>,
    pub logits: Vec<f64>,
    pub f: Vec<f64>,
    pub alpha: f64,
}

/// How the generator pmf is computed from logits. `Unshifted` skips the
/// max subtraction and exists to show the suite catches that mistake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxVariant {
    Shifted,
    Unshifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub seed: u64,
    pub instances: usize,
    pub max_outcomes: usize,
    pub softmax: SoftmaxVariant,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 1000,
            max_outcomes: 16,
            softmax: SoftmaxVariant::Shifted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    /// Reported-only properties do not fail the suite.
    pub asserted: bool,
    pub tolerance: f64,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    /// Largest error measured over non-skipped instances.
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFailure {
    pub property: String,
    pub detail: String,
    pub instance: OracleInstance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub instances: usize,
    pub softmax: SoftmaxVariant,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
    pub failures: Vec<OracleFailure>,
}

/// Draws instance `id` of the stream for `seed`. Every tenth instance has
/// all logits offset by +1000 and every tenth (shifted by five) by -1000.
pub fn generate_instance(seed: u64, id: u64, max_outcomes: usize) -> OracleInstance {
    let mut rng = stream(derive_seed(seed, &[id]));
    let k = rng.random_range(2..=max_outcomes.max(2));
    let mut p_r: Vec<f64> = (0..k)
        .map(|_| if rng.random::<f64>() < 0.25 { 0.0 } else { rng.random::<f64>() + 1e-3 })
        .collect();
    if p_r.iter().all(|&v| v == 0.0) {
        p_r[0] = 1.0;
    }
    let s: f64 = p_r.iter().sum();
    p_r.iter_mut().for_each(|v| *v /= s);
    let offset = match id % 10 {
        0 => 1000.0,
        5 => -1000.0,
        _ => 0.0,
    };
    let logits = (0..k).map(|_| offset + rng.random_range(-3.0..3.0)).collect();
    let f = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
    let alpha = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    OracleInstance {
        id,
        p_r,
        logits,
        f,
        alpha,
    }
}

fn unshifted_softmax(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Outcome of one property on one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Check {
    Pass(f64),
    Fail(f64, String),
    Skip,
}

pub struct Property {
    pub name: &'static str,
    pub asserted: bool,
    pub tolerance: f64,
}

pub const PROPERTIES: [Property; 10] = [
    Property { name: "q-normalization", asserted: true, tolerance: 1e-12 },
    Property { name: "objective-equals-log-z", asserted: true, tolerance: 1e-12 },
    Property { name: "q-maximizes-objective", asserted: true, tolerance: 1e-12 },
    Property { name: "kl-gap-bound", asserted: true, tolerance: 0.0 },
    Property { name: "kl-gap-bound-symmetric", asserted: false, tolerance: 0.0 },
    Property { name: "forward-em-monotone", asserted: true, tolerance: 1e-12 },
    Property { name: "bayes-classifier-ratio", asserted: true, tolerance: 1e-9 },
    Property { name: "fd-reverse-kl", asserted: true, tolerance: 1e-4 },
    Property { name: "fd-clipped-surrogate", asserted: true, tolerance: 1e-4 },
    Property { name: "fd-critic", asserted: true, tolerance: 1e-4 },
];

fn judge(err: f64, tol: f64, what: &str) -> Check {
    if err.is_finite() && err <= tol {
        Check::Pass(err)
    } else {
        Check::Fail(err, format!("{what}: error {err:e} exceeds {tol:e}"))
    }
}

fn space_for(inst: &OracleInstance, softmax: SoftmaxVariant) -> Result<FiniteSpace, ExactError> {
    let space = FiniteSpace::new(inst.p_r.clone(), inst.logits.clone(), inst.f.clone())?;
    match softmax {
        SoftmaxVariant::Shifted => Ok(space),
        SoftmaxVariant::Unshifted => space.with_generator(GeneratorUpdate {
            logits: inst.logits.clone(),
            p_theta: unshifted_softmax(&inst.logits),
        }),
    }
}

/// Runs every property on one instance, in the order of [`PROPERTIES`].
pub fn check_instance(inst: &OracleInstance, softmax: SoftmaxVariant) -> Vec<Check> {
    let space = match space_for(inst, softmax) {
        Ok(s) => s,
        Err(e) => {
            let msg = format!("instance rejected: {e}");
            return PROPERTIES.iter().map(|_| Check::Fail(f64::NAN, msg.clone())).collect();
        }
    };
    let a = inst.alpha;
    let q = exact_q(&space, a);
    let p = space.p_theta().to_vec();
    let mut out = Vec::with_capacity(PROPERTIES.len());

    // normalization, finiteness and identical support
    let sum_err = (q.q.iter().sum::<f64>() - 1.0).abs();
    let support_ok = q.q.iter().zip(&p).all(|(&x, &y)| x.is_finite() && (x > 0.0) == (y > 0.0));
    out.push(if support_ok {
        judge(sum_err, 1e-12, "sum q - 1")
    } else {
        Check::Fail(sum_err, "q is non-finite or changes the support of p_theta".into())
    });

    let l_star = variational_objective(&space, &q.q, a);
    out.push(match &l_star {
        Ok(l) => judge((l - q.log_z).abs(), 1e-12, "L(q*) - log Z"),
        Err(e) => Check::Fail(f64::NAN, e.to_string()),
    });

    out.push(match &l_star {
        Ok(l) => q_is_maximal(&space, &q.q, *l, a),
        Err(e) => Check::Fail(f64::NAN, e.to_string()),
    });

    match reverse_kl_gap_bound(&space, a) {
        Ok(g) => {
            let excess = g.signed_gap - g.bound;
            out.push(if g.holds {
                Check::Pass(excess.max(0.0))
            } else {
                Check::Fail(excess, format!("gap {} exceeds bound {}", g.signed_gap, g.bound))
            });
            out.push(if g.symmetric_holds {
                Check::Pass((g.gap - g.bound).max(0.0))
            } else {
                Check::Fail(g.gap - g.bound, format!("|gap| {} exceeds bound {}", g.gap, g.bound))
            });
        }
        Err(e) => {
            out.push(Check::Fail(f64::NAN, e.to_string()));
            out.push(Check::Fail(f64::NAN, e.to_string()));
        }
    }

    out.push(em_monotone(&space, a));

    // ratio between the current generator and the q-tilted one
    out.push({
        let p_new = q.q.clone();
        match (exact_ratio(&p_new, &p), classifier_ratio_from_bayes(space.p_r(), &p_new, &p)) {
            (Ok(exact), Ok(pairs)) => {
                let worst = pairs
                    .iter()
                    .map(|&(k, r)| (r - exact.ratios[k]).abs() / exact.ratios[k].max(1.0))
                    .fold(0.0, f64::max);
                judge(worst, 1e-9, "classifier ratio vs exact ratio")
            }
            (Err(e), _) | (_, Err(e)) => Check::Fail(f64::NAN, e.to_string()),
        }
    });

    out.push(match reverse_kl_grad(space.logits(), &q.q) {
        Ok((_, g)) => fd(
            |l| Ok(reverse_kl_grad(l, &q.q).map(|v| v.0).unwrap_or(f64::NAN)),
            space.logits(),
            &g,
        ),
        Err(e) => Check::Fail(f64::NAN, e.to_string()),
    });

    out.push(surrogate_fd(&space, &p));

    out.push({
        let phi: Vec<f64> = space.f().iter().map(|v| (v / 6.0).atanh()).collect();
        let w = q.q.clone();
        match exact_critic_loss_grad(&phi, space.p_r(), &w) {
            Ok((_, g)) => fd(
                |x| Ok(exact_critic_loss_grad(x, space.p_r(), &w).map(|v| v.0).unwrap_or(f64::NAN)),
                &phi,
                &g,
            ),
            Err(e) => Check::Fail(f64::NAN, e.to_string()),
        }
    });
    out
}

/// Mixing `q*` with the uniform pmf never raises the objective.
fn q_is_maximal(space: &FiniteSpace, q: &[f64], l_star: f64, alpha: f64) -> Check {
    let k = space.k() as f64;
    let mut worst = 0.0f64;
    for m in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let qm: Vec<f64> = q.iter().map(|v| (1.0 - m) * v + m / k).collect();
        match variational_objective(space, &qm, alpha) {
            Ok(lm) => worst = worst.max(lm - l_star),
            Err(e) => return Check::Fail(f64::NAN, e.to_string()),
        }
    }
    if worst <= 1e-12 {
        Check::Pass(worst)
    } else {
        Check::Fail(worst, format!("perturbed q beats q* by {worst:e}"))
    }
}

fn fd<F>(loss: F, at: &[f64], g: &[f64]) -> Check
where
    F: FnMut(&[f64]) -> Result<f64, crate::diffmath::DiffError>,
{
    match finite_diff_check(loss, at, g, 1e-5) {
        Ok(err) => judge(err, 1e-4, "finite-difference relative error"),
        Err(e) => Check::Fail(f64::NAN, e.to_string()),
    }
}

fn em_monotone(space: &FiniteSpace, alpha: f64) -> Check {
    let mut s = space.clone();
    let mut prev = exact_q(&s, alpha).log_z;
    let mut worst_drop = 0.0f64;
    for _ in 0..10 {
        let u = match em_step(&s, alpha, MStep::ForwardKl, 0.0, 0) {
            Ok(u) => u,
            Err(e) => return Check::Fail(f64::NAN, e.to_string()),
        };
        s = match s.with_generator(u) {
            Ok(s) => s,
            Err(e) => return Check::Fail(f64::NAN, e.to_string()),
        };
        let next = exact_q(&s, alpha).log_z;
        if !next.is_finite() {
            return Check::Fail(next, "non-finite objective".into());
        }
        worst_drop = worst_drop.max((prev - next) / (1.0 + prev.abs()));
        prev = next;
    }
    if worst_drop <= 1e-12 {
        Check::Pass(worst_drop)
    } else {
        Check::Fail(worst_drop, format!("objective decreased by {worst_drop:e} (relative)"))
    }
}

/// Finite differences of the clipped surrogate at logits moved towards `q`,
/// so ratios differ from one. Skipped when a ratio sits within 1e-3 of a
/// clip boundary, where the loss has a kink.
fn surrogate_fd(space: &FiniteSpace, p_old: &[f64]) -> Check {
    let eps = 0.2;
    let logits: Vec<f64> = space
        .logits()
        .iter()
        .zip(space.f())
        .map(|(l, f)| l + 0.05 * f)
        .collect();
    let f = space.f().to_vec();
    let (_, g, r) = match exact_surrogate_loss_grad(&logits, p_old, &f, eps, true, true) {
        Ok(v) => v,
        Err(e) => return Check::Fail(f64::NAN, e.to_string()),
    };
    if r.ratios.iter().any(|x| (x - (1.0 - eps)).abs() < 1e-3 || (x - (1.0 + eps)).abs() < 1e-3) {
        return Check::Skip;
    }
    fd(
        |l| {
            Ok(exact_surrogate_loss_grad(l, p_old, &f, eps, true, true)
                .map(|v| v.0)
                .unwrap_or(f64::NAN))
        },
        &logits,
        &g,
    )
}

/// Runs the property suite over `options.instances` instances. Failures are
/// kept in instance order, at most one entry per instance and property.
pub fn run_oracle_suite(options: &OracleOptions) -> OracleReport {
    let results: Vec<(OracleInstance, Vec<Check>)> = (0..options.instances as u64)
        .into_par_iter()
        .map(|id| {
            let inst = generate_instance(options.seed, id, options.max_outcomes);
            let checks = check_instance(&inst, options.softmax);
            (inst, checks)
        })
        .collect();
    let mut properties: Vec<PropertyResult> = PROPERTIES
        .iter()
        .map(|p| PropertyResult {
            name: p.name.into(),
            asserted: p.asserted,
            tolerance: p.tolerance,
            passed: 0,
            failed: 0,
            skipped: 0,
            worst: 0.0,
        })
        .collect();
    let mut failures = Vec::new();
    for (inst, checks) in &results {
        for (i, c) in checks.iter().enumerate() {
            let pr = &mut properties[i];
            match c {
                Check::Pass(e) => {
                    pr.passed += 1;
                    pr.worst = pr.worst.max(*e);
                }
                Check::Skip => pr.skipped += 1,
                Check::Fail(e, detail) => {
                    pr.failed += 1;
                    if e.is_finite() {
                        pr.worst = pr.worst.max(*e);
                    } else {
                        pr.worst = f64::INFINITY;
                    }
                    if pr.asserted {
                        failures.push(OracleFailure {
                            property: pr.name.clone(),
                            detail: detail.clone(),
                            instance: inst.clone(),
                        });
                    }
                }
            }
        }
    }
    let passed = properties.iter().all(|p| !p.asserted || p.failed == 0);
    OracleReport {
        seed: options.seed,
        instances: options.instances,
        softmax: options.softmax,
        passed,
        properties,
        failures,
    }
}
