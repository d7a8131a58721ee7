//! Training on a categorical target with exact expectations in place of
//! sampled batches. The critic is a table `f = tanh(phi)`; the generator is a
//! vector of logits; ratios are exact.

use rand_distr::{Distribution, StandardNormal};

use crate::data::DistSpec;
use crate::diffmath::{Grad, Matrix, Tape};
use crate::models::{categorical_probs, Checkpoint, ModelKind, ModelParams};
use crate::rng::{derive_seed, stream};
use crate::vgan::{
    annealed_lr, clipped_terms_on_tape, Adam, EvalSnapshot, Phase, RatioEstimate, RatioMethod,
    StepLog, TrainError, TrainingConfig, TrainingRecord,
};

use super::{exact_kl, exact_q, softmax_on_tape, ExactError, FiniteSpace};

impl From<ExactError> for TrainError {
    fn from(e: ExactError) -> Self {
        match e {
            ExactError::Diff(d) => TrainError::Diff(d),
            other => TrainError::InvalidConfig(other.to_string()),
        }
    }
}

/// Negated exact surrogate and its logit gradient.
///
/// With clipping, the objective is `sum_k s_k min(r_k f_k, clip(r_k) f_k)`
/// with `r = p_theta / p_old` and sampling weights `s` equal to `p_old` when
/// `sample_from_old`, else the current `p_theta` held constant. Without
/// clipping it is `E_{p_theta}[f]`.
pub fn exact_surrogate_loss_grad(
    logits: &[f64],
    p_old: &[f64],
    f: &[f64],
    epsilon: f64,
    clipping: bool,
    sample_from_old: bool,
) -> Result<(f64, Vec<f64>, RatioEstimate), ExactError> {
    let k = logits.len();
    if p_old.len() != k || f.len() != k {
        return Err(ExactError::Length(p_old.len().min(f.len()), k));
    }
    let mut tape = Tape::new();
    let l = tape.leaf(Matrix::row(logits.to_vec()))?;
    let (p, _) = softmax_on_tape(&mut tape, l)?;
    let fv = tape.leaf(Matrix::row(f.to_vec()))?;
    let old = tape.leaf(Matrix::row(p_old.to_vec()))?;
    let r = tape.div(p, old)?;
    let ratios = RatioEstimate {
        ratios: tape.value(r).as_slice().to_vec(),
        method: RatioMethod::Exact,
    };
    let objective = if clipping {
        let s = if sample_from_old {
            p_old.to_vec()
        } else {
            tape.value(p).as_slice().to_vec()
        };
        let sv = tape.leaf(Matrix::row(s))?;
        let terms = clipped_terms_on_tape(&mut tape, r, fv, epsilon)?;
        let weighted = tape.mul(terms, sv)?;
        tape.sum(weighted)?
    } else {
        let e = tape.mul(p, fv)?;
        tape.sum(e)?
    };
    let loss = tape.neg(objective)?;
    let g = tape.grad(loss, &[l])?;
    Ok((tape.scalar(loss)?, g[0].as_slice().to_vec(), ratios))
}

/// Negated critic objective `sum_k (p_r_k - w_k) tanh(phi_k)` with `w` held
/// constant, and its gradient.
pub(crate) fn exact_critic_loss_grad(phi: &[f64], p_r: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>), ExactError> {
    let mut tape = Tape::new();
    let pv = tape.leaf(Matrix::row(phi.to_vec()))?;
    let f = tape.tanh(pv)?;
    let d = tape.leaf(Matrix::row(p_r.iter().zip(w).map(|(a, b)| a - b).collect()))?;
    let t = tape.mul(f, d)?;
    let obj = tape.sum(t)?;
    let loss = tape.neg(obj)?;
    let g = tape.grad(loss, &[pv])?;
    Ok((tape.scalar(loss)?, g[0].as_slice().to_vec()))
}

fn cdf_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut ca, mut cb, mut s) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ca += x;
        cb += y;
        s += (ca - cb).abs();
    }
    s
}

fn evaluate(p_r: &[f64], p_theta: &[f64], iter: usize, batches: usize) -> Result<EvalSnapshot, ExactError> {
    let modes: Vec<usize> = (0..p_r.len()).filter(|&k| p_r[k] > 0.0).collect();
    let share = 0.2 / modes.len() as f64;
    Ok(EvalSnapshot {
        iter,
        batches,
        modes_covered: modes.iter().filter(|&&k| p_theta[k] >= share).count(),
        n_modes: modes.len(),
        high_quality_fraction: modes.iter().map(|&k| p_theta[k]).sum::<f64>().min(1.0),
        sliced_w: Some(cdf_distance(p_r, p_theta)),
        exact_kl: Some(exact_kl(p_r, p_theta)?),
    })
}

fn grad(v: Vec<f64>) -> Result<Grad, TrainError> {
    Ok(Grad::new(v)?)
}

/// Exact-engine counterpart of [`crate::vgan::train`] on a categorical
/// target. The gradient penalty does not apply; `tanh` bounds the critic.
pub fn train_exact(config: &TrainingConfig, dist: &DistSpec) -> Result<TrainingRecord, TrainError> {
    config.validate()?;
    let p_r = match dist {
        DistSpec::Categorical { probs } => {
            dist.validate()?;
            let s: f64 = probs.iter().sum();
            probs.iter().map(|p| p / s).collect::<Vec<f64>>()
        }
        _ => {
            return Err(TrainError::InvalidConfig(
                "the exact engine needs a categorical target".into(),
            ))
        }
    };
    let k = p_r.len();
    if k > super::MAX_OUTCOMES {
        return Err(TrainError::InvalidConfig(format!("at most {} outcomes", super::MAX_OUTCOMES)));
    }
    let mut init = stream(derive_seed(config.seed, &[1]));
    let mut logits: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut init)).collect();
    let mut init = stream(derive_seed(config.seed, &[2]));
    let mut phi: Vec<f64> = (0..k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut init);
            0.1 * z
        })
        .collect();
    let (b1, b2) = (config.beta1, config.beta2);
    let mut opt_g = Adam::new(k, b1, b2);
    let mut opt_c = Adam::new(k, b1, b2);
    let mut record = TrainingRecord::new(config.clone(), dist.clone());
    let mut batches = 0;
    record.evals.push(evaluate(&p_r, &categorical_probs(&logits), 0, 0)?);

    let mut completed = 0;
    'outer: for it in 0..config.iterations {
        let lr_c = annealed_lr(config.lr_critic, it, config.iterations, config.anneal);
        let lr_g = annealed_lr(config.lr_generator, it, config.iterations, config.anneal);
        for _ in 0..config.n_critic {
            let f: Vec<f64> = phi.iter().map(|v| v.tanh()).collect();
            let space = FiniteSpace::new(p_r.clone(), logits.clone(), f)?;
            let w = if config.reweighting {
                exact_q(&space, config.alpha).q
            } else {
                space.p_theta().to_vec()
            };
            let (loss, g) = exact_critic_loss_grad(&phi, &p_r, &w)?;
            let g = grad(g)?;
            if let Err(e) = opt_c.step(&mut phi, &g, lr_c) {
                record.aborted = Some(format!("iteration {it}: {e}"));
                break 'outer;
            }
            batches += 1;
            let entropy = -w.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            record.steps.push(StepLog {
                critic_loss: Some(loss),
                weight_entropy: Some(entropy),
                grad_norm_phi: Some(g.norm()),
                ..StepLog::new(it, Phase::Critic)
            });
        }
        let p_old = categorical_probs(&logits);
        let f: Vec<f64> = phi.iter().map(|v| v.tanh()).collect();
        for _ in 0..config.n_gen {
            let (loss, g, ratios) = exact_surrogate_loss_grad(
                &logits,
                &p_old,
                &f,
                config.epsilon,
                config.clipping,
                config.sample_from_old,
            )?;
            let p_now = categorical_probs(&logits);
            let s = if config.sample_from_old { &p_old } else { &p_now };
            let ratio_mean: f64 = s.iter().zip(&ratios.ratios).map(|(a, b)| a * b).sum();
            let eps = config.epsilon;
            let clipped: f64 = s
                .iter()
                .zip(&ratios.ratios)
                .filter(|(_, &r)| r < 1.0 - eps || r > 1.0 + eps)
                .map(|(a, _)| a)
                .sum();
            let g = grad(g)?;
            if let Err(e) = opt_g.step(&mut logits, &g, lr_g) {
                record.aborted = Some(format!("iteration {it}: {e}"));
                break 'outer;
            }
            batches += 1;
            record.steps.push(StepLog {
                gen_loss: Some(loss),
                grad_norm_theta: Some(g.norm()),
                ratio_mean: Some(ratio_mean),
                ratio_clipped_frac: Some(clipped),
                ..StepLog::new(it, Phase::Generator)
            });
        }
        completed = it + 1;
        if completed == config.iterations || completed % config.eval_every == 0 {
            record.evals.push(evaluate(&p_r, &categorical_probs(&logits), completed, batches)?);
        }
    }
    record.iterations_completed = completed;
    record.total_batches = batches;
    let p = categorical_probs(&logits);
    if record.aborted.is_none() {
        let mut rng = stream(derive_seed(config.seed, &[5]));
        let draws = crate::data::sample_real(
            &DistSpec::Categorical { probs: p.clone() },
            crate::vgan::FINAL_SAMPLES,
            &mut rng,
        )?;
        record.final_samples = Some(draws.into_points());
    }
    record.checkpoint = Some(Checkpoint {
        kind: ModelKind::Categorical { outcomes: k },
        seed: config.seed,
        params: ModelParams::new(logits).map_err(TrainError::Model)?,
    });
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff_check;

    fn exact_config() -> TrainingConfig {
        TrainingConfig {
            lr_generator: 0.05,
            lr_critic: 0.05,
            iterations: 200,
            eval_every: 50,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn exact_training_approaches_target() {
        let dist = DistSpec::Categorical {
            probs: vec![0.1, 0.0, 0.4, 0.2, 0.3],
        };
        let rec = train_exact(&exact_config(), &dist).unwrap();
        let first = rec.evals.first().unwrap().exact_kl.unwrap();
        let last = rec.evals.last().unwrap().exact_kl.unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert_eq!(rec.evals.last().unwrap().n_modes, 4);
        let again = train_exact(&exact_config(), &dist).unwrap();
        assert_eq!(rec.steps, again.steps);
        assert_eq!(rec.final_samples, again.final_samples);
    }

    #[test]
    fn first_generator_step_has_unit_ratios() {
        let logits = [0.2, -0.5, 1.0];
        let p = categorical_probs(&logits);
        let f = [0.3, -0.2, 0.9];
        let (loss, g, r) = exact_surrogate_loss_grad(&logits, &p, &f, 0.2, true, false).unwrap();
        assert!(r.ratios.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let (loss2, g2, _) = exact_surrogate_loss_grad(&logits, &p, &f, 0.2, false, false).unwrap();
        assert!((loss - loss2).abs() < 1e-15);
        for (a, b) in g.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let logits = vec![0.2, -0.5, 1.0, 0.4];
        let p_old = categorical_probs(&[0.9, -0.9, 0.3, 0.4]);
        let f = [0.3, -0.2, 0.9, -0.7];
        for from_old in [false, true] {
            let (_, g, r) = exact_surrogate_loss_grad(&logits, &p_old, &f, 0.2, true, from_old).unwrap();
            assert!(r.ratios.iter().all(|x| ((x - 0.8).abs() > 1e-3) && ((x - 1.2).abs() > 1e-3)));
            // weights from the current pmf are held constant, as in the loss
            let s_fixed = categorical_probs(&logits);
            let err = finite_diff_check(
                |l| {
                    let p = categorical_probs(l);
                    let s = if from_old { &p_old } else { &s_fixed };
                    Ok(-(0..4)
                        .map(|k| {
                            let r = p[k] / p_old[k];
                            s[k] * (r * f[k]).min(r.clamp(0.8, 1.2) * f[k])
                        })
                        .sum::<f64>())
                },
                &logits,
                &g,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn neural_targets_are_rejected() {
        assert!(train_exact(&exact_config(), &DistSpec::default()).is_err());
    }
}
