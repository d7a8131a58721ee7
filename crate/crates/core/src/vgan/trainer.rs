//! Step functions, the trainer state and the outer training loop.

use rand::Rng as _;

use crate::data::{interpolate_with, sample_noise, sample_real, Batch, DistSpec};
use crate::diffmath::{Grad, Matrix, Tape};
use crate::metrics::{detect_collapse, mode_coverage, sliced_wasserstein};
use crate::models::{
    init_params, mlp_apply, Checkpoint, Mlp, MlpSpec, ModelKind, ModelParams, Snapshot,
};
use crate::rng::{derive_seed, stream, Rng};

use super::losses::{
    bce_on_tape, clipped_surrogate_on_tape, critic_objective_on_tape, gradient_penalty_on_tape,
    importance_weights, ratio_on_tape, ImportanceWeights, RatioEstimate, RatioMethod,
};
use super::optim::{annealed_lr, Adam};
use super::record::{EvalSnapshot, Phase, StepLog, TrainingRecord};
use super::{TrainError, TrainingConfig};

// Seed paths below the run seed. Shared with the reference implementation.
pub(crate) const SEED_GENERATOR: u64 = 1;
pub(crate) const SEED_CRITIC: u64 = 2;
pub(crate) const SEED_CLASSIFIER: u64 = 3;
pub(crate) const SEED_TRAIN: u64 = 4;
pub(crate) const SEED_EVAL: u64 = 5;

/// Number of generated points kept at the end of a run.
pub const FINAL_SAMPLES: usize = 4096;

/// How fake samples are weighted in the critic objective.
#[derive(Debug, Clone, Copy)]
pub enum WeightMode<'a> {
    /// Plain mean over the fake batch.
    Uniform,
    /// Softmax of `alpha * score` at the current critic, held constant.
    FromScores(f64),
    /// Externally supplied weights.
    Fixed(&'a ImportanceWeights),
}

#[derive(Debug, Clone)]
pub struct CriticEval {
    /// Minimized loss: `penalty - objective`.
    pub loss: f64,
    pub objective: f64,
    pub penalty: f64,
    pub weights: ImportanceWeights,
    pub grad: Grad,
}

/// Critic loss `lambda * GP(x_hat) - (mean f(real) - sum_i w_i f(fake_i))` and
/// its parameter gradient.
pub fn critic_loss_grad(
    spec: &MlpSpec,
    params: &ModelParams,
    real: &Matrix,
    fake: &Matrix,
    x_hat: &Matrix,
    mode: WeightMode<'_>,
    lambda: f64,
) -> Result<CriticEval, TrainError> {
    let mut tape = Tape::new();
    let critic = Mlp::bind(&mut tape, spec, params)?;
    let rv = tape.leaf(real.clone())?;
    let fv = tape.leaf(fake.clone())?;
    let rs = critic.apply(&mut tape, rv)?;
    let fs = critic.apply(&mut tape, fv)?;
    let weights = match mode {
        WeightMode::Uniform => None,
        WeightMode::FromScores(alpha) => Some(importance_weights(tape.value(fs).as_slice(), alpha)),
        WeightMode::Fixed(w) => Some(w.clone()),
    };
    let obj = critic_objective_on_tape(&mut tape, rs, fs, weights.as_ref())?;
    let xv = tape.leaf(x_hat.clone())?;
    let gp = gradient_penalty_on_tape(&mut tape, &critic, xv, lambda)?;
    let loss = tape.sub(gp, obj)?;
    let grad = critic.grad(&mut tape, loss, true)?;
    Ok(CriticEval {
        loss: tape.scalar(loss)?,
        objective: tape.scalar(obj)?,
        penalty: tape.scalar(gp)?,
        weights: weights.unwrap_or_else(|| ImportanceWeights::uniform(fake.rows())),
        grad,
    })
}

/// `lambda * mean (||grad_x f(x_hat)|| - 1)^2`.
pub fn gradient_penalty(
    spec: &MlpSpec,
    params: &ModelParams,
    x_hat: &Matrix,
    lambda: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let critic = Mlp::bind(&mut tape, spec, params)?;
    let xv = tape.leaf(x_hat.clone())?;
    let gp = gradient_penalty_on_tape(&mut tape, &critic, xv, lambda)?;
    Ok(tape.scalar(gp)?)
}

/// The current and snapshot classifiers that produce generator ratios.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierInputs<'a> {
    pub spec: &'a MlpSpec,
    pub current: &'a ModelParams,
    pub old: &'a ModelParams,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct GenEval {
    /// Minimized loss: the negated surrogate (or negated mean score).
    pub loss: f64,
    pub grad: Grad,
    pub ratios: Option<RatioEstimate>,
}

/// Generator loss on `G(noise)`. With `clip`, the loss is the negated clipped
/// surrogate with classifier ratios; without, the negated mean critic score.
pub fn generator_loss_grad(
    gen_spec: &MlpSpec,
    gen_params: &ModelParams,
    critic_spec: &MlpSpec,
    critic_params: &ModelParams,
    noise: &Matrix,
    clip: Option<ClassifierInputs<'_>>,
) -> Result<GenEval, TrainError> {
    let mut tape = Tape::new();
    let gen = Mlp::bind(&mut tape, gen_spec, gen_params)?;
    let critic = Mlp::bind(&mut tape, critic_spec, critic_params)?;
    let z = tape.leaf(noise.clone())?;
    let fake = gen.apply(&mut tape, z)?;
    let scores = critic.apply(&mut tape, fake)?;
    let (objective, ratios) = match clip {
        None => (tape.mean(scores)?, None),
        Some(c) => {
            let cur = Mlp::bind(&mut tape, c.spec, c.current)?;
            let old = Mlp::bind(&mut tape, c.spec, c.old)?;
            let c_new = cur.apply_clamped_prob(&mut tape, fake)?;
            let c_old = old.apply_clamped_prob(&mut tape, fake)?;
            let r = ratio_on_tape(&mut tape, c_new, c_old)?;
            let ratios = RatioEstimate {
                ratios: tape.value(r).as_slice().to_vec(),
                method: RatioMethod::Classifier,
            };
            (clipped_surrogate_on_tape(&mut tape, r, scores, c.epsilon)?, Some(ratios))
        }
    };
    let loss = tape.neg(objective)?;
    let grad = gen.grad(&mut tape, loss, true)?;
    Ok(GenEval {
        loss: tape.scalar(loss)?,
        grad,
        ratios,
    })
}

/// Binary cross-entropy of the classifier (real = 1, fake = 0) and its
/// gradient.
pub(crate) fn classifier_loss_grad(
    spec: &MlpSpec,
    params: &ModelParams,
    real: &Matrix,
    fake: &Matrix,
) -> Result<(f64, Grad), TrainError> {
    let mut tape = Tape::new();
    let cls = Mlp::bind(&mut tape, spec, params)?;
    let rv = tape.leaf(real.clone())?;
    let fv = tape.leaf(fake.clone())?;
    let pr = cls.apply_clamped_prob(&mut tape, rv)?;
    let pf = cls.apply_clamped_prob(&mut tape, fv)?;
    let loss = bce_on_tape(&mut tape, pr, pf)?;
    let grad = cls.grad(&mut tape, loss, true)?;
    Ok((tape.scalar(loss)?, grad))
}

/// All mutable state of a neural training run.
#[derive(Debug, Clone)]
pub struct TrainerState {
    config: TrainingConfig,
    dist: DistSpec,
    gen_spec: MlpSpec,
    critic_spec: MlpSpec,
    cls_spec: MlpSpec,
    generator: ModelParams,
    critic: ModelParams,
    classifier: ModelParams,
    snapshot: Snapshot,
    opt_gen: Adam,
    opt_critic: Adam,
    opt_cls: Adam,
    iteration: usize,
    batches: usize,
    snapshots_taken: usize,
}

impl TrainerState {
    pub fn new(config: TrainingConfig, dist: DistSpec) -> Result<Self, TrainError> {
        config.validate()?;
        dist.validate()?;
        if matches!(dist, DistSpec::Categorical { .. }) {
            return Err(TrainError::InvalidConfig(
                "categorical targets are handled by the exact engine".into(),
            ));
        }
        if config.sample_from_old {
            return Err(TrainError::InvalidConfig(
                "sample_from_old has no effect on classifier ratios of fixed samples; \
                 it is supported by the exact engine only"
                    .into(),
            ));
        }
        let d = dist.dim();
        let gen_spec =
            MlpSpec::generator(config.latent_dim, &config.hidden, d, config.activation)?;
        let critic_spec = MlpSpec::critic(d, &config.hidden, config.activation)?;
        let cls_spec = MlpSpec::classifier(d, &config.hidden, config.activation)?;
        let generator = init_params(&gen_spec, &mut stream(derive_seed(config.seed, &[SEED_GENERATOR])));
        let critic = init_params(&critic_spec, &mut stream(derive_seed(config.seed, &[SEED_CRITIC])));
        let classifier =
            init_params(&cls_spec, &mut stream(derive_seed(config.seed, &[SEED_CLASSIFIER])));
        let (b1, b2) = (config.beta1, config.beta2);
        Ok(Self {
            opt_gen: Adam::new(generator.len(), b1, b2),
            opt_critic: Adam::new(critic.len(), b1, b2),
            opt_cls: Adam::new(classifier.len(), b1, b2),
            snapshot: Snapshot::take(&generator, &classifier),
            gen_spec,
            critic_spec,
            cls_spec,
            generator,
            critic,
            classifier,
            config,
            dist,
            iteration: 0,
            batches: 0,
            snapshots_taken: 0,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn dist(&self) -> &DistSpec {
        &self.dist
    }

    pub fn generator(&self) -> &ModelParams {
        &self.generator
    }

    pub fn critic(&self) -> &ModelParams {
        &self.critic
    }

    pub fn classifier(&self) -> &ModelParams {
        &self.classifier
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn generator_spec(&self) -> &MlpSpec {
        &self.gen_spec
    }

    pub fn critic_spec(&self) -> &MlpSpec {
        &self.critic_spec
    }

    pub fn classifier_spec(&self) -> &MlpSpec {
        &self.cls_spec
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Batches consumed so far, critic and generator steps alike.
    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn snapshots_taken(&self) -> usize {
        self.snapshots_taken
    }

    fn lr(&self, base: f64) -> f64 {
        annealed_lr(base, self.iteration, self.config.iterations, self.config.anneal)
    }

    pub fn generate(&self, noise: &Matrix) -> Result<Matrix, TrainError> {
        Ok(mlp_apply(&self.gen_spec, &self.generator, noise)?)
    }

    /// One critic update on `real` and `G(noise)` with interpolation
    /// coefficients `u` for the penalty.
    pub fn discriminator_step(
        &mut self,
        real: &Batch,
        noise: &Batch,
        u: &[f64],
    ) -> Result<StepLog, TrainError> {
        let fake = Batch::new(self.generate(noise.points())?, crate::data::Provenance::Fake)?;
        let x_hat = interpolate_with(real, &fake, u)?;
        let mode = if self.config.reweighting {
            WeightMode::FromScores(self.config.alpha)
        } else {
            WeightMode::Uniform
        };
        let eval = critic_loss_grad(
            &self.critic_spec,
            &self.critic,
            real.points(),
            fake.points(),
            x_hat.points(),
            mode,
            self.config.lambda_gp,
        )?;
        let lr = self.lr(self.config.lr_critic);
        self.opt_critic.step(self.critic.values_mut(), &eval.grad, lr)?;
        self.batches += 1;
        Ok(StepLog {
            critic_loss: Some(eval.loss),
            gp: Some(eval.penalty),
            weight_entropy: Some(eval.weights.entropy()),
            grad_norm_phi: Some(eval.grad.norm()),
            ..StepLog::new(self.iteration, Phase::Critic)
        })
    }

    /// Freezes the current generator and classifier as the ratio reference.
    pub fn take_snapshot(&mut self) {
        self.snapshot = Snapshot::take(&self.generator, &self.classifier);
        self.snapshots_taken += 1;
    }

    /// One generator update on `G(noise)`. With clipping on, `real` feeds
    /// the classifier step that follows.
    pub fn generator_step(&mut self, noise: &Batch, real: Option<&Batch>) -> Result<StepLog, TrainError> {
        let clip = self.config.clipping.then(|| ClassifierInputs {
            spec: &self.cls_spec,
            current: &self.classifier,
            old: self.snapshot.classifier(),
            epsilon: self.config.epsilon,
        });
        let eval = generator_loss_grad(
            &self.gen_spec,
            &self.generator,
            &self.critic_spec,
            &self.critic,
            noise.points(),
            clip,
        )?;
        let lr = self.lr(self.config.lr_generator);
        self.opt_gen.step(self.generator.values_mut(), &eval.grad, lr)?;
        self.batches += 1;
        let mut log = StepLog {
            gen_loss: Some(eval.loss),
            grad_norm_theta: Some(eval.grad.norm()),
            ..StepLog::new(self.iteration, Phase::Generator)
        };
        if let Some(r) = &eval.ratios {
            log.ratio_mean = Some(r.mean());
            log.ratio_clipped_frac = Some(r.clipped_fraction(self.config.epsilon));
        }
        if self.config.clipping {
            let real = real.ok_or_else(|| {
                TrainError::InvalidConfig("clipping needs a real batch for the classifier".into())
            })?;
            let fake = Batch::new(self.generate(noise.points())?, crate::data::Provenance::Fake)?;
            log.classifier_bce = Some(self.classifier_update(real, &fake)?);
        }
        Ok(log)
    }

    /// One BCE step on the classifier. Returns the loss before the step.
    pub fn classifier_update(&mut self, real: &Batch, fake: &Batch) -> Result<f64, TrainError> {
        if real.len() != fake.len() {
            return Err(TrainError::Length {
                what: "fake batch for the classifier",
                expected: real.len(),
                got: fake.len(),
            });
        }
        let (bce, grad) =
            classifier_loss_grad(&self.cls_spec, &self.classifier, real.points(), fake.points())?;
        let lr = self.lr(self.config.lr_classifier);
        self.opt_cls.step(self.classifier.values_mut(), &grad, lr)?;
        Ok(bce)
    }

    /// `n_critic` critic steps, a snapshot, then `n_gen` generator steps.
    pub fn outer_iteration(&mut self, rng: &mut Rng, steps: &mut Vec<StepLog>) -> Result<(), TrainError> {
        let (b, latent) = (self.config.batch_size, self.config.latent_dim);
        for _ in 0..self.config.n_critic {
            let real = sample_real(&self.dist, b, rng)?;
            let noise = sample_noise(latent, b, rng)?;
            let u: Vec<f64> = (0..b).map(|_| rng.random()).collect();
            steps.push(self.discriminator_step(&real, &noise, &u)?);
        }
        self.take_snapshot();
        for _ in 0..self.config.n_gen {
            let noise = sample_noise(latent, b, rng)?;
            let real = if self.config.clipping {
                Some(sample_real(&self.dist, b, rng)?)
            } else {
                None
            };
            steps.push(self.generator_step(&noise, real.as_ref())?);
        }
        self.iteration += 1;
        Ok(())
    }

    /// Coverage and sliced Wasserstein distance of `eval_samples` generated
    /// points against as many real points.
    pub fn evaluate(&self, rng: &mut Rng) -> Result<EvalSnapshot, TrainError> {
        let n = self.config.eval_samples;
        let noise = sample_noise(self.config.latent_dim, n, rng)?;
        let fake = self.generate(noise.points())?;
        let real = sample_real(&self.dist, n, rng)?;
        let centers = self.dist.centers();
        let cov = mode_coverage(
            &fake,
            &centers,
            coverage_radius(&self.dist),
            default_min_count(n, centers.len()),
        )?;
        let sw = sliced_wasserstein(&fake, real.points(), self.config.sliced_projections, rng)?;
        Ok(EvalSnapshot {
            iter: self.iteration,
            batches: self.batches,
            modes_covered: cov.modes_covered,
            n_modes: cov.n_modes,
            high_quality_fraction: cov.high_quality_fraction,
            sliced_w: Some(sw),
            exact_kl: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Mlp(self.gen_spec.clone()),
            seed: self.config.seed,
            params: self.generator.clone(),
        }
    }
}

/// Three standard deviations of a mode component.
pub fn coverage_radius(dist: &DistSpec) -> f64 {
    match dist {
        DistSpec::Mixture1d { sigmas, .. } => 3.0 * sigmas.iter().copied().fold(0.0, f64::max),
        // categorical indices are integers; half a unit isolates each one
        DistSpec::Categorical { .. } => 0.5,
        _ => 3.0 * dist.mode_sigma().unwrap_or(1.0),
    }
}

/// A fifth of the per-mode share of `n` samples, at least one.
pub fn default_min_count(n: usize, n_modes: usize) -> usize {
    ((0.2 * n as f64 / n_modes.max(1) as f64).round() as usize).max(1)
}

/// Runs the full neural training loop. Non-finite values stop the run and
/// are recorded in `aborted`; invalid configs are errors.
pub fn train(config: &TrainingConfig, dist: &DistSpec) -> Result<TrainingRecord, TrainError> {
    let mut state = TrainerState::new(config.clone(), dist.clone())?;
    let mut rng = stream(derive_seed(config.seed, &[SEED_TRAIN]));
    let mut eval_rng = stream(derive_seed(config.seed, &[SEED_EVAL]));
    let mut record = TrainingRecord::new(config.clone(), dist.clone());
    record.evals.push(state.evaluate(&mut eval_rng)?);
    for it in 0..config.iterations {
        if let Err(e) = state.outer_iteration(&mut rng, &mut record.steps) {
            record.aborted = Some(format!("iteration {it}: {e}"));
            break;
        }
        let done = it + 1 == config.iterations;
        if done || (it + 1) % config.eval_every == 0 {
            match state.evaluate(&mut eval_rng) {
                Ok(e) => record.evals.push(e),
                Err(e) => {
                    record.aborted = Some(format!("evaluation after iteration {it}: {e}"));
                    break;
                }
            }
            if config.abort_on_collapse && !done && detect_collapse(&record, &config.collapse) {
                record.stopped_on_collapse = true;
                break;
            }
        }
    }
    record.iterations_completed = state.iteration();
    record.total_batches = state.batches();
    if record.aborted.is_none() {
        let noise = sample_noise(config.latent_dim, FINAL_SAMPLES, &mut eval_rng)?;
        record.final_samples = Some(state.generate(noise.points())?);
    }
    record.checkpoint = Some(state.checkpoint());
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use crate::diffmath::finite_diff_check;
    use crate::models::Activation;

    fn small_config() -> TrainingConfig {
        TrainingConfig {
            batch_size: 16,
            hidden: vec![8, 8],
            iterations: 3,
            n_critic: 2,
            n_gen: 2,
            eval_every: 2,
            eval_samples: 256,
            sliced_projections: 8,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_iterations_has_initial_eval_only() {
        let cfg = TrainingConfig { iterations: 0, ..small_config() };
        let rec = train(&cfg, &DistSpec::default()).unwrap();
        assert!(rec.steps.is_empty());
        assert_eq!(rec.evals.len(), 1);
        assert_eq!(rec.evals[0].iter, 0);
        assert!(rec.aborted.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&small_config(), &DistSpec::default()).unwrap();
        let b = train(&small_config(), &DistSpec::default()).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.evals, b.evals);
        assert_eq!(a.final_samples, b.final_samples);
        assert_eq!(a.steps.len(), 3 * 4);
        assert_eq!(a.total_batches, 12);
        // evaluated at 0, 2 and the final iteration 3
        assert_eq!(a.evals.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![0, 2, 3]);
    }

    #[test]
    fn snapshot_once_per_iteration_and_first_ratio_is_one() {
        let cfg = small_config();
        let mut st = TrainerState::new(cfg.clone(), DistSpec::default()).unwrap();
        let mut rng = stream(9);
        let mut steps = Vec::new();
        st.outer_iteration(&mut rng, &mut steps).unwrap();
        st.outer_iteration(&mut rng, &mut steps).unwrap();
        assert_eq!(st.snapshots_taken(), 2);
        // the first generator step of each iteration sees C == C_old
        for it in 0..2 {
            let first_gen = it * 4 + cfg.n_critic;
            assert_eq!(steps[first_gen].phase, Phase::Generator);
            assert_eq!(steps[first_gen].ratio_mean, Some(1.0));
            assert_eq!(steps[first_gen].ratio_clipped_frac, Some(0.0));
        }
        // one classifier step per generator step
        assert_eq!(steps.iter().filter(|s| s.classifier_bce.is_some()).count(), 4);
    }

    #[test]
    fn first_step_surrogate_equals_plain_objective() {
        let st = TrainerState::new(small_config(), DistSpec::default()).unwrap();
        let noise = sample_noise(2, 16, &mut stream(3)).unwrap();
        let clip = ClassifierInputs {
            spec: st.classifier_spec(),
            current: st.classifier(),
            old: st.classifier(),
            epsilon: 0.2,
        };
        let a = generator_loss_grad(st.generator_spec(), st.generator(), st.critic_spec(), st.critic(), noise.points(), Some(clip)).unwrap();
        let b = generator_loss_grad(st.generator_spec(), st.generator(), st.critic_spec(), st.critic(), noise.points(), None).unwrap();
        assert_eq!(a.loss, b.loss);
        for (x, y) in a.grad.values().iter().zip(b.grad.values()) {
            assert!((x - y).abs() <= 1e-15 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn penalty_examples() {
        // constant critic: input gradient is zero everywhere
        let spec = MlpSpec::critic(2, &[4], Activation::Tanh).unwrap();
        let x = Matrix::new(3, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, 2.0]);
        let gp = gradient_penalty(&spec, &ModelParams::zeros(&spec), &x, 10.0).unwrap();
        // the smoothed norm of a zero gradient is sqrt(NORM_EPS) = 1e-6
        let expected = 10.0 * (1.0 - crate::diffmath::NORM_EPS.sqrt()).powi(2);
        assert!((gp - expected).abs() < 1e-12, "{gp}");
        // f(x) = 2x in one dimension
        let lin = MlpSpec::single_layer(1, 1, crate::models::OutputActivation::None);
        let p = ModelParams::new(vec![2.0, 0.0]).unwrap();
        let x = Matrix::column(vec![-1.0, 0.3, 4.0]);
        assert!((gradient_penalty(&lin, &p, &x, 10.0).unwrap() - 10.0).abs() < 1e-9);
        // unit slope: no penalty
        let p = ModelParams::new(vec![1.0, 0.5]).unwrap();
        assert!(gradient_penalty(&lin, &p, &x, 10.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn classifier_step_descends_and_parity_bce() {
        let mut st = TrainerState::new(
            TrainingConfig { lr_classifier: 1e-3, ..small_config() },
            DistSpec::default(),
        )
        .unwrap();
        let mut rng = stream(4);
        let real = sample_real(&DistSpec::default(), 16, &mut rng).unwrap();
        let noise = sample_noise(2, 16, &mut rng).unwrap();
        let fake = Batch::new(st.generate(noise.points()).unwrap(), Provenance::Fake).unwrap();
        let before = st.classifier_update(&real, &fake).unwrap();
        let after = st.classifier_update(&real, &fake).unwrap();
        assert!(after < before, "{after} >= {before}");
        let spec = st.classifier_spec().clone();
        let (bce, _) =
            classifier_loss_grad(&spec, &ModelParams::zeros(&spec), real.points(), fake.points()).unwrap();
        assert!((bce - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let cfg = TrainingConfig {
            activation: Activation::Tanh,
            ..small_config()
        };
        let st = TrainerState::new(cfg, DistSpec::default()).unwrap();
        let mut rng = stream(12);
        let real = sample_real(&DistSpec::default(), 16, &mut rng).unwrap();
        let noise = sample_noise(2, 16, &mut rng).unwrap();
        let fake = st.generate(noise.points()).unwrap();
        let fb = Batch::new(fake.clone(), Provenance::Fake).unwrap();
        let u: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let x_hat = interpolate_with(&real, &fb, &u).unwrap();
        let spec = st.critic_spec().clone();
        let base = critic_loss_grad(&spec, st.critic(), real.points(), &fake, x_hat.points(), WeightMode::FromScores(1.0), 10.0).unwrap();
        let w = base.weights.clone();
        let err = finite_diff_check(
            |p| {
                let params = ModelParams::new(p.to_vec()).unwrap();
                Ok(critic_loss_grad(&spec, &params, real.points(), &fake, x_hat.points(), WeightMode::Fixed(&w), 10.0)
                    .unwrap()
                    .loss)
            },
            st.critic().values(),
            base.grad.values(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sample_from_old_rejected_for_neural_runs() {
        let cfg = TrainingConfig { sample_from_old: true, ..small_config() };
        assert!(matches!(TrainerState::new(cfg, DistSpec::default()), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn min_count_and_radius_defaults() {
        assert_eq!(default_min_count(4096, 8), 102);
        assert_eq!(default_min_count(3, 8), 1);
        assert!((coverage_radius(&DistSpec::default()) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn exploding_learning_rate_aborts_with_record() {
        let cfg = TrainingConfig {
            lr_critic: 1e300,
            lr_generator: 1e300,
            anneal: false,
            ..small_config()
        };
        let rec = train(&cfg, &DistSpec::default()).unwrap();
        assert!(rec.aborted.is_some(), "run should abort");
        assert!(crate::metrics::detect_collapse(&rec, &cfg.collapse));
    }
}
