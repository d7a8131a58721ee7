//! Plain WGAN-GP, written out directly: unweighted critic loss with a
//! gradient penalty, generator loss `-mean f(G(z))`, no classifier. The
//! variational trainer with both ablation switches off must reproduce it
//! bit for bit.

use rand::Rng as _;

use crate::data::{interpolate_with, sample_noise, sample_real, Batch, DistSpec, Provenance};
use crate::diffmath::{input_gradient_penalty, Tape, NORM_EPS};
use crate::models::{init_params, Mlp, MlpSpec, ModelParams};
use crate::rng::{derive_seed, stream};

use super::optim::{annealed_lr, Adam};
use super::trainer::{SEED_CRITIC, SEED_GENERATOR, SEED_TRAIN};
use super::{TrainError, TrainingConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub generator: ModelParams,
    pub critic: ModelParams,
    pub critic_losses: Vec<f64>,
    pub gen_losses: Vec<f64>,
}

/// Runs `config.iterations` outer iterations of WGAN-GP with the schedule,
/// learning rates, seeds and batch draw order of `config`.
pub fn reference_wgan_gp(config: &TrainingConfig, dist: &DistSpec) -> Result<ReferenceRun, TrainError> {
    config.validate()?;
    let d = dist.dim();
    let gen_spec = MlpSpec::generator(config.latent_dim, &config.hidden, d, config.activation)?;
    let critic_spec = MlpSpec::critic(d, &config.hidden, config.activation)?;
    let mut generator =
        init_params(&gen_spec, &mut stream(derive_seed(config.seed, &[SEED_GENERATOR])));
    let mut critic = init_params(&critic_spec, &mut stream(derive_seed(config.seed, &[SEED_CRITIC])));
    let mut opt_g = Adam::new(generator.len(), config.beta1, config.beta2);
    let mut opt_d = Adam::new(critic.len(), config.beta1, config.beta2);
    let mut rng = stream(derive_seed(config.seed, &[SEED_TRAIN]));
    let b = config.batch_size;
    let mut run = ReferenceRun {
        generator: generator.clone(),
        critic: critic.clone(),
        critic_losses: Vec::new(),
        gen_losses: Vec::new(),
    };

    for it in 0..config.iterations {
        let lr_d = annealed_lr(config.lr_critic, it, config.iterations, config.anneal);
        let lr_g = annealed_lr(config.lr_generator, it, config.iterations, config.anneal);
        for _ in 0..config.n_critic {
            let real = sample_real(dist, b, &mut rng)?;
            let noise = sample_noise(config.latent_dim, b, &mut rng)?;
            let u: Vec<f64> = (0..b).map(|_| rng.random()).collect();

            let fake = {
                let mut t = Tape::new();
                let g = Mlp::bind(&mut t, &gen_spec, &generator)?;
                let z = t.leaf(noise.points().clone())?;
                let y = g.apply(&mut t, z)?;
                Batch::new(t.value(y).clone(), Provenance::Fake)?
            };
            let x_hat = interpolate_with(&real, &fake, &u)?;

            let mut t = Tape::new();
            let f = Mlp::bind(&mut t, &critic_spec, &critic)?;
            let rv = t.leaf(real.points().clone())?;
            let fv = t.leaf(fake.points().clone())?;
            let rs = f.apply(&mut t, rv)?;
            let fs = f.apply(&mut t, fv)?;
            let mr = t.mean(rs)?;
            let mf = t.mean(fs)?;
            let w_est = t.sub(mr, mf)?;
            let xv = t.leaf(x_hat.points().clone())?;
            let hs = f.apply(&mut t, xv)?;
            let pen = input_gradient_penalty(&mut t, hs, xv, NORM_EPS)?;
            let pen = t.scale(pen, config.lambda_gp)?;
            let loss = t.sub(pen, w_est)?;
            let grad = f.grad(&mut t, loss, true)?;
            run.critic_losses.push(t.scalar(loss)?);
            opt_d.step(critic.values_mut(), &grad, lr_d)?;
        }
        for _ in 0..config.n_gen {
            let noise = sample_noise(config.latent_dim, b, &mut rng)?;
            let mut t = Tape::new();
            let g = Mlp::bind(&mut t, &gen_spec, &generator)?;
            let f = Mlp::bind(&mut t, &critic_spec, &critic)?;
            let z = t.leaf(noise.points().clone())?;
            let y = g.apply(&mut t, z)?;
            let s = f.apply(&mut t, y)?;
            let m = t.mean(s)?;
            let loss = t.neg(m)?;
            let grad = g.grad(&mut t, loss, true)?;
            run.gen_losses.push(t.scalar(loss)?);
            opt_g.step(generator.values_mut(), &grad, lr_g)?;
        }
    }
    run.generator = generator;
    run.critic = critic;
    Ok(run)
}
