//! Parameter containers and forward functions for the generator, the critic,
//! the real/fake classifier and the categorical generator of the exact engine.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointError, ModelKind};

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{sigmoid, DiffError, Grad, Matrix, Tape, Var};

/// Lower/upper clamp applied to classifier probabilities before they enter a
/// probability ratio.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has length {got}, spec requires {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("parameter vector contains a non-finite entry")]
    NonFinite,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::LeakyRelu(_) => "leaky-relu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    /// Parses `leaky-relu`, `relu` or `tanh`; leaky slope is 0.2.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "leaky-relu" => Some(Activation::LeakyRelu(0.2)),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(0.2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    None,
    Sigmoid,
}

/// Layer widths plus activation tags of a fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
    hidden: Activation,
    output: OutputActivation,
}

impl MlpSpec {
    /// `widths` runs input, hidden..., output. At least one hidden layer.
    pub fn new(
        widths: Vec<usize>,
        hidden: Activation,
        output: OutputActivation,
    ) -> Result<Self, ModelError> {
        if widths.len() < 3 {
            return Err(ModelError::InvalidSpec(format!(
                "need input, at least one hidden and an output width, got {widths:?}"
            )));
        }
        Self::checked(widths, hidden, output)
    }

    /// A single affine layer with no hidden units. Only used as an analytic
    /// probe (e.g. a linear critic `f(x) = w.x + b`).
    pub fn single_layer(input: usize, output_dim: usize, output: OutputActivation) -> Self {
        Self::checked(vec![input, output_dim], Activation::Tanh, output)
            .expect("widths must be positive")
    }

    fn checked(
        widths: Vec<usize>,
        hidden: Activation,
        output: OutputActivation,
    ) -> Result<Self, ModelError> {
        if widths.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("zero width in {widths:?}")));
        }
        if let Activation::LeakyRelu(s) = hidden {
            if !s.is_finite() {
                return Err(ModelError::InvalidSpec("leaky slope must be finite".into()));
            }
        }
        if output == OutputActivation::Sigmoid && widths[widths.len() - 1] != 1 {
            return Err(ModelError::InvalidSpec(
                "sigmoid output requires output width 1".into(),
            ));
        }
        Ok(Self {
            widths,
            hidden,
            output,
        })
    }

    /// `input -> hidden... -> output_dim`, no output activation.
    pub fn generator(
        latent: usize,
        hidden: &[usize],
        output_dim: usize,
        act: Activation,
    ) -> Result<Self, ModelError> {
        let mut w = vec![latent];
        w.extend_from_slice(hidden);
        w.push(output_dim);
        Self::new(w, act, OutputActivation::None)
    }

    /// Unbounded scalar score.
    pub fn critic(input: usize, hidden: &[usize], act: Activation) -> Result<Self, ModelError> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(1);
        Self::new(w, act, OutputActivation::None)
    }

    /// The critic architecture with a sigmoid on the output.
    pub fn classifier(input: usize, hidden: &[usize], act: Activation) -> Result<Self, ModelError> {
        let critic = Self::critic(input, hidden, act)?;
        Ok(Self {
            output: OutputActivation::Sigmoid,
            ..critic
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn output(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    /// `sum over layers of (fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Flat parameter vector. Each layer stores its `fan_in x fan_out` weight
/// matrix row-major followed by its `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Hash of the exact bit patterns.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_len(&self, spec: &MlpSpec) -> Result<(), ModelError> {
        if self.values.len() != spec.param_count() {
            return Err(ModelError::ParamLength {
                expected: spec.param_count(),
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Glorot-uniform weights `U(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`,
/// zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> ModelParams {
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-s..s)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ModelParams { values }
}

/// An MLP whose parameters live on a tape as one weight and one bias leaf per
/// layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(Var, Var)>,
}

impl Mlp {
    pub fn bind(tape: &mut Tape, spec: &MlpSpec, params: &ModelParams) -> Result<Self, DiffError> {
        if params.len() != spec.param_count() {
            return Err(DiffError::Shape {
                op: "bind",
                lhs: (spec.param_count(), 1),
                rhs: (params.len(), 1),
            });
        }
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        let mut off = 0;
        for w in spec.widths.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            let wm = Matrix::new(fi, fo, params.values[off..off + fi * fo].to_vec());
            off += fi * fo;
            let bm = Matrix::row(params.values[off..off + fo].to_vec());
            off += fo;
            layers.push((tape.leaf(wm)?, tape.leaf(bm)?));
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Parameter leaves in flat-vector order.
    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Output of the last affine layer, before any output activation.
    pub fn apply_linear(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if i == last {
                z
            } else {
                match self.spec.hidden {
                    Activation::LeakyRelu(s) => tape.leaky_relu(z, s)?,
                    Activation::Relu => tape.leaky_relu(z, 0.0)?,
                    Activation::Tanh => tape.tanh(z)?,
                }
            };
        }
        Ok(h)
    }

    /// Full forward pass including the output activation (unclamped).
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let z = self.apply_linear(tape, x)?;
        match self.spec.output {
            OutputActivation::None => Ok(z),
            OutputActivation::Sigmoid => tape.sigmoid(z),
        }
    }

    /// Classifier probability clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn apply_clamped_prob(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let p = self.apply(tape, x)?;
        tape.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    /// Flattened gradient of `output` over all parameters. With
    /// `allow_detached`, parameters that do not influence the output get
    /// zeros instead of an error.
    pub fn grad(&self, tape: &mut Tape, output: Var, allow_detached: bool) -> Result<Grad, DiffError> {
        let leaves = self.leaves();
        let gs = if allow_detached {
            tape.grad_or_zero(output, &leaves)?
        } else {
            tape.grad(output, &leaves)?
        };
        let mut flat = Vec::with_capacity(self.spec.param_count());
        for g in gs {
            flat.extend_from_slice(g.as_slice());
        }
        Grad::new(flat)
    }
}

/// Forward pass without gradient bookkeeping beyond a throwaway tape.
pub fn mlp_apply(spec: &MlpSpec, params: &ModelParams, x: &Matrix) -> Result<Matrix, ModelError> {
    params.check_len(spec)?;
    if x.cols() != spec.input_dim() {
        return Err(DiffError::Shape {
            op: "mlp_apply",
            lhs: (x.rows(), spec.input_dim()),
            rhs: x.shape(),
        }
        .into());
    }
    let mut tape = Tape::new();
    let m = Mlp::bind(&mut tape, spec, params)?;
    let xv = tape.leaf(x.clone())?;
    let y = m.apply(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Numerically shifted softmax. Entries are kept strictly positive even when
/// `exp` underflows.
pub fn categorical_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .map(|&l| (l - max).exp().max(f64::MIN_POSITIVE))
        .collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// `C(x)` per sample, clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn classifier_prob(
    spec: &MlpSpec,
    params: &ModelParams,
    x: &Matrix,
) -> Result<Vec<f64>, ModelError> {
    if spec.output != OutputActivation::Sigmoid {
        return Err(ModelError::InvalidSpec("classifier needs a sigmoid output".into()));
    }
    Ok(mlp_apply(spec, params, x)?
        .into_vec()
        .into_iter()
        .map(clamp_prob)
        .collect())
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `sigmoid(z)` followed by the probability clamp.
pub fn clamped_sigmoid(z: f64) -> f64 {
    clamp_prob(sigmoid(z))
}

/// Frozen generator and classifier parameters taken at the start of an outer
/// training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    generator: ModelParams,
    classifier: ModelParams,
}

impl Snapshot {
    pub fn take(generator: &ModelParams, classifier: &ModelParams) -> Self {
        Self {
            generator: generator.clone(),
            classifier: classifier.clone(),
        }
    }

    pub fn generator(&self) -> &ModelParams {
        &self.generator
    }

    pub fn classifier(&self) -> &ModelParams {
        &self.classifier
    }

    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.generator.digest().hash(&mut h);
        self.classifier.digest().hash(&mut h);
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn default_critic() -> MlpSpec {
        MlpSpec::critic(2, &[64, 64], Activation::default()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let spec = default_critic();
        let a = init_params(&spec, &mut ChaCha20Rng::seed_from_u64(7));
        let b = init_params(&spec, &mut ChaCha20Rng::seed_from_u64(7));
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a, b);
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let spec = default_critic();
        let p = init_params(&spec, &mut ChaCha20Rng::seed_from_u64(3));
        assert_eq!(p.len(), spec.param_count());
        assert_eq!(p.len(), 3 * 64 + 65 * 64 + 65);
        let mut off = 0;
        for w in spec.widths().windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let weights = &p.values()[off..off + w[0] * w[1]];
            assert!(weights.iter().all(|v| v.abs() <= bound));
            off += w[0] * w[1];
            assert!(p.values()[off..off + w[1]].iter().all(|&b| b == 0.0));
            off += w[1];
        }
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![2, 1], Activation::Tanh, OutputActivation::None).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1], Activation::Tanh, OutputActivation::None).is_err());
        assert!(MlpSpec::new(vec![2, 4, 2], Activation::Tanh, OutputActivation::Sigmoid).is_err());
        let c = MlpSpec::classifier(2, &[64, 64], Activation::default()).unwrap();
        assert_eq!(c.output(), OutputActivation::Sigmoid);
        assert_eq!(c.output_dim(), 1);
        assert_eq!(c.param_count(), default_critic().param_count());
    }

    #[test]
    fn zero_params_give_zero_or_half() {
        let critic = default_critic();
        let cls = MlpSpec::classifier(2, &[64, 64], Activation::default()).unwrap();
        let x = Matrix::new(2, 2, vec![1.0, -3.0, 0.5, 2.0]);
        let y = mlp_apply(&critic, &ModelParams::zeros(&critic), &x).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0]);
        let c = classifier_prob(&cls, &ModelParams::zeros(&cls), &x).unwrap();
        assert_eq!(c, vec![0.5, 0.5]);
    }

    #[test]
    fn single_layer_is_linear_map() {
        let spec = MlpSpec::single_layer(2, 2, OutputActivation::None);
        // W = [[1, 2], [3, 4]], b = [0.5, -0.5]
        let p = ModelParams::new(vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        let x = Matrix::new(1, 2, vec![1.0, 1.0]);
        let y = mlp_apply(&spec, &p, &x).unwrap();
        assert_eq!(y.as_slice(), &[4.5, 5.5]);
    }

    #[test]
    fn shape_and_length_errors() {
        let spec = default_critic();
        let p = ModelParams::zeros(&spec);
        let x = Matrix::new(1, 3, vec![0.0; 3]);
        assert!(matches!(mlp_apply(&spec, &p, &x), Err(ModelError::Diff(DiffError::Shape { .. }))));
        let short = ModelParams::new(vec![0.0; 5]).unwrap();
        let x = Matrix::new(1, 2, vec![0.0; 2]);
        assert!(matches!(mlp_apply(&spec, &short, &x), Err(ModelError::ParamLength { .. })));
        assert_eq!(ModelParams::new(vec![f64::INFINITY]), Err(ModelError::NonFinite));
    }

    #[test]
    fn random_params_finite_on_grid() {
        let spec = default_critic();
        let gen = MlpSpec::generator(2, &[64, 64], 2, Activation::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let pc = init_params(&spec, &mut rng);
        let pg = init_params(&gen, &mut rng);
        let mut pts = Vec::new();
        for i in 0..=40 {
            for j in 0..=40 {
                pts.push(-10.0 + 0.5 * i as f64);
                pts.push(-10.0 + 0.5 * j as f64);
            }
        }
        let x = Matrix::new(41 * 41, 2, pts);
        assert!(mlp_apply(&spec, &pc, &x).unwrap().is_finite());
        assert!(mlp_apply(&gen, &pg, &x).unwrap().is_finite());
    }

    #[test]
    fn categorical_examples() {
        assert_eq!(categorical_probs(&[0.0; 4]), vec![0.25; 4]);
        let p = categorical_probs(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert_eq!(categorical_probs(&[1000.0, 1000.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn classifier_clamp() {
        assert_eq!(clamped_sigmoid(40.0), 1.0 - 1e-7);
        assert_eq!(clamped_sigmoid(-40.0), 1e-7);
        assert_eq!(clamped_sigmoid(0.0), 0.5);
    }

    #[test]
    fn snapshot_digest_stable() {
        let spec = default_critic();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let g = init_params(&spec, &mut rng);
        let c = init_params(&spec, &mut rng);
        let snap = Snapshot::take(&g, &c);
        let d = snap.digest();
        let mut g2 = g.clone();
        g2.values_mut()[0] += 1.0;
        assert_eq!(snap.digest(), d);
        assert_ne!(Snapshot::take(&g2, &c).digest(), d);
    }

    proptest! {
        #[test]
        fn categorical_is_distribution(logits in proptest::collection::vec(-800.0f64..800.0, 2..20)) {
            let p = categorical_probs(&logits);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn clamped_prob_never_saturates(z in -1e6f64..1e6) {
            let p = clamped_sigmoid(z);
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}
