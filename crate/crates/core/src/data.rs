//! Synthetic target distributions with exact densities, and seeded samplers.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid distribution: {0}")]
    InvalidSpec(String),
    #[error("batch size mismatch: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("batch must contain at least one point")]
    Empty,
}

/// A target distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistSpec {
    /// Equal-weight isotropic Gaussians centred on a circle.
    GaussianRing { modes: usize, radius: f64, sigma: f64 },
    /// Equal-weight isotropic Gaussians on a grid centred at the origin.
    GaussianGrid {
        rows: usize,
        cols: usize,
        spacing: f64,
        sigma: f64,
    },
    Mixture1d {
        weights: Vec<f64>,
        means: Vec<f64>,
        sigmas: Vec<f64>,
    },
    Categorical { probs: Vec<f64> },
}

impl Default for DistSpec {
    fn default() -> Self {
        DistSpec::GaussianRing {
            modes: 8,
            radius: 2.0,
            sigma: 0.05,
        }
    }
}

fn check_prob_vector(name: &str, v: &[f64]) -> Result<(), DataError> {
    if v.is_empty() {
        return Err(DataError::InvalidSpec(format!("{name} is empty")));
    }
    if v.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
        return Err(DataError::InvalidSpec(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidSpec(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<(), DataError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(DataError::InvalidSpec(format!("{name} must be positive, got {v}")))
    }
}

impl DistSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        match self {
            DistSpec::GaussianRing { modes, radius, sigma } => {
                if *modes == 0 {
                    return Err(DataError::InvalidSpec("modes must be >= 1".into()));
                }
                if !(radius.is_finite() && *radius >= 0.0) {
                    return Err(DataError::InvalidSpec("radius must be >= 0".into()));
                }
                positive("sigma", *sigma)
            }
            DistSpec::GaussianGrid {
                rows,
                cols,
                spacing,
                sigma,
            } => {
                if *rows == 0 || *cols == 0 {
                    return Err(DataError::InvalidSpec("grid needs rows, cols >= 1".into()));
                }
                positive("spacing", *spacing)?;
                positive("sigma", *sigma)
            }
            DistSpec::Mixture1d {
                weights,
                means,
                sigmas,
            } => {
                check_prob_vector("weights", weights)?;
                if means.len() != weights.len() || sigmas.len() != weights.len() {
                    return Err(DataError::InvalidSpec(
                        "weights, means and sigmas must have equal length".into(),
                    ));
                }
                if means.iter().any(|m| !m.is_finite()) {
                    return Err(DataError::InvalidSpec("means must be finite".into()));
                }
                sigmas.iter().try_for_each(|&s| positive("sigma", s))
            }
            DistSpec::Categorical { probs } => check_prob_vector("probs", probs),
        }
    }

    /// Point dimension (1 for categorical indices).
    pub fn dim(&self) -> usize {
        match self {
            DistSpec::GaussianRing { .. } | DistSpec::GaussianGrid { .. } => 2,
            DistSpec::Mixture1d { .. } | DistSpec::Categorical { .. } => 1,
        }
    }

    /// Mode centres of the Gaussian families (and means of the 1-D mixture).
    pub fn centers(&self) -> Vec<Vec<f64>> {
        match self {
            DistSpec::GaussianRing { modes, radius, .. } => (0..*modes)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / *modes as f64;
                    vec![radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            DistSpec::GaussianGrid {
                rows,
                cols,
                spacing,
                ..
            } => {
                let mut c = Vec::with_capacity(rows * cols);
                for r in 0..*rows {
                    for q in 0..*cols {
                        c.push(vec![
                            (q as f64 - (*cols as f64 - 1.0) / 2.0) * spacing,
                            (r as f64 - (*rows as f64 - 1.0) / 2.0) * spacing,
                        ]);
                    }
                }
                c
            }
            DistSpec::Mixture1d { means, .. } => means.iter().map(|&m| vec![m]).collect(),
            DistSpec::Categorical { probs } => (0..probs.len()).map(|k| vec![k as f64]).collect(),
        }
    }

    /// Per-mode standard deviation of the isotropic families.
    pub fn mode_sigma(&self) -> Option<f64> {
        match self {
            DistSpec::GaussianRing { sigma, .. } | DistSpec::GaussianGrid { sigma, .. } => {
                Some(*sigma)
            }
            _ => None,
        }
    }
}

/// Where a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Fake,
    Interpolated,
    Noise,
}

/// `n` points of equal dimension stored as the rows of a matrix. Categorical
/// samples are stored as their index in a single column.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    points: Matrix,
    provenance: Provenance,
}

impl Batch {
    pub fn new(points: Matrix, provenance: Provenance) -> Result<Self, DataError> {
        if points.rows() == 0 || points.cols() == 0 {
            return Err(DataError::Empty);
        }
        if !points.is_finite() {
            return Err(DataError::InvalidSpec("batch has non-finite entries".into()));
        }
        Ok(Self { points, provenance })
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn into_points(self) -> Matrix {
        self.points
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Categorical indices, for batches drawn from a categorical spec.
    pub fn indices(&self) -> Vec<usize> {
        self.points.as_slice().iter().map(|&v| v as usize).collect()
    }
}

fn pick<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding left a sliver above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `n` i.i.d. draws from `spec`.
pub fn sample_real<R: Rng + ?Sized>(spec: &DistSpec, n: usize, rng: &mut R) -> Result<Batch, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::Empty);
    }
    let dim = spec.dim();
    let mut data = Vec::with_capacity(n * dim);
    match spec {
        DistSpec::GaussianRing { modes, sigma, .. } => {
            let centers = spec.centers();
            for _ in 0..n {
                let c = &centers[rng.random_range(0..*modes)];
                let e0: f64 = StandardNormal.sample(rng);
                let e1: f64 = StandardNormal.sample(rng);
                data.push(c[0] + sigma * e0);
                data.push(c[1] + sigma * e1);
            }
        }
        DistSpec::GaussianGrid { sigma, .. } => {
            let centers = spec.centers();
            for _ in 0..n {
                let c = &centers[rng.random_range(0..centers.len())];
                let e0: f64 = StandardNormal.sample(rng);
                let e1: f64 = StandardNormal.sample(rng);
                data.push(c[0] + sigma * e0);
                data.push(c[1] + sigma * e1);
            }
        }
        DistSpec::Mixture1d {
            weights,
            means,
            sigmas,
        } => {
            for _ in 0..n {
                let k = pick(weights, rng);
                let e: f64 = StandardNormal.sample(rng);
                data.push(means[k] + sigmas[k] * e);
            }
        }
        DistSpec::Categorical { probs } => {
            for _ in 0..n {
                data.push(pick(probs, rng) as f64);
            }
        }
    }
    Batch::new(Matrix::new(n, dim, data), Provenance::Real)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log density (or log mass for categorical specs). `-inf` outside support.
pub fn log_density(spec: &DistSpec, x: &[f64]) -> f64 {
    match spec {
        DistSpec::GaussianRing { sigma, .. } | DistSpec::GaussianGrid { sigma, .. } => {
            let centers = spec.centers();
            let k = centers.len() as f64;
            let s2 = sigma * sigma;
            let norm = -(2.0 * PI * s2).ln() - k.ln();
            let terms: Vec<f64> = centers
                .iter()
                .map(|c| {
                    let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                    norm - d2 / (2.0 * s2)
                })
                .collect();
            log_sum_exp(&terms)
        }
        DistSpec::Mixture1d {
            weights,
            means,
            sigmas,
        } => {
            let terms: Vec<f64> = weights
                .iter()
                .zip(means)
                .zip(sigmas)
                .map(|((&w, &m), &s)| {
                    w.ln() - 0.5 * (2.0 * PI * s * s).ln() - (x[0] - m).powi(2) / (2.0 * s * s)
                })
                .collect();
            log_sum_exp(&terms)
        }
        DistSpec::Categorical { probs } => {
            let i = x[0];
            if i >= 0.0 && i.fract() == 0.0 && (i as usize) < probs.len() {
                probs[i as usize].ln()
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Exact density (pdf, or pmf for categorical specs).
pub fn density(spec: &DistSpec, x: &[f64]) -> f64 {
    match spec {
        // direct lookup keeps the pmf bit-exact
        DistSpec::Categorical { probs } => {
            let i = x[0];
            if i >= 0.0 && i.fract() == 0.0 && (i as usize) < probs.len() {
                probs[i as usize]
            } else {
                0.0
            }
        }
        _ => log_density(spec, x).exp(),
    }
}

/// `n` i.i.d. standard normal latent vectors of dimension `dim`.
pub fn sample_noise<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Result<Batch, DataError> {
    if dim == 0 || n == 0 {
        return Err(DataError::Empty);
    }
    let data: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Batch::new(Matrix::new(n, dim, data), Provenance::Noise)
}

/// `u * real + (1 - u) * fake` with one `u ~ U[0, 1)` per pair.
pub fn interpolate<R: Rng + ?Sized>(real: &Batch, fake: &Batch, rng: &mut R) -> Result<Batch, DataError> {
    if real.points.shape() != fake.points.shape() {
        return Err(DataError::SizeMismatch(real.points.shape(), fake.points.shape()));
    }
    let u: Vec<f64> = (0..real.len()).map(|_| rng.random()).collect();
    interpolate_with(real, fake, &u)
}

/// [`interpolate`] with explicit mixing coefficients.
pub fn interpolate_with(real: &Batch, fake: &Batch, u: &[f64]) -> Result<Batch, DataError> {
    if real.points.shape() != fake.points.shape() {
        return Err(DataError::SizeMismatch(real.points.shape(), fake.points.shape()));
    }
    if u.len() != real.len() {
        return Err(DataError::SizeMismatch((u.len(), 1), (real.len(), 1)));
    }
    let d = real.dim();
    let data = real
        .points
        .as_slice()
        .iter()
        .zip(fake.points.as_slice())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let t = u[i / d];
            t * r + (1.0 - t) * f
        })
        .collect();
    Batch::new(Matrix::new(real.len(), d, data), Provenance::Interpolated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn ring(sigma: f64) -> DistSpec {
        DistSpec::GaussianRing {
            modes: 8,
            radius: 2.0,
            sigma,
        }
    }

    #[test]
    fn ring_modes_balanced() {
        // Multinomial(8000, 1/8): sd = sqrt(8000 * 1/8 * 7/8) ~ 29.6, 5 sd ~ 148.
        let spec = ring(0.02);
        let b = sample_real(&spec, 8000, &mut stream(3)).unwrap();
        let centers = spec.centers();
        let mut counts = [0usize; 8];
        for r in 0..b.len() {
            let p = b.points().row_slice(r);
            let k = (0..8)
                .min_by(|&i, &j| {
                    let di = (p[0] - centers[i][0]).powi(2) + (p[1] - centers[i][1]).powi(2);
                    let dj = (p[0] - centers[j][0]).powi(2) + (p[1] - centers[j][1]).powi(2);
                    di.total_cmp(&dj)
                })
                .unwrap();
            counts[k] += 1;
        }
        for c in counts {
            assert!((850..=1150).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn degenerate_categorical() {
        let spec = DistSpec::Categorical {
            probs: vec![1.0, 0.0, 0.0],
        };
        let b = sample_real(&spec, 50, &mut stream(1)).unwrap();
        assert!(b.indices().iter().all(|&i| i == 0));
    }

    #[test]
    fn samplers_are_deterministic() {
        let spec = ring(0.05);
        assert_eq!(
            sample_real(&spec, 64, &mut stream(9)).unwrap(),
            sample_real(&spec, 64, &mut stream(9)).unwrap()
        );
        assert_eq!(
            sample_noise(2, 64, &mut stream(9)).unwrap(),
            sample_noise(2, 64, &mut stream(9)).unwrap()
        );
    }

    #[test]
    fn density_examples() {
        let n01 = DistSpec::Mixture1d {
            weights: vec![1.0],
            means: vec![0.0],
            sigmas: vec![1.0],
        };
        assert!((density(&n01, &[0.0]) - 0.3989422804014327).abs() < 1e-12);
        let cat = DistSpec::Categorical {
            probs: vec![0.25, 0.75],
        };
        assert_eq!(density(&cat, &[1.0]), 0.75);
        assert_eq!(density(&cat, &[2.0]), 0.0);
    }

    #[test]
    fn ring_density_integrates_to_one() {
        // midpoint rule on [-3, 3]^2; mass outside is negligible for sigma = 0.05
        let spec = ring(0.05);
        let n = 1200;
        let h = 6.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = -3.0 + (i as f64 + 0.5) * h;
                let y = -3.0 + (j as f64 + 0.5) * h;
                total += density(&spec, &[x, y]);
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn noise_moments() {
        // mean sd = 1/sqrt(1e5) ~ 0.0032 -> 0.02 is > 6 sd;
        // variance sd = sqrt(2/1e5) ~ 0.0045 -> 0.03 is > 6 sd.
        let b = sample_noise(1, 100_000, &mut stream(5)).unwrap();
        let v = b.points().as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn interpolation_endpoints_and_midpoints() {
        let real = Batch::new(Matrix::new(1, 2, vec![2.0, 2.0]), Provenance::Real).unwrap();
        let fake = Batch::new(Matrix::new(1, 2, vec![0.0, 0.0]), Provenance::Fake).unwrap();
        assert_eq!(interpolate_with(&real, &fake, &[0.0]).unwrap().points(), fake.points());
        assert_eq!(interpolate_with(&real, &fake, &[1.0]).unwrap().points(), real.points());
        assert_eq!(interpolate_with(&real, &fake, &[0.25]).unwrap().points().as_slice(), &[0.5, 0.5]);
        let other = Batch::new(Matrix::new(2, 2, vec![0.0; 4]), Provenance::Fake).unwrap();
        assert!(matches!(
            interpolate(&real, &other, &mut stream(0)),
            Err(DataError::SizeMismatch(..))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(DistSpec::Mixture1d {
            weights: vec![0.5, 0.4],
            means: vec![0.0, 1.0],
            sigmas: vec![1.0, 1.0]
        }
        .validate()
        .is_err());
        assert!(ring(0.0).validate().is_err());
        assert!(DistSpec::GaussianRing { modes: 0, radius: 1.0, sigma: 0.1 }.validate().is_err());
        assert!(DistSpec::Categorical { probs: vec![0.5, -0.5, 1.0] }.validate().is_err());
    }

    proptest! {
        #[test]
        fn density_nonnegative(x in -5.0f64..5.0, y in -5.0f64..5.0) {
            prop_assert!(density(&ring(0.05), &[x, y]) >= 0.0);
            let grid = DistSpec::GaussianGrid { rows: 3, cols: 3, spacing: 1.0, sigma: 0.1 };
            prop_assert!(density(&grid, &[x, y]) >= 0.0);
        }

        #[test]
        fn interpolation_stays_between_endpoints(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 8),
            seed in any::<u64>(),
        ) {
            let real: Vec<f64> = pts.iter().flat_map(|p| [p.0, p.1]).collect();
            let fake: Vec<f64> = pts.iter().flat_map(|p| [p.1, -p.0]).collect();
            let r = Batch::new(Matrix::new(4, 4, real.clone()), Provenance::Real).unwrap();
            let f = Batch::new(Matrix::new(4, 4, fake.clone()), Provenance::Fake).unwrap();
            let x = interpolate(&r, &f, &mut stream(seed)).unwrap();
            for (i, &v) in x.points().as_slice().iter().enumerate() {
                let (lo, hi) = (real[i].min(fake[i]), real[i].max(fake[i]));
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn categorical_pmf_sums_to_spec(probs in proptest::collection::vec(0.0f64..1.0, 1..10)) {
            let s: f64 = probs.iter().sum();
            prop_assume!(s > 0.0);
            let probs: Vec<f64> = probs.iter().map(|p| p / s).collect();
            let spec = DistSpec::Categorical { probs: probs.clone() };
            let total: f64 = (0..probs.len()).map(|k| density(&spec, &[k as f64])).sum();
            prop_assert_eq!(total, probs.iter().sum::<f64>());
        }
    }
}
