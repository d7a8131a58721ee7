//! Sample-quality and stability measurements: mode coverage, empirical
//! Wasserstein distances, rolling loss variance and collapse detection.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::Matrix;
use crate::vgan::{Phase, TrainingRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty sample set")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub modes_covered: usize,
    pub n_modes: usize,
    /// Fraction of samples within `radius` of some mode centre.
    pub high_quality_fraction: f64,
}

/// A mode is covered when at least `min_count` samples lie within `radius`
/// (Euclidean) of its centre.
pub fn mode_coverage(
    samples: &Matrix,
    centers: &[Vec<f64>],
    radius: f64,
    min_count: usize,
) -> Result<CoverageReport, MetricsError> {
    if samples.rows() == 0 {
        return Err(MetricsError::Empty);
    }
    if !(radius > 0.0) || min_count == 0 {
        return Err(MetricsError::Invalid("radius must be > 0 and min_count >= 1".into()));
    }
    if let Some(c) = centers.iter().find(|c| c.len() != samples.cols()) {
        return Err(MetricsError::Dim(c.len(), samples.cols()));
    }
    let r2 = radius * radius;
    let mut counts = vec![0usize; centers.len()];
    let mut near = 0usize;
    for i in 0..samples.rows() {
        let p = samples.row_slice(i);
        let mut hit = false;
        for (k, c) in centers.iter().enumerate() {
            let d2: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= r2 {
                counts[k] += 1;
                hit = true;
            }
        }
        near += hit as usize;
    }
    Ok(CoverageReport {
        modes_covered: counts.iter().filter(|&&c| c >= min_count).count(),
        n_modes: centers.len(),
        high_quality_fraction: near as f64 / samples.rows() as f64,
    })
}

/// Exact W1 between two empirical distributions on the line.
///
/// For equal sizes this is the mean absolute difference of the sorted
/// samples; otherwise the area between the two empirical CDFs.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Average of [`wasserstein_1d`] over `n_proj` random unit directions.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    a: &Matrix,
    b: &Matrix,
    n_proj: usize,
    rng: &mut R,
) -> Result<f64, MetricsError> {
    if a.cols() != b.cols() {
        return Err(MetricsError::Dim(a.cols(), b.cols()));
    }
    if n_proj == 0 {
        return Err(MetricsError::Invalid("n_proj must be >= 1".into()));
    }
    let d = a.cols();
    let project = |m: &Matrix, dir: &[f64]| -> Vec<f64> {
        (0..m.rows())
            .map(|i| m.row_slice(i).iter().zip(dir).map(|(x, u)| x * u).sum())
            .collect()
    };
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|v| *v /= norm);
        }
        total += wasserstein_1d(&project(a, &dir), &project(b, &dir))?;
    }
    Ok(total / n_proj as f64)
}

/// Unbiased sample variance over each trailing window. The output has
/// `len - window + 1` entries, or none when the series is shorter than the
/// window.
pub fn rolling_variance(series: &[f64], window: usize) -> Result<Vec<f64>, MetricsError> {
    if window < 2 {
        return Err(MetricsError::Invalid("window must be >= 2".into()));
    }
    if series.len() < window {
        return Ok(Vec::new());
    }
    Ok(series
        .windows(window)
        .map(|w| {
            let mean = w.iter().sum::<f64>() / window as f64;
            w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (window - 1) as f64
        })
        .collect())
}

/// Thresholds for declaring a run collapsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseCriteria {
    /// Trailing window, in logged batches.
    pub window: usize,
    /// Runs ending with fewer covered modes are collapsed.
    pub coverage_floor: usize,
    /// Trailing mean |critic loss| above this is degenerate.
    pub loss_ceiling: f64,
    /// Trailing critic-loss variance below this is degenerate (frozen critic).
    pub min_loss_variance: f64,
}

impl Default for CollapseCriteria {
    fn default() -> Self {
        Self {
            window: 2000,
            coverage_floor: 2,
            loss_ceiling: 1e4,
            min_loss_variance: 1e-14,
        }
    }
}

impl CollapseCriteria {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.window == 0 {
            return Err(MetricsError::Invalid("collapse window must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub collapsed: bool,
    pub aborted: bool,
    pub low_coverage: bool,
    pub degenerate_loss: bool,
    /// The sigmoid-discriminator rule (trailing mean BCE below 1e-20 or above
    /// 1 - 1e-20), evaluated on the real/fake classifier when one was
    /// trained. Reported only; it does not feed `collapsed`.
    pub bce_rule: Option<bool>,
}

pub fn collapse_report(record: &TrainingRecord, criteria: &CollapseCriteria) -> CollapseReport {
    let aborted = record.aborted.is_some();
    let low_coverage = record
        .evals
        .last()
        .map(|e| e.modes_covered < criteria.coverage_floor)
        .unwrap_or(false);
    let critic: Vec<f64> = record
        .steps
        .iter()
        .filter(|s| s.phase == Phase::Critic)
        .filter_map(|s| s.critic_loss)
        .collect();
    let tail = &critic[critic.len().saturating_sub(criteria.window)..];
    let degenerate_loss = if tail.len() >= 2 {
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var =
            tail.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (tail.len() - 1) as f64;
        mean.abs() > criteria.loss_ceiling || var < criteria.min_loss_variance
    } else {
        false
    };
    let bce: Vec<f64> = record.steps.iter().filter_map(|s| s.classifier_bce).collect();
    let bce_rule = (!bce.is_empty()).then(|| {
        let tail = &bce[bce.len().saturating_sub(criteria.window)..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        !(1e-20..=1.0 - 1e-20).contains(&mean)
    });
    CollapseReport {
        collapsed: aborted || low_coverage || degenerate_loss,
        aborted,
        low_coverage,
        degenerate_loss,
        bce_rule,
    }
}

pub fn detect_collapse(record: &TrainingRecord, criteria: &CollapseCriteria) -> bool {
    collapse_report(record, criteria).collapsed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DistSpec;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn ring_centers() -> Vec<Vec<f64>> {
        DistSpec::default().centers()
    }

    fn rows(pts: &[Vec<f64>]) -> Matrix {
        Matrix::new(pts.len(), 2, pts.iter().flatten().copied().collect())
    }

    #[test]
    fn coverage_examples() {
        let c = ring_centers();
        let one = rows(&vec![c[3].clone(); 50]);
        let r = mode_coverage(&one, &c, 0.15, 1).unwrap();
        assert_eq!((r.modes_covered, r.high_quality_fraction), (1, 1.0));
        let all = rows(&c);
        assert_eq!(mode_coverage(&all, &c, 0.15, 1).unwrap().modes_covered, 8);
        let far: Vec<Vec<f64>> = (0..20).map(|i| vec![50.0 + i as f64, 50.0]).collect();
        let r = mode_coverage(&rows(&far), &c, 0.15, 1).unwrap();
        assert_eq!((r.modes_covered, r.high_quality_fraction), (0, 0.0));
        assert_eq!(
            mode_coverage(&Matrix::zeros(0, 2), &c, 0.1, 1),
            Err(MetricsError::Empty)
        );
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[], &[1.0]), Err(MetricsError::Empty));
        // unequal sizes: point mass at 0 vs uniform on {0, 1}
        assert!((wasserstein_1d(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        // replicating samples does not change the distribution
        let a = [0.3, -1.0, 2.5];
        let aa = [0.3, -1.0, 2.5, 0.3, -1.0, 2.5];
        let b = [1.0, 0.0];
        assert!((wasserstein_1d(&a, &b).unwrap() - wasserstein_1d(&aa, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sliced_examples() {
        let a = rows(&ring_centers());
        assert_eq!(sliced_wasserstein(&a, &a, 16, &mut stream(1)).unwrap(), 0.0);
        let v = [0.3, -0.4];
        let shifted = Matrix::new(
            8,
            2,
            a.as_slice().iter().enumerate().map(|(i, x)| x + v[i % 2]).collect(),
        );
        let d = sliced_wasserstein(&a, &shifted, 32, &mut stream(2)).unwrap();
        assert!(d > 0.0 && d <= 0.5 + 1e-12, "{d}");
        let ab = sliced_wasserstein(&a, &shifted, 32, &mut stream(3)).unwrap();
        let ba = sliced_wasserstein(&shifted, &a, 32, &mut stream(3)).unwrap();
        assert_eq!(ab, ba);
        assert!(sliced_wasserstein(&a, &Matrix::zeros(2, 3), 4, &mut stream(0)).is_err());
    }

    #[test]
    fn rolling_variance_examples() {
        assert_eq!(rolling_variance(&[2.0; 5], 3).unwrap(), vec![0.0; 3]);
        let alt: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(rolling_variance(&alt, 2).unwrap(), vec![2.0; 5]);
        let s = [0.5, -1.0, 3.0, 2.0];
        let base = rolling_variance(&s, 3).unwrap();
        let scaled: Vec<f64> = s.iter().map(|x| 3.0 * x).collect();
        for (a, b) in base.iter().zip(rolling_variance(&scaled, 3).unwrap()) {
            assert!((9.0 * a - b).abs() < 1e-12);
        }
        assert!(rolling_variance(&s, 5).unwrap().is_empty());
        assert!(rolling_variance(&s, 1).is_err());
    }

    proptest! {
        #[test]
        fn wasserstein_is_a_metric(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
            c in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let ab = wasserstein_1d(&a, &b).unwrap();
            let ba = wasserstein_1d(&b, &a).unwrap();
            let bc = wasserstein_1d(&b, &c).unwrap();
            let ac = wasserstein_1d(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
            prop_assert!(ac <= ab + bc + 1e-12);
            if ab == 0.0 {
                let mut x = a.clone(); x.sort_by(f64::total_cmp);
                let mut y = b.clone(); y.sort_by(f64::total_cmp);
                prop_assert_eq!(x, y);
            }
        }

        #[test]
        fn coverage_permutation_invariant(seed in any::<u64>(), shift in 0usize..8) {
            use rand::seq::SliceRandom;
            let spec = DistSpec::default();
            let b = crate::data::sample_real(&spec, 64, &mut stream(seed)).unwrap();
            let mut c = ring_centers();
            let base = mode_coverage(b.points(), &c, 0.15, 3).unwrap();
            c.rotate_left(shift);
            let mut idx: Vec<usize> = (0..64).collect();
            idx.shuffle(&mut stream(seed ^ 1));
            let perm = Matrix::new(64, 2, idx.iter().flat_map(|&i| b.points().row_slice(i).to_vec()).collect());
            prop_assert_eq!(mode_coverage(&perm, &c, 0.15, 3).unwrap(), base);
        }

        #[test]
        fn rolling_variance_nonnegative(s in proptest::collection::vec(-1e3f64..1e3, 2..40), w in 2usize..10) {
            prop_assert!(rolling_variance(&s, w).unwrap().iter().all(|&v| v >= 0.0));
        }
    }
}
