//! Binned empirical distributions over feature samples, per dimension or on
//! the joint product grid, and Wasserstein-1 between them.

use super::w1::{solve_transport, wasserstein1_1d, TransportError};
use crate::dataset::BinSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("no samples to bin")]
    Empty,
    #[error("sample dim {got} does not match bin spec dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("distributions use different bin specs or modes")]
    SpecMismatch,
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistMode {
    PerDim,
    Joint,
}

/// Normalized bin weights under a shared [`BinSpec`]. Per-dim mode stores one
/// simplex per dimension; joint mode stores one simplex over the row-major
/// product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    pub spec: BinSpec,
    pub mode: DistMode,
    pub weights: Vec<Vec<f64>>,
}

impl CategoricalDistribution {
    /// Bin representative (per-dim) for dimension `d`, bin `b`.
    pub fn support(&self, d: usize) -> Vec<f64> {
        (0..self.spec.dims[d].bins)
            .map(|b| self.spec.dims[d].representative(b))
            .collect()
    }

    /// Representative point of a joint-grid cell, row-major decode.
    fn joint_point(&self, mut index: usize) -> Vec<f64> {
        let mut coords = vec![0.0; self.spec.n_dims()];
        for d in (0..self.spec.n_dims()).rev() {
            let bins = self.spec.dims[d].bins;
            coords[d] = self.spec.dims[d].representative(index % bins);
            index /= bins;
        }
        coords
    }
}

/// Bins samples into a normalized categorical distribution; out-of-range
/// values clamp to the edge bins.
pub fn empirical_distribution(
    samples: &[Vec<f64>],
    spec: &BinSpec,
    mode: DistMode,
) -> Result<CategoricalDistribution, DistError> {
    if samples.is_empty() {
        return Err(DistError::Empty);
    }
    let n_dims = spec.n_dims();
    if samples[0].len() != n_dims {
        return Err(DistError::DimMismatch {
            got: samples[0].len(),
            want: n_dims,
        });
    }
    let inv = 1.0 / samples.len() as f64;
    let weights = match mode {
        DistMode::PerDim => {
            let mut w: Vec<Vec<f64>> = spec.dims.iter().map(|d| vec![0.0; d.bins]).collect();
            for s in samples {
                for (d, dim) in spec.dims.iter().enumerate() {
                    w[d][dim.index_of(s[d])] += inv;
                }
            }
            w
        }
        DistMode::Joint => {
            let total: usize = spec.dims.iter().map(|d| d.bins).product();
            let mut w = vec![0.0; total];
            for s in samples {
                let mut index = 0;
                for (d, dim) in spec.dims.iter().enumerate() {
                    index = index * dim.bins + dim.index_of(s[d]);
                }
                w[index] += inv;
            }
            vec![w]
        }
    };
    Ok(CategoricalDistribution {
        spec: spec.clone(),
        mode,
        weights,
    })
}

/// Wasserstein-1 per feature dimension (per-dim mode only).
pub fn wasserstein1_per_dim(
    p: &CategoricalDistribution,
    q: &CategoricalDistribution,
) -> Result<Vec<f64>, DistError> {
    if p.spec != q.spec || p.mode != q.mode || p.mode != DistMode::PerDim {
        return Err(DistError::SpecMismatch);
    }
    (0..p.spec.n_dims())
        .map(|d| {
            let support = p.support(d);
            Ok(wasserstein1_1d(&p.weights[d], &q.weights[d], &support)?)
        })
        .collect()
}

/// Wasserstein-1 between two distributions on the same spec.
///
/// Per-dim mode uses the closed-form CDF method per dimension (averaged over
/// dimensions); joint mode solves the exact transport problem with the
/// Euclidean ground cost between grid representatives.
pub fn wasserstein1(
    p: &CategoricalDistribution,
    q: &CategoricalDistribution,
) -> Result<f64, DistError> {
    if p.spec != q.spec || p.mode != q.mode {
        return Err(DistError::SpecMismatch);
    }
    match p.mode {
        DistMode::PerDim => {
            let per = wasserstein1_per_dim(p, q)?;
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        }
        DistMode::Joint => {
            let points_p: Vec<Vec<f64>> = (0..p.weights[0].len()).map(|i| p.joint_point(i)).collect();
            let cost = |i: usize, j: usize| -> f64 {
                points_p[i]
                    .iter()
                    .zip(&points_p[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            };
            let plan = solve_transport(&p.weights[0], &q.weights[0], &cost)?;
            Ok(plan.cost)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binning_matches_direct_count() {
        let spec = BinSpec::uniform(1, 0.0, 1.0, 4);
        let samples: Vec<Vec<f64>> = vec![vec![0.1], vec![0.1], vec![0.6], vec![0.9]];
        let d = empirical_distribution(&samples, &spec, DistMode::PerDim).unwrap();
        assert_eq!(d.weights[0], vec![0.5, 0.0, 0.25, 0.25]);
        // point mass
        let one = empirical_distribution(&[vec![0.3]], &spec, DistMode::PerDim).unwrap();
        assert_eq!(one.weights[0], vec![0.0, 1.0, 0.0, 0.0]);
        // even split
        let half = empirical_distribution(&[vec![0.1], vec![0.3]], &spec, DistMode::PerDim).unwrap();
        assert_eq!(half.weights[0], vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_samples_normalize_and_match_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = BinSpec::uniform(1, -3.0, 3.0, 12);
        let samples: Vec<Vec<f64>> = (0..1000)
            .map(|_| vec![rng.random_range(-1.0f64..1.0) + rng.random_range(-1.0..1.0)])
            .collect();
        let d = empirical_distribution(&samples, &spec, DistMode::PerDim).unwrap();
        let total: f64 = d.weights[0].iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        let mut direct = vec![0usize; 12];
        for s in &samples {
            direct[spec.dims[0].index_of(s[0])] += 1;
        }
        for (w, c) in d.weights[0].iter().zip(&direct) {
            assert!((w - *c as f64 / 1000.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_mode_uses_product_grid() {
        let spec = BinSpec::uniform(2, 0.0, 1.0, 2);
        let samples = vec![vec![0.1, 0.1], vec![0.9, 0.9]];
        let d = empirical_distribution(&samples, &spec, DistMode::Joint).unwrap();
        assert_eq!(d.weights[0], vec![0.5, 0.0, 0.0, 0.5]);
        // distance between the two occupied cells is sqrt(0.5^2 + 0.5^2)
        let q_samples = vec![vec![0.1, 0.1], vec![0.1, 0.9]];
        let q = empirical_distribution(&q_samples, &spec, DistMode::Joint).unwrap();
        let w = wasserstein1(&d, &q).unwrap();
        assert!((w - 0.25).abs() < 1e-12); // 0.5 mass moves 0.5 horizontally
    }

    #[test]
    fn per_dim_w1_and_mismatch_checks() {
        let spec = BinSpec::uniform(1, 0.0, 2.0, 2);
        let p = empirical_distribution(&[vec![0.1]], &spec, DistMode::PerDim).unwrap();
        let q = empirical_distribution(&[vec![1.9]], &spec, DistMode::PerDim).unwrap();
        assert!((wasserstein1(&p, &q).unwrap() - 1.0).abs() < 1e-12);
        let other = BinSpec::uniform(1, 0.0, 1.0, 2);
        let r = empirical_distribution(&[vec![0.1]], &other, DistMode::PerDim).unwrap();
        assert!(matches!(wasserstein1(&p, &r), Err(DistError::SpecMismatch)));
    }

    #[test]
    fn joint_and_per_dim_agree_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = BinSpec::uniform(1, -1.0, 1.0, 6);
        for _ in 0..20 {
            let a: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
            let b: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
            let p1 = empirical_distribution(&a, &spec, DistMode::PerDim).unwrap();
            let q1 = empirical_distribution(&b, &spec, DistMode::PerDim).unwrap();
            let pj = empirical_distribution(&a, &spec, DistMode::Joint).unwrap();
            let qj = empirical_distribution(&b, &spec, DistMode::Joint).unwrap();
            let w_closed = wasserstein1(&p1, &q1).unwrap();
            let w_exact = wasserstein1(&pj, &qj).unwrap();
            assert!(
                (w_closed - w_exact).abs() < 1e-10,
                "{w_closed} vs {w_exact}"
            );
        }
    }
}
