//! Synthetic data with a planted nested structure.
//!
//! Latent points `Z_i` are drawn uniformly on `Gr(p, m)`, embedded with a
//! random map `(A, B)` into `Gr(p, n)`, and then moved along a geodesic in a
//! uniformly random unit tangent direction for a distance `sigma`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{exp_map, sample_stiefel_uniform, tangent_project, GrassmannPoint};
use crate::nested::{embed_point, Dataset, NestedMap};
use crate::scalar::{gaussian_matrix, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of points `N`.
    pub samples: usize,
    /// Ambient dimension `n`.
    pub ambient: usize,
    /// Planted dimension `m`.
    pub planted: usize,
    /// Subspace dimension `p`.
    pub subspace: usize,
    /// Geodesic distance of each point from the planted manifold.
    pub sigma: f64,
    /// Standard deviation of the entries of the offset `B` before projection.
    pub b_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { samples: 50, ambient: 10, planted: 3, subspace: 1, sigma: 0.1, b_std: 0.1, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let Self { samples, ambient: n, planted: m, subspace: p, sigma, b_std, .. } = *self;
        if samples == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        if !(1 <= p && p <= m && m <= n) {
            return Err(Error::Config(format!("need 1 <= p <= m <= n, got p={p}, m={m}, n={n}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be finite and non-negative, got {sigma}")));
        }
        if !(b_std >= 0.0 && b_std.is_finite()) {
            return Err(Error::Config(format!("b_std must be finite and non-negative, got {b_std}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData<T: Scalar> {
    pub dataset: Dataset<T>,
    /// The planted map.
    pub truth: NestedMap<T>,
    /// Latent points on `Gr(p, m)`.
    pub latent: Vec<GrassmannPoint<T>>,
}

/// Draw a dataset. The same config always yields the same data.
pub fn generate<T: Scalar>(cfg: &SynthConfig) -> Result<SynthData<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    planted(cfg, &mut rng)
}

fn planted<T: Scalar>(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthData<T>> {
    let (n, m, p) = (cfg.ambient, cfg.planted, cfg.subspace);
    let latent = (0..cfg.samples)
        .map(|_| sample_stiefel_uniform::<T, _>(m, p, rng))
        .collect::<Result<Vec<_>>>()?;
    let a = sample_stiefel_uniform::<T, _>(n, m, rng)?.into_basis();
    let b: DMatrix<T> = gaussian_matrix::<T, _>(n, p, rng) * T::from_real(cfg.b_std);
    let truth = NestedMap::from_unconstrained(a, &b)?;
    let mut points = Vec::with_capacity(cfg.samples);
    for z in &latent {
        let base = embed_point(&truth, z)?;
        let raw: DMatrix<T> = gaussian_matrix(n, p, rng);
        let dir = tangent_project(&base, &raw)?;
        let len = dir.norm();
        let point = if cfg.sigma == 0.0 || len == 0.0 {
            base
        } else {
            exp_map(&base, &dir.scale(cfg.sigma / len))?
        };
        points.push(point);
    }
    Ok(SynthData { dataset: Dataset::new(points)?, truth, latent })
}

/// Two classes of `samples` points each, drawn around two independent planted
/// maps. Labels are `0` and `1`.
pub fn generate_two_class<T: Scalar>(cfg: &SynthConfig) -> Result<(Dataset<T>, Vec<i64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = planted::<T>(cfg, &mut rng)?;
    let second = planted::<T>(cfg, &mut rng)?;
    let mut points = first.dataset.points().to_vec();
    points.extend_from_slice(second.dataset.points());
    let labels = (0..2 * cfg.samples).map(|i| (i / cfg.samples) as i64).collect();
    let dataset = Dataset::new(points)?.with_labels(labels)?;
    let labels = dataset.labels().expect("labels just set").to_vec();
    Ok((dataset, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{geodesic_distance, principal_angles};
    use crate::nested::project_point;
    use num_complex::Complex64;

    #[test]
    fn noiseless_points_lie_on_planted_manifold() {
        let cfg = SynthConfig { samples: 30, ambient: 8, planted: 4, subspace: 2, sigma: 0.0, b_std: 0.3, seed: 1 };
        let synth = generate::<Complex64>(&cfg).unwrap();
        for (x, z) in synth.dataset.points().iter().zip(&synth.latent) {
            let back = project_point(&synth.truth, x).unwrap();
            assert!(principal_angles(&back, z).unwrap().max() < 1e-9);
        }
    }

    #[test]
    fn noise_has_requested_geodesic_length() {
        let cfg = SynthConfig { sigma: 0.3, ..SynthConfig::default() };
        let clean = generate::<f64>(&SynthConfig { sigma: 0.0, ..cfg.clone() }).unwrap();
        let noisy = generate::<f64>(&cfg).unwrap();
        for (x, y) in clean.dataset.points().iter().zip(noisy.dataset.points()) {
            assert!((geodesic_distance(x, y).unwrap() - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { seed: 9, ..SynthConfig::default() };
        let a = generate::<f64>(&cfg).unwrap();
        let b = generate::<f64>(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate::<f64>(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn planted_offset_is_horizontal() {
        let synth = generate::<f64>(&SynthConfig { b_std: 2.0, ..SynthConfig::default() }).unwrap();
        assert!((synth.truth.a().transpose() * synth.truth.b()).abs().max() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { samples: 0, ..SynthConfig::default() },
            SynthConfig { planted: 11, ..SynthConfig::default() },
            SynthConfig { subspace: 4, ..SynthConfig::default() },
            SynthConfig { sigma: -1.0, ..SynthConfig::default() },
            SynthConfig { b_std: f64::NAN, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate::<f64>(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn two_classes_are_labeled_in_blocks() {
        let cfg = SynthConfig { samples: 5, ..SynthConfig::default() };
        let (data, labels) = generate_two_class::<f64>(&cfg).unwrap();
        assert_eq!(data.len(), 10);
        assert_eq!(labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }
}
