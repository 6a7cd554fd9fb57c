//! Planar shapes as points of `Gr(1, C^(k-1))`.
//!
//! A k-ad is mapped to the complex line spanned by its landmarks relative to
//! the first one, written as `x + iy`. Translation is removed by the
//! subtraction, and rotation and scaling by taking the span.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{geodesic_distance, orthonormalize, GrassmannPoint};
use crate::nested::Dataset;

/// An ordered list of `k > 2` planar landmarks, not all equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KAds {
    points: Vec<[f64; 2]>,
}

impl KAds {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() <= 2 {
            return Err(Error::Shape(format!("a k-ad needs k > 2 landmarks, got {}", points.len())));
        }
        if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::Format(format!("landmark {i} is not finite")));
        }
        if points.iter().all(|p| *p == points[0]) {
            return Err(Error::Degenerate("all landmarks coincide".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    /// `x -> scale * R(angle) x + shift`, optionally preceded by the reflection `(x, y) -> (x, -y)`.
    pub fn transformed(&self, scale: f64, angle: f64, shift: [f64; 2], reflect: bool) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let points = self
            .points
            .iter()
            .map(|&[x, y]| {
                let y = if reflect { -y } else { y };
                [scale * (c * x - s * y) + shift[0], scale * (s * x + c * y) + shift[1]]
            })
            .collect();
        Self::new(points)
    }
}

/// The shape of a k-ad as a point of `Gr(1, C^(k-1))`.
pub fn kads_to_grassmann(shape: &KAds) -> Result<GrassmannPoint<Complex64>> {
    let [x0, y0] = shape.points[0];
    let offsets: Vec<Complex64> = shape.points[1..]
        .iter()
        .map(|&[x, y]| Complex64::new(x - x0, y - y0))
        .collect();
    let v = DMatrix::from_column_slice(offsets.len(), 1, &offsets);
    orthonormalize(&v).map_err(|_| Error::Degenerate("landmarks coincide with the first one".into()))
}

/// Geodesic distance between the shapes of two k-ads.
pub fn shape_distance(a: &KAds, b: &KAds) -> Result<f64> {
    if a.k() != b.k() {
        return Err(Error::Shape(format!("landmark counts differ: {} vs {}", a.k(), b.k())));
    }
    geodesic_distance(&kads_to_grassmann(a)?, &kads_to_grassmann(b)?)
}

/// Map labeled k-ads to a labeled dataset on `Gr(1, C^(k-1))`.
pub fn shapes_to_dataset(shapes: &[KAds], labels: &[i64]) -> Result<Dataset<Complex64>> {
    if shapes.len() != labels.len() {
        return Err(Error::Shape(format!("{} labels for {} shapes", labels.len(), shapes.len())));
    }
    let points = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| kads_to_grassmann(s).map_err(|e| e.at_index(i)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(points)?.with_labels(labels.to_vec())
}

/// Two classes of closed contours.
///
/// Every contour is an ellipse whose radius is modulated by random
/// low-frequency Fourier terms shared by both classes. The classes differ by
/// a small localized bump pointing outward for class 0 and inward for class 1.
/// Landmarks get isotropic noise and each shape a random similarity transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeGenConfig {
    pub per_class: usize,
    pub landmarks: usize,
    /// Number of random Fourier modes in the radius.
    pub nuisance_modes: usize,
    /// Amplitude of the first mode; mode `f` has amplitude `nuisance_amplitude / f`.
    pub nuisance_amplitude: f64,
    /// Height of the class bump relative to the radius.
    pub class_amplitude: f64,
    /// Standard deviation of landmark noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ShapeGenConfig {
    fn default() -> Self {
        Self {
            per_class: 20,
            landmarks: 100,
            nuisance_modes: 12,
            nuisance_amplitude: 0.15,
            class_amplitude: 0.08,
            noise: 0.005,
            seed: 0,
        }
    }
}

impl ShapeGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        if self.landmarks <= 2 {
            return Err(Error::Config(format!("need more than 2 landmarks, got {}", self.landmarks)));
        }
        for (name, v) in [
            ("nuisance_amplitude", self.nuisance_amplitude),
            ("class_amplitude", self.class_amplitude),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Shapes and labels (`0` then `1`, `per_class` each). Deterministic per seed.
pub fn generate_shapes(cfg: &ShapeGenConfig) -> Result<(Vec<KAds>, Vec<i64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.landmarks;
    let mut shapes = Vec::with_capacity(2 * cfg.per_class);
    let mut labels = Vec::with_capacity(2 * cfg.per_class);
    for class in 0..2i64 {
        let sign = if class == 0 { 1.0 } else { -1.0 };
        for _ in 0..cfg.per_class {
            let modes: Vec<(f64, f64)> = (1..=cfg.nuisance_modes)
                .map(|_| (normal(&mut rng), normal(&mut rng)))
                .collect();
            let mut points = Vec::with_capacity(k);
            for j in 0..k {
                let t = std::f64::consts::TAU * j as f64 / k as f64;
                let mut r = 1.0;
                for (f, (a, b)) in modes.iter().enumerate() {
                    let f = (f + 1) as f64;
                    r += cfg.nuisance_amplitude / f * (a * (f * t).cos() + b * (f * t).sin());
                }
                let dt = wrapped(t - std::f64::consts::FRAC_PI_2);
                r += sign * cfg.class_amplitude * (-dt * dt / (2.0 * 0.25 * 0.25)).exp();
                points.push([
                    1.5 * r * t.cos() + cfg.noise * normal(&mut rng),
                    r * t.sin() + cfg.noise * normal(&mut rng),
                ]);
            }
            let scale = rng.random_range(0.5..2.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let shift = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            shapes.push(KAds::new(points)?.transformed(scale, angle, shift, false)?);
            labels.push(class);
        }
    }
    Ok((shapes, labels))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn wrapped(t: f64) -> f64 {
    (t + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI
}
