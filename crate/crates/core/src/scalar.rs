//! Scalar fields supported by every geometric operation.
//!
//! Real and complex subspaces share one code path: all algorithms are written
//! against [`Scalar`] and use the adjoint wherever a transpose appears.

use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Real,
    Complex,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::Real => "real",
            Field::Complex => "complex",
        }
    }

    /// Real dimension of one scalar.
    pub fn real_dim(self) -> usize {
        match self {
            Field::Real => 1,
            Field::Complex => 2,
        }
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub trait Scalar: ComplexField<RealField = f64> + Copy + Send + Sync + 'static {
    const FIELD: Field;

    /// Standard Gaussian draw. Complex draws have unit total variance.
    fn sample_standard<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Build from real and imaginary parts; `im` must be zero for the real field.
    fn from_parts(re: f64, im: f64) -> Option<Self>;

    fn parts(self) -> (f64, f64) {
        (self.real(), self.imaginary())
    }

    fn wrap(m: DMatrix<Self>) -> AnyMatrix;

    fn unwrap(m: &AnyMatrix) -> Option<&DMatrix<Self>>;
}

impl Scalar for f64 {
    const FIELD: Field = Field::Real;

    fn sample_standard<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn from_parts(re: f64, im: f64) -> Option<Self> {
        (im == 0.0).then_some(re)
    }

    fn wrap(m: DMatrix<Self>) -> AnyMatrix {
        AnyMatrix::Real(m)
    }

    fn unwrap(m: &AnyMatrix) -> Option<&DMatrix<Self>> {
        match m {
            AnyMatrix::Real(m) => Some(m),
            AnyMatrix::Complex(_) => None,
        }
    }
}

impl Scalar for Complex64 {
    const FIELD: Field = Field::Complex;

    fn sample_standard<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    fn from_parts(re: f64, im: f64) -> Option<Self> {
        Some(Complex64::new(re, im))
    }

    fn wrap(m: DMatrix<Self>) -> AnyMatrix {
        AnyMatrix::Complex(m)
    }

    fn unwrap(m: &AnyMatrix) -> Option<&DMatrix<Self>> {
        match m {
            AnyMatrix::Complex(m) => Some(m),
            AnyMatrix::Real(_) => None,
        }
    }
}

/// A matrix whose scalar field is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyMatrix {
    Real(DMatrix<f64>),
    Complex(DMatrix<Complex64>),
}

impl AnyMatrix {
    pub fn field(&self) -> Field {
        match self {
            AnyMatrix::Real(_) => Field::Real,
            AnyMatrix::Complex(_) => Field::Complex,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            AnyMatrix::Real(m) => m.shape(),
            AnyMatrix::Complex(m) => m.shape(),
        }
    }
}

/// Frobenius inner product `Re tr(adjoint(a) b)`.
pub fn inner<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x.conjugate() * *y).real())
        .sum()
}

pub fn frobenius<T: Scalar>(a: &DMatrix<T>) -> f64 {
    a.iter().map(|x| x.modulus_squared()).sum::<f64>().sqrt()
}

pub fn gaussian_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<T> {
    // Column-major fill order is part of the determinism contract.
    DMatrix::from_fn(rows, cols, |_, _| T::sample_standard(rng))
}
