//! Nested Grassmann dimensionality reduction.
//!
//! Points of a Grassmann manifold `Gr(p, n)` are projected onto an embedded
//! lower-dimensional Grassmann manifold `Gr(p, m)` through the map
//! `X -> span(adjoint(A) X)`, whose adjoint embedding is `Z -> span(A Z + B)`.
//! The pair `(A, B)` is fit by Riemannian conjugate gradient, either to
//! minimize reconstruction error or, with labels, to separate classes.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod io;
mod linalg;
pub mod manifold;
pub mod nested;
pub mod optim;
pub mod scalar;
pub mod shape;

pub use error::{Error, Result};
pub use manifold::{GrassmannPoint, PrincipalAngles, TangentVector, Tolerances};
pub use scalar::{AnyMatrix, Field, Scalar};
