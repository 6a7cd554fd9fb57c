//! Nested Grassmann maps and their fitting.
//!
//! A [`NestedMap`] `(A, B)` with `A` an `n x m` orthonormal frame and
//! `adjoint(A) B = 0` defines the embedding `Gr(p, m) -> Gr(p, n)`,
//! `Z -> span(A Z + B)`, and the projection `Gr(p, n) -> Gr(p, m)`,
//! `X -> span(adjoint(A) X)`. Projection after embedding is the identity, and
//! with `B = 0` the embedding is an isometry.
//!
//! The unsupervised fit minimizes the mean squared distance between each
//! point and its reconstruction, the closest point of the embedded
//! submanifold lying over its projection. The free matrix
//! `B~` is optimized without constraint and projected onto the nullspace of
//! `adjoint(A)` inside the loss, so the optimization runs over
//! `Gr(m, n) x F^{n x p}`.
//!
//! The supervised fit minimizes `(1/N^2) sum_ij a_ij d^2(pi(X_i), pi(X_j))`
//! for an affinity `a` that is positive between nearby same-class points and
//! negative between nearby points of different classes.

use std::collections::BTreeSet;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    geodesic_distance, horizontal, karcher_iterate, svd, orthonormalize, orthonormality_defect,
    projection_distance, sample_stiefel_uniform, FrechetConfig, GrassmannPoint,
};
use crate::optim::{minimize, LossValue, Minimum, OptimizerConfig, ProductPoint, Termination};
use crate::scalar::{frobenius, gaussian_matrix, Field, Scalar};

/// Distance used inside the losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Geodesic,
    #[default]
    Projection,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Geodesic => "geodesic",
            Metric::Projection => "projection",
        }
    }

    pub fn distance<T: Scalar>(self, x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> Result<f64> {
        match self {
            Metric::Geodesic => geodesic_distance(x, y),
            Metric::Projection => projection_distance(x, y),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geodesic" => Ok(Metric::Geodesic),
            "projection" => Ok(Metric::Projection),
            other => Err(Error::Config(format!("unknown metric {other:?} (expected geodesic or projection)"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Points of one Grassmann manifold, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Scalar> {
    points: Vec<GrassmannPoint<T>>,
    labels: Option<Vec<i64>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(points: Vec<GrassmannPoint<T>>) -> Result<Self> {
        if let Some(first) = points.first() {
            let shape = first.basis().shape();
            if let Some(i) = points.iter().position(|q| q.basis().shape() != shape) {
                return Err(Error::Shape(format!(
                    "point {i} has shape {:?}, expected {shape:?}",
                    points[i].basis().shape()
                )));
            }
        }
        Ok(Self { points, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[GrassmannPoint<T>] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Ambient dimension (0 when empty).
    pub fn n(&self) -> usize {
        self.points.first().map_or(0, |x| x.n())
    }

    pub fn p(&self) -> usize {
        self.points.first().map_or(0, |x| x.p())
    }

    pub fn field(&self) -> Field {
        T::FIELD
    }
}

/// Embedding/projection pair between `Gr(p, m)` and `Gr(p, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedMap<T: Scalar> {
    a: DMatrix<T>,
    b: DMatrix<T>,
}

impl<T: Scalar> NestedMap<T> {
    /// Validate an explicit `(A, B)` pair.
    pub fn new(a: DMatrix<T>, b: DMatrix<T>) -> Result<Self> {
        let (n, m) = a.shape();
        if m == 0 || m > n || b.nrows() != n || b.ncols() == 0 || b.ncols() > m {
            return Err(Error::Shape(format!(
                "need A: n x m and B: n x p with 1 <= p <= m <= n, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let defect = orthonormality_defect(&a);
        if !(defect <= 1e-10) {
            return Err(Error::Degenerate(format!("A is not orthonormal (defect {defect:e})")));
        }
        let cross = frobenius(&(a.adjoint() * &b));
        if !(cross <= 1e-8 * frobenius(&b).max(1.0)) {
            return Err(Error::Degenerate(format!("adjoint(A) B = {cross:e} is not zero")));
        }
        Ok(Self { a, b })
    }

    /// Build from an unconstrained `B~`, storing `B = (I - A adjoint(A)) B~`.
    pub fn from_unconstrained(a: DMatrix<T>, b_free: &DMatrix<T>) -> Result<Self> {
        let b = horizontal(&a, b_free);
        Self::new(a, b)
    }

    /// `A = [I_m; 0]`, `B = 0`.
    pub fn natural(n: usize, m: usize, p: usize) -> Result<Self> {
        Self::new(DMatrix::identity(n, m), DMatrix::zeros(n, p))
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.ncols()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    pub fn field(&self) -> Field {
        T::FIELD
    }
}

fn check_dims(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

/// `span(A Z + B)` for the given basis of `Z`.
pub fn embed_point<T: Scalar>(map: &NestedMap<T>, z: &GrassmannPoint<T>) -> Result<GrassmannPoint<T>> {
    check_dims("embedded point", z.basis().shape(), (map.m(), map.p()))?;
    orthonormalize(&(&map.a * z.basis() + &map.b))
}

/// `span(adjoint(A) X)`, returned with the orthonormal basis `Z` whose
/// embedding `span(A Z + B)` is the reconstruction of `X`.
pub fn project_point<T: Scalar>(map: &NestedMap<T>, x: &GrassmannPoint<T>) -> Result<GrassmannPoint<T>> {
    check_dims("projected point", x.basis().shape(), (map.n(), map.p()))?;
    let fib = fiber(&map.a, &map.b, x.basis()).ok_or(Error::DegenerateProjection { index: None })?;
    Ok(GrassmannPoint::from_basis_unchecked(fib.representative()))
}

fn project_with<T: Scalar>(a: &DMatrix<T>, x: &GrassmannPoint<T>) -> Result<GrassmannPoint<T>> {
    orthonormalize(&(a.adjoint() * x.basis())).map_err(|_| Error::DegenerateProjection { index: None })
}

/// The point of the embedded submanifold lying over `span(adjoint(A) X)` that
/// is closest to `X` in projection distance.
///
/// With `B = 0` this is `span(A adjoint(A) X)`. With `B != 0` the points
/// `span(A Z U + B)` for unitary `U` differ, and the closest one is taken, so
/// points already on the submanifold are fixed.
pub fn reconstruct_point<T: Scalar>(map: &NestedMap<T>, x: &GrassmannPoint<T>) -> Result<GrassmannPoint<T>> {
    check_dims("reconstructed point", x.basis().shape(), (map.n(), map.p()))?;
    let fib = fiber(&map.a, &map.b, x.basis()).ok_or(Error::DegenerateProjection { index: None })?;
    orthonormalize(&(&map.a * fib.representative() + &map.b)).map_err(|_| Error::DegenerateProjection { index: None })
}

/// A point `X` seen from a map: `M = adjoint(A) X`, the eigenpairs of
/// `adjoint(M) M` (whose square root is `S`), and the unitary `U` picking the
/// reconstruction `span(A M S^{-1} U + B)`.
struct Fiber<T: Scalar> {
    coords: DMatrix<T>,
    eigvecs: DMatrix<T>,
    roots: Vec<f64>,
    unitary: DMatrix<T>,
}

impl<T: Scalar> Fiber<T> {
    fn root_power(&self, power: f64) -> DMatrix<T> {
        let scaled = DMatrix::from_fn(self.roots.len(), self.roots.len(), |i, j| {
            self.eigvecs[(i, j)] * T::from_real(self.roots[j].powf(power))
        });
        scaled * self.eigvecs.adjoint()
    }

    fn representative(&self) -> DMatrix<T> {
        &self.coords * self.root_power(-1.0) * &self.unitary
    }

    /// Solves `S F + F S = rhs`.
    fn sylvester(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        let local = self.eigvecs.adjoint() * rhs * &self.eigvecs;
        let solved = DMatrix::from_fn(local.nrows(), local.ncols(), |i, j| {
            local[(i, j)] / T::from_real(self.roots[i] + self.roots[j])
        });
        &self.eigvecs * solved * self.eigvecs.adjoint()
    }
}

const DEGENERATE_GRAM: f64 = 1e-24;

fn fiber<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, x: &DMatrix<T>) -> Option<Fiber<T>> {
    let p = x.ncols();
    let coords = a.adjoint() * x;
    let eig = (coords.adjoint() * &coords).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > DEGENERATE_GRAM)) {
        return None;
    }
    let roots = eig.eigenvalues.iter().map(|l| l.sqrt()).collect();
    let mut fib = Fiber { coords, eigvecs: eig.eigenvectors, roots, unitary: DMatrix::identity(p, p) };
    if b.norm_squared() > 0.0 {
        let s = fib.root_power(1.0);
        let weight = (DMatrix::<T>::identity(p, p) + b.adjoint() * b).cholesky()?.inverse();
        let linear = &s * (b.adjoint() * x).adjoint() * &weight;
        fib.unitary = align_unitary(&(&s * &s), &weight, &linear);
    }
    Some(fib)
}

// The reconstruction residual over the fiber is p - h(U) - const with
// h(U) = Re tr(U W adjoint(U) S^2) + 2 Re tr(adjoint(U) L), W = (I + adjoint(B) B)^{-1}
// and L = S adjoint(B^H X) W. h is convex, so U <- polar(grad h(U)) never
// decreases it; Newton steps in the Lie algebra take over near a maximum.
//
// h has several local maxima for p > 1 (for real fields at least one per
// component of O(p)). A fixed set of starting points is screened by h and the
// best few are refined, so the value max h, and with it the loss, stays
// continuous in (A, B).
const ALIGN_MAX_STEPS: usize = 500;
const ALIGN_REFINED_STARTS: usize = 3;
const ALIGN_GRAD_TOL: f64 = 1e-12;
const ALIGN_BACKTRACKS: usize = 30;

fn align_unitary<T: Scalar>(s2: &DMatrix<T>, weight: &DMatrix<T>, linear: &DMatrix<T>) -> DMatrix<T> {
    let p = weight.nrows();
    let objective = |u: &DMatrix<T>| {
        (u * weight * u.adjoint() * s2).trace().real() + 2.0 * (u.adjoint() * linear).trace().real()
    };
    let mut starts = alignment_starts(s2, weight, linear);
    if p == 1 && T::FIELD == Field::Real {
        starts.truncate(1);
    }
    let mut scored: Vec<(f64, DMatrix<T>)> = starts.into_iter().map(|u| (objective(&u), u)).collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut best: Option<(f64, DMatrix<T>)> = None;
    for (_, u0) in scored.into_iter().take(ALIGN_REFINED_STARTS) {
        let u = refine_unitary(s2, weight, linear, u0);
        let h = objective(&u);
        if best.as_ref().is_none_or(|b| h > b.0) {
            best = Some((h, u));
        }
    }
    best.expect("at least one start").1
}

// Deterministic candidates: polar(L), the identity, the eigenvector alignment
// of W with S^2, a grid over SO(2) when p = 2, and for real fields each of
// these composed with a reflection.
fn alignment_starts<T: Scalar>(s2: &DMatrix<T>, weight: &DMatrix<T>, linear: &DMatrix<T>) -> Vec<DMatrix<T>> {
    let p = weight.nrows();
    let mut starts = Vec::new();
    if linear.norm_squared() > 0.0 {
        starts.push(polar(linear));
    }
    starts.push(DMatrix::identity(p, p));
    let descending = |m: &DMatrix<T>| {
        let eig = m.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        DMatrix::from_columns(&order.iter().map(|&k| eig.eigenvectors.column(k)).collect::<Vec<_>>())
    };
    starts.push(descending(s2) * descending(weight).adjoint());
    if p == 2 {
        for k in 1..8 {
            let (sn, cs) = (k as f64 * std::f64::consts::PI / 4.0).sin_cos();
            starts.push(DMatrix::from_row_slice(
                2,
                2,
                &[T::from_real(cs), T::from_real(-sn), T::from_real(sn), T::from_real(cs)],
            ));
        }
    }
    if T::FIELD == Field::Real {
        let mut flip = DMatrix::<T>::identity(p, p);
        flip[(p - 1, p - 1)] = -T::one();
        let reflected: Vec<DMatrix<T>> = starts.iter().map(|u| u * &flip).collect();
        starts.extend(reflected);
    }
    starts
}

fn refine_unitary<T: Scalar>(s2: &DMatrix<T>, weight: &DMatrix<T>, linear: &DMatrix<T>, start: DMatrix<T>) -> DMatrix<T> {
    let p = weight.nrows();
    let objective = |u: &DMatrix<T>| {
        (u * weight * u.adjoint() * s2).trace().real() + 2.0 * (u.adjoint() * linear).trace().real()
    };
    let majorize = |u: &DMatrix<T>| polar(&(s2 * u * weight + linear));
    let basis = skew_basis::<T>(p);
    let d = basis.len();
    let grad_tol = ALIGN_GRAD_TOL * (s2.norm() + linear.norm()).max(1.0);
    let mut u = start;
    for _ in 0..ALIGN_MAX_STEPS {
        if d == 0 {
            let next = majorize(&u);
            let moved = (&next - &u).norm();
            u = next;
            if moved < 1e-15 {
                break;
            }
            continue;
        }
        let a_local = u.adjoint() * s2 * &u;
        let l_local = u.adjoint() * linear;
        let slope = |w: &DMatrix<T>| {
            ((w * weight - weight * w) * &a_local).trace().real() - 2.0 * (w * &l_local).trace().real()
        };
        let curvature = |w: &DMatrix<T>| {
            let c = w * weight - weight * w;
            ((w * &c - &c * w) * &a_local).trace().real() + 2.0 * (w * w * &l_local).trace().real()
        };
        let grad = nalgebra::DVector::from_iterator(d, basis.iter().map(slope));
        if grad.norm() < grad_tol {
            break;
        }
        let mut hess = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let v = (curvature(&(&basis[i] + &basis[j])) - curvature(&(&basis[i] - &basis[j]))) / 4.0;
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        // Newton step, shifted where the Hessian is not negative definite, then backtracked.
        let neg = -hess;
        let step = neg.clone().cholesky().map(|c| c.solve(&grad)).or_else(|| {
            let lowest = neg.clone().symmetric_eigen().eigenvalues.min();
            let shift = (-lowest).max(0.0) + grad.norm();
            (neg + DMatrix::<f64>::identity(d, d) * shift).cholesky().map(|c| c.solve(&grad))
        });
        let current = objective(&u);
        let mut next = None;
        if let Some(step) = step {
            let omega = basis
                .iter()
                .zip(step.iter())
                .fold(DMatrix::<T>::zeros(p, p), |acc, (e, &c)| acc + e * T::from_real(c));
            let mut scale = 1.0;
            for _ in 0..ALIGN_BACKTRACKS {
                let trial = reunitarize(&u * (&omega * T::from_real(scale)).exp());
                if objective(&trial) >= current - 1e-14 {
                    next = Some(trial);
                    break;
                }
                scale *= 0.5;
            }
        }
        let next = next.unwrap_or_else(|| majorize(&u));
        let moved = (&next - &u).norm();
        u = next;
        if moved < 1e-15 {
            break;
        }
    }
    u
}

/// One Newton-Schulz step `Q (3 I - adjoint(Q) Q) / 2` toward the nearest unitary.
fn reunitarize<T: Scalar>(q: DMatrix<T>) -> DMatrix<T> {
    let p = q.ncols();
    let gram = q.adjoint() * &q;
    &q * (DMatrix::<T>::identity(p, p) * T::from_real(3.0) - gram) * T::from_real(0.5)
}

fn polar<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let f = svd(m);
    f.u * f.v.adjoint()
}

/// Basis of the skew-Hermitian `p x p` matrices (skew-symmetric for real fields).
fn skew_basis<T: Scalar>(p: usize) -> Vec<DMatrix<T>> {
    let mut out = Vec::new();
    let i_unit = T::from_parts(0.0, 1.0);
    for j in 0..p {
        if let Some(i_unit) = i_unit {
            let mut e = DMatrix::<T>::zeros(p, p);
            e[(j, j)] = i_unit;
            out.push(e);
        }
        for k in 0..j {
            let mut e = DMatrix::<T>::zeros(p, p);
            e[(j, k)] = T::one();
            e[(k, j)] = -T::one();
            out.push(e);
            if let Some(i_unit) = i_unit {
                let mut e = DMatrix::<T>::zeros(p, p);
                e[(j, k)] = i_unit;
                e[(k, j)] = i_unit;
                out.push(e);
            }
        }
    }
    out
}

pub fn project_dataset<T: Scalar>(map: &NestedMap<T>, data: &Dataset<T>) -> Result<Dataset<T>> {
    let points = data
        .points()
        .iter()
        .enumerate()
        .map(|(i, x)| project_point(map, x).map_err(|e| e.at_index(i)))
        .collect::<Result<Vec<_>>>()?;
    relabel(Dataset::new(points)?, data)
}

pub fn reconstruct_dataset<T: Scalar>(map: &NestedMap<T>, data: &Dataset<T>) -> Result<Dataset<T>> {
    let points = data
        .points()
        .iter()
        .enumerate()
        .map(|(i, x)| reconstruct_point(map, x).map_err(|e| e.at_index(i)))
        .collect::<Result<Vec<_>>>()?;
    relabel(Dataset::new(points)?, data)
}

fn relabel<T: Scalar>(out: Dataset<T>, like: &Dataset<T>) -> Result<Dataset<T>> {
    match like.labels() {
        Some(l) => out.with_labels(l.to_vec()),
        None => Ok(out),
    }
}

fn check_data<T: Scalar>(data: &[GrassmannPoint<T>], n: usize) -> Result<usize> {
    let first = data.first().ok_or_else(|| Error::Degenerate("empty dataset".into()))?;
    if first.n() != n {
        return Err(Error::Shape(format!("data live in dimension {}, map in {n}", first.n())));
    }
    Ok(first.p())
}

/// Inverse of a Hermitian positive definite Gram matrix, or `None` if it is
/// numerically singular.
fn gram_inverse<T: Scalar>(gram: DMatrix<T>) -> Option<DMatrix<T>> {
    let scale = (0..gram.nrows()).map(|i| gram[(i, i)].real()).fold(0.0, f64::max);
    let chol = gram.cholesky()?;
    let l = chol.l_dirty();
    let smallest = (0..l.nrows()).map(|i| l[(i, i)].real()).fold(f64::INFINITY, f64::min);
    if !(smallest * smallest > 1e-24 * scale) {
        return None;
    }
    Some(chol.inverse())
}

/// Mean squared reconstruction error `(1/N) sum d^2(X_i, X^_i)` under the map
/// `(A, (I - A adjoint(A)) b_free)`, plus Euclidean gradients in `(A, b_free)`.
/// See [`reconstruct_point`] for `X^_i`. A full-rank `A` off the Stiefel
/// manifold is replaced by its polar factor.
///
/// Gradients are analytic for the projection metric and central finite
/// differences for the geodesic metric.
pub fn loss_unsupervised<T: Scalar>(
    a: &DMatrix<T>,
    b_free: &DMatrix<T>,
    data: &[GrassmannPoint<T>],
    metric: Metric,
) -> Result<LossValue<T>> {
    let p = check_data(data, a.nrows())?;
    check_dims("B", b_free.shape(), (a.nrows(), p))?;
    let frame = PolarFrame::new(a)?;
    match metric {
        Metric::Projection => {
            let (value, ga, gb) = unsupervised_projection(&frame.q, b_free, data)?;
            Ok((value, frame.pullback(&ga), gb))
        }
        Metric::Geodesic => {
            let value = unsupervised_geodesic_value(&frame.q, b_free, data)?;
            let (ga, gb) = central_differences(a, b_free, |a, b| {
                unsupervised_geodesic_value(&PolarFrame::new(a)?.q, b, data)
            })?;
            Ok((value, ga, gb))
        }
    }
}

/// Loss value only.
pub fn loss_unsupervised_value<T: Scalar>(
    a: &DMatrix<T>,
    b_free: &DMatrix<T>,
    data: &[GrassmannPoint<T>],
    metric: Metric,
) -> Result<f64> {
    let p = check_data(data, a.nrows())?;
    check_dims("B", b_free.shape(), (a.nrows(), p))?;
    let q = PolarFrame::new(a)?.q;
    match metric {
        Metric::Projection => Ok(unsupervised_projection(&q, b_free, data)?.0),
        Metric::Geodesic => unsupervised_geodesic_value(&q, b_free, data),
    }
}

/// Polar decomposition `A = Q P` with `P = V diag(s) adjoint(V)`.
///
/// The unsupervised loss is evaluated at `Q`, which equals `A` on the Stiefel
/// manifold and extends the loss smoothly to every full-rank `A`.
struct PolarFrame<T: Scalar> {
    q: DMatrix<T>,
    v: DMatrix<T>,
    s: Vec<f64>,
}

impl<T: Scalar> PolarFrame<T> {
    fn new(a: &DMatrix<T>) -> Result<Self> {
        let f = svd(a);
        if f.s.last().is_none_or(|&x| !(x > f64::EPSILON * a.ncols() as f64)) {
            return Err(Error::Degenerate("frame A is rank deficient".into()));
        }
        Ok(Self { q: &f.u * f.v.adjoint(), v: f.v, s: f.s })
    }

    /// Gradient in `A` from the gradient `g` in `Q`:
    /// `Q (W - adjoint(W)) + (I - Q adjoint(Q)) g P^{-1}` with `P W + W P = adjoint(Q) g`.
    fn pullback(&self, g: &DMatrix<T>) -> DMatrix<T> {
        let local = self.v.adjoint() * self.q.adjoint() * g * &self.v;
        let w = DMatrix::from_fn(local.nrows(), local.ncols(), |i, j| local[(i, j)] / T::from_real(self.s[i] + self.s[j]));
        let w = &self.v * w * self.v.adjoint();
        let p_inv = DMatrix::from_fn(self.s.len(), self.s.len(), |i, j| self.v[(i, j)] / T::from_real(self.s[j]))
            * self.v.adjoint();
        &self.q * (&w - w.adjoint()) + horizontal(&self.q, &(g * p_inv))
    }
}

// Each point is reconstructed as span(Y) with Y = A M + B K, K = adjoint(U) S.
// With G = adjoint(Y) Y and C = adjoint(Y) X, the residual R = X - Y G^{-1} C
// has |R|_F^2 = d_p^2 and the Y-gradient is Gamma = -2 R adjoint(C) G^{-1}.
// U is optimal over its fiber, so only the explicit dependence of Y on
// (A, B~) contributes; S enters through a Sylvester equation.
fn unsupervised_projection<T: Scalar>(
    a: &DMatrix<T>,
    b_free: &DMatrix<T>,
    data: &[GrassmannPoint<T>],
) -> Result<LossValue<T>> {
    let count = T::from_real(data.len() as f64);
    let b = horizontal(a, b_free);
    let mut loss = 0.0;
    let mut grad_a = DMatrix::<T>::zeros(a.nrows(), a.ncols());
    let mut grad_b = DMatrix::<T>::zeros(b_free.nrows(), b_free.ncols());
    for (i, point) in data.iter().enumerate() {
        let x = point.basis();
        let fib = fiber(a, &b, x).ok_or(Error::DegenerateProjection { index: Some(i) })?;
        let k = fib.unitary.adjoint() * fib.root_power(1.0);
        let y = a * &fib.coords + &b * &k;
        let ginv = gram_inverse(y.adjoint() * &y).ok_or(Error::DegenerateProjection { index: Some(i) })?;
        let c = y.adjoint() * x;
        let r = x - &y * (&ginv * &c);
        loss += r.norm_squared();
        let gamma = &r * c.adjoint() * &ginv * T::from_real(-2.0);
        let gamma_b = &gamma * k.adjoint();
        let psi = &fib.unitary * b.adjoint() * &gamma;
        let phi = fib.sylvester(&((&psi + psi.adjoint()) * T::from_real(0.5)));
        grad_a += &gamma * fib.coords.adjoint() + x * (gamma.adjoint() * a)
            - &gamma_b * (b_free.adjoint() * a)
            - b_free * (gamma_b.adjoint() * a)
            + x * phi * fib.coords.adjoint() * T::from_real(2.0);
        grad_b += horizontal(a, &gamma_b);
    }
    let n = data.len() as f64;
    Ok((loss / n, grad_a / count, grad_b / count))
}

fn unsupervised_geodesic_value<T: Scalar>(
    a: &DMatrix<T>,
    b_free: &DMatrix<T>,
    data: &[GrassmannPoint<T>],
) -> Result<f64> {
    let b = horizontal(a, b_free);
    let mut total = 0.0;
    for (i, x) in data.iter().enumerate() {
        let fib = fiber(a, &b, x.basis()).ok_or(Error::DegenerateProjection { index: Some(i) })?;
        let recon = orthonormalize(&(a * fib.representative() + &b))
            .map_err(|_| Error::DegenerateProjection { index: Some(i) })?;
        let dist = geodesic_distance(x, &recon)?;
        total += dist * dist;
    }
    Ok(total / data.len() as f64)
}

const FD_STEP: f64 = 1e-6;

/// Central-difference gradient over every real degree of freedom of `(a, b)`.
fn central_differences<T, F>(a: &DMatrix<T>, b: &DMatrix<T>, mut f: F) -> Result<(DMatrix<T>, DMatrix<T>)>
where
    T: Scalar,
    F: FnMut(&DMatrix<T>, &DMatrix<T>) -> Result<f64>,
{
    let mut ga = DMatrix::<T>::zeros(a.nrows(), a.ncols());
    let mut gb = DMatrix::<T>::zeros(b.nrows(), b.ncols());
    let directions: &[(f64, f64)] = match T::FIELD {
        Field::Real => &[(1.0, 0.0)],
        Field::Complex => &[(1.0, 0.0), (0.0, 1.0)],
    };
    let mut a_work = a.clone();
    for idx in 0..a.len() {
        let mut acc = T::zero();
        for &(re, im) in directions {
            let unit = T::from_parts(re, im).expect("valid direction for field");
            let h = unit * T::from_real(FD_STEP);
            a_work[idx] = a[idx] + h;
            let up = f(&a_work, b)?;
            a_work[idx] = a[idx] - h;
            let down = f(&a_work, b)?;
            a_work[idx] = a[idx];
            acc += unit * T::from_real((up - down) / (2.0 * FD_STEP));
        }
        ga[idx] = acc;
    }
    let mut b_work = b.clone();
    for idx in 0..b.len() {
        let mut acc = T::zero();
        for &(re, im) in directions {
            let unit = T::from_parts(re, im).expect("valid direction for field");
            let h = unit * T::from_real(FD_STEP);
            b_work[idx] = b[idx] + h;
            let up = f(a, &b_work)?;
            b_work[idx] = b[idx] - h;
            let down = f(a, &b_work)?;
            b_work[idx] = b[idx];
            acc += unit * T::from_real((up - down) / (2.0 * FD_STEP));
        }
        gb[idx] = acc;
    }
    Ok((ga, gb))
}

/// Symmetric pairwise affinity with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    values: DMatrix<f64>,
}

impl AffinityMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (r, c) = values.shape();
        if r != c {
            return Err(Error::Shape(format!("affinity must be square, got {r} x {c}")));
        }
        for i in 0..r {
            if values[(i, i)] != 0.0 {
                return Err(Error::Config("affinity diagonal must be zero".into()));
            }
            for j in 0..i {
                if values[(i, j)] != values[(j, i)] {
                    return Err(Error::Config("affinity must be symmetric".into()));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// k-nearest within/between-class affinity.
///
/// `a_ij = +1` when `i` and `j` share a label and one is among the `k_within`
/// nearest same-class neighbours of the other; `a_ij = -1` when the labels
/// differ and one is among the `k_between` nearest other-class neighbours of
/// the other; `0` otherwise. Distance ties are broken by index.
pub fn build_affinity(labels: &[i64], distances: &DMatrix<f64>, k_within: usize, k_between: usize) -> Result<AffinityMatrix> {
    let n = labels.len();
    if distances.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "distance matrix is {:?} for {n} labels",
            distances.shape()
        )));
    }
    let mut values = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let mut same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let mut other: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        let by_distance = |x: &usize, y: &usize| distances[(i, *x)].total_cmp(&distances[(i, *y)]).then(x.cmp(y));
        same.sort_by(by_distance);
        other.sort_by(by_distance);
        for &j in same.iter().take(k_within) {
            values[(i, j)] = 1.0;
            values[(j, i)] = 1.0;
        }
        for &j in other.iter().take(k_between) {
            values[(i, j)] = -1.0;
            values[(j, i)] = -1.0;
        }
    }
    AffinityMatrix::new(values)
}

/// Pairwise distance matrix, computed in parallel.
pub fn distance_matrix<T: Scalar>(points: &[GrassmannPoint<T>], metric: Metric) -> Result<DMatrix<f64>> {
    let n = points.len();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| (0..i).map(|j| metric.distance(&points[i], &points[j])).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut d = DMatrix::<f64>::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// `(1/N^2) sum_ij a_ij d^2(span(adjoint(A) X_i), span(adjoint(A) X_j))` and its
/// Euclidean gradient in `A`.
pub fn loss_supervised<T: Scalar>(
    a: &DMatrix<T>,
    data: &[GrassmannPoint<T>],
    affinity: &AffinityMatrix,
    metric: Metric,
) -> Result<(f64, DMatrix<T>)> {
    check_data(data, a.nrows())?;
    if affinity.len() != data.len() {
        return Err(Error::Shape(format!(
            "affinity is {0} x {0} for {1} points",
            affinity.len(),
            data.len()
        )));
    }
    match metric {
        Metric::Projection => supervised_projection(a, data, affinity),
        Metric::Geodesic => {
            let value = supervised_geodesic_value(a, data, affinity)?;
            let empty = DMatrix::<T>::zeros(a.nrows(), 0);
            let (ga, _) = central_differences(a, &empty, |a, _| supervised_geodesic_value(a, data, affinity))?;
            Ok((value, ga))
        }
    }
}

// d_p^2(i, j) = p - Re tr(P_i P_j) for projectors P_i of Z_i = adjoint(A) X_i.
// The A-gradient is -(2/N^2) sum_i X_i G_i^{-1} adjoint(Z_i) R_i (I - P_i) with
// R_i = sum_j (a_ij + a_ji) P_j.
fn supervised_projection<T: Scalar>(
    a: &DMatrix<T>,
    data: &[GrassmannPoint<T>],
    affinity: &AffinityMatrix,
) -> Result<(f64, DMatrix<T>)> {
    let count = data.len();
    let m = a.ncols();
    let mut coords = Vec::with_capacity(count);
    let mut projectors = Vec::with_capacity(count);
    for (i, x) in data.iter().enumerate() {
        let z = a.adjoint() * x.basis();
        let ginv = gram_inverse(z.adjoint() * &z).ok_or(Error::DegenerateProjection { index: Some(i) })?;
        projectors.push(&z * &ginv * z.adjoint());
        coords.push((z, ginv));
    }
    let w = affinity.values();
    let p = data[0].p() as f64;
    let mut loss = 0.0;
    let mut grad = DMatrix::<T>::zeros(a.nrows(), m);
    let identity = DMatrix::<T>::identity(m, m);
    for i in 0..count {
        let mut weighted = DMatrix::<T>::zeros(m, m);
        let mut any = false;
        for j in 0..count {
            let wij = w[(i, j)];
            if wij != 0.0 {
                let overlap: f64 = projectors[i]
                    .iter()
                    .zip(projectors[j].iter())
                    .map(|(u, v)| (u.conjugate() * *v).real())
                    .sum();
                loss += wij * (p - overlap);
            }
            let sym = wij + w[(j, i)];
            if sym != 0.0 {
                weighted += &projectors[j] * T::from_real(sym);
                any = true;
            }
        }
        if any {
            let (z, ginv) = &coords[i];
            grad += data[i].basis() * (ginv * z.adjoint() * weighted * (&identity - &projectors[i]));
        }
    }
    let norm = (count * count) as f64;
    Ok((loss / norm, grad * T::from_real(-2.0 / norm)))
}

fn supervised_geodesic_value<T: Scalar>(a: &DMatrix<T>, data: &[GrassmannPoint<T>], affinity: &AffinityMatrix) -> Result<f64> {
    let projected = data
        .iter()
        .enumerate()
        .map(|(i, x)| project_with(a, x).map_err(|e| e.at_index(i)))
        .collect::<Result<Vec<_>>>()?;
    let w = affinity.values();
    let mut loss = 0.0;
    for i in 0..data.len() {
        for j in 0..data.len() {
            if w[(i, j)] != 0.0 {
                let d = geodesic_distance(&projected[i], &projected[j])?;
                loss += w[(i, j)] * d * d;
            }
        }
    }
    Ok(loss / (data.len() * data.len()) as f64)
}

/// How the Grassmann factor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitStrategy {
    /// Leading left singular vectors of the stacked bases `[X_1 .. X_N]`.
    #[default]
    DataSvd,
    /// Uniformly random frame from the supplied generator.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub metric: Metric,
    pub optimizer: OptimizerConfig,
    pub frechet: FrechetConfig,
    pub init: InitStrategy,
    /// Total number of optimizer runs. Runs after the first start from random
    /// frames; the lowest final loss is kept.
    pub restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Projection,
            optimizer: OptimizerConfig::default(),
            frechet: FrechetConfig::default(),
            init: InitStrategy::DataSvd,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedConfig {
    pub fit: FitConfig,
    pub k_within: usize,
    pub k_between: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self { fit: FitConfig::default(), k_within: 5, k_between: 5 }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport<T: Scalar> {
    pub map: NestedMap<T>,
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    pub explained_variance_ratio: Option<f64>,
    pub reconstruction_variance_ratio: Option<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub termination: Termination,
    pub converged: bool,
}

fn data_svd_frame<T: Scalar, R: Rng + ?Sized>(data: &[GrassmannPoint<T>], m: usize, rng: &mut R) -> Result<DMatrix<T>> {
    let n = data[0].n();
    let p = data[0].p();
    let mut stacked = DMatrix::<T>::zeros(n, data.len() * p);
    for (i, x) in data.iter().enumerate() {
        stacked.columns_mut(i * p, p).copy_from(x.basis());
    }
    let u = svd(&stacked).u;
    let take = m.min(u.ncols());
    let mut frame = DMatrix::<T>::zeros(n, m);
    frame.columns_mut(0, take).copy_from(&u.columns(0, take));
    if take < m {
        // Not enough data directions: complete with random orthogonal columns.
        let fill = gaussian_matrix::<T, R>(n, m - take, rng);
        let known = frame.columns(0, take).into_owned();
        let fill = &fill - &known * (known.adjoint() * &fill);
        frame.columns_mut(take, m - take).copy_from(&fill);
    }
    Ok(orthonormalize(&frame)?.into_basis())
}

fn initial_frame<T: Scalar, R: Rng + ?Sized>(
    data: &[GrassmannPoint<T>],
    m: usize,
    strategy: InitStrategy,
    rng: &mut R,
) -> Result<DMatrix<T>> {
    match strategy {
        InitStrategy::DataSvd => data_svd_frame(data, m, rng),
        InitStrategy::Random => Ok(sample_stiefel_uniform::<T, R>(data[0].n(), m, rng)?.into_basis()),
    }
}

fn check_target<T: Scalar>(data: &Dataset<T>, m: usize) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 points, got {}", data.len())));
    }
    let (n, p) = (data.n(), data.p());
    if !(p < m && m <= n) {
        return Err(Error::Config(format!("target dimension m={m} must satisfy p < m <= n (p={p}, n={n})")));
    }
    Ok(())
}

fn run_restarts<T, R, F>(
    data: &Dataset<T>,
    m: usize,
    config: &FitConfig,
    b_cols: usize,
    rng: &mut R,
    mut run: F,
) -> Result<Minimum<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(ProductPoint<T>) -> Result<Minimum<T>>,
{
    let n = data.n();
    let mut best: Option<Minimum<T>> = None;
    let mut last_err = None;
    for attempt in 0..config.restarts.max(1) {
        let strategy = if attempt == 0 { config.init } else { InitStrategy::Random };
        let a = initial_frame(data.points(), m, strategy, rng)?;
        let init = ProductPoint::new(a, DMatrix::zeros(n, b_cols))?;
        match run(init) {
            Ok(found) => {
                if best.as_ref().is_none_or(|b| found.loss < b.loss) {
                    best = Some(found);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one restart runs"),
    }
}

/// Fit `(A, B)` by minimizing the reconstruction error over `Gr(m, n) x F^{n x p}`.
pub fn fit_unsupervised<T: Scalar, R: Rng + ?Sized>(
    data: &Dataset<T>,
    m: usize,
    config: &FitConfig,
    rng: &mut R,
) -> Result<FitReport<T>> {
    check_target(data, m)?;
    let points = data.points();
    let metric = config.metric;
    let found = run_restarts(data, m, config, data.p(), rng, |init| {
        minimize(|x: &ProductPoint<T>| loss_unsupervised(&x.a, &x.b, points, metric), init, &config.optimizer)
    })
    .map_err(|e| project_best(e))?;
    let map = NestedMap::from_unconstrained(found.point.a.clone(), &found.point.b)?;
    report(map, found, data, &config.frechet)
}

// Convergence errors from the optimizer carry (A, B~); callers expect (A, B).
fn project_best(e: Error) -> Error {
    match e {
        Error::Convergence { context, iterations, residual, best } => {
            let best = match best.as_slice() {
                [crate::AnyMatrix::Real(a), crate::AnyMatrix::Real(b)] => {
                    vec![crate::AnyMatrix::Real(a.clone()), crate::AnyMatrix::Real(horizontal(a, b))]
                }
                [crate::AnyMatrix::Complex(a), crate::AnyMatrix::Complex(b)] => {
                    vec![crate::AnyMatrix::Complex(a.clone()), crate::AnyMatrix::Complex(horizontal(a, b))]
                }
                _ => best,
            };
            Error::Convergence { context, iterations, residual, best }
        }
        other => other,
    }
}

fn report<T: Scalar>(map: NestedMap<T>, found: Minimum<T>, data: &Dataset<T>, frechet: &FrechetConfig) -> Result<FitReport<T>> {
    let explained = explained_variance_ratio(&map, data, frechet)?;
    let reconstructed = reconstruction_variance_ratio(&map, data, frechet)?;
    Ok(FitReport {
        converged: found.converged(),
        map,
        final_loss: found.loss,
        loss_trace: found.trace,
        explained_variance_ratio: Some(explained),
        reconstruction_variance_ratio: Some(reconstructed),
        iterations: found.iterations,
        grad_norm: found.grad_norm,
        termination: found.termination,
    })
}

/// The best `(A, B)` carried by a convergence error from a fit, if any.
pub fn best_map<T: Scalar>(err: &Error) -> Option<NestedMap<T>> {
    match err {
        Error::Convergence { best, .. } => match best.as_slice() {
            [a, b] => NestedMap::new(T::unwrap(a)?.clone(), T::unwrap(b)?.clone()).ok(),
            _ => None,
        },
        _ => None,
    }
}

/// Fit the projection `A` by minimizing the affinity-weighted pairwise loss.
/// The returned map has `B = 0`.
pub fn fit_supervised<T: Scalar, R: Rng + ?Sized>(
    data: &Dataset<T>,
    labels: &[i64],
    m: usize,
    config: &SupervisedConfig,
    rng: &mut R,
) -> Result<FitReport<T>> {
    check_target(data, m)?;
    if labels.len() != data.len() {
        return Err(Error::Shape(format!("{} labels for {} points", labels.len(), data.len())));
    }
    let classes: BTreeSet<i64> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::DegenerateSupervision(
            "all points share one label; use the unsupervised fit".into(),
        ));
    }
    let points = data.points();
    let distances = distance_matrix(points, Metric::Projection)?;
    let affinity = build_affinity(labels, &distances, config.k_within, config.k_between)?;
    let metric = config.fit.metric;
    let n = data.n();
    let found = run_restarts(data, m, &config.fit, 0, rng, |init| {
        minimize(
            |x: &ProductPoint<T>| {
                let (f, ga) = loss_supervised(&x.a, points, &affinity, metric)?;
                Ok((f, ga, DMatrix::zeros(n, 0)))
            },
            init,
            &config.fit.optimizer,
        )
    })?;
    let map = NestedMap::new(found.point.a.clone(), DMatrix::zeros(n, data.p()))?;
    report(map, found, data, &config.fit.frechet)
}

/// Fréchet variance `(1/N) sum d_g^2(X_i, mean)`.
///
/// Uses the tolerant Karcher iteration: far-spread data may put points on the
/// cut locus of an iterate or keep the iteration from meeting its tolerance,
/// and the variance at the final iterate is returned in either case.
pub fn variance<T: Scalar>(points: &[GrassmannPoint<T>], config: &FrechetConfig) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!("variance needs at least 2 points, got {}", points.len())));
    }
    Ok(karcher_iterate(points, config, false)?.variance)
}

const ZERO_VARIANCE: f64 = 1e-24;

/// Variance of the projected points `span(adjoint(A) X_j)` in `Gr(p, m)` over
/// the variance of the data in `Gr(p, n)`.
///
/// With `B != 0` the embedding is not an isometry, so data lying exactly on
/// the embedded submanifold can give a ratio away from 1.
pub fn explained_variance_ratio<T: Scalar>(map: &NestedMap<T>, data: &Dataset<T>, config: &FrechetConfig) -> Result<f64> {
    let total = data_variance(data, config)?;
    let projected = project_dataset(map, data)?;
    Ok(variance(projected.points(), config)? / total)
}

/// Variance of the reconstructions over the variance of the data, both in
/// `Gr(p, n)`. Equals [`explained_variance_ratio`] when `B = 0`.
pub fn reconstruction_variance_ratio<T: Scalar>(
    map: &NestedMap<T>,
    data: &Dataset<T>,
    config: &FrechetConfig,
) -> Result<f64> {
    let total = data_variance(data, config)?;
    let recon = reconstruct_dataset(map, data)?;
    Ok(variance(recon.points(), config)? / total)
}

/// Fréchet variance of the data, failing with a zero-variance error when all points coincide.
pub fn data_variance<T: Scalar>(data: &Dataset<T>, config: &FrechetConfig) -> Result<f64> {
    let total = variance(data.points(), config)?;
    if total <= ZERO_VARIANCE {
        return Err(Error::ZeroVariance("all points coincide; the variance ratio is undefined".into()));
    }
    Ok(total)
}

/// Independent fits for each target dimension. Failures are recorded per entry.
pub fn nested_sequence<T: Scalar, R: Rng + ?Sized>(
    data: &Dataset<T>,
    dims: &[usize],
    config: &FitConfig,
    rng: &mut R,
) -> Result<Vec<(usize, Result<f64>)>> {
    if dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("dimensions must be strictly increasing, got {dims:?}")));
    }
    if let Some(&bad) = dims.iter().find(|&&m| m <= data.p() || m > data.n()) {
        return Err(Error::Config(format!(
            "dimension {bad} outside (p, n] = ({}, {}]",
            data.p(),
            data.n()
        )));
    }
    Ok(dims
        .iter()
        .map(|&m| {
            let ratio = fit_unsupervised(data, m, config, rng)
                .and_then(|r| r.explained_variance_ratio.ok_or_else(|| Error::Degenerate("no ratio".into())));
            (m, ratio)
        })
        .collect())
}
