//! Grassmann and Stiefel geometry.
//!
//! A point of `Gr(p, n)` is stored as an `n x p` matrix with orthonormal
//! columns; two bases describe the same point when they differ by a unitary
//! `p x p` factor on the right. Tangent vectors at `span(X)` are represented
//! by horizontal matrices `H` with `adjoint(X) H = 0`, and the metric is the
//! trace inner product `Re tr(adjoint(H1) H2)`.
//!
//! Principal angles are computed from both the cosines (singular values of
//! `adjoint(X) Y`) and the sines (singular values of `(I - X adjoint(X)) Y`),
//! taking whichever is better conditioned for each angle. Using the cosines
//! alone loses about half the digits for small angles.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
pub(crate) use crate::linalg::svd;
use crate::linalg::Svd;
use crate::scalar::{frobenius, gaussian_matrix, Scalar};

/// Numerical thresholds used by validation checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Max entry of `|adjoint(X) X - I|` accepted for an orthonormal basis.
    pub orthonormal: f64,
    /// Relative singular value below which a matrix is treated as rank deficient.
    pub rank: f64,
    /// Max `|adjoint(X) H|_F / max(1, |H|_F)` accepted for a tangent vector.
    pub tangent: f64,
    /// Principal angle below which two points are considered equal.
    pub equal_angle: f64,
    /// Distance to pi/2 at which the logarithm is refused.
    pub cut_locus: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            orthonormal: 1e-12,
            rank: 1e-12,
            tangent: 1e-8,
            equal_angle: 1e-9,
            cut_locus: 1e-6,
        }
    }
}

/// A point of the Grassmann manifold `Gr(p, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrassmannPoint<T: Scalar> {
    basis: DMatrix<T>,
}

impl<T: Scalar> GrassmannPoint<T> {
    /// Wrap a basis that is already orthonormal to within `tol`.
    pub fn from_orthonormal(basis: DMatrix<T>, tol: f64) -> Result<Self> {
        let (n, p) = basis.shape();
        if p == 0 || p > n {
            return Err(Error::Shape(format!("basis must be n x p with 1 <= p <= n, got {n} x {p}")));
        }
        let defect = orthonormality_defect(&basis);
        if !(defect <= tol) {
            return Err(Error::Degenerate(format!(
                "basis is not orthonormal (defect {defect:e} > {tol:e})"
            )));
        }
        Ok(Self { basis })
    }

    pub(crate) fn from_basis_unchecked(basis: DMatrix<T>) -> Self {
        Self { basis }
    }

    /// Canonical basis `[e_1 .. e_p]` of `Gr(p, n)`.
    pub fn standard(n: usize, p: usize) -> Result<Self> {
        if p == 0 || p > n {
            return Err(Error::Shape(format!("need 1 <= p <= n, got p={p}, n={n}")));
        }
        Ok(Self { basis: DMatrix::identity(n, p) })
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    pub fn into_basis(self) -> DMatrix<T> {
        self.basis
    }

    /// Ambient dimension.
    pub fn n(&self) -> usize {
        self.basis.nrows()
    }

    /// Subspace dimension.
    pub fn p(&self) -> usize {
        self.basis.ncols()
    }

    /// Orthogonal projector `X adjoint(X)`.
    pub fn projector(&self) -> DMatrix<T> {
        &self.basis * self.basis.adjoint()
    }

    /// Equality as manifold points: every principal angle below `tol`.
    pub fn same_point(&self, other: &Self, tol: f64) -> bool {
        match principal_angles(self, other) {
            Ok(a) => a.max() < tol,
            Err(_) => false,
        }
    }
}

/// Largest entry of `|adjoint(X) X - I|`.
pub fn orthonormality_defect<T: Scalar>(basis: &DMatrix<T>) -> f64 {
    let p = basis.ncols();
    let gram = basis.adjoint() * basis;
    let mut worst = 0.0f64;
    for j in 0..p {
        for i in 0..p {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((gram[(i, j)] - target).modulus());
        }
    }
    worst
}

/// A horizontal tangent vector at a base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<T: Scalar> {
    base: GrassmannPoint<T>,
    mat: DMatrix<T>,
}

impl<T: Scalar> TangentVector<T> {
    pub fn new(base: &GrassmannPoint<T>, mat: DMatrix<T>) -> Result<Self> {
        Self::with_tolerance(base, mat, Tolerances::default().tangent)
    }

    pub fn with_tolerance(base: &GrassmannPoint<T>, mat: DMatrix<T>, tol: f64) -> Result<Self> {
        check_same_shape(base.basis(), &mat)?;
        let residual = frobenius(&(base.basis.adjoint() * &mat));
        if residual > tol * frobenius(&mat).max(1.0) {
            return Err(Error::InvalidTangent(format!(
                "adjoint(X) H has norm {residual:e}"
            )));
        }
        Ok(Self { base: base.clone(), mat })
    }

    pub fn zero(base: &GrassmannPoint<T>) -> Self {
        Self { base: base.clone(), mat: DMatrix::zeros(base.n(), base.p()) }
    }

    pub fn base(&self) -> &GrassmannPoint<T> {
        &self.base
    }

    pub fn mat(&self) -> &DMatrix<T> {
        &self.mat
    }

    pub fn into_mat(self) -> DMatrix<T> {
        self.mat
    }

    pub fn norm(&self) -> f64 {
        frobenius(&self.mat)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self { base: self.base.clone(), mat: &self.mat * T::from_real(factor) }
    }
}

/// Principal angles between two subspaces, ascending, each in `[0, pi/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalAngles(Vec<f64>);

impl PrincipalAngles {
    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.0.last().copied().unwrap_or(0.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_same_shape<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "expected {:?}, got {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_compatible<T: Scalar>(x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> Result<()> {
    check_same_shape(x.basis(), y.basis())
}

/// Singular values in descending order.
pub(crate) fn singular_values_desc<T: Scalar>(m: &DMatrix<T>) -> Vec<f64> {
    svd(m).s
}

/// Thin QR with the diagonal of R made real and nonnegative.
pub(crate) fn thin_qr<T: Scalar>(m: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let p = m.ncols();
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..p {
        let d = r[(j, j)];
        let a = d.modulus();
        if a > 0.0 {
            let phase = d.unscale(a);
            let mut col = q.column_mut(j);
            col *= phase;
            let mut row = r.row_mut(j);
            row *= phase.conjugate();
        }
    }
    (q, r)
}

/// Orthonormal basis for the column space of a full-column-rank matrix.
pub fn orthonormalize<T: Scalar>(m: &DMatrix<T>) -> Result<GrassmannPoint<T>> {
    orthonormalize_with(m, Tolerances::default().rank)
}

pub fn orthonormalize_with<T: Scalar>(m: &DMatrix<T>, rank_tol: f64) -> Result<GrassmannPoint<T>> {
    let (n, p) = m.shape();
    if p == 0 || p > n {
        return Err(Error::Shape(format!("need an n x p matrix with 1 <= p <= n, got {n} x {p}")));
    }
    if m.iter().any(|v| !v.real().is_finite() || !v.imaginary().is_finite()) {
        return Err(Error::Degenerate("matrix has non-finite entries".into()));
    }
    let (q, r) = thin_qr(m);
    let s = singular_values_desc(&r);
    let (largest, smallest) = (s[0], s[p - 1]);
    if !(largest > 0.0) || smallest < rank_tol * largest {
        return Err(Error::Degenerate(format!(
            "rank deficient: singular value ratio {:e}",
            if largest > 0.0 { smallest / largest } else { 0.0 }
        )));
    }
    Ok(GrassmannPoint { basis: q })
}

pub fn principal_angles<T: Scalar>(x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> Result<PrincipalAngles> {
    check_compatible(x, y)?;
    let cross = x.basis.adjoint() * &y.basis;
    let cosines = singular_values_desc(&cross);
    let residual = &y.basis - &x.basis * &cross;
    let mut sines = singular_values_desc(&residual);
    sines.reverse();
    let angles = cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            let c = c.clamp(0.0, 1.0);
            if c * c >= 0.5 {
                if s <= sine_floor(x.n()) {
                    0.0
                } else {
                    s.clamp(0.0, 1.0).asin()
                }
            } else {
                c.acos()
            }
        })
        .collect::<Vec<_>>();
    // The cos/sin switch can break ties in the wrong order by an ulp.
    let mut angles = angles;
    angles.sort_by(f64::total_cmp);
    Ok(PrincipalAngles(angles))
}

/// `sqrt(sum theta_i^2)`.
pub fn geodesic_distance<T: Scalar>(x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> Result<f64> {
    Ok(principal_angles(x, y)?.0.iter().map(|t| t * t).sum::<f64>().sqrt())
}

/// `sqrt(sum sin^2 theta_i)`, computed as `|(I - X adjoint(X)) Y|_F`.
pub fn projection_distance<T: Scalar>(x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> Result<f64> {
    check_compatible(x, y)?;
    let residual = &y.basis - &x.basis * (x.basis.adjoint() * &y.basis);
    let d = frobenius(&residual);
    Ok(if d <= sine_floor(x.n()) * (x.p() as f64).sqrt() { 0.0 } else { d })
}

/// Sines at or below this are rounding noise of an `n x p` orthonormal basis
/// and are read as zero, so that the distance from a point to itself is 0.
fn sine_floor(n: usize) -> f64 {
    8.0 * f64::EPSILON * n as f64
}

/// `|P_X - P_Y|_F / sqrt(2)` from the explicit projectors.
pub fn projector_distance<T: Scalar>(x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> Result<f64> {
    check_compatible(x, y)?;
    Ok(frobenius(&(x.projector() - y.projector())) * std::f64::consts::FRAC_1_SQRT_2)
}

/// Horizontal projection `(I - X adjoint(X)) M`.
pub fn tangent_project<T: Scalar>(x: &GrassmannPoint<T>, m: &DMatrix<T>) -> Result<TangentVector<T>> {
    check_same_shape(x.basis(), m)?;
    let mat = horizontal(x.basis(), m);
    Ok(TangentVector { base: x.clone(), mat })
}

pub(crate) fn horizontal<T: Scalar>(basis: &DMatrix<T>, m: &DMatrix<T>) -> DMatrix<T> {
    m - basis * (basis.adjoint() * m)
}

/// Riemannian exponential `span(X V cos(S) + U sin(S))` for `H = U S adjoint(V)`.
pub fn exp_map<T: Scalar>(x: &GrassmannPoint<T>, h: &TangentVector<T>) -> Result<GrassmannPoint<T>> {
    check_compatible(x, h.base())?;
    let tol = Tolerances::default().tangent;
    let residual = frobenius(&(x.basis.adjoint() * h.mat()));
    if residual > tol * h.norm().max(1.0) {
        return Err(Error::InvalidTangent(format!(
            "tangent vector is not horizontal at the given point (|adjoint(X) H| = {residual:e})"
        )));
    }
    exp_unchecked(x, h.mat())
}

pub(crate) fn exp_unchecked<T: Scalar>(x: &GrassmannPoint<T>, h: &DMatrix<T>) -> Result<GrassmannPoint<T>> {
    if frobenius(h) == 0.0 {
        return Ok(x.clone());
    }
    let Svd { u, s: sv, v } = svd(h);
    let p = x.p();
    let mut moved = &x.basis * &v;
    for j in 0..p {
        let s = sv[j];
        let mut col = moved.column_mut(j);
        col *= T::from_real(s.cos());
        col.axpy(T::from_real(s.sin()), &u.column(j), T::one());
    }
    orthonormalize(&moved)
}

/// Riemannian logarithm: the horizontal `H` with `exp_map(X, H) = Y` and `|H|_F = d_g(X, Y)`.
///
/// Refuses pairs whose largest principal angle is within the cut-locus
/// tolerance of pi/2, where the logarithm is not unique.
pub fn log_map<T: Scalar>(x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> Result<TangentVector<T>> {
    log_map_with(x, y, Tolerances::default().cut_locus)
}

pub fn log_map_with<T: Scalar>(
    x: &GrassmannPoint<T>,
    y: &GrassmannPoint<T>,
    cut_locus_tol: f64,
) -> Result<TangentVector<T>> {
    check_compatible(x, y)?;
    let (mat, max_angle) = log_parts(x, y);
    if max_angle > FRAC_PI_2 - cut_locus_tol {
        return Err(Error::CutLocus { angle: max_angle, tol: cut_locus_tol });
    }
    Ok(TangentVector { base: x.clone(), mat })
}

/// Logarithm that picks one minimizing geodesic even at the cut locus.
pub(crate) fn log_unchecked<T: Scalar>(x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> DMatrix<T> {
    log_parts(x, y).0
}

// With adjoint(X) Y = Q1 C adjoint(Q2), the columns of (I - X adjoint(X)) Y Q2
// are mutually orthogonal with norms sin(theta_i), and Y Q2 = X Q1 cos + U sin.
fn log_parts<T: Scalar>(x: &GrassmannPoint<T>, y: &GrassmannPoint<T>) -> (DMatrix<T>, f64) {
    let cross = x.basis.adjoint() * &y.basis;
    let Svd { u: q1, s: cosines, v: q2 } = svd(&cross);
    let rotated = &y.basis * &q2;
    let mut perp = horizontal(&x.basis, &rotated);
    let mut max_angle = 0.0f64;
    for j in 0..x.p() {
        let c = cosines[j];
        let mut col = perp.column_mut(j);
        let s = col.norm();
        let theta = s.atan2(c);
        max_angle = max_angle.max(theta);
        let factor = if s > 0.0 { theta / s } else { 1.0 };
        col *= T::from_real(factor);
    }
    (perp * q1.adjoint(), max_angle)
}

/// Orthonormalized i.i.d. standard Gaussian `n x p` matrix (uniform on `St(p, n)`).
pub fn sample_stiefel_uniform<T: Scalar, R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Result<GrassmannPoint<T>> {
    if p == 0 || p > n {
        return Err(Error::Shape(format!("need 1 <= p <= n, got p={p}, n={n}")));
    }
    loop {
        let g = gaussian_matrix::<T, R>(n, p, rng);
        if let Ok(point) = orthonormalize(&g) {
            return Ok(point);
        }
    }
}

/// Settings for the Karcher iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrechetConfig {
    /// Stop when the norm of the mean log-map is at most this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FrechetConfig {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200 }
    }
}

/// Outcome of the Karcher iteration, converged or not.
#[derive(Clone, Debug)]
pub struct KarcherMean<T: Scalar> {
    pub mean: GrassmannPoint<T>,
    pub iterations: usize,
    /// Norm of the mean log-map at `mean`.
    pub grad_norm: f64,
    /// `(1/N) sum d_g^2(mean, X_i)`.
    pub variance: f64,
    pub converged: bool,
}

/// Fréchet (Karcher) mean, initialized at the first point.
pub fn frechet_mean<T: Scalar>(points: &[GrassmannPoint<T>], config: &FrechetConfig) -> Result<GrassmannPoint<T>> {
    let out = karcher_iterate(points, config, true)?;
    if out.converged {
        Ok(out.mean)
    } else {
        Err(Error::Convergence {
            context: "Fréchet mean".into(),
            iterations: out.iterations,
            residual: out.grad_norm,
            best: vec![T::wrap(out.mean.into_basis())],
        })
    }
}

/// Karcher iteration `mu <- exp(mu, mean_i log(mu, X_i))`.
///
/// Unit steps are taken unless they increase the Fréchet functional, in which
/// case the step is halved. With `strict` the cut-locus check of [`log_map`]
/// applies; otherwise points at the cut locus contribute one of their
/// minimizing geodesics. Non-convergence is reported, not raised.
pub fn karcher_iterate<T: Scalar>(
    points: &[GrassmannPoint<T>],
    config: &FrechetConfig,
    strict: bool,
) -> Result<KarcherMean<T>> {
    let first = points
        .first()
        .ok_or_else(|| Error::Degenerate("Fréchet mean of an empty set".into()))?;
    for q in &points[1..] {
        check_compatible(first, q)?;
    }
    let n_points = points.len() as f64;
    let logs_at = |mu: &GrassmannPoint<T>| -> Result<(DMatrix<T>, f64)> {
        let mut sum = DMatrix::<T>::zeros(mu.n(), mu.p());
        let mut sq = 0.0;
        for (i, q) in points.iter().enumerate() {
            let h = if strict {
                log_map(mu, q).map_err(|e| e.at_index(i))?.into_mat()
            } else {
                log_unchecked(mu, q)
            };
            let norm = frobenius(&h);
            sq += norm * norm;
            sum += h;
        }
        Ok((sum.unscale(n_points), sq / n_points))
    };

    let mut mu = first.clone();
    let (mut grad, mut var) = logs_at(&mu)?;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let grad_norm = frobenius(&grad);
        if grad_norm <= config.tol {
            return Ok(KarcherMean { mean: mu, iterations, grad_norm, variance: var, converged: true });
        }
        iterations += 1;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let candidate = exp_unchecked(&mu, &(&grad * T::from_real(step)))?;
            let (g, v) = logs_at(&candidate)?;
            if v <= var * (1.0 + 1e-12) {
                accepted = Some((candidate, g, v));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((m, g, v)) => {
                mu = m;
                grad = g;
                var = v;
            }
            None => break,
        }
    }
    let grad_norm = frobenius(&grad);
    Ok(KarcherMean {
        converged: grad_norm <= config.tol,
        mean: mu,
        iterations,
        grad_norm,
        variance: var,
    })
}
