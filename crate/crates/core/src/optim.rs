//! Riemannian conjugate gradient over `Gr(m, n) x F^{n x p}`.
//!
//! The Grassmann factor is carried by an orthonormal representative `A`;
//! gradients are projected onto the horizontal space at `A`, steps are
//! retracted with a thin QR, and old directions are moved to the new point by
//! re-projection. The Euclidean factor `B` is updated additively.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::manifold::{horizontal, orthonormalize, orthonormality_defect};
use crate::scalar::{inner, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct ProductPoint<T: Scalar> {
    /// `n x m`, orthonormal columns.
    pub a: DMatrix<T>,
    /// `n x p`, unconstrained. May have zero columns.
    pub b: DMatrix<T>,
}

impl<T: Scalar> ProductPoint<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>) -> Result<Self> {
        if a.nrows() != b.nrows() {
            return Err(Error::Shape(format!(
                "A has {} rows but B has {}",
                a.nrows(),
                b.nrows()
            )));
        }
        if a.ncols() == 0 || a.ncols() > a.nrows() {
            return Err(Error::Shape(format!("A must be n x m with 1 <= m <= n, got {:?}", a.shape())));
        }
        let defect = orthonormality_defect(&a);
        if defect > 1e-10 {
            return Err(Error::Degenerate(format!("A is not orthonormal (defect {defect:e})")));
        }
        Ok(Self { a, b })
    }

    fn dimension(&self) -> usize {
        let (n, m) = self.a.shape();
        let real = T::FIELD.real_dim();
        real * (m * (n - m) + n * self.b.ncols())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductTangent<T: Scalar> {
    pub da: DMatrix<T>,
    pub db: DMatrix<T>,
}

impl<T: Scalar> ProductTangent<T> {
    pub fn zero_at(point: &ProductPoint<T>) -> Self {
        Self {
            da: DMatrix::zeros(point.a.nrows(), point.a.ncols()),
            db: DMatrix::zeros(point.b.nrows(), point.b.ncols()),
        }
    }

    pub fn inner(&self, other: &Self) -> f64 {
        inner(&self.da, &other.da) + inner(&self.db, &other.db)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    fn scaled(&self, s: f64) -> Self {
        Self { da: &self.da * T::from_real(s), db: &self.db * T::from_real(s) }
    }

    fn axpy(&self, s: f64, other: &Self) -> Self {
        Self {
            da: &self.da + &other.da * T::from_real(s),
            db: &self.db + &other.db * T::from_real(s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaRule {
    /// `max(0, <g+, g+ - g> / <g, g>)`.
    PolakRibierePlus,
    FletcherReeves,
    /// Always zero: plain Riemannian steepest descent.
    SteepestDescent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub initial_step: f64,
    pub armijo_slope: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// `None` restarts every `dim` iterations, `dim` being the real dimension
    /// of the search space.
    pub cg_restart_period: Option<usize>,
    pub beta_rule: BetaRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            grad_tol: 1e-6,
            initial_step: 1.0,
            armijo_slope: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            cg_restart_period: None,
            beta_rule: BetaRule::PolakRibierePlus,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_tol > 0.0
            && self.initial_step > 0.0
            && self.armijo_slope > 0.0
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.max_backtracks > 0
            && self.cg_restart_period != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer configuration {self:?}")))
        }
    }
}

/// Why [`minimize`] stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// No representable decrease along steepest descent while the gradient
    /// was already within `1000 * grad_tol`.
    Stagnated,
}

/// One accepted iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
    /// Directional derivative `<grad, direction>` at the start of the step.
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct Minimum<T: Scalar> {
    pub point: ProductPoint<T>,
    pub loss: f64,
    pub grad_norm: f64,
    /// Accepted losses, starting with the loss at the initial point.
    pub trace: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub iterations: usize,
    pub termination: Termination,
}

impl<T: Scalar> Minimum<T> {
    pub fn converged(&self) -> bool {
        self.termination != Termination::MaxIterations
    }
}

/// `dA = (I - A adjoint(A)) G_A`, `dB = G_B`.
pub fn riemannian_gradient<T: Scalar>(
    point: &ProductPoint<T>,
    grad_a: &DMatrix<T>,
    grad_b: &DMatrix<T>,
) -> Result<ProductTangent<T>> {
    if grad_a.shape() != point.a.shape() || grad_b.shape() != point.b.shape() {
        return Err(Error::Shape(format!(
            "gradient shapes {:?}/{:?} do not match point {:?}/{:?}",
            grad_a.shape(),
            grad_b.shape(),
            point.a.shape(),
            point.b.shape()
        )));
    }
    Ok(ProductTangent { da: horizontal(&point.a, grad_a), db: grad_b.clone() })
}

/// QR retraction on the Grassmann factor, translation on the Euclidean one.
pub fn retract<T: Scalar>(point: &ProductPoint<T>, step: &ProductTangent<T>, t: f64) -> Result<ProductPoint<T>> {
    if t == 0.0 {
        return Ok(point.clone());
    }
    let moved = &point.a + &step.da * T::from_real(t);
    let a = orthonormalize(&moved)?.into_basis();
    let b = &point.b + &step.db * T::from_real(t);
    Ok(ProductPoint { a, b })
}

/// Projection transport of a tangent vector to the horizontal space at `to`.
pub fn transport<T: Scalar>(
    _from: &ProductPoint<T>,
    to: &ProductPoint<T>,
    v: &ProductTangent<T>,
) -> Result<ProductTangent<T>> {
    if v.da.shape() != to.a.shape() || v.db.shape() != to.b.shape() {
        return Err(Error::Shape("tangent vector does not match target point".into()));
    }
    Ok(ProductTangent { da: horizontal(&to.a, &v.da), db: v.db.clone() })
}

/// Euclidean loss value and gradients `(f, dF/dA, dF/dB)`.
pub type LossValue<T> = (f64, DMatrix<T>, DMatrix<T>);

struct LineSearch<T: Scalar> {
    point: ProductPoint<T>,
    loss: f64,
    grad_a: DMatrix<T>,
    grad_b: DMatrix<T>,
    step: f64,
}

fn armijo<T, F>(
    loss_and_grad: &mut F,
    x: &ProductPoint<T>,
    f: f64,
    d: &ProductTangent<T>,
    slope: f64,
    t0: f64,
    config: &OptimizerConfig,
) -> Result<Option<LineSearch<T>>>
where
    T: Scalar,
    F: FnMut(&ProductPoint<T>) -> Result<LossValue<T>>,
{
    let mut t = t0;
    for _ in 0..config.max_backtracks {
        if let Ok(candidate) = retract(x, d, t) {
            // A failing evaluation (e.g. a degenerate reconstruction) is treated as
            // an infinitely bad trial point.
            if let Ok((fc, ga, gb)) = loss_and_grad(&candidate) {
                if fc.is_finite() && fc <= f + config.armijo_slope * t * slope {
                    return Ok(Some(LineSearch { point: candidate, loss: fc, grad_a: ga, grad_b: gb, step: t }));
                }
            }
        }
        t *= config.backtrack_factor;
    }
    Ok(None)
}

/// Minimize `loss_and_grad` from `init` by Riemannian conjugate gradient.
///
/// Every accepted step satisfies the Armijo condition
/// `f(x+) <= f(x) + armijo_slope * t * <grad, d>`, so the trace is
/// nonincreasing. If a line search fails, one steepest-descent step is tried
/// before giving up with [`Error::Convergence`], which carries the best point.
pub fn minimize<T, F>(mut loss_and_grad: F, init: ProductPoint<T>, config: &OptimizerConfig) -> Result<Minimum<T>>
where
    T: Scalar,
    F: FnMut(&ProductPoint<T>) -> Result<LossValue<T>>,
{
    config.validate()?;
    let restart_period = config.cg_restart_period.unwrap_or_else(|| init.dimension().max(1));

    let mut x = init;
    let (mut f, ga, gb) = loss_and_grad(&x)?;
    if !f.is_finite() {
        return Err(Error::Degenerate("loss is not finite at the initial point".into()));
    }
    let mut g = riemannian_gradient(&x, &ga, &gb)?;
    let mut d = g.scaled(-1.0);
    let mut trace = vec![f];
    let mut records = Vec::new();
    let mut prev_step = config.initial_step;
    let mut prev_slope = f64::NAN;
    let mut iterations = 0;

    let termination = loop {
        let g_norm = g.norm();
        if g_norm <= config.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= config.max_iter {
            break Termination::MaxIterations;
        }

        let mut slope = g.inner(&d);
        if !(slope < 0.0) {
            d = g.scaled(-1.0);
            slope = -g_norm * g_norm;
        }
        // Initial trial step from the previous step's first-order decrease.
        let t0 = if prev_slope.is_finite() {
            (2.0 * prev_step * prev_slope / slope).clamp(1e-12, 1e6 * config.initial_step)
        } else {
            config.initial_step
        };

        let mut found = armijo(&mut loss_and_grad, &x, f, &d, slope, t0, config)?;
        let is_steepest = (slope + g_norm * g_norm).abs() <= 1e-12 * g_norm * g_norm;
        if found.is_none() && !is_steepest {
            d = g.scaled(-1.0);
            slope = -g_norm * g_norm;
            found = armijo(&mut loss_and_grad, &x, f, &d, slope, config.initial_step.max(t0), config)?;
        }
        let Some(ls) = found else {
            if g_norm <= 1e3 * config.grad_tol {
                break Termination::Stagnated;
            }
            return Err(Error::Convergence {
                context: "line search".into(),
                iterations,
                residual: g_norm,
                best: vec![T::wrap(x.a.clone()), T::wrap(x.b.clone())],
            });
        };

        iterations += 1;
        let g_new = riemannian_gradient(&ls.point, &ls.grad_a, &ls.grad_b)?;
        let g_old = transport(&x, &ls.point, &g)?;
        let d_old = transport(&x, &ls.point, &d)?;
        let g_sq = g_norm * g_norm;
        let beta = if iterations % restart_period == 0 {
            0.0
        } else {
            match config.beta_rule {
                BetaRule::PolakRibierePlus => {
                    let diff = g_new.axpy(-1.0, &g_old);
                    (g_new.inner(&diff) / g_sq).max(0.0)
                }
                BetaRule::FletcherReeves => g_new.inner(&g_new) / g_sq,
                BetaRule::SteepestDescent => 0.0,
            }
        };
        d = g_new.scaled(-1.0).axpy(beta, &d_old);

        records.push(IterationRecord { loss: ls.loss, grad_norm: g_norm, step: ls.step, slope });
        trace.push(ls.loss);
        prev_step = ls.step;
        prev_slope = slope;
        x = ls.point;
        f = ls.loss;
        g = g_new;
    };

    Ok(Minimum {
        grad_norm: g.norm(),
        point: x,
        loss: f,
        trace,
        records,
        iterations,
        termination,
    })
}
