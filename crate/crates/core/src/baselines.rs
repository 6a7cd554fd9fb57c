//! Comparison methods: tangent PCA at the Fréchet mean (PGA), supervised PCA
//! in the same tangent space (sPGA), and leave-one-out k-nearest-neighbour
//! classification under a manifold distance (gKNN).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::manifold::{exp_unchecked, karcher_iterate, log_unchecked, svd, FrechetConfig, GrassmannPoint};
use crate::nested::{distance_matrix, Dataset, Metric};
use crate::scalar::{Field, Scalar};

/// Principal directions in the tangent space at a mean.
#[derive(Clone, Debug)]
pub struct PgaModel<T: Scalar> {
    pub mean: GrassmannPoint<T>,
    /// Orthonormal horizontal `n x p` directions at `mean`.
    pub components: Vec<DMatrix<T>>,
    /// Mean squared coordinate of the data along each component.
    pub component_variances: Vec<f64>,
    /// Mean squared norm of the log-mapped data.
    pub total_variance: f64,
}

impl<T: Scalar> PgaModel<T> {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Coordinates of a tangent vector at the mean along the components.
    pub fn coordinates(&self, tangent: &DMatrix<T>) -> Vec<f64> {
        self.components.iter().map(|c| crate::scalar::inner(c, tangent)).collect()
    }
}

const ZERO_VARIANCE: f64 = 1e-24;

/// Real coordinates of the horizontal space at a point: `H = Q C` with `Q` an
/// orthonormal basis of the orthogonal complement, flattened to real vectors.
struct TangentChart<T: Scalar> {
    complement: DMatrix<T>,
    p: usize,
}

impl<T: Scalar> TangentChart<T> {
    fn at(point: &GrassmannPoint<T>) -> Self {
        let n = point.n();
        let p = point.p();
        let x = point.basis();
        let residual = DMatrix::<T>::identity(n, n) - x * x.adjoint();
        let complement = svd(&residual).u.columns(0, n - p).into_owned();
        Self { complement, p }
    }

    fn dim(&self) -> usize {
        T::FIELD.real_dim() * self.complement.ncols() * self.p
    }

    fn flatten(&self, tangent: &DMatrix<T>) -> DVector<f64> {
        let coords = self.complement.adjoint() * tangent;
        let mut out = DVector::zeros(self.dim());
        let mut k = 0;
        for v in coords.iter() {
            let (re, im) = v.parts();
            out[k] = re;
            k += 1;
            if T::FIELD == Field::Complex {
                out[k] = im;
                k += 1;
            }
        }
        out
    }

    fn unflatten(&self, v: &DVector<f64>) -> DMatrix<T> {
        let rows = self.complement.ncols();
        let step = T::FIELD.real_dim();
        let coords = DMatrix::from_fn(rows, self.p, |i, j| {
            let k = step * (j * rows + i);
            let im = if step == 2 { v[k + 1] } else { 0.0 };
            T::from_parts(v[k], im).expect("parts valid for field")
        });
        &self.complement * coords
    }
}

struct TangentData<T: Scalar> {
    mean: GrassmannPoint<T>,
    chart: TangentChart<T>,
    /// One column per data point.
    coords: DMatrix<f64>,
    total: f64,
}

fn tangent_data<T: Scalar>(data: &Dataset<T>, config: &FrechetConfig) -> Result<TangentData<T>> {
    if data.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 points, got {}", data.len())));
    }
    let mean = karcher_iterate(data.points(), config, false)?.mean;
    let chart = TangentChart::at(&mean);
    let mut coords = DMatrix::<f64>::zeros(chart.dim(), data.len());
    for (i, x) in data.points().iter().enumerate() {
        coords.set_column(i, &chart.flatten(&log_unchecked(&mean, x)));
    }
    let total = coords.norm_squared() / data.len() as f64;
    if total <= ZERO_VARIANCE {
        return Err(Error::ZeroVariance("all points coincide; no principal directions".into()));
    }
    Ok(TangentData { mean, chart, coords, total })
}

/// Eigenpairs of a symmetric matrix, largest eigenvalue first, ties by index.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .map(|(&l, v)| (l, v.into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, v) in pairs.iter_mut() {
        // Fix the sign so the largest-magnitude entry is positive.
        let (idx, _) = v.iter().enumerate().fold((0, 0.0), |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best });
        if v[idx] < 0.0 {
            *v = -v.clone();
        }
    }
    pairs
}

fn check_components<T: Scalar>(data: &Dataset<T>, k: usize) -> Result<()> {
    let dim = T::FIELD.real_dim() * data.p() * (data.n() - data.p());
    if k > dim {
        return Err(Error::Config(format!("{k} components requested, tangent dimension is {dim}")));
    }
    Ok(())
}

fn build_model<T: Scalar>(td: TangentData<T>, directions: Vec<DVector<f64>>) -> PgaModel<T> {
    let n = td.coords.ncols() as f64;
    let component_variances = directions
        .iter()
        .map(|d| (d.transpose() * &td.coords).norm_squared() / n)
        .collect();
    let components = directions.iter().map(|d| td.chart.unflatten(d)).collect();
    PgaModel { mean: td.mean, components, component_variances, total_variance: td.total }
}

/// Tangent PCA at the Fréchet mean.
///
/// Points are mapped with the minimal-geodesic logarithm, which is defined
/// for every point not exactly on the cut locus of the mean.
pub fn pga_fit<T: Scalar>(data: &Dataset<T>, num_components: usize, config: &FrechetConfig) -> Result<PgaModel<T>> {
    check_components(data, num_components)?;
    let td = tangent_data(data, config)?;
    let cov = &td.coords * td.coords.transpose() / data.len() as f64;
    let directions = sorted_eigen(cov).into_iter().take(num_components).map(|(_, v)| v).collect();
    Ok(build_model(td, directions))
}

/// Share of tangent variance along the first `k` components.
pub fn pga_explained_variance<T: Scalar>(model: &PgaModel<T>, k: usize) -> Result<f64> {
    if k > model.num_components() {
        return Err(Error::Config(format!(
            "{k} components requested, model has {}",
            model.num_components()
        )));
    }
    if model.total_variance <= ZERO_VARIANCE {
        return Err(Error::ZeroVariance("total tangent variance is zero".into()));
    }
    Ok(model.component_variances[..k].iter().sum::<f64>() / model.total_variance)
}

/// Supervised PCA in the tangent space at the Fréchet mean.
///
/// The leading directions maximize `tr(adjoint(V) T H K H adjoint(T) V)` with `T` the
/// tangent coordinates, `H` the centering matrix and `K_ij = [y_i = y_j]`.
/// That matrix has rank at most `classes - 1`; any further components are the
/// leading principal directions of the data left after removing the
/// supervised ones. Components are ordered by supervision strength, not by
/// variance.
pub fn spga_fit<T: Scalar>(
    data: &Dataset<T>,
    labels: &[i64],
    num_components: usize,
    config: &FrechetConfig,
) -> Result<PgaModel<T>> {
    if labels.len() != data.len() {
        return Err(Error::Shape(format!("{} labels for {} points", labels.len(), data.len())));
    }
    check_components(data, num_components)?;
    let count = data.len();
    let kernel = DMatrix::from_fn(count, count, |i, j| if labels[i] == labels[j] { 1.0 } else { 0.0 });
    let centering = DMatrix::<f64>::identity(count, count) - DMatrix::from_element(count, count, 1.0 / count as f64);
    let hkh = &centering * kernel * &centering;
    if hkh.norm() <= 1e-12 {
        return Err(Error::DegenerateSupervision("all points share one label".into()));
    }
    let td = tangent_data(data, config)?;
    let target = &td.coords * hkh * td.coords.transpose();
    let pairs = sorted_eigen(target);
    let top = pairs.first().map_or(0.0, |p| p.0);
    let mut directions: Vec<DVector<f64>> = pairs
        .into_iter()
        .take_while(|(l, _)| *l > 1e-10 * top && top > 0.0)
        .take(num_components)
        .map(|(_, v)| v)
        .collect();
    if directions.len() < num_components {
        let dim = td.coords.nrows();
        let mut residual = DMatrix::<f64>::identity(dim, dim);
        for d in &directions {
            residual -= d * d.transpose();
        }
        let rest = &residual * &td.coords;
        let cov = &rest * rest.transpose() / count as f64;
        let extra = sorted_eigen(cov)
            .into_iter()
            .map(|(_, v)| &residual * v)
            .filter(|v| v.norm() > 0.5)
            .map(|v| v.normalize());
        let need = num_components - directions.len();
        directions.extend(extra.take(need));
    }
    Ok(build_model(td, directions))
}

/// Replace each point by the exponential of its tangent vector projected onto
/// the first `k` components.
pub fn pga_reduce<T: Scalar>(model: &PgaModel<T>, data: &Dataset<T>, k: usize) -> Result<Dataset<T>> {
    if k > model.num_components() {
        return Err(Error::Config(format!(
            "{k} components requested, model has {}",
            model.num_components()
        )));
    }
    let points = data
        .points()
        .iter()
        .map(|x| {
            let v = log_unchecked(&model.mean, x);
            let mut proj = DMatrix::<T>::zeros(v.nrows(), v.ncols());
            for c in &model.components[..k] {
                proj += c * T::from_real(crate::scalar::inner(c, &v));
            }
            exp_unchecked(&model.mean, &proj)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Dataset::new(points)?;
    match data.labels() {
        Some(l) => out.with_labels(l.to_vec()),
        None => Ok(out),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub accuracy: f64,
    pub predictions: Vec<i64>,
}

/// Leave-one-out k-nearest-neighbour classification.
///
/// Neighbours are ordered by distance, then index. A vote tie goes to the
/// tied class whose member appears first in that order.
pub fn gknn_loo_from_distances(distances: &DMatrix<f64>, labels: &[i64], k: usize) -> Result<KnnResult> {
    let n = labels.len();
    if distances.shape() != (n, n) {
        return Err(Error::Shape(format!("distance matrix is {:?} for {n} labels", distances.shape())));
    }
    if n < 2 || k == 0 || k > n - 1 {
        return Err(Error::Config(format!("need N >= 2 and 1 <= k <= N - 1, got N={n}, k={k}")));
    }
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| distances[(i, a)].total_cmp(&distances[(i, b)]).then(a.cmp(&b)));
        let neighbours = &others[..k];
        let mut votes: BTreeMap<i64, usize> = BTreeMap::new();
        for &j in neighbours {
            *votes.entry(labels[j]).or_default() += 1;
        }
        let best = votes.values().copied().max().expect("k >= 1");
        let winner = neighbours
            .iter()
            .map(|&j| labels[j])
            .find(|l| votes[l] == best)
            .expect("some neighbour holds the top count");
        predictions.push(winner);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(KnnResult { accuracy: correct as f64 / n as f64, predictions })
}

pub fn gknn_loo<T: Scalar>(points: &[GrassmannPoint<T>], labels: &[i64], k: usize, metric: Metric) -> Result<KnnResult> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!("{} labels for {} points", labels.len(), points.len())));
    }
    gknn_loo_from_distances(&distance_matrix(points, metric)?, labels, k)
}
