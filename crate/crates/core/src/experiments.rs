//! Experiment drivers: synthetic sweeps comparing NG against PGA or the two
//! distances, and the shape classification pipeline.
//!
//! Every driver returns one row per observation and renders rows as CSV.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{gknn_loo, pga_explained_variance, pga_fit, pga_reduce, spga_fit};
use crate::datagen::{generate, SynthConfig};
use crate::error::{Error, Result};
use crate::io::LandmarkSet;
use crate::nested::{
    best_map, data_variance, explained_variance_ratio, fit_supervised, fit_unsupervised, project_dataset, Dataset, FitConfig, Metric, SupervisedConfig,
};
use crate::scalar::{Field, Scalar};
use crate::shape::shapes_to_dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Projection against geodesic distance, `sigma` from 1 to 10.
    Fig3,
    /// NG against PGA over the reduced dimension.
    Table1,
    /// NG against PGA over `sigma` at reduced dimension 2.
    Fig4,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Fig3 => "fig3",
            Preset::Table1 => "table1",
            Preset::Fig4 => "fig4",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig3" => Ok(Preset::Fig3),
            "table1" => Ok(Preset::Table1),
            "fig4" => Ok(Preset::Fig4),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected fig3, table1 or fig4)"))),
        }
    }
}

/// What the sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameter {
    Sigma,
    ReducedDim,
}

impl Parameter {
    pub fn as_str(self) -> &'static str {
        match self {
            Parameter::Sigma => "sigma",
            Parameter::ReducedDim => "mdim",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub sigma: f64,
    /// Real dimension of the reduced representation.
    pub reduced_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ng(Metric),
    Pga,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ng(_) => "NG",
            Method::Pga => "PGA",
        }
    }

    pub fn metric_label(self) -> &'static str {
        match self {
            Method::Ng(m) => m.as_str(),
            Method::Pga => "tangent",
        }
    }
}

/// A synthetic sweep: for each rep and sweep point, draw data and fit every method.
#[derive(Clone, Debug)]
pub struct SynthPlan {
    pub name: String,
    pub field: Field,
    pub samples: usize,
    pub ambient: usize,
    pub planted: usize,
    pub subspace: usize,
    pub b_std: f64,
    pub parameter: Parameter,
    pub points: Vec<SweepPoint>,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

pub const DEFAULT_REPS: usize = 20;

impl SynthPlan {
    pub fn preset(preset: Preset) -> Self {
        let base = |samples, ambient, planted, subspace, parameter, points, methods| SynthPlan {
            name: preset.as_str().to_string(),
            field: Field::Real,
            samples,
            ambient,
            planted,
            subspace,
            b_std: 0.1,
            parameter,
            points,
            methods,
            reps: DEFAULT_REPS,
            seed: 0,
            fit: FitConfig::default(),
        };
        match preset {
            Preset::Fig3 => base(
                50,
                10,
                3,
                1,
                Parameter::Sigma,
                (1..=10).map(|s| SweepPoint { sigma: s as f64, reduced_dim: 2 }).collect(),
                vec![Method::Ng(Metric::Projection), Method::Ng(Metric::Geodesic)],
            ),
            Preset::Table1 => base(
                50,
                30,
                20,
                2,
                Parameter::ReducedDim,
                [2, 4, 6, 8, 10].map(|d| SweepPoint { sigma: 0.1, reduced_dim: d }).to_vec(),
                vec![Method::Ng(Metric::Projection), Method::Pga],
            ),
            Preset::Fig4 => base(
                50,
                10,
                5,
                2,
                Parameter::Sigma,
                [0.01, 0.1, 0.5, 1.0, 1.5, 2.0].map(|s| SweepPoint { sigma: s, reduced_dim: 2 }).to_vec(),
                vec![Method::Ng(Metric::Projection), Method::Pga],
            ),
        }
    }

    fn data_config(&self, sigma: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            samples: self.samples,
            ambient: self.ambient,
            planted: self.planted,
            subspace: self.subspace,
            sigma,
            b_std: self.b_std,
            seed,
        }
    }

    /// `m` of the NG target `Gr(p, m)` whose real dimension is `reduced_dim`.
    pub fn ng_target(&self, reduced_dim: usize) -> Result<usize> {
        let per = self.subspace * self.field.real_dim();
        if reduced_dim == 0 || reduced_dim % per != 0 {
            return Err(Error::Config(format!(
                "reduced dimension {reduced_dim} is not a positive multiple of {per}, the real dimension per column"
            )));
        }
        Ok(reduced_dim / per + self.subspace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.points.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("need at least one rep, sweep point and method".into()));
        }
        for pt in &self.points {
            self.data_config(pt.sigma, 0).validate()?;
            if self.methods.iter().any(|m| matches!(m, Method::Ng(_))) {
                let m = self.ng_target(pt.reduced_dim)?;
                if m > self.ambient {
                    return Err(Error::Config(format!(
                        "reduced dimension {} needs Gr({}, {m}), larger than the ambient n={}",
                        pt.reduced_dim, self.subspace, self.ambient
                    )));
                }
            }
        }
        self.fit.optimizer.validate()
    }

    fn x(&self, pt: &SweepPoint) -> f64 {
        match self.parameter {
            Parameter::Sigma => pt.sigma,
            Parameter::ReducedDim => pt.reduced_dim as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRow {
    pub preset: String,
    pub rep: usize,
    pub parameter: Parameter,
    pub x: f64,
    pub method: Method,
    pub explained_variance: Option<f64>,
    pub runtime_seconds: f64,
    /// `ok`, `not_converged` or `error: <message>`.
    pub status: String,
}

/// Run a sweep. Reps run in parallel with seed `seed + rep`; rows come back
/// ordered by sweep point, rep and method. Per-fit failures become rows.
pub fn run_synth(plan: &SynthPlan) -> Result<Vec<SynthRow>> {
    plan.validate()?;
    let jobs: Vec<(usize, usize)> = (0..plan.points.len())
        .flat_map(|i| (0..plan.reps).map(move |r| (i, r)))
        .collect();
    let rows: Vec<Vec<SynthRow>> = jobs
        .par_iter()
        .map(|&(i, rep)| match plan.field {
            Field::Real => run_cell::<f64>(plan, i, rep),
            Field::Complex => run_cell::<Complex64>(plan, i, rep),
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

fn run_cell<T: Scalar>(plan: &SynthPlan, point: usize, rep: usize) -> Vec<SynthRow> {
    let pt = plan.points[point];
    let seed = plan.seed.wrapping_add(rep as u64);
    let row = |method: Method, outcome: Result<(f64, bool)>, runtime: f64| SynthRow {
        preset: plan.name.clone(),
        rep,
        parameter: plan.parameter,
        x: plan.x(&pt),
        method,
        explained_variance: outcome.as_ref().ok().map(|o| o.0),
        runtime_seconds: runtime,
        status: match outcome {
            Ok((_, true)) => "ok".into(),
            Ok((_, false)) => "not_converged".into(),
            Err(e) => format!("error: {e}"),
        },
    };
    let data = match generate::<T>(&plan.data_config(pt.sigma, seed)) {
        Ok(d) => d.dataset,
        Err(e) => {
            let msg = e.to_string();
            return plan.methods.iter().map(|&m| row(m, Err(Error::Degenerate(msg.clone())), 0.0)).collect();
        }
    };
    plan.methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let outcome = fit_method(plan, &data, method, pt.reduced_dim, seed);
            row(method, outcome, start.elapsed().as_secs_f64())
        })
        .collect()
}

fn fit_method<T: Scalar>(
    plan: &SynthPlan,
    data: &Dataset<T>,
    method: Method,
    reduced_dim: usize,
    seed: u64,
) -> Result<(f64, bool)> {
    match method {
        Method::Ng(metric) => {
            let m = plan.ng_target(reduced_dim)?;
            let cfg = FitConfig { metric, ..plan.fit.clone() };
            let mut rng = fit_rng(seed);
            match fit_unsupervised(data, m, &cfg, &mut rng) {
                Ok(report) => {
                    let ev = report.explained_variance_ratio.ok_or_else(|| Error::Degenerate("no variance ratio".into()))?;
                    Ok((ev, report.converged))
                }
                // A failed line search still leaves a usable map.
                Err(e) => match best_map::<T>(&e) {
                    Some(map) => Ok((explained_variance_ratio(&map, data, &plan.fit.frechet)?, false)),
                    None => Err(e),
                },
            }
        }
        Method::Pga => {
            let model = pga_fit(data, reduced_dim, &plan.fit.frechet)?;
            Ok((pga_explained_variance(&model, reduced_dim)?, true))
        }
    }
}

// Optimizer randomness uses a separate stream from data generation.
fn fit_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn timing(v: f64, omit: bool) -> String {
    if omit {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// One header line and one line per row. With `omit_timings` the runtime
/// column is left empty so that reruns are byte-identical.
pub fn synth_csv(rows: &[SynthRow], omit_timings: bool) -> String {
    let mut out = String::from("preset,rep,parameter,x,method,metric,explained_variance,runtime_seconds,status\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&r.preset),
            r.rep,
            r.parameter.as_str(),
            r.x,
            r.method.name(),
            r.method.metric_label(),
            opt(r.explained_variance),
            timing(r.runtime_seconds, omit_timings),
            csv_field(&r.status)
        );
    }
    out
}

/// Per sweep point and method: mean explained variance over successful reps.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub x: f64,
    pub method: Method,
    pub mean_explained_variance: Option<f64>,
    pub successes: usize,
    pub failures: usize,
    pub total_runtime_seconds: f64,
}

pub fn summarize(rows: &[SynthRow]) -> Vec<SynthSummary> {
    let mut out: Vec<SynthSummary> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for r in rows {
        let idx = match out.iter().position(|s| s.x == r.x && s.method == r.method) {
            Some(i) => i,
            None => {
                out.push(SynthSummary {
                    x: r.x,
                    method: r.method,
                    mean_explained_variance: None,
                    successes: 0,
                    failures: 0,
                    total_runtime_seconds: 0.0,
                });
                sums.push(0.0);
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        s.total_runtime_seconds += r.runtime_seconds;
        match r.explained_variance {
            Some(ev) => {
                s.successes += 1;
                sums[idx] += ev;
            }
            None => s.failures += 1,
        }
    }
    for (s, sum) in out.iter_mut().zip(sums) {
        s.mean_explained_variance = (s.successes > 0).then(|| sum / s.successes as f64);
    }
    out
}

pub fn summary_csv(summary: &[SynthSummary], omit_timings: bool) -> String {
    let mut out = String::from("x,method,metric,mean_explained_variance,successes,failures,total_runtime_seconds\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.x,
            s.method.name(),
            s.method.metric_label(),
            opt(s.mean_explained_variance),
            s.successes,
            s.failures,
            timing(s.total_runtime_seconds, omit_timings)
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesConfig {
    /// Dimension of the reduced representation: NG projects to `Gr(1, C^(m+1))`
    /// and PGA keeps `m` components.
    pub m: usize,
    pub supervised: bool,
    /// Neighbour count for leave-one-out gKNN.
    pub knn: usize,
    pub k_within: usize,
    pub k_between: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self { m: 10, supervised: false, knn: 5, k_within: 5, k_between: 5, seed: 0, fit: FitConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesRow {
    /// `raw`, `NG`, `sNG`, `PGA` or `sPGA`.
    pub method: String,
    pub m: usize,
    pub explained_variance: Option<f64>,
    pub knn_accuracy: Option<f64>,
    pub runtime_seconds: f64,
    pub status: String,
}

/// Map shapes to `Gr(1, C^(k-1))`, reduce them with NG (and sNG when
/// supervised) and with PGA (and sPGA), and classify before and after.
/// Accuracies need labels; supervision without labels is a config error.
pub fn run_shapes(set: &LandmarkSet, cfg: &ShapesConfig) -> Result<Vec<ShapesRow>> {
    let labels = set.labels.as_deref();
    if cfg.supervised && labels.is_none() {
        return Err(Error::Config("supervised reduction needs labeled shapes".into()));
    }
    let data = match labels {
        Some(l) => shapes_to_dataset(&set.shapes, l)?,
        None => Dataset::new(
            set.shapes.iter().map(crate::shape::kads_to_grassmann).collect::<Result<Vec<_>>>()?,
        )?,
    };
    let target = cfg.m + 1;
    if cfg.m == 0 || target > data.n() {
        return Err(Error::Config(format!(
            "m={} needs 1 <= m and Gr(1, C^{target}) inside Gr(1, C^{})",
            cfg.m,
            data.n()
        )));
    }
    data_variance(&data, &cfg.fit.frechet)?;

    let knn = |d: &Dataset<Complex64>| -> Result<Option<f64>> {
        match labels {
            Some(l) => Ok(Some(gknn_loo(d.points(), l, cfg.knn, Metric::Geodesic)?.accuracy)),
            None => Ok(None),
        }
    };
    let timed = |method: &str, m: usize, f: &mut dyn FnMut() -> Result<(Option<f64>, Option<f64>, bool)>| {
        let start = Instant::now();
        let outcome = f();
        let runtime_seconds = start.elapsed().as_secs_f64();
        match outcome {
            Ok((ev, acc, converged)) => ShapesRow {
                method: method.into(),
                m,
                explained_variance: ev,
                knn_accuracy: acc,
                runtime_seconds,
                status: if converged { "ok" } else { "not_converged" }.into(),
            },
            Err(e) => ShapesRow {
                method: method.into(),
                m,
                explained_variance: None,
                knn_accuracy: None,
                runtime_seconds,
                status: format!("error: {e}"),
            },
        }
    };

    let mut rows = vec![timed("raw", data.n() - 1, &mut || Ok((Some(1.0), knn(&data)?, true)))];
    rows.push(timed("NG", cfg.m, &mut || {
        let report = fit_unsupervised(&data, target, &cfg.fit, &mut fit_rng(cfg.seed))?;
        let reduced = project_dataset(&report.map, &data)?;
        Ok((report.explained_variance_ratio, knn(&reduced)?, report.converged))
    }));
    if let (true, Some(l)) = (cfg.supervised, labels) {
        rows.push(timed("sNG", cfg.m, &mut || {
            let scfg = SupervisedConfig { fit: cfg.fit.clone(), k_within: cfg.k_within, k_between: cfg.k_between };
            let report = fit_supervised(&data, l, target, &scfg, &mut fit_rng(cfg.seed))?;
            let reduced = project_dataset(&report.map, &data)?;
            Ok((report.explained_variance_ratio, knn(&reduced)?, report.converged))
        }));
    }
    rows.push(timed("PGA", cfg.m, &mut || {
        let model = pga_fit(&data, cfg.m, &cfg.fit.frechet)?;
        let reduced = pga_reduce(&model, &data, cfg.m)?;
        Ok((Some(pga_explained_variance(&model, cfg.m)?), knn(&reduced)?, true))
    }));
    if let (true, Some(l)) = (cfg.supervised, labels) {
        rows.push(timed("sPGA", cfg.m, &mut || {
            let model = spga_fit(&data, l, cfg.m, &cfg.fit.frechet)?;
            let reduced = pga_reduce(&model, &data, cfg.m)?;
            Ok((Some(pga_explained_variance(&model, cfg.m)?), knn(&reduced)?, true))
        }));
    }
    Ok(rows)
}

pub fn shapes_csv(rows: &[ShapesRow], omit_timings: bool) -> String {
    let mut out = String::from("method,m,explained_variance,knn_accuracy,runtime_seconds,status\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.m,
            opt(r.explained_variance),
            opt(r.knn_accuracy),
            timing(r.runtime_seconds, omit_timings),
            csv_field(&r.status)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::{generate_shapes, KAds, ShapeGenConfig};

    fn small(preset: Preset) -> SynthPlan {
        let mut plan = SynthPlan::preset(preset);
        plan.reps = 2;
        plan.points.truncate(2);
        plan
    }

    #[test]
    fn presets_match_protocols() {
        let t = SynthPlan::preset(Preset::Table1);
        assert_eq!((t.samples, t.ambient, t.planted, t.subspace), (50, 30, 20, 2));
        assert_eq!(t.points.iter().map(|p| t.ng_target(p.reduced_dim).unwrap()).collect::<Vec<_>>(), vec![3, 4, 5, 6, 7]);
        let f = SynthPlan::preset(Preset::Fig4);
        assert_eq!(f.ng_target(2).unwrap(), 3);
        let f3 = SynthPlan::preset(Preset::Fig3);
        assert_eq!(f3.ng_target(2).unwrap(), 3);
        assert_eq!(f3.points.len(), 10);
        assert!(t.validate().is_ok() && f.validate().is_ok() && f3.validate().is_ok());
        assert!("fig5".parse::<Preset>().is_err());
        assert_eq!("table1".parse::<Preset>().unwrap(), Preset::Table1);
    }

    #[test]
    fn rows_are_ordered_and_deterministic() {
        let plan = small(Preset::Fig4);
        let a = run_synth(&plan).unwrap();
        let b = run_synth(&plan).unwrap();
        assert_eq!(a.len(), 2 * 2 * 2);
        assert_eq!(synth_csv(&a, true), synth_csv(&b, true));
        let keys: Vec<(f64, usize)> = a.iter().map(|r| (r.x, r.rep)).collect();
        assert_eq!(keys[..4], [(0.01, 0), (0.01, 0), (0.01, 1), (0.01, 1)]);
        assert!(a.iter().all(|r| r.status == "ok" || r.status == "not_converged"), "{a:?}");
        let summary = summarize(&a);
        assert_eq!(summary.len(), 4);
        assert!(summary.iter().all(|s| s.successes == 2));
    }

    #[test]
    fn failures_become_rows() {
        let mut plan = small(Preset::Fig4);
        plan.samples = 1;
        let rows = run_synth(&plan).unwrap();
        assert!(rows.iter().all(|r| r.status.starts_with("error") && r.explained_variance.is_none()));
        let csv = synth_csv(&rows, true);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 9), "{csv}");
    }

    #[test]
    fn bad_plans_are_rejected() {
        let mut plan = small(Preset::Table1);
        plan.points[0].reduced_dim = 3;
        assert!(matches!(run_synth(&plan), Err(Error::Config(_))));
        let mut plan = small(Preset::Fig4);
        plan.points[0].reduced_dim = 20;
        assert!(matches!(run_synth(&plan), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_pipeline_reports_every_method() {
        let gen = ShapeGenConfig { per_class: 6, landmarks: 20, ..Default::default() };
        let (shapes, labels) = generate_shapes(&gen).unwrap();
        let set = LandmarkSet { shapes, labels: Some(labels) };
        let cfg = ShapesConfig { m: 3, supervised: true, knn: 3, ..Default::default() };
        let rows = run_shapes(&set, &cfg).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["raw", "NG", "sNG", "PGA", "sPGA"]);
        for r in &rows {
            assert!(!r.status.starts_with("error"), "{r:?}");
            assert!((0.0..=1.0).contains(&r.knn_accuracy.unwrap()));
        }
        assert_eq!(shapes_csv(&rows, true), shapes_csv(&run_shapes(&set, &cfg).unwrap(), true));
    }

    #[test]
    fn duplicated_shape_is_zero_variance() {
        let s = KAds::new(vec![[0.0, 0.0], [1.0, 0.0], [0.3, 1.0], [0.0, 0.7]]).unwrap();
        let set = LandmarkSet { shapes: vec![s; 5], labels: None };
        let cfg = ShapesConfig { m: 1, ..Default::default() };
        assert!(matches!(run_shapes(&set, &cfg), Err(Error::ZeroVariance(_))));
        let sup = ShapesConfig { supervised: true, ..cfg };
        assert!(matches!(run_shapes(&set, &sup), Err(Error::Config(_))));
    }
}
