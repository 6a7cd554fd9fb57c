//! `ngr`: fit, apply and evaluate nested Grassmann models from the command line.
//!
//! Exit codes: 0 success, 2 usage, 3 data or format error, 4 convergence failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nested_grassmann::datagen::{generate, generate_two_class, SynthConfig};
use nested_grassmann::experiments::{
    run_shapes, run_synth, shapes_csv, summarize, summary_csv, synth_csv, Method, Parameter, Preset, ShapesConfig,
    SweepPoint, SynthPlan, DEFAULT_REPS,
};
use nested_grassmann::io::{
    read_dataset, read_landmarks, read_model, write_dataset, write_landmarks, write_model, AnyDataset, AnyMap,
    LandmarkSet, ModelFile, ModelMetadata,
};
use nested_grassmann::nested::{
    embed_point, fit_supervised, fit_unsupervised, project_dataset, reconstruct_dataset, Dataset, FitConfig, FitReport, Metric,
    NestedMap, SupervisedConfig,
};
use nested_grassmann::shape::{generate_shapes, ShapeGenConfig};
use nested_grassmann::{Error, Field, Scalar};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Environment variable that sets the worker thread count when `--threads` is absent.
const THREADS_ENV: &str = "NGR_THREADS";

#[derive(Parser)]
#[command(name = "ngr", version, about = "Nested Grassmann dimensionality reduction")]
struct Cli {
    /// Worker threads (default: $NGR_THREADS, then the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a nested map to a dataset file.
    Fit(FitArgs),
    /// Project a dataset to Gr(p, m) with a saved model.
    Project(ApplyArgs),
    /// Reconstruct a dataset in Gr(p, n), or embed a projected one, with a saved model.
    Reconstruct(ApplyArgs),
    /// Run a synthetic sweep and write one CSV row per fit.
    Synth(SynthArgs),
    /// Reduce and classify planar shapes.
    Shapes(ShapesArgs),
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
    /// Write a synthetic two-class landmark file.
    GenShapes(GenShapesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Projection,
    Geodesic,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Projection => Metric::Projection,
            MetricArg::Geodesic => Metric::Geodesic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldArg {
    Real,
    Complex,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Fig3,
    Table1,
    Fig4,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    NgProjection,
    NgGeodesic,
    Pga,
}

#[derive(Args)]
struct OptimArgs {
    /// Optimizer iteration cap.
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    /// Stop when the Riemannian gradient norm falls below this.
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    /// Number of optimizer runs; runs after the first start from random frames.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

impl OptimArgs {
    fn config(&self, metric: Metric) -> FitConfig {
        let mut cfg = FitConfig { metric, restarts: self.restarts, ..FitConfig::default() };
        cfg.optimizer.max_iter = self.max_iter;
        cfg.optimizer.grad_tol = self.grad_tol;
        cfg
    }
}

#[derive(Args)]
struct FitArgs {
    dataset: PathBuf,
    /// Target dimension m of Gr(p, m).
    #[arg(long)]
    m: usize,
    #[arg(long, value_enum, default_value = "projection")]
    metric: MetricArg,
    /// Fit the supervised loss using the dataset labels.
    #[arg(long)]
    supervised: bool,
    #[arg(long, default_value_t = 5)]
    k_within: usize,
    #[arg(long, default_value_t = 5)]
    k_between: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    optim: OptimArgs,
    /// Model output path.
    #[arg(long)]
    out: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Leave wall time out of the report.
    #[arg(long)]
    omit_timings: bool,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    model: PathBuf,
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Protocol to run; without it the explicit flags below describe the sweep.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    ambient: Option<usize>,
    #[arg(long)]
    planted: Option<usize>,
    #[arg(long)]
    subspace: Option<usize>,
    #[arg(long)]
    b_std: Option<f64>,
    #[arg(long, value_enum)]
    field: Option<FieldArg>,
    /// Comma-separated noise levels (custom sweeps).
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
    /// Comma-separated real dimensions of the reduced representation (custom sweeps).
    #[arg(long, value_delimiter = ',')]
    reduced_dims: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Vec<MethodArg>,
    #[command(flatten)]
    optim: OptimArgs,
    /// Per-fit CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Per-point mean CSV output.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Leave runtime columns empty so reruns are byte-identical.
    #[arg(long)]
    omit_timings: bool,
}

#[derive(Args)]
struct ShapesArgs {
    landmarks: PathBuf,
    /// Reduced dimension: NG targets Gr(1, C^(m+1)), PGA keeps m components.
    #[arg(long)]
    m: usize,
    #[arg(long)]
    supervised: bool,
    /// Neighbour count of the leave-one-out classifier.
    #[arg(long, default_value_t = 5)]
    knn: usize,
    #[arg(long, default_value_t = 5)]
    k_within: usize,
    #[arg(long, default_value_t = 5)]
    k_between: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    omit_timings: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    ambient: usize,
    #[arg(long, default_value_t = 3)]
    planted: usize,
    #[arg(long, default_value_t = 1)]
    subspace: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    b_std: f64,
    #[arg(long, value_enum, default_value = "real")]
    field: FieldArg,
    /// Draw two labeled classes of `samples` points around independent maps.
    #[arg(long)]
    two_class: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the planted map as a model file.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct GenShapesArgs {
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 100)]
    landmarks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::Convergence { .. } => 4,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads(cli.threads).and_then(|()| run(cli.command)) {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    ExitCode::SUCCESS
}

fn configure_threads(flag: Option<usize>) -> CliResult {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| Failure::usage(format!("{THREADS_ENV}={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::usage("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(())
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Project(args) => cmd_apply(&args, false),
        Command::Reconstruct(args) => cmd_apply(&args, true),
        Command::Synth(args) => cmd_synth(&args),
        Command::Shapes(args) => cmd_shapes(&args),
        Command::GenData(args) => cmd_gen_data(&args),
        Command::GenShapes(args) => cmd_gen_shapes(&args),
    }
}

#[derive(Serialize)]
struct FitOutput {
    m: usize,
    metric: String,
    supervised: bool,
    seed: u64,
    final_loss: f64,
    explained_variance: Option<f64>,
    reconstruction_variance: Option<f64>,
    iterations: usize,
    grad_norm: f64,
    termination: String,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_seconds: Option<f64>,
    loss_trace: Vec<f64>,
}

fn cmd_fit(args: &FitArgs) -> CliResult {
    let data = read_dataset(&args.dataset)?;
    if args.supervised && data.labels().is_none() {
        return Err(Failure::usage(format!("--supervised needs labels, and {} has none", args.dataset.display())));
    }
    let start = Instant::now();
    let (map, report) = match data {
        AnyDataset::Real(d) => fit_any(&d, args).map(|(m, r)| (AnyMap::Real(m), r))?,
        AnyDataset::Complex(d) => fit_any(&d, args).map(|(m, r)| (AnyMap::Complex(m), r))?,
    };
    let elapsed = start.elapsed().as_secs_f64();
    let model = ModelFile {
        map,
        metadata: ModelMetadata {
            loss: Some(report.final_loss),
            seed: Some(args.seed),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    write_model(&args.out, &model)?;
    let output = FitOutput {
        wall_time_seconds: (!args.omit_timings).then_some(elapsed),
        ..report
    };
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&output).map_err(|e| Failure::from(Error::Format(e.to_string())))?;
        write_text(path, &(text + "\n"))?;
    }
    if !output.converged {
        return Err(Failure {
            code: 4,
            message: format!(
                "optimizer stopped after {} iterations with gradient norm {:e}; model written to {}",
                output.iterations,
                output.grad_norm,
                args.out.display()
            ),
        });
    }
    Ok(())
}

fn fit_any<T: Scalar>(data: &Dataset<T>, args: &FitArgs) -> CliResult<(NestedMap<T>, FitOutput)> {
    let metric = Metric::from(args.metric);
    let fit = args.optim.config(metric);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report: FitReport<T> = if args.supervised {
        let labels = data.labels().expect("checked by caller");
        let cfg = SupervisedConfig { fit, k_within: args.k_within, k_between: args.k_between };
        fit_supervised(data, labels, args.m, &cfg, &mut rng)?
    } else {
        fit_unsupervised(data, args.m, &fit, &mut rng)?
    };
    let output = FitOutput {
        m: args.m,
        metric: metric.to_string(),
        supervised: args.supervised,
        seed: args.seed,
        final_loss: report.final_loss,
        explained_variance: report.explained_variance_ratio,
        reconstruction_variance: report.reconstruction_variance_ratio,
        iterations: report.iterations,
        grad_norm: report.grad_norm,
        termination: format!("{:?}", report.termination),
        converged: report.converged,
        wall_time_seconds: None,
        loss_trace: report.loss_trace,
    };
    Ok((report.map, output))
}

fn cmd_apply(args: &ApplyArgs, reconstruct: bool) -> CliResult {
    let model = read_model(&args.model)?;
    let data = read_dataset(&args.dataset)?;
    let out: AnyDataset = match (&model.map, &data) {
        (AnyMap::Real(map), AnyDataset::Real(d)) => apply(map, d, reconstruct)?.into(),
        (AnyMap::Complex(map), AnyDataset::Complex(d)) => apply(map, d, reconstruct)?.into(),
        _ => {
            return Err(Error::Shape(format!("model is {} but dataset is {}", model.map.field(), data.field())).into())
        }
    };
    write_dataset(&args.out, &out)?;
    Ok(())
}

/// Projection maps Gr(p, n) to Gr(p, m). Reconstruction accepts either data
/// in Gr(p, n), which is reconstructed, or projected data in Gr(p, m), which
/// is embedded; both give the same points for matching inputs.
fn apply<T: Scalar>(map: &NestedMap<T>, data: &Dataset<T>, reconstruct: bool) -> CliResult<Dataset<T>> {
    let (n, m, p) = (map.n(), map.m(), map.p());
    if data.is_empty() || data.p() != p || !(data.n() == n || (reconstruct && data.n() == m)) {
        let expected = if reconstruct { format!("Gr({p}, {n}) or Gr({p}, {m})") } else { format!("Gr({p}, {n})") };
        let found = if data.is_empty() { "no points".to_string() } else { format!("Gr({}, {})", data.p(), data.n()) };
        return Err(Error::Shape(format!("model expects points in {expected}, dataset has {found}")).into());
    }
    let out = if !reconstruct {
        project_dataset(map, data)?
    } else if data.n() == n {
        reconstruct_dataset(map, data)?
    } else {
        let points = data
            .points()
            .iter()
            .enumerate()
            .map(|(i, z)| embed_point(map, z).map_err(|e| e.at_index(i)))
            .collect::<nested_grassmann::Result<Vec<_>>>()?;
        let out = Dataset::new(points)?;
        match data.labels() {
            Some(l) => out.with_labels(l.to_vec())?,
            None => out,
        }
    };
    Ok(out)
}

fn cmd_synth(args: &SynthArgs) -> CliResult {
    let mut plan = match args.preset {
        Some(p) => SynthPlan::preset(match p {
            PresetArg::Fig3 => Preset::Fig3,
            PresetArg::Table1 => Preset::Table1,
            PresetArg::Fig4 => Preset::Fig4,
        }),
        None => custom_plan(args)?,
    };
    if let Some(v) = args.samples {
        plan.samples = v;
    }
    if let Some(v) = args.ambient {
        plan.ambient = v;
    }
    if let Some(v) = args.planted {
        plan.planted = v;
    }
    if let Some(v) = args.subspace {
        plan.subspace = v;
    }
    if let Some(v) = args.b_std {
        plan.b_std = v;
    }
    if let Some(f) = args.field {
        plan.field = field(f);
    }
    if args.preset.is_some() && (!args.sigmas.is_empty() || !args.reduced_dims.is_empty()) {
        return Err(Failure::usage("--sigmas and --reduced-dims describe custom sweeps and cannot be used with --preset"));
    }
    if !args.methods.is_empty() {
        plan.methods = args.methods.iter().map(|&m| method(m)).collect();
    }
    plan.reps = args.reps;
    plan.seed = args.seed;
    plan.fit = args.optim.config(Metric::Projection);
    let rows = run_synth(&plan)?;
    write_text(&args.out, &synth_csv(&rows, args.omit_timings))?;
    if let Some(path) = &args.summary {
        write_text(path, &summary_csv(&summarize(&rows), args.omit_timings))?;
    }
    Ok(())
}

fn custom_plan(args: &SynthArgs) -> CliResult<SynthPlan> {
    let (parameter, points) = match (args.sigmas.as_slice(), args.reduced_dims.as_slice()) {
        (sigmas, [dim]) if !sigmas.is_empty() => {
            (Parameter::Sigma, sigmas.iter().map(|&sigma| SweepPoint { sigma, reduced_dim: *dim }).collect())
        }
        ([sigma], dims) if !dims.is_empty() => (
            Parameter::ReducedDim,
            dims.iter().map(|&reduced_dim| SweepPoint { sigma: *sigma, reduced_dim }).collect(),
        ),
        _ => {
            return Err(Failure::usage(
                "without --preset give either several --sigmas with one --reduced-dims, or one --sigmas with several --reduced-dims",
            ))
        }
    };
    let mut plan = SynthPlan::preset(Preset::Fig4);
    plan.name = "custom".into();
    plan.parameter = parameter;
    plan.points = points;
    Ok(plan)
}

fn field(f: FieldArg) -> Field {
    match f {
        FieldArg::Real => Field::Real,
        FieldArg::Complex => Field::Complex,
    }
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::NgProjection => Method::Ng(Metric::Projection),
        MethodArg::NgGeodesic => Method::Ng(Metric::Geodesic),
        MethodArg::Pga => Method::Pga,
    }
}

fn cmd_shapes(args: &ShapesArgs) -> CliResult {
    let set = read_landmarks(&args.landmarks)?;
    if args.supervised && set.labels.is_none() {
        return Err(Failure::usage(format!("--supervised needs labels, and {} has none", args.landmarks.display())));
    }
    let cfg = ShapesConfig {
        m: args.m,
        supervised: args.supervised,
        knn: args.knn,
        k_within: args.k_within,
        k_between: args.k_between,
        seed: args.seed,
        fit: args.optim.config(Metric::Projection),
    };
    let rows = run_shapes(&set, &cfg)?;
    write_text(&args.out, &shapes_csv(&rows, args.omit_timings))
}

fn cmd_gen_data(args: &GenDataArgs) -> CliResult {
    let cfg = SynthConfig {
        samples: args.samples,
        ambient: args.ambient,
        planted: args.planted,
        subspace: args.subspace,
        sigma: args.sigma,
        b_std: args.b_std,
        seed: args.seed,
    };
    match field(args.field) {
        Field::Real => gen_data::<f64>(&cfg, args),
        Field::Complex => gen_data::<Complex64>(&cfg, args),
    }
}

fn gen_data<T: Scalar>(cfg: &SynthConfig, args: &GenDataArgs) -> CliResult
where
    AnyDataset: From<Dataset<T>>,
    AnyMap: From<NestedMap<T>>,
{
    if args.two_class {
        if args.truth.is_some() {
            return Err(Failure::usage("--truth is not available with --two-class"));
        }
        let (data, _) = generate_two_class::<T>(cfg)?;
        write_dataset(&args.out, &data.into())?;
        return Ok(());
    }
    let synth = generate::<T>(cfg)?;
    write_dataset(&args.out, &synth.dataset.into())?;
    if let Some(path) = &args.truth {
        let model = ModelFile {
            map: synth.truth.into(),
            metadata: ModelMetadata { loss: None, seed: Some(args.seed), tool_version: env!("CARGO_PKG_VERSION").into() },
        };
        write_model(path, &model)?;
    }
    Ok(())
}

fn cmd_gen_shapes(args: &GenShapesArgs) -> CliResult {
    let cfg = ShapeGenConfig { per_class: args.per_class, landmarks: args.landmarks, seed: args.seed, ..Default::default() };
    let (shapes, labels) = generate_shapes(&cfg)?;
    write_landmarks(&args.out, &LandmarkSet { shapes, labels: Some(labels) })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure { code: 3, message: format!("{}: {e}", path.display()) })
}
