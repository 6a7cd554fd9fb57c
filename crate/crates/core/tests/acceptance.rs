//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! The process exits with status 0 so that the regular test run reports the
//! outcome without aborting; set `NGR_ACCEPTANCE_STRICT=1` to exit with
//! status 1 when any criterion fails.

use std::time::Instant;

use nalgebra::DMatrix;
use nested_grassmann::baselines::gknn_loo;
use nested_grassmann::datagen::{generate, SynthConfig};
use nested_grassmann::experiments::{
    run_shapes, run_synth, shapes_csv, summarize, synth_csv, Method, Preset, ShapesConfig, ShapesRow, SweepPoint,
    SynthPlan, SynthSummary,
};
use nested_grassmann::io::LandmarkSet;
use nested_grassmann::manifold::{
    exp_map, frechet_mean, geodesic_distance, log_map, projection_distance, sample_stiefel_uniform, tangent_project,
    FrechetConfig,
};
use nested_grassmann::nested::{
    build_affinity, distance_matrix, embed_point, fit_unsupervised, loss_supervised, loss_unsupervised,
    loss_unsupervised_value, project_point, FitConfig, Metric, NestedMap,
};
use nested_grassmann::scalar::{gaussian_matrix, inner};
use nested_grassmann::shape::{generate_shapes, shape_distance, KAds, ShapeGenConfig};
use nested_grassmann::{GrassmannPoint, Scalar};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn point<T: Scalar>(n: usize, p: usize, r: &mut ChaCha8Rng) -> GrassmannPoint<T> {
    sample_stiefel_uniform::<T, _>(n, p, r).unwrap()
}

fn unitary<T: Scalar>(n: usize, r: &mut ChaCha8Rng) -> DMatrix<T> {
    sample_stiefel_uniform::<T, _>(n, n, r).unwrap().into_basis()
}

fn rebase<T: Scalar>(basis: DMatrix<T>) -> GrassmannPoint<T> {
    GrassmannPoint::from_orthonormal(basis, 1e-10).unwrap()
}

/// Largest violation of each geometric identity over random instances of one field.
#[derive(Default)]
struct GeometryStats {
    basis: f64,
    left_unitary: f64,
    dp_over_dg: f64,
    small_ratio: f64,
    exp_log: f64,
    midpoint: f64,
}

fn geometry<T: Scalar>(instances: usize, seed: u64) -> GeometryStats {
    let mut r = rng(seed);
    let mut s = GeometryStats { small_ratio: 1.0, ..Default::default() };
    for _ in 0..instances {
        let n = r.random_range(2..=8);
        let p = r.random_range(1..n);
        let x = point::<T>(n, p, &mut r);
        let y = point::<T>(n, p, &mut r);
        let dg = geodesic_distance(&x, &y).unwrap();
        let dp = projection_distance(&x, &y).unwrap();

        let xq = rebase(x.basis() * unitary::<T>(p, &mut r));
        let yq = rebase(y.basis() * unitary::<T>(p, &mut r));
        s.basis = s.basis.max((geodesic_distance(&xq, &yq).unwrap() - dg).abs());
        s.basis = s.basis.max((projection_distance(&xq, &yq).unwrap() - dp).abs());

        let u = unitary::<T>(n, &mut r);
        let (ux, uy) = (rebase(&u * x.basis()), rebase(&u * y.basis()));
        s.left_unitary = s.left_unitary.max((geodesic_distance(&ux, &uy).unwrap() - dg).abs());
        s.left_unitary = s.left_unitary.max((projection_distance(&ux, &uy).unwrap() - dp).abs());

        s.dp_over_dg = s.dp_over_dg.max(dp - dg);

        let h = tangent_project(&x, &gaussian_matrix::<T, _>(n, p, &mut r)).unwrap();
        let t = r.random_range(1e-6..0.01) / h.norm();
        let near = exp_map(&x, &h.scale(t)).unwrap();
        let (ndg, ndp) = (geodesic_distance(&x, &near).unwrap(), projection_distance(&x, &near).unwrap());
        if ndg > 0.0 && ndg < 0.01 {
            s.small_ratio = s.small_ratio.min(ndp / ndg);
        }

        // Round trips are checked below a largest principal angle of 1.4.
        let h = tangent_project(&x, &gaussian_matrix::<T, _>(n, p, &mut r)).unwrap();
        let w = exp_map(&x, &h.scale(r.random_range(0.0..1.4) / h.norm())).unwrap();
        let back = exp_map(&x, &log_map(&x, &w).unwrap()).unwrap();
        s.exp_log = s.exp_log.max(geodesic_distance(&back, &w).unwrap());

        // Midpoints are compared where the mean of two points is unique.
        let h = tangent_project(&x, &gaussian_matrix::<T, _>(n, p, &mut r)).unwrap();
        let z = exp_map(&x, &h.scale(r.random_range(0.05..1.2) / h.norm())).unwrap();
        let half = exp_map(&x, &log_map(&x, &z).unwrap().scale(0.5)).unwrap();
        let mean = frechet_mean(&[x.clone(), z], &FrechetConfig::default()).unwrap();
        s.midpoint = s.midpoint.max(geodesic_distance(&mean, &half).unwrap());
    }
    s
}

fn criterion_geometry() -> Outcome {
    let real = geometry::<f64>(1000, 1);
    let complex = geometry::<Complex64>(1000, 2);
    let worst = |f: fn(&GeometryStats) -> f64| f(&real).max(f(&complex));
    let small_ratio = real.small_ratio.min(complex.small_ratio);
    let checks = [
        ("basis", worst(|s| s.basis) < 1e-10),
        ("left-unitary", worst(|s| s.left_unitary) < 1e-10),
        ("dp<=dg", worst(|s| s.dp_over_dg) <= 1e-12),
        ("ratio", small_ratio > 0.9999),
        ("exp/log", worst(|s| s.exp_log) < 1e-8),
        ("midpoint", worst(|s| s.midpoint) < 1e-6),
    ];
    outcome(
        checks.iter().all(|c| c.1),
        format!(
            "basis {:.1e}, left-unitary {:.1e}, max(dp-dg) {:.1e}, min dp/dg {:.7}, exp/log {:.1e}, midpoint {:.1e}",
            worst(|s| s.basis),
            worst(|s| s.left_unitary),
            worst(|s| s.dp_over_dg),
            small_ratio,
            worst(|s| s.exp_log),
            worst(|s| s.midpoint)
        ),
    )
}

fn random_map<T: Scalar>(n: usize, m: usize, p: usize, offset: f64, r: &mut ChaCha8Rng) -> NestedMap<T> {
    let a = sample_stiefel_uniform::<T, _>(n, m, r).unwrap().into_basis();
    let b = gaussian_matrix::<T, _>(n, p, r) * T::from_real(offset);
    NestedMap::from_unconstrained(a, &b).unwrap()
}

fn relative_gap(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn directional_fd(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1e-6;
    (f(h) - f(-h)) / (2.0 * h)
}

fn structure<T: Scalar>(instances: usize, seed: u64) -> [f64; 5] {
    let mut r = rng(seed);
    let (mut iso, mut round, mut gauge, mut gu, mut gs) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for _ in 0..instances {
        let n = r.random_range(3..=8);
        let m = r.random_range(2..n);
        let p = r.random_range(1..m);
        let flat = random_map::<T>(n, m, p, 0.0, &mut r);
        let (z1, z2) = (point::<T>(m, p, &mut r), point::<T>(m, p, &mut r));
        let d = geodesic_distance(&z1, &z2).unwrap();
        let de = geodesic_distance(&embed_point(&flat, &z1).unwrap(), &embed_point(&flat, &z2).unwrap()).unwrap();
        iso = iso.max((d - de).abs());

        let map = random_map::<T>(n, m, p, r.random_range(0.1..2.0), &mut r);
        let z = point::<T>(m, p, &mut r);
        round = round.max(geodesic_distance(&project_point(&map, &embed_point(&map, &z).unwrap()).unwrap(), &z).unwrap());

        let data: Vec<_> = (0..6).map(|_| point::<T>(n, p, &mut r)).collect();
        let b_free = gaussian_matrix::<T, _>(n, p, &mut r) * T::from_real(0.3);
        let base = loss_unsupervised_value(map.a(), &b_free, &data, Metric::Projection).unwrap();
        let turned = map.a() * unitary::<T>(m, &mut r);
        let moved = loss_unsupervised_value(&turned, &b_free, &data, Metric::Projection).unwrap();
        gauge = gauge.max((base - moved).abs());

        {
            let (_, ga, gb) = loss_unsupervised(map.a(), &b_free, &data, Metric::Projection).unwrap();
            let da = gaussian_matrix::<T, _>(n, m, &mut r);
            let db = gaussian_matrix::<T, _>(n, p, &mut r);
            let analytic = inner(&ga, &da) + inner(&gb, &db);
            let numeric = directional_fd(|t| {
                let a = map.a() + &da * T::from_real(t);
                let b = &b_free + &db * T::from_real(t);
                loss_unsupervised_value(&a, &b, &data, Metric::Projection).unwrap()
            });
            gu = gu.max(relative_gap(analytic, numeric));

            let labels = [0, 0, 0, 1, 1, 1];
            let dist = distance_matrix(&data, Metric::Projection).unwrap();
            let aff = build_affinity(&labels, &dist, 2, 2).unwrap();
            let (_, g) = loss_supervised(map.a(), &data, &aff, Metric::Projection).unwrap();
            let analytic = inner(&g, &da);
            let numeric = directional_fd(|t| {
                loss_supervised(&(map.a() + &da * T::from_real(t)), &data, &aff, Metric::Projection).unwrap().0
            });
            gs = gs.max(relative_gap(analytic, numeric));
        }
    }
    [iso, round, gauge, gu, gs]
}

fn criterion_structure() -> Outcome {
    let real = structure::<f64>(200, 3);
    let complex = structure::<Complex64>(200, 4);
    let w: Vec<f64> = (0..5).map(|i| real[i].max(complex[i])).collect();
    outcome(
        w[0] < 1e-9 && w[1] < 1e-9 && w[2] < 1e-10 && w[3] < 1e-5 && w[4] < 1e-5,
        format!(
            "isometry {:.1e}, round trip {:.1e}, gauge {:.1e}, grad L_u {:.1e}, grad L_s {:.1e}",
            w[0], w[1], w[2], w[3], w[4]
        ),
    )
}

fn criterion_planted() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig { samples: 50, ambient: 10, planted: 3, subspace: 1, sigma: 0.0, seed: 0, ..Default::default() };
    let synth = generate::<f64>(&cfg).unwrap();
    let report = fit_unsupervised(&synth.dataset, 3, &FitConfig::default(), &mut rng(0)).unwrap();
    let elapsed = start.elapsed();
    let ev = report.explained_variance_ratio.unwrap_or(f64::NAN);
    let rv = report.reconstruction_variance_ratio.unwrap_or(f64::NAN);
    outcome(
        report.final_loss < 1e-6 && ev > 0.999 && elapsed.as_secs_f64() < 30.0,
        format!(
            "loss {:.2e}, explained variance {ev:.4}, reconstruction variance {rv:.6}, {:.1}s",
            report.final_loss,
            elapsed.as_secs_f64()
        ),
    )
}

fn sweep(preset: Preset) -> (Vec<SynthSummary>, f64) {
    let start = Instant::now();
    let rows = run_synth(&SynthPlan::preset(preset)).unwrap();
    (summarize(&rows), start.elapsed().as_secs_f64())
}

fn mean_at(summary: &[SynthSummary], x: f64, method: Method) -> f64 {
    summary
        .iter()
        .find(|s| s.x == x && s.method == method)
        .and_then(|s| s.mean_explained_variance)
        .unwrap_or(f64::NAN)
}

fn failures(summary: &[SynthSummary]) -> usize {
    summary.iter().map(|s| s.failures).sum()
}

const NG: Method = Method::Ng(Metric::Projection);

fn criterion_fig3() -> Outcome {
    let (summary, secs) = sweep(Preset::Fig3);
    let geo = Method::Ng(Metric::Geodesic);
    let time = |m: Method| summary.iter().filter(|s| s.method == m).map(|s| s.total_runtime_seconds).sum::<f64>();
    let gaps: Vec<f64> = (1..=10).map(|s| (mean_at(&summary, s as f64, NG) - mean_at(&summary, s as f64, geo)).abs()).collect();
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    let worst_at = gaps.iter().position(|&g| g == worst).map_or(0, |i| i + 1);
    let (tp, tg) = (time(NG), time(geo));
    outcome(
        gaps.iter().all(|&g| g < 0.02) && tp < tg && secs < 1800.0,
        format!(
            "max |EV gap| {worst:.4} at sigma {worst_at}, fit time projection {tp:.1}s vs geodesic {tg:.1}s, \
             {} failed fits, {secs:.0}s",
            failures(&summary)
        ),
    )
}

fn criterion_table1() -> Outcome {
    let (summary, secs) = sweep(Preset::Table1);
    let dims = [2.0, 4.0, 6.0, 8.0, 10.0];
    let ng: Vec<f64> = dims.iter().map(|&d| mean_at(&summary, d, NG)).collect();
    let pga: Vec<f64> = dims.iter().map(|&d| mean_at(&summary, d, Method::Pga)).collect();
    let gaps_ok = ng.iter().zip(&pga).all(|(a, b)| a - b >= 0.05);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    outcome(
        gaps_ok && (0.23..=0.43).contains(&ng[0]) && secs < 1800.0,
        format!("NG {} vs PGA {}, {} failed fits, {secs:.0}s", fmt(&ng), fmt(&pga), failures(&summary)),
    )
}

fn criterion_fig4() -> Outcome {
    let (summary, secs) = sweep(Preset::Fig4);
    let low = mean_at(&summary, 0.01, NG) - mean_at(&summary, 0.01, Method::Pga);
    let high = mean_at(&summary, 2.0, NG) - mean_at(&summary, 2.0, Method::Pga);
    outcome(
        low.abs() < 0.02 && high > 0.05,
        format!(
            "sigma 0.01: NG {:.3} vs PGA {:.3} (gap {low:.3}); sigma 2: NG {:.3} vs PGA {:.3} (gap {high:.3}); \
             {} failed fits, {secs:.0}s",
            mean_at(&summary, 0.01, NG),
            mean_at(&summary, 0.01, Method::Pga),
            mean_at(&summary, 2.0, NG),
            mean_at(&summary, 2.0, Method::Pga),
            failures(&summary)
        ),
    )
}

fn random_kads(k: usize, r: &mut ChaCha8Rng) -> KAds {
    KAds::new((0..k).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()).unwrap()
}

fn criterion_shapes() -> Outcome {
    let mut r = rng(7);
    let mut invariance = 0f64;
    for _ in 0..500 {
        let k = r.random_range(3..=40);
        let shape = random_kads(k, &mut r);
        let moved = shape
            .transformed(
                10f64.powf(r.random_range(-1.0..1.0)),
                r.random_range(0.0..std::f64::consts::TAU),
                [r.random_range(-100.0..100.0), r.random_range(-100.0..100.0)],
                false,
            )
            .unwrap();
        invariance = invariance.max(shape_distance(&shape, &moved).unwrap());
    }
    let mut slack = f64::NEG_INFINITY;
    for _ in 0..500 {
        let k = r.random_range(3..=40);
        let [a, b, c] = [0; 3].map(|_| random_kads(k, &mut r));
        let d = |x: &KAds, y: &KAds| shape_distance(x, y).unwrap();
        slack = slack.max(d(&a, &c) - d(&a, &b) - d(&b, &c));
    }
    outcome(
        invariance < 1e-10 && slack <= 1e-9,
        format!("max distance after similarity {invariance:.1e}, max triangle excess {slack:.1e}"),
    )
}

fn shape_rows(seed: u64, supervised: bool) -> Vec<ShapesRow> {
    let gen = ShapeGenConfig { per_class: 20, landmarks: 100, seed, ..Default::default() };
    let (shapes, labels) = generate_shapes(&gen).unwrap();
    let set = LandmarkSet { shapes, labels: Some(labels) };
    let cfg = ShapesConfig { m: 10, supervised, knn: 5, seed, ..Default::default() };
    run_shapes(&set, &cfg).unwrap()
}

fn criterion_supervision() -> Outcome {
    let seeds = 10;
    let mut acc = [0.0; 3];
    let mut ev = 0.0;
    for seed in 0..seeds {
        let rows = shape_rows(seed, true);
        let get = |m: &str| rows.iter().find(|r| r.method == m).unwrap();
        for (slot, m) in ["raw", "NG", "sNG"].iter().enumerate() {
            acc[slot] += get(m).knn_accuracy.unwrap_or(f64::NAN) / seeds as f64;
        }
        ev += get("sNG").explained_variance.unwrap_or(f64::NAN) / seeds as f64;
    }
    let [raw, ng, sng] = acc;
    outcome(
        sng >= ng && sng >= raw,
        format!("mean gKNN accuracy raw {raw:.3}, NG {ng:.3}, sNG {sng:.3}; sNG explained variance {ev:.3}"),
    )
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn criterion_determinism() -> Outcome {
    let mut plan = SynthPlan::preset(Preset::Fig4);
    plan.points = vec![SweepPoint { sigma: 0.5, reduced_dim: 2 }, SweepPoint { sigma: 2.0, reduced_dim: 4 }];
    plan.reps = 3;
    plan.seed = 11;
    let synth = |threads| with_threads(threads, || synth_csv(&run_synth(&plan).unwrap(), true));
    let shapes = |threads| with_threads(threads, || shapes_csv(&shape_rows(5, true), true));
    let fit = || {
        let data = generate::<Complex64>(&SynthConfig { seed: 9, ..Default::default() }).unwrap();
        let report = fit_unsupervised(&data.dataset, 3, &FitConfig::default(), &mut rng(9)).unwrap();
        format!("{:?} {:?}", report.loss_trace, report.map.a())
    };
    let same = [synth(1) == synth(4), shapes(1) == shapes(4), fit() == fit()];
    outcome(
        same.iter().all(|&s| s),
        format!("synthetic table {}, shapes table {}, fit trace {}", word(same[0]), word(same[1]), word(same[2])),
    )
}

fn word(same: bool) -> &'static str {
    if same {
        "identical"
    } else {
        "differs"
    }
}

fn gknn_smoke() -> bool {
    // Keeps the classifier honest on a trivially separable set before the shape runs.
    let mut r = rng(1);
    let base = point::<f64>(5, 1, &mut r);
    let far = point::<f64>(5, 1, &mut r);
    let jitter = |x: &GrassmannPoint<f64>, r: &mut ChaCha8Rng| {
        let h = tangent_project(x, &(gaussian_matrix::<f64, _>(5, 1, r) * 1e-3)).unwrap();
        exp_map(x, &h).unwrap()
    };
    let points: Vec<_> = (0..8).map(|i| jitter(if i < 4 { &base } else { &far }, &mut r)).collect();
    let labels = [0, 0, 0, 0, 1, 1, 1, 1];
    gknn_loo(&points, &labels, 3, Metric::Geodesic).map(|k| k.accuracy == 1.0).unwrap_or(false)
}

fn main() {
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("1 geometry", Box::new(criterion_geometry)),
        ("2 nested structure", Box::new(criterion_structure)),
        ("3 planted recovery", Box::new(criterion_planted)),
        ("4 metric comparison sweep", Box::new(criterion_fig3)),
        ("5 reduced-dimension table", Box::new(criterion_table1)),
        ("6 noise-level sweep", Box::new(criterion_fig4)),
        ("7 shape invariance", Box::new(criterion_shapes)),
        ("8 supervision", Box::new(|| {
            if gknn_smoke() {
                criterion_supervision()
            } else {
                outcome(false, "gKNN misclassifies a separable set")
            }
        })),
        ("9 determinism", Box::new(criterion_determinism)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let out = check();
        failed += usize::from(!out.pass);
        println!(
            "{} criterion {name}: {} ({:.1}s)",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{failed} of 9 criteria failed");
    if failed > 0 && std::env::var("NGR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
