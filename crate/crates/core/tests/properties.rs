use nalgebra::DMatrix;
use nested_grassmann::baselines::{gknn_loo, pga_explained_variance, pga_fit};
use nested_grassmann::datagen::{generate, SynthConfig};
use nested_grassmann::io::{dataset_to_string, landmarks_to_string, parse_dataset, parse_landmarks, AnyDataset, LandmarkSet};
use nested_grassmann::manifold::{
    geodesic_distance, orthonormalize, principal_angles, projection_distance, sample_stiefel_uniform,
    tangent_project, FrechetConfig,
};
use nested_grassmann::nested::{
    embed_point, loss_unsupervised_value, project_point, reconstruct_point, Dataset, Metric, NestedMap,
};
use nested_grassmann::scalar::gaussian_matrix;
use nested_grassmann::shape::{kads_to_grassmann, shape_distance, KAds};
use nested_grassmann::{GrassmannPoint, Scalar};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn point<T: Scalar>(n: usize, p: usize, r: &mut ChaCha8Rng) -> GrassmannPoint<T> {
    sample_stiefel_uniform::<T, _>(n, p, r).unwrap()
}

fn unitary<T: Scalar>(n: usize, r: &mut ChaCha8Rng) -> DMatrix<T> {
    point::<T>(n, n, r).into_basis()
}

fn rebase<T: Scalar>(m: DMatrix<T>) -> GrassmannPoint<T> {
    GrassmannPoint::from_orthonormal(m, 1e-10).unwrap()
}

/// `(n, p)` with `1 <= p < n <= 8`.
fn dims() -> impl Strategy<Value = (usize, usize)> {
    (2usize..=8).prop_flat_map(|n| (Just(n), 1..n))
}

/// `(n, m, p)` with `1 <= p < m < n <= 8`.
fn nested_dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (3usize..=8).prop_flat_map(|n| (Just(n), 2..n)).prop_flat_map(|(n, m)| (Just(n), Just(m), 1..m))
}

fn random_map<T: Scalar>(n: usize, m: usize, p: usize, offset: f64, r: &mut ChaCha8Rng) -> NestedMap<T> {
    let a = point::<T>(n, m, r).into_basis();
    NestedMap::from_unconstrained(a, &(gaussian_matrix::<T, _>(n, p, r) * T::from_real(offset))).unwrap()
}

fn distance_laws<T: Scalar>(n: usize, p: usize, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let (x, y, z) = (point::<T>(n, p, &mut r), point::<T>(n, p, &mut r), point::<T>(n, p, &mut r));
    prop_assert_eq!(geodesic_distance(&x, &x).unwrap(), 0.0);
    prop_assert_eq!(projection_distance(&x, &x).unwrap(), 0.0);
    let dg = geodesic_distance(&x, &y).unwrap();
    let dp = projection_distance(&x, &y).unwrap();
    prop_assert!((dg - geodesic_distance(&y, &x).unwrap()).abs() < 1e-12);
    prop_assert!(dp <= dg + 1e-12);
    prop_assert!(geodesic_distance(&x, &z).unwrap() <= dg + geodesic_distance(&y, &z).unwrap() + 1e-9);

    let angles = principal_angles(&x, &y).unwrap().into_vec();
    prop_assert!(angles.windows(2).all(|w| w[0] <= w[1]));
    prop_assert!(angles.iter().all(|a| (0.0..=std::f64::consts::FRAC_PI_2).contains(a)));

    let xq = rebase(x.basis() * unitary::<T>(p, &mut r));
    let moved = principal_angles(&xq, &y).unwrap().into_vec();
    prop_assert!(angles.iter().zip(&moved).all(|(a, b)| (a - b).abs() < 1e-10));

    let u = unitary::<T>(n, &mut r);
    let (ux, uy) = (rebase(&u * x.basis()), rebase(&u * y.basis()));
    prop_assert!((geodesic_distance(&ux, &uy).unwrap() - dg).abs() < 1e-10);
    prop_assert!((projection_distance(&ux, &uy).unwrap() - dp).abs() < 1e-10);
    Ok(())
}

fn tangent_laws<T: Scalar>(n: usize, p: usize, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let x = point::<T>(n, p, &mut r);
    let h = tangent_project(&x, &gaussian_matrix::<T, _>(n, p, &mut r)).unwrap();
    prop_assert!((x.basis().adjoint() * h.mat()).norm() < 1e-10);
    let again = tangent_project(&x, h.mat()).unwrap();
    prop_assert!((again.mat() - h.mat()).norm() < 1e-12);

    let m = gaussian_matrix::<T, _>(n, p, &mut r);
    let q = orthonormalize(&m).unwrap();
    let eye = DMatrix::<T>::identity(p, p);
    prop_assert!((q.basis().adjoint() * q.basis() - eye).norm() < 1e-12);
    let residual = &m - q.basis() * (q.basis().adjoint() * &m);
    prop_assert!(residual.norm() < 1e-10 * m.norm());
    Ok(())
}

fn nested_laws<T: Scalar>(n: usize, m: usize, p: usize, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let flat = random_map::<T>(n, m, p, 0.0, &mut r);
    let (z1, z2) = (point::<T>(m, p, &mut r), point::<T>(m, p, &mut r));
    let (e1, e2) = (embed_point(&flat, &z1).unwrap(), embed_point(&flat, &z2).unwrap());
    prop_assert!((geodesic_distance(&e1, &e2).unwrap() - geodesic_distance(&z1, &z2).unwrap()).abs() < 1e-9);
    prop_assert!((projection_distance(&e1, &e2).unwrap() - projection_distance(&z1, &z2).unwrap()).abs() < 1e-9);

    let map = random_map::<T>(n, m, p, r.random_range(0.1..2.0), &mut r);
    prop_assert!((map.a().adjoint() * map.b()).norm() < 1e-8);
    let back = project_point(&map, &embed_point(&map, &z1).unwrap()).unwrap();
    prop_assert!(geodesic_distance(&back, &z1).unwrap() < 1e-9);

    let x = point::<T>(n, p, &mut r);
    let once = reconstruct_point(&map, &x).unwrap();
    let twice = reconstruct_point(&map, &once).unwrap();
    prop_assert!(geodesic_distance(&once, &twice).unwrap() < 1e-9);

    let data: Vec<_> = (0..5).map(|_| point::<T>(n, p, &mut r)).collect();
    let b_free = gaussian_matrix::<T, _>(n, p, &mut r) * T::from_real(0.3);
    let base = loss_unsupervised_value(map.a(), &b_free, &data, Metric::Projection).unwrap();
    let turned = map.a() * unitary::<T>(m, &mut r);
    prop_assert!((loss_unsupervised_value(&turned, &b_free, &data, Metric::Projection).unwrap() - base).abs() < 1e-10);
    let shifted = &b_free + map.a() * gaussian_matrix::<T, _>(m, p, &mut r);
    prop_assert!((loss_unsupervised_value(map.a(), &shifted, &data, Metric::Projection).unwrap() - base).abs() < 1e-10);
    Ok(())
}

fn shape(k: usize, r: &mut ChaCha8Rng) -> KAds {
    KAds::new((0..k).map(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_are_metric_and_invariant((n, p) in dims(), seed in any::<u64>()) {
        distance_laws::<f64>(n, p, seed)?;
        distance_laws::<Complex64>(n, p, seed)?;
    }

    #[test]
    fn tangent_projection_and_orthonormalization((n, p) in dims(), seed in any::<u64>()) {
        tangent_laws::<f64>(n, p, seed)?;
        tangent_laws::<Complex64>(n, p, seed)?;
    }

    #[test]
    fn nested_maps_behave((n, m, p) in nested_dims(), seed in any::<u64>()) {
        nested_laws::<f64>(n, m, p, seed)?;
        nested_laws::<Complex64>(n, m, p, seed)?;
    }

    #[test]
    fn shapes_ignore_similarity(
        k in 3usize..60,
        seed in any::<u64>(),
        scale in 0.1f64..10.0,
        angle in 0.0f64..std::f64::consts::TAU,
        dx in -100.0f64..100.0,
        dy in -100.0f64..100.0,
    ) {
        let s = shape(k, &mut rng(seed));
        let moved = s.transformed(scale, angle, [dx, dy], false).unwrap();
        prop_assert!(shape_distance(&s, &moved).unwrap() < 1e-10);
        let x = kads_to_grassmann(&s).unwrap();
        prop_assert_eq!((x.n(), x.p()), (k - 1, 1));
    }

    #[test]
    fn shape_distance_is_a_metric(k in 3usize..30, seed in any::<u64>()) {
        let mut r = rng(seed);
        let [a, b, c] = [0; 3].map(|_| shape(k, &mut r));
        let d = |x: &KAds, y: &KAds| shape_distance(x, y).unwrap();
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn pga_variance_grows_with_components(seed in any::<u64>()) {
        let mut r = rng(seed);
        let data = Dataset::new((0..12).map(|_| point::<f64>(5, 2, &mut r)).collect()).unwrap();
        let model = pga_fit(&data, 6, &FrechetConfig::default()).unwrap();
        let ev: Vec<f64> = (0..=6).map(|k| pga_explained_variance(&model, k).unwrap()).collect();
        prop_assert!(ev.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }

    #[test]
    fn gknn_ignores_label_names_and_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let points: Vec<_> = (0..14).map(|_| point::<f64>(4, 1, &mut r)).collect();
        let labels: Vec<i64> = (0..14).map(|_| r.random_range(0..3)).collect();
        let base = gknn_loo(&points, &labels, 3, Metric::Geodesic).unwrap().accuracy;
        let renamed: Vec<i64> = labels.iter().map(|l| 10 - 7 * l).collect();
        prop_assert_eq!(gknn_loo(&points, &renamed, 3, Metric::Geodesic).unwrap().accuracy, base);
        let order: Vec<usize> = (0..14).rev().collect();
        let (pp, pl): (Vec<_>, Vec<_>) = order.iter().map(|&i| (points[i].clone(), labels[i])).unzip();
        prop_assert!((gknn_loo(&pp, &pl, 3, Metric::Geodesic).unwrap().accuracy - base).abs() < 1e-12);
    }

    #[test]
    fn dataset_files_round_trip(seed in any::<u64>(), labeled in any::<bool>(), complex in any::<bool>()) {
        let mut r = rng(seed);
        let data: AnyDataset = if complex {
            Dataset::new((0..4).map(|_| point::<Complex64>(5, 2, &mut r)).collect()).unwrap().into()
        } else {
            Dataset::new((0..4).map(|_| point::<f64>(5, 2, &mut r)).collect()).unwrap().into()
        };
        let data = match (data, labeled) {
            (AnyDataset::Real(d), true) => d.with_labels(vec![1, 2, 1, 2]).unwrap().into(),
            (AnyDataset::Complex(d), true) => d.with_labels(vec![0, 0, 3, 3]).unwrap().into(),
            (d, false) => d,
        };
        let text = dataset_to_string(&data).unwrap();
        prop_assert_eq!(parse_dataset(&text).unwrap(), data);
    }

    #[test]
    fn landmark_files_round_trip(k in 3usize..10, count in 1usize..5, seed in any::<u64>(), labeled in any::<bool>()) {
        let mut r = rng(seed);
        let shapes: Vec<_> = (0..count).map(|_| shape(k, &mut r)).collect();
        let labels = labeled.then(|| (0..count as i64).collect());
        let set = LandmarkSet { shapes, labels };
        prop_assert_eq!(parse_landmarks(&landmarks_to_string(&set)).unwrap(), set);
    }

    #[test]
    fn generated_data_is_seeded(seed in any::<u64>()) {
        let cfg = SynthConfig { samples: 8, sigma: 0.0, seed, ..Default::default() };
        let a = generate::<f64>(&cfg).unwrap();
        let b = generate::<f64>(&cfg).unwrap();
        prop_assert_eq!(&a.dataset, &b.dataset);
        for x in a.dataset.points() {
            let rec = reconstruct_point(&a.truth, x).unwrap();
            prop_assert!(geodesic_distance(&rec, x).unwrap() < 1e-10);
        }
    }
}
