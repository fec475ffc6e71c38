use nirnormal::evaluator::*;
use nirnormal::photometry::{render_lambertian, LightDirection, NirImage, NormalMap, Radiance};
use nirnormal::synth::{
    build_dataset, normals_from_heights, Dataset, DatasetManifest, Heightfield, Split, SplitCounts, SurfaceKind,
    SurfaceSampling,
};
use proptest::prelude::*;

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn from_heights(w: usize, h: usize, f: impl Fn(f64, f64) -> f64) -> NormalMap {
    normals_from_heights(&Heightfield::from_fn(w, h, f))
}

fn mean_angle(a: &NormalMap, b: &NormalMap) -> f64 {
    let e = angular_error_map(a, b).unwrap();
    e.iter().sum::<f64>() / e.len() as f64
}

fn small_dataset(dir: &std::path::Path, surfaces: SurfaceSampling) -> Dataset {
    let manifest = DatasetManifest {
        counts: SplitCounts {
            train: 0,
            val: 0,
            test: 4,
        },
        surfaces,
        seed: 2,
        ..DatasetManifest::default()
    };
    build_dataset(&manifest, dir).unwrap();
    Dataset::open(dir).unwrap()
}

#[test]
fn ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), SurfaceSampling::default());
    let truths: Vec<Vec<[f64; 3]>> = dataset_items(&ds, Split::Test).map(|i| i.unwrap().truth).collect();
    let mut k = 0;
    let mut oracle = |_: &NirImage| {
        k += 1;
        Ok(truths[k - 1].clone())
    };
    let report = evaluate_items(dataset_items(&ds, Split::Test), "test", Smoother::default(), &mut oracle).unwrap();
    assert_eq!(report.images, 4);
    for v in [&report.raw, &report.detail] {
        let m = &v.aggregate;
        assert_eq!(m.pixels, 4 * 64 * 64);
        assert!(m.mean_angular_deg < 1e-4, "{}", m.mean_angular_deg);
        assert_eq!(m.good_pixels, [1.0; 3]);
        assert_eq!(v.per_image.len(), 4);
    }
    assert_eq!(report.raw.aggregate.mean_intensity_error, 0.0);
    // the detail variant is renormalized, the stored components are not quite unit
    assert!(report.detail.aggregate.mean_intensity_error < 1e-4);
}

#[test]
fn flat_predictor_on_planes_tilted_by_25_degrees() {
    let t = 25f64.to_radians();
    let light = LightDirection::from_angles(30.0, 0.0).unwrap();
    let items: Vec<_> = [0.0f64, 40.0, 200.0]
        .iter()
        .map(|az| {
            let a = az.to_radians();
            let n = [t.sin() * a.cos(), t.sin() * a.sin(), t.cos()];
            let map = NormalMap::new(8, 8, vec![n; 64]).unwrap();
            let nir = render_lambertian(&map, &[0.8; 64], light).unwrap();
            Ok(EvalItem { nir, truth: vec![n; 64] })
        })
        .collect();
    let mut flat = |nir: &NirImage| Ok(vec![[0.0, 0.0, 1.0]; nir.width * nir.height]);
    let report = evaluate_items(items, "planes", Smoother::default(), &mut flat).unwrap();
    let m = &report.raw.aggregate;
    assert!((m.mean_angular_deg - 25.0).abs() < 1e-9);
    assert!((m.median_angular_deg - 25.0).abs() < 1e-9);
    assert_eq!(m.good_pixels, [0.0; 3]);

    // the same through a generated dataset of tilted planes
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(
        dir.path(),
        SurfaceSampling {
            kinds: vec![SurfaceKind::TiltedPlane],
            amplitude: [t.tan(), t.tan()],
            feature_scale: [4.0, 4.0],
        },
    );
    let report = evaluate_items(dataset_items(&ds, Split::Test), "test", Smoother::default(), &mut flat).unwrap();
    let m = &report.raw.aggregate;
    assert!((m.mean_angular_deg - 25.0).abs() < 1e-2, "{}", m.mean_angular_deg);
    assert_eq!(m.good_pixels, [0.0; 3]);
}

#[test]
fn empty_inputs_are_errors() {
    let mut flat = |nir: &NirImage| Ok(vec![[0.0, 0.0, 1.0]; nir.width * nir.height]);
    assert!(evaluate_items(Vec::<nirnormal::Result<EvalItem>>::new(), "none", Smoother::Identity, &mut flat).is_err());
    let nir = NirImage::new(2, 1, vec![0.5, 0.5], Radiance::Raw).unwrap();
    let zeros = vec![Ok(EvalItem {
        nir,
        truth: vec![[0.0; 3]; 2],
    })];
    assert!(evaluate_items(zeros, "dark", Smoother::Identity, &mut flat).is_err());
}

fn two_band() -> (NormalMap, NormalMap, NormalMap) {
    let (w, h) = (48, 40);
    let base = |x: f64, y: f64| 3.0 * (x / 17.0).sin() + 2.0 * (y / 13.0).cos();
    let ripple = |x: f64, y: f64| 0.4 * (x * 1.7).sin() * (y * 1.3).cos();
    let wrong_base = |x: f64, y: f64| 0.05 * x * x / 10.0 - 0.2 * y;
    let truth = from_heights(w, h, |x, y| base(x, y) + ripple(x, y));
    let smooth = from_heights(w, h, base);
    let detailed = from_heights(w, h, |x, y| wrong_base(x, y) + ripple(x, y));
    (truth, smooth, detailed)
}

#[test]
fn detail_map_identities() {
    let (_, y, g) = two_band();
    // with f = identity the G terms cancel and only Y is left
    let m = detail_map(&y, &g, Smoother::Identity).unwrap();
    for (a, b) in m.normals().iter().zip(y.normals()) {
        let b = unit(*b);
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-6);
        }
    }
    for f in [Smoother::Identity, Smoother::default(), Smoother::Gaussian { sigma: 1.5 }] {
        let m = detail_map(&y, &y, f).unwrap();
        for (a, b) in m.normals().iter().zip(y.normals()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-6);
            }
        }
    }
    assert!(detail_map(&y, &NormalMap::flat(3, 3), Smoother::default()).is_err());
}

#[test]
fn detail_map_grafts_fine_detail() {
    let (truth, y, g) = two_band();
    let m = detail_map(&y, &g, Smoother::default()).unwrap();
    let (em, ey, eg) = (mean_angle(&m, &truth), mean_angle(&y, &truth), mean_angle(&g, &truth));
    assert!(em < ey, "detail {em} vs smooth {ey}");
    assert!(em < eg, "detail {em} vs raw {eg}");
}

#[test]
fn smoother_preserves_constant_fields() {
    let field = vec![[0.3, -0.2, 0.9]; 7 * 5];
    for v in smooth_field(&field, 7, 5, Smoother::default()) {
        for c in 0..3 {
            assert!((v[c] - field[0][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn intensity_error_examples() {
    let y: Vec<[f64; 3]> = vec![[0.1, -0.5, 0.8], [0.0, 0.6, 0.8], [-0.3, -0.3, 0.9]];
    let neg: Vec<[f64; 3]> = y.iter().map(|v| v.map(|c| -c)).collect();
    assert!(intensity_errors(&y, &y).unwrap().iter().all(|&e| e == 0.0));
    let e = intensity_errors(&y, &neg).unwrap();
    let direct: f64 = y.iter().flat_map(|v| v.iter().map(|c| 2.0 * c.abs())).sum::<f64>() / 9.0;
    assert!((e.iter().sum::<f64>() / e.len() as f64 - direct).abs() < 1e-12);
    assert!(intensity_errors(&y, &y[..2]).is_err());
}

#[test]
fn report_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(&dir.path().join("data"), SurfaceSampling::default());
    let mut flat = |nir: &NirImage| Ok(vec![[0.0, 0.0, 1.0]; nir.width * nir.height]);
    let report = evaluate_items(dataset_items(&ds, Split::Test), "test", Smoother::default(), &mut flat).unwrap();
    let path = dir.path().join("out/report.json");
    write_report(&report, &path).unwrap();
    let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.reference.mean_angular_deg_all_views_l2_ang, 15.56);
    assert_eq!(back.reference.detail_map_mean_angular_deg_l2_ang, 3.61);
}

fn vectors(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(
        (-1.0f64..1.0, -1.0f64..1.0, 0.0f64..1.0).prop_filter_map("too short", |(a, b, c)| {
            (a * a + b * b + c * c > 1e-2).then(|| unit([a, b, c]))
        }),
        n,
    )
}

/// Quarter turns about the optical axis; they keep `nz >= 0`.
fn quarter_turn(v: [f64; 3], k: usize) -> [f64; 3] {
    (0..k).fold(v, |v, _| [-v[1], v[0], v[2]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn good_pixels_monotone(errors in prop::collection::vec(0.0f64..180.0, 1..200), t in prop::collection::vec(0.0f64..90.0, 1..6)) {
        let mut t = t;
        t.sort_by(f64::total_cmp);
        let g = good_pixels(&errors, &t).unwrap();
        for w in g.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(g.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn angular_error_is_symmetric_and_rotation_invariant(a in vectors(12), b in vectors(12), k in 0usize..4) {
        let y = NormalMap::new(4, 3, a).unwrap();
        let g = NormalMap::new(4, 3, b).unwrap();
        let e = angular_error_map(&y, &g).unwrap();
        prop_assert_eq!(&e, &angular_error_map(&g, &y).unwrap());
        let rot = |n: &NormalMap| {
            let v: Vec<[f64; 3]> = n
                .normals()
                .iter()
                .map(|v| quarter_turn(*v, k))
                .collect();
            NormalMap::new(4, 3, v).unwrap()
        };
        let er = angular_error_map(&rot(&y), &rot(&g)).unwrap();
        for (p, q) in e.iter().zip(&er) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}
