//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! The training criteria (5 and 6) take about 45 minutes on one core and are
//! ignored by default; run them with `--ignored`.

use std::path::Path;
use std::time::Instant;

use nirnormal::checkpoint::Checkpoint;
use nirnormal::evaluator::{angular_error_map, dataset_items, detail_map, evaluate, evaluate_items, Smoother};
use nirnormal::formats::{read_normal_png, write_normal_components_png, write_normal_png};
use nirnormal::geometry::{depth_to_normals, export_mesh, integrate_normals, read_obj};
use nirnormal::losses::*;
use nirnormal::nets::NetConfig;
use nirnormal::photometry::*;
use nirnormal::synth::*;
use nirnormal::trainer::{train_on, train_step, Models, StepReport, TrainConfig};
use nirnormal_tensor::gradcheck::check_gradients;
use nirnormal_tensor::{BatchNorm2d, BatchStats, BnMode, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---- criterion 1 ----

const SEEDS: u64 = 20;
const SHAPE: [usize; 4] = [1, 3, 8, 8];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn signed(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Normals with a curl residual far from zero.
fn swirly(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let plane = 64;
    let noise: Vec<f64> = (0..3 * plane).map(|_| rng.random_range(-0.02..0.02)).collect();
    Tensor::from_fn(&SHAPE, |i| {
        let (y, x) = ((i % plane) / 8, i % 8);
        let n = noise[i];
        match i / plane {
            0 => 0.15 * (y as f64 - 4.0) + n,
            1 => -0.15 * (x as f64 - 4.0) + n,
            _ => 1.0 + 5.0 * n,
        }
    })
}

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Build = Box<dyn Fn(&mut Tape<f64>, &[Var], u64) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Inputs, Build)> {
    let unary = |name: &'static str, f: fn(&mut Tape<f64>, Var) -> Var, positive: bool| -> (&'static str, Inputs, Build) {
        (
            name,
            Box::new(move |r| vec![if positive { uniform(r, &SHAPE, 0.2, 2.0) } else { signed(r, &SHAPE, 1e-2) }]),
            Box::new(move |t, v, s| {
                let y = f(t, v[0]);
                weighted_sum(t, y, s)
            }),
        )
    };
    let binary = |name: &'static str, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>| -> (&'static str, Inputs, Build) {
        (
            name,
            Box::new(|r| vec![signed(r, &SHAPE, 0.1), signed(r, &SHAPE, 0.3)]),
            Box::new(move |t, v, s| {
                let y = f(t, v[0], v[1])?;
                weighted_sum(t, y, s)
            }),
        )
    };
    let w = LossWeights::default();
    vec![
        unary("neg", |t, x| t.neg(x), false),
        unary("relu", |t, x| t.relu(x), false),
        unary("leaky_relu", |t, x| t.leaky_relu(x, 0.2), false),
        unary("sigmoid", |t, x| t.sigmoid(x), false),
        unary("tanh", |t, x| t.tanh(x), false),
        unary("abs", |t, x| t.abs(x), false),
        unary("square", |t, x| t.square(x), false),
        unary("sqrt", |t, x| t.sqrt(x), true),
        unary("ln", |t, x| t.ln(x), true),
        unary("scale", |t, x| t.scale(x, -1.7), false),
        binary("add", |t, a, b| t.add(a, b)),
        binary("sub", |t, a, b| t.sub(a, b)),
        binary("mul", |t, a, b| t.mul(a, b)),
        binary("div", |t, a, b| t.div(a, b)),
        (
            "sum/mean",
            Box::new(|r| vec![uniform(r, &SHAPE, -1.0, 1.0)]),
            Box::new(|t, v, _| {
                let sq = t.square(v[0]);
                let s = t.sum(sq);
                let m = t.mean(v[0]);
                let m2 = t.square(m);
                t.add(s, m2)
            }),
        ),
        (
            "narrow/concat/reshape",
            Box::new(|r| vec![uniform(r, &SHAPE, -1.0, 1.0)]),
            Box::new(|t, v, s| {
                let a = t.narrow(v[0], 3, 1, 6)?;
                let b = t.narrow(v[0], 3, 0, 6)?;
                let c = t.concat(&[a, b], 1)?;
                let y = t.reshape(c, &[6, 8, 6])?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "avg_pool2d",
            Box::new(|r| vec![uniform(r, &SHAPE, -1.0, 1.0)]),
            Box::new(|t, v, s| {
                let y = t.avg_pool2d(v[0], 5, 5, 2)?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "conv2d+bias",
            Box::new(|r| vec![uniform(r, &SHAPE, -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -0.5, 0.5), uniform(r, &[2], -0.5, 0.5)]),
            Box::new(|t, v, s| {
                let a = t.conv2d(v[0], v[1], 1, 1)?;
                let b = t.conv2d(v[0], v[1], 2, 0)?;
                let a = t.channel_bias(a, v[2])?;
                let (ra, rb) = (weighted_sum(t, a, s)?, weighted_sum(t, b, s + 1)?);
                t.add(ra, rb)
            }),
        ),
        (
            "batch_norm train",
            Box::new(|r| vec![uniform(r, &SHAPE, -1.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -0.5, 0.5)]),
            Box::new(|t, v, s| {
                let mut bn = BatchNorm2d::new(3, 1e-5, 0.1);
                let (y, _) = bn.forward(t, v[0], v[1], v[2], BnMode::Train)?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "batch_norm frozen",
            Box::new(|r| vec![uniform(r, &SHAPE, -1.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -0.5, 0.5)]),
            Box::new(|t, v, s| {
                let stats = BatchStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                let mut bn = BatchNorm2d::new(3, 1e-5, 0.1);
                let (y, _) = bn.forward(t, v[0], v[1], v[2], BnMode::Frozen(&stats))?;
                weighted_sum(t, y, s)
            }),
        ),
        (
            "bce",
            Box::new(|r| vec![uniform(r, &[8], 0.05, 0.95)]),
            Box::new(|t, v, _| {
                let a = bce(t, v[0], 1.0);
                let b = bce(t, v[0], 0.0);
                t.add(a, b)
            }),
        ),
        (
            "loss_discriminator",
            Box::new(|r| vec![uniform(r, &[4], 0.05, 0.95), uniform(r, &[4], 0.05, 0.95)]),
            Box::new(|t, v, _| Ok(loss_discriminator(t, v[0], v[1]))),
        ),
        (
            "loss_lp p=2",
            Box::new(|r| vec![uniform(r, &SHAPE, -1.0, 1.0), uniform(r, &SHAPE, -1.0, 1.0)]),
            Box::new(|t, v, _| Ok(loss_lp(t, v[0], v[1], 2).unwrap())),
        ),
        (
            "loss_lp p=1",
            Box::new(|r| {
                let y = uniform(r, &SHAPE, -1.0, 1.0);
                let g = Tensor::from_fn(&SHAPE, |i| {
                    let d = r.random_range(0.05..0.5);
                    y.data()[i] + if r.random_bool(0.5) { d } else { -d }
                });
                vec![y, g]
            }),
            Box::new(|t, v, _| Ok(loss_lp(t, v[0], v[1], 1).unwrap())),
        ),
        (
            "loss_angular",
            Box::new(|r| vec![uniform(r, &SHAPE, -1.0, 1.0), uniform(r, &SHAPE, -1.0, 1.0)]),
            Box::new(|t, v, _| Ok(loss_angular(t, v[0], v[1]).unwrap())),
        ),
        ("loss_curl", Box::new(|r| vec![swirly(r)]), Box::new(|t, v, _| Ok(loss_curl(t, v[0]).unwrap()))),
        (
            "loss_generator",
            Box::new(|r| vec![uniform(r, &[1], 0.1, 0.9), uniform(r, &SHAPE, -0.3, 0.3), swirly(r)]),
            Box::new(move |t, v, _| Ok(loss_generator(t, v[0], v[1], v[2], &w).unwrap().total)),
        ),
    ]
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (name, inputs, build) in op_cases() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let errs = check_gradients(&inputs(&mut rng), |t: &mut Tape<f64>, v: &[Var]| build(t, v, seed), 1e-4).unwrap();
            for e in errs {
                if e > worst.0 {
                    worst = (e, name);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst.0 < 1e-3 && secs < 120.0,
        format!("worst relative error {:.2e} in {}, {secs:.1}s", worst.0, worst.1),
    );
}

// ---- criterion 2 ----

#[test]
fn criterion_2_photometric_stereo_round_trip() {
    let start = Instant::now();
    let kinds = [SurfaceKind::GaussianBumps, SurfaceKind::SinusoidWeave, SurfaceKind::FractalNoise, SurfaceKind::Composite];
    let lights = standard_lights();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..50 {
        let spec = SurfaceSpec {
            kind: kinds[i % 4],
            amplitude: rng.random_range(0.2..0.5),
            feature_scale: rng.random_range(4.0..10.0),
            seed: rng.random(),
        };
        let (_, truth) = generate_surface(&spec, 64, 64).unwrap();
        let albedo = generate_albedo(&AlbedoModel::default(), 64, rng.random());
        let images: Vec<NirImage> = lights
            .iter()
            .map(|l| render_lambertian_raw(&truth, &albedo, *l).unwrap())
            .collect();
        let rec = photometric_stereo(&images, &lights).unwrap();
        for (k, ok) in rec.valid.iter().enumerate() {
            if *ok {
                sum += angle_deg(rec.normals.normals()[k], truth.normals()[k]);
                n += 1;
            }
        }
    }
    let mean = sum / n as f64;
    let secs = start.elapsed().as_secs_f64();
    report(2, mean < 0.1 && secs < 60.0, format!("mean {mean:.2e} deg over {n} lit pixels, {secs:.1}s"));
}

// ---- criterion 3 ----

fn curl_of(n: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let g = tape.constant(n.clone());
    let l = loss_curl(&mut tape, g).unwrap();
    tape.item(l)
}

#[test]
fn criterion_3_integrability_coherence() {
    let kinds = [SurfaceKind::GaussianBumps, SurfaceKind::SinusoidWeave, SurfaceKind::FractalNoise, SurfaceKind::Composite];
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let spec = SurfaceSpec {
            kind: kinds[seed as usize % 4],
            amplitude: 0.2 + 0.015 * seed as f64,
            feature_scale: 4.0 + 0.3 * seed as f64,
            seed,
        };
        let (_, n) = generate_surface(&spec, 64, 64).unwrap();
        let t = encode_normals::<f64>(&n).reshape(&[1, 3, 64, 64]).unwrap();
        worst = worst.max(curl_of(&t));
    }
    // slopes p = -y, q = x around the center: curl 2 everywhere
    let (h, w) = (16, 16);
    let swirl = Tensor::from_fn(&[1, 3, h, w], |i| {
        let plane = h * w;
        let (y, x) = ((i % plane) / w, i % w);
        let (p, q) = (-(y as f64 - 7.5), x as f64 - 7.5);
        let s = (p * p + q * q + 1.0).sqrt();
        [-p / s, -q / s, 1.0 / s][i / plane]
    });
    let swirl_curl = curl_of(&swirl);
    report(
        3,
        worst < 1e-3 && (swirl_curl - 2.0).abs() < 1e-6,
        format!("max surface curl {worst:.2e}, swirl {swirl_curl:.9}"),
    );
}

// ---- criterion 4 ----

#[test]
fn criterion_4_integration_round_trip() {
    let kinds = [SurfaceKind::GaussianBumps, SurfaceKind::SinusoidWeave, SurfaceKind::FractalNoise, SurfaceKind::Composite];
    let mut worst_mean: f64 = 0.0;
    for (i, kind) in kinds.into_iter().enumerate() {
        let spec = SurfaceSpec {
            kind,
            amplitude: 0.3,
            feature_scale: 8.0,
            seed: 90 + i as u64,
        };
        let (_, normals) = generate_surface(&spec, 64, 64).unwrap();
        let back = depth_to_normals(&integrate_normals(&normals, None).unwrap());
        let e = angular_error_map(&normals, &back).unwrap();
        worst_mean = worst_mean.max(e.iter().sum::<f64>() / e.len() as f64);
    }
    let (w, h, a, b) = (48usize, 32usize, 0.15, -0.1);
    let s = (a * a + b * b + 1.0f64).sqrt();
    let plane = NormalMap::new(w, h, vec![[-a / s, -b / s, 1.0 / s]; w * h]).unwrap();
    let d = integrate_normals(&plane, None).unwrap();
    let (mx, my) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let mut dev: f64 = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            dev = dev.max((d.at(x, y) - a * (x as f64 - mx) - b * (y as f64 - my)).abs());
        }
    }
    report(
        4,
        worst_mean < 2.0 && dev < 1e-3,
        format!("worst surface mean {worst_mean:.3} deg, plane interior deviation {dev:.2e}"),
    );
}

// ---- criteria 5 and 6 ----

/// The smoke protocol: a 2,000/200 synthetic split under one fixed light.
///
/// A height map h lit from (lx, ly, lz) renders exactly like -h lit from
/// (-lx, -ly, lz). With the default light rings both images occur, so from
/// an unknown light the best guess is flat normals. One light removes that.
fn smoke_manifest() -> DatasetManifest {
    DatasetManifest {
        counts: SplitCounts {
            train: 2000,
            val: 0,
            test: 200,
        },
        lights: LightModel {
            polar_deg: vec![30.0],
            per_ring: 1,
            ring_offset_deg: 0.0,
        },
        seed: 11,
        ..DatasetManifest::default()
    }
}

const SMOKE_LR: f64 = 1e-3;

fn smoke_config(seed: u64, lambda_ang: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        total_iterations: 2000,
        lr0: SMOKE_LR,
        lr_decay_every: 1000,
        checkpoint_every: 2000,
        weights: LossWeights {
            lambda_p: 1.0,
            lambda_ang,
            lambda_curl: 0.0,
            p_norm: 2,
            adversarial: 0.0,
        },
        nets: NetConfig {
            generator_widths: [16, 32, 32, 16],
            discriminator_widths: [8, 16, 32, 64, 32],
            ..NetConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
#[ignore = "six 2,000-iteration training runs, about 45 minutes on one core"]
fn criteria_5_and_6_training_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    build_dataset(&smoke_manifest(), &data_dir).unwrap();
    let dataset = Dataset::open(&data_dir).unwrap();
    let train = dataset.load_split::<f32>(Split::Train).unwrap();

    let mut flat = |nir: &NirImage| Ok(vec![[0.0, 0.0, 1.0]; nir.width * nir.height]);
    let baseline = evaluate_items(dataset_items(&dataset, Split::Test), "test", Smoother::default(), &mut flat)
        .unwrap()
        .raw
        .aggregate
        .mean_angular_deg;

    let run = |seed: u64, lambda_ang: f64| {
        let start = Instant::now();
        let out = dir.path().join(format!("run_{seed}_{lambda_ang}"));
        let summary = train_on(&smoke_config(seed, lambda_ang), &train, &out, None, &mut |_| {}).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let report = evaluate(&summary.final_checkpoint, &data_dir, Split::Test, Smoother::default()).unwrap();
        let e = report.raw.aggregate.mean_angular_deg;
        println!("smoke run seed {seed} lambda_ang {lambda_ang}: {e:.3} deg, {secs:.0}s");
        (e, secs)
    };
    let with_ang: Vec<(f64, f64)> = (1..=3).map(|s| run(s, 1.0)).collect();
    let l2_only: Vec<f64> = (1..=3).map(|s| run(s, 0.0).0).collect();

    let (error, secs) = with_ang[0];
    let gain = 1.0 - error / baseline;
    let pass5 = error < 15.0 && gain >= 0.30 && secs <= 1800.0;
    println!(
        "criterion 5: {} (held-out mean {error:.3} deg, flat baseline {baseline:.3} deg, {:.1}% better, {secs:.0}s)",
        if pass5 { "PASS" } else { "FAIL" },
        100.0 * gain
    );
    let (a, b) = (median(with_ang.iter().map(|r| r.0).collect()), median(l2_only));
    let pass6 = a <= b;
    println!(
        "criterion 6: {} (median L2+ang {a:.3} deg, median L2 {b:.3} deg over 3 seeds)",
        if pass6 { "PASS" } else { "FAIL" }
    );
    assert!(pass5 && pass6);
}

// ---- criterion 7 ----

fn field(w: usize, h: usize, f: impl Fn(f64, f64) -> f64) -> NormalMap {
    normals_from_heights(&Heightfield::from_fn(w, h, f))
}

fn max_diff(a: &NormalMap, b: &[[f64; 3]]) -> f64 {
    a.normals()
        .iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f64::max)
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

#[test]
fn criterion_7_detail_map_identities() {
    let y = field(40, 36, |x, y| 2.0 * (x / 11.0).sin() + (y / 7.0).cos());
    let g = field(40, 36, |x, y| 0.02 * x * y / 5.0 + 0.3 * (x * 1.3).sin() * (y * 0.9).cos());
    // with f = identity the formula reduces to Y; see the decisions ledger
    let m = detail_map(&y, &g, Smoother::Identity).unwrap();
    let renorm: Vec<[f64; 3]> = y.normals().iter().map(|v| unit(*v)).collect();
    let identity = max_diff(&m, &renorm);
    let mut same: f64 = 0.0;
    for f in [Smoother::Identity, Smoother::default()] {
        same = same.max(max_diff(&detail_map(&y, &y, f).unwrap(), y.normals()));
    }
    report(
        7,
        identity < 1e-6 && same < 1e-6,
        format!("identity smoother max diff {identity:.1e} (against Y), Y = G max diff {same:.1e}"),
    );
}

// ---- criterion 8 ----

fn tiny_config(iterations: u64, checkpoint_every: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_iterations: iterations,
        checkpoint_every,
        lr0: 1e-3,
        seed: 4,
        nets: NetConfig {
            generator_widths: [6, 8, 8, 6],
            discriminator_widths: [4, 6, 8, 8, 6],
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn log_rows(path: &Path) -> Vec<StepReport> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn criterion_8_determinism_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest {
        counts: SplitCounts {
            train: 6,
            val: 0,
            test: 0,
        },
        seed: 8,
        ..DatasetManifest::default()
    };
    build_dataset(&manifest, &dir.path().join("data")).unwrap();
    let data = Dataset::open(&dir.path().join("data")).unwrap().load_split::<f32>(Split::Train).unwrap();

    let config = tiny_config(200, 100);
    let a = train_on(&config, &data, &dir.path().join("a"), None, &mut |_| {}).unwrap();
    let b = train_on(&config, &data, &dir.path().join("b"), None, &mut |_| {}).unwrap();
    let identical = std::fs::read(&a.log).unwrap() == std::fs::read(&b.log).unwrap();

    let first = tiny_config(100, 100);
    let part = train_on(&first, &data, &dir.path().join("c"), None, &mut |_| {}).unwrap();
    let resumed = train_on(&config, &data, &dir.path().join("c"), Some(&part.final_checkpoint), &mut |_| {}).unwrap();
    let (x, y) = (log_rows(&a.log), log_rows(&resumed.log));
    let mut worst: f64 = if x.len() == y.len() && x.len() == 200 { 0.0 } else { f64::INFINITY };
    for (p, q) in x.iter().zip(&y) {
        for (u, v) in [(p.d_loss, q.d_loss), (p.g_bce, q.g_bce), (p.l_p, q.l_p), (p.l_ang, q.l_ang), (p.l_curl, q.l_curl)] {
            worst = worst.max((u - v).abs());
        }
    }
    report(
        8,
        identical && worst <= 1e-6,
        format!("identical logs: {identical}, resume at 100 max log difference {worst:.1e}"),
    );
}

// ---- criterion 9 ----

#[test]
fn criterion_9_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = SurfaceSpec {
        kind: SurfaceKind::Composite,
        amplitude: 0.5,
        feature_scale: 5.0,
        seed: 3,
    };
    let (_, n) = generate_surface(&spec, 40, 24).unwrap();

    // normal map PNG: quantize, decode, re-encode byte for byte
    write_normal_png(&d.join("a.png"), &n).unwrap();
    let stored = read_normal_png(&d.join("a.png")).unwrap();
    write_normal_components_png(&d.join("b.png"), &stored).unwrap();
    let png_bytes = std::fs::read(d.join("a.png")).unwrap() == std::fs::read(d.join("b.png")).unwrap();
    let png_err = max_diff(&stored.to_normal_map().unwrap(), n.normals());

    // checkpoint: save, load into fresh models, save again
    let config = tiny_config(1, 1);
    let mut models = Models::<f32>::new(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = Tensor::from_fn(&[2, 1, 64, 64], |_| rng.random_range(-1.0f32..1.0));
    let y = Tensor::from_fn(&[2, 3, 64, 64], |_| rng.random_range(-1.0f32..1.0));
    train_step(&mut models, &[(z, y)], &config, 0).unwrap();
    models.to_checkpoint(1).save(&d.join("a.bin")).unwrap();
    let mut fresh = Models::<f32>::new(&config);
    fresh
        .load_checkpoint(&Checkpoint::load(&d.join("a.bin"), Some(fresh.arch_hash())).unwrap())
        .unwrap();
    fresh.to_checkpoint(1).save(&d.join("b.bin")).unwrap();
    let ckpt_bytes = std::fs::read(d.join("a.bin")).unwrap() == std::fs::read(d.join("b.bin")).unwrap();

    // OBJ: vertices come back at the written precision, faces exactly
    let depth = integrate_normals(&n, None).unwrap();
    export_mesh(&depth, &d.join("m.obj"), 2.0).unwrap();
    let mesh = read_obj(&d.join("m.obj")).unwrap();
    let mut obj_err: f64 = if mesh.vertices.len() == 40 * 24 && mesh.faces.len() == 2 * 39 * 23 { 0.0 } else { f64::INFINITY };
    for (i, v) in mesh.vertices.iter().enumerate() {
        let want = [(i % 40) as f64, (i / 40) as f64, 2.0 * depth.z[i]];
        for c in 0..3 {
            obj_err = obj_err.max((v[c] - want[c]).abs());
        }
    }
    report(
        9,
        png_bytes && png_err < 3e-5 && ckpt_bytes && obj_err < 1e-5,
        format!(
            "png re-encode identical: {png_bytes}, png error {png_err:.1e}, checkpoint identical: {ckpt_bytes}, obj error {obj_err:.1e}"
        ),
    );
}
