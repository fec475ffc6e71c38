use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nirnormal::formats::{read_normal_png, read_png, write_normal_png, write_unit_png};
use nirnormal::geometry::read_obj;
use nirnormal::photometry::NormalMap;
use nirnormal::trainer::{load_models, save_checkpoint, LOG_FILE};
use serde_json::{json, Value};

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Outcome {
    fn json(&self) -> Value {
        serde_json::from_str(self.stdout.trim()).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", self.stdout))
    }
}

fn run(args: &[&str]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_nirnormal")).args(args).output().unwrap();
    Outcome {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn tiny_config(dir: &Path, widths: Option<([usize; 4], [usize; 5])>, iterations: u64) -> PathBuf {
    let (g, d) = widths.unwrap_or(([4, 6, 6, 4], [4, 4, 6, 6, 4]));
    let path = dir.join(format!("config_{}_{iterations}.json", g[0]));
    write_json(
        &path,
        &json!({
            "version": 1,
            "dataset": { "counts": { "train": 4, "val": 0, "test": 2 }, "seed": 9 },
            "train": {
                "batch_size": 2,
                "total_iterations": iterations,
                "checkpoint_every": 2,
                "nets": { "generator_widths": g, "discriminator_widths": d }
            }
        }),
    );
    path
}

/// Generates a small dataset and trains a tiny model on it.
fn trained(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = tiny_config(dir, None, 3);
    let data = dir.join("data");
    let r = run(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let run_dir = dir.join("run");
    let r = run(&["--json", "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let ckpt = PathBuf::from(r.json()["result"]["final_checkpoint"].as_str().unwrap());
    assert_eq!(ckpt, run_dir.join("ckpt_3.bin"));
    (cfg, data, ckpt)
}

fn nir_image(path: &Path, w: usize, h: usize) {
    let values: Vec<f64> = (0..w * h)
        .map(|i| 0.5 + 0.3 * ((i % w) as f64 / 3.0).sin() * ((i / w) as f64 / 5.0).cos())
        .collect();
    write_unit_png(path, w, h, &values).unwrap();
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (cfg, data, ckpt) = trained(dir);
    for f in ["manifest.json", "run_config.json", "train/000000_nir.png", "test/000001_nrm.png"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let run_dir = ckpt.parent().unwrap();
    assert!(run_dir.join("run_config.json").is_file());
    assert!(run_dir.join("ckpt_2.bin").is_file());
    assert!(run_dir.join(LOG_FILE).is_file());

    let report = dir.join("eval/report.json");
    let r = run(&["--json", "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = r.json();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["result"]["images"], 2);
    assert!(report.is_file());
    assert!(dir.join("eval/report.config.json").is_file());
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(on_disk, v["result"]);

    let r = run(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&dir.join("id.json")), "--smoother", "identity",
        "--config", s(&cfg),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    let input = dir.join("nir.png");
    nir_image(&input, 64, 64);
    let prefix = dir.join("pred/sample");
    std::fs::create_dir_all(prefix.parent().unwrap()).unwrap();
    let r = run(&["--json", "infer", "--ckpt", s(&ckpt), "--input", s(&input), "--out", s(&prefix), "--mesh"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let nrm = dir.join("pred/sample_nrm.png");
    let stored = read_normal_png(&nrm).unwrap();
    assert_eq!((stored.width, stored.height), (64, 64));
    assert!(dir.join("pred/sample.obj").is_file());
    assert!(dir.join("pred/sample.config.json").is_file());
    assert_eq!(r.json()["result"]["width"], 64);

    let obj = dir.join("mesh/out.obj");
    std::fs::create_dir_all(obj.parent().unwrap()).unwrap();
    let r = run(&["integrate", "--normals", s(&nrm), "--out", s(&obj)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(read_obj(&obj).unwrap().vertices.len(), 64 * 64);
    assert!(dir.join("mesh/out_depth.pfm").is_file());
    assert!(dir.join("mesh/out.config.json").is_file());

    let png = dir.join("curves.png");
    let r = run(&["plot", "--log", s(&run_dir.join(LOG_FILE)), "--out", s(&png)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
}

#[test]
fn configs_are_echoed_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.json");
    write_json(&manifest, &json!({ "counts": { "train": 1, "val": 0, "test": 0 } }));
    let out = tmp.path().join("d");
    let r = run(&["--seed", "77", "generate", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["version"], 1);
    assert_eq!(echoed["dataset"]["seed"], 77);
    assert_eq!(echoed["dataset"]["patch_size"], 64);
    assert_eq!(echoed["train"]["batch_size"], 32);
    assert_eq!(echoed["train"]["lr0"], 0.0002);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(written["seed"], 77);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // 2: malformed JSON, with its line number
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{\n  \"counts\": {\n    \"train\": 3,,\n  }\n}\n").unwrap();
    let r = run(&["--json", "generate", "--manifest", s(&bad), "--out", s(&dir.join("x"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 3"), "{}", r.stderr);
    let v = r.json();
    assert_eq!(v["status"], "error");
    assert_eq!(v["exit_code"], 2);

    // 2: unknown keys and invalid values
    let unknown = dir.join("unknown.json");
    write_json(&unknown, &json!({ "version": 1, "train": { "batch": 3 } }));
    assert_eq!(run(&["generate", "--config", s(&unknown), "--out", s(&dir.join("y"))]).code, 2);
    let invalid = dir.join("invalid.json");
    write_json(&invalid, &json!({ "patch_size": 2 }));
    assert_eq!(run(&["generate", "--manifest", s(&invalid), "--out", s(&dir.join("z"))]).code, 2);
    assert_eq!(run(&["generate", "--out"]).code, 2);
    assert_eq!(run(&["frobnicate"]).code, 2);

    // 3: output below a regular file, missing input
    let file = dir.join("plain");
    std::fs::write(&file, "x").unwrap();
    let ok = dir.join("ok.json");
    write_json(&ok, &json!({ "counts": { "train": 1, "val": 0, "test": 0 } }));
    let r = run(&["generate", "--manifest", s(&ok), "--out", s(&file.join("sub"))]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert_eq!(run(&["generate", "--manifest", s(&dir.join("absent.json")), "--out", s(&dir.join("w"))]).code, 3);

    // 5: empty log; 1: image too small
    let empty = dir.join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let r = run(&["--json", "plot", "--log", s(&empty), "--out", s(&dir.join("e.png"))]);
    assert_eq!(r.code, 5);
    assert_eq!(r.json()["exit_code"], 5);
    let garbage = dir.join("garbage.jsonl");
    std::fs::write(&garbage, "not json\n[1, 2]\n").unwrap();
    assert_eq!(run(&["plot", "--log", s(&garbage), "--out", s(&dir.join("g.png"))]).code, 5);
}

#[test]
fn checkpoint_problems() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (_, data, ckpt) = trained(dir);
    let input = dir.join("nir.png");
    nir_image(&input, 32, 32);

    // 4: the config describes other networks
    let other = tiny_config(dir, Some(([6, 6, 6, 6], [4, 4, 6, 6, 4])), 3);
    let r = run(&["--json", "infer", "--ckpt", s(&ckpt), "--input", s(&input), "--out", s(&dir.join("a")), "--config", s(&other)]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert_eq!(r.json()["exit_code"], 4);
    let r = run(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&dir.join("r.json")), "--config", s(&other)]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    let r = run(&["train", "--config", s(&other), "--data", s(&data), "--out", s(&dir.join("t")), "--resume", s(&ckpt)]);
    assert_eq!(r.code, 4, "{}", r.stderr);

    // 3: corrupt checkpoint
    let broken = dir.join("run/broken.bin");
    std::fs::write(&broken, b"NIRNCKPT").unwrap();
    std::fs::copy(ckpt.with_extension("json"), broken.with_extension("json")).unwrap();
    let r = run(&["infer", "--ckpt", s(&broken), "--input", s(&input), "--out", s(&dir.join("b"))]);
    assert_eq!(r.code, 3, "{}", r.stderr);

    // 1: image below the minimum size
    let small = dir.join("small.png");
    nir_image(&small, 8, 8);
    let r = run(&["infer", "--ckpt", s(&ckpt), "--input", s(&small), "--out", s(&dir.join("c"))]);
    assert_eq!(r.code, 1, "{}", r.stderr);
}

#[test]
fn inference_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (_, _, ckpt) = trained(dir);
    let input = dir.join("nir.png");
    nir_image(&input, 48, 40);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let prefix = dir.join(format!("p{k}"));
        let r = run(&["infer", "--ckpt", s(&ckpt), "--input", s(&input), "--out", s(&prefix), "--mesh"]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        outputs.push([
            std::fs::read(dir.join(format!("p{k}_nrm.png"))).unwrap(),
            std::fs::read(dir.join(format!("p{k}.obj"))).unwrap(),
        ]);
    }
    assert_eq!(outputs[0], outputs[1]);
    let png = read_png(&dir.join("p0_nrm.png")).unwrap();
    assert_eq!((png.width, png.height), (48, 40));
}

#[test]
fn flat_prediction_gives_a_planar_mesh() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (_, _, ckpt) = trained(dir);
    let (mut models, it, config) = load_models(&ckpt, None).unwrap();
    // zero the last kernel and push the z bias into tanh saturation
    let net = &mut models.generator.net;
    let names = net.param_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if name == "g.conv5.weight" {
            net.params_mut()[i].data_mut().fill(0.0);
        }
        if name == "g.conv5.bias" {
            net.params_mut()[i].data_mut().copy_from_slice(&[0.0, 0.0, 4.0]);
        }
    }
    let flat = dir.join("flat.bin");
    save_checkpoint(&models, &config, &flat, it).unwrap();
    let input = dir.join("nir.png");
    nir_image(&input, 64, 64);
    let prefix = dir.join("flat");
    let r = run(&["infer", "--ckpt", s(&flat), "--input", s(&input), "--out", s(&prefix), "--mesh", "--mesh-scale", "5"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let normals = read_normal_png(&dir.join("flat_nrm.png")).unwrap().to_normal_map().unwrap();
    // zero sits between two 16-bit codes, so x and y decode one step off
    for v in normals.normals() {
        assert!(v[0].abs() < 2e-5 && v[1].abs() < 2e-5 && (v[2] - 1.0).abs() < 1e-9, "{v:?}");
    }
    let mesh = read_obj(&dir.join("flat.obj")).unwrap();
    assert_eq!(mesh.vertices.len(), 64 * 64);
    assert!(mesh.vertices.iter().all(|v| v[2].abs() < 1e-9));
}

#[test]
fn integrate_respects_the_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let normals = dir.join("n.png");
    write_normal_png(&normals, &NormalMap::flat(6, 4)).unwrap();
    let mask = dir.join("m.png");
    let m: Vec<f64> = (0..24).map(|i| if i % 6 < 3 { 1.0 } else { 0.0 }).collect();
    write_unit_png(&mask, 6, 4, &m).unwrap();
    let obj = dir.join("o.obj");
    let r = run(&["--json", "integrate", "--normals", s(&normals), "--mask", s(&mask), "--out", s(&obj)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json()["result"]["vertices"], 12);
    assert_eq!(read_obj(&obj).unwrap().faces.len(), 2 * 2 * 3);

    let wrong = dir.join("w.png");
    write_unit_png(&wrong, 3, 3, &[1.0; 9]).unwrap();
    let r = run(&["integrate", "--normals", s(&normals), "--mask", s(&wrong), "--out", s(&obj)]);
    assert_ne!(r.code, 0);
}

fn log_line(i: u64, with_curl: bool) -> String {
    let mut v = json!({
        "iteration": i, "d_loss": 1.3 - 0.01 * i as f64, "g_bce": 0.7, "l_p": 1.0 / (i as f64 + 1.0),
        "l_ang": 0.5, "lr": 0.0002
    });
    if with_curl {
        v["l_curl"] = json!(0.01);
    }
    v.to_string()
}

#[test]
fn plot_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let full = dir.join("full.jsonl");
    std::fs::write(&full, (1..=10).map(|i| log_line(i, true) + "\n").collect::<String>()).unwrap();
    let png = dir.join("full.png");
    let r = run(&["--json", "plot", "--log", s(&full), "--out", s(&png)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
    let v = r.json();
    assert_eq!(v["result"]["rows"], 10);
    assert_eq!(v["result"]["plotted"].as_array().unwrap().len(), 5);
    assert!(dir.join("full.config.json").is_file());

    let partial = dir.join("partial.jsonl");
    let mut text: String = (1..=10).map(|i| log_line(i, false) + "\n").collect();
    text.push_str("{\"iteration\": 11, \"d_loss\": \n");
    std::fs::write(&partial, text).unwrap();
    let r = run(&["--json", "plot", "--log", s(&partial), "--out", s(&dir.join("partial.png"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.contains("l_curl"), "{}", r.stderr);
    assert!(r.stderr.contains("skipped 1"), "{}", r.stderr);
    let v = r.json();
    assert_eq!(v["result"]["skipped_lines"], 1);
    assert_eq!(v["result"]["missing"], json!(["l_curl"]));
}

#[test]
fn inference_at_256_is_fast_enough() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = dir.join("default.json");
    write_json(
        &cfg,
        &json!({
            "dataset": { "counts": { "train": 1, "val": 0, "test": 0 } },
            "train": { "batch_size": 1, "total_iterations": 1 }
        }),
    );
    let data = dir.join("data");
    assert_eq!(run(&["generate", "--config", s(&cfg), "--out", s(&data)]).code, 0);
    let r = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.join("run"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let input = dir.join("big.png");
    nir_image(&input, 256, 256);
    let start = Instant::now();
    let r = run(&["--json", "infer", "--ckpt", s(&dir.join("run/ckpt_1.bin")), "--input", s(&input), "--out", s(&dir.join("big"))]);
    let wall = start.elapsed().as_secs_f64();
    assert_eq!(r.code, 0, "{}", r.stderr);
    let reported = r.json()["result"]["seconds"].as_f64().unwrap();
    eprintln!("256x256 inference at default widths: {reported:.2}s ({wall:.2}s wall)");
    assert!(wall <= 10.0, "took {wall:.2}s");
}
