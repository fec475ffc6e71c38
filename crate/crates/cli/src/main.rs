//! `nirnormal`: dataset generation, training, evaluation, inference,
//! normal integration and loss plotting.
//!
//! Human-readable messages go to stderr. With `--json`, stdout carries one
//! JSON object per invocation. Exit codes are listed in [`failure`].

mod config;
mod failure;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nirnormal::evaluator::{dataset_items, evaluate_items, tensor_components, write_report, Smoother};
use nirnormal::formats::{read_normal_png, read_nir, read_unit_png, write_normal_png, write_rgb8_png};
use nirnormal::geometry::{export_mesh, integrate_normals, write_depth_pfm};
use nirnormal::photometry::NormalMap;
use nirnormal::synth::{build_dataset, DatasetManifest, Dataset, Split};
use nirnormal::trainer::{load_models, read_log, train_on};
use serde::Serialize;
use serde_json::{json, Value};

use config::{echo, load_run_config, read_json, RUN_CONFIG_FILE};
use failure::{Failure, EXIT_EMPTY_LOG};

/// Smallest image side accepted by `infer`.
const MIN_INFER_SIDE: usize = 16;

#[derive(Parser)]
#[command(name = "nirnormal", version, about = "Surface normals from single NIR images")]
struct Cli {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for all randomness of this invocation (overrides config seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate {
        /// Run config; its `dataset` section is used.
        #[arg(long, conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// Bare dataset manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator and discriminator.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every this many iterations (0 = never).
        #[arg(long, default_value_t = 100)]
        progress_every: u64,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        smoother: Option<SmootherArg>,
        /// Gaussian sigma in pixels.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Predict normals for one NIR image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Grayscale PNG (raw radiance) or PFM (values in [-1, 1]).
        #[arg(long)]
        input: PathBuf,
        /// Output prefix; writes `<prefix>_nrm.png`.
        #[arg(long)]
        out: PathBuf,
        /// Also integrate the prediction and write `<prefix>.obj`.
        #[arg(long)]
        mesh: bool,
        #[arg(long)]
        mesh_scale: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Integrate a normal map into a depth map and mesh.
    Integrate {
        /// Normal-map PNG.
        #[arg(long)]
        normals: PathBuf,
        /// OBJ path; the depth map goes next to it as `<stem>_depth.pfm`.
        #[arg(long)]
        out: PathBuf,
        /// Grayscale PNG; pixels above one half are integrated.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Draw the loss curves of a training log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SmootherArg {
    Identity,
    Gaussian,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Integrate { .. } => "integrate",
            Command::Plot { .. } => "plot",
        }
    }
}

/// `dir/file.ext` → `dir/file.config.json`.
fn config_beside(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.config.json"))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn generate(cli: &Cli, config: Option<&Path>, manifest: Option<&Path>, out: &Path) -> Result<Value, Failure> {
    let mut cfg = load_run_config(config)?;
    if let Some(m) = manifest {
        cfg.dataset = read_json::<DatasetManifest>(m)?;
    }
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
    }
    cfg.dataset.validate()?;
    echo(&cfg, &out.join(RUN_CONFIG_FILE))?;
    let summary = build_dataset(&cfg.dataset, out)?;
    for s in &summary.splits {
        eprintln!("{}: {} samples, {} files", s.split.name(), s.samples, s.files);
    }
    Ok(to_value(&summary))
}

fn train(cli: &Cli, config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>, every: u64) -> Result<Value, Failure> {
    let mut cfg = load_run_config(config)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    echo(&cfg, &out.join(RUN_CONFIG_FILE))?;
    let dataset = Dataset::open(data)?;
    let split = dataset.load_split::<f32>(Split::Train)?;
    eprintln!("training on {} samples", split.len());
    let start = Instant::now();
    let mut progress = |r: &nirnormal::trainer::StepReport| {
        if every > 0 && r.iteration % every == 0 {
            eprintln!(
                "iter {:>6}  d {:.4}  g_bce {:.4}  l_p {:.4}  l_ang {:.4}  l_curl {:.4}  lr {:.2e}  {:.0}s",
                r.iteration,
                r.d_loss,
                r.g_bce,
                r.l_p,
                r.l_ang,
                r.l_curl,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
    };
    let summary = train_on(&cfg.train, &split, out, resume, &mut progress)?;
    eprintln!("final checkpoint {}", summary.final_checkpoint.display());
    Ok(to_value(&summary))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    config: Option<&Path>,
    ckpt: &Path,
    data: &Path,
    split: Option<&str>,
    out: &Path,
    smoother: Option<SmootherArg>,
    sigma: Option<f64>,
) -> Result<Value, Failure> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = split {
        cfg.eval.split = s.parse::<Split>()?;
    }
    let current_sigma = match cfg.eval.smoother {
        Smoother::Gaussian { sigma } => sigma,
        Smoother::Identity => 3.0,
    };
    cfg.eval.smoother = match (smoother, sigma) {
        (Some(SmootherArg::Identity), Some(_)) => return Err(Failure::config("--sigma needs the gaussian smoother")),
        (Some(SmootherArg::Identity), None) => Smoother::Identity,
        (Some(SmootherArg::Gaussian), s) => Smoother::Gaussian {
            sigma: s.unwrap_or(current_sigma),
        },
        (None, Some(s)) => Smoother::Gaussian { sigma: s },
        (None, None) => cfg.eval.smoother,
    };
    if let Smoother::Gaussian { sigma } = cfg.eval.smoother {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Failure::config(format!("sigma must be positive, got {sigma}")));
        }
    }
    echo(&cfg, &config_beside(out))?;
    let (mut models, _, _) = load_models(ckpt, config.map(|_| &cfg.train.nets))?;
    let dataset = Dataset::open(data)?;
    let mut predict = |nir: &nirnormal::photometry::NirImage| -> nirnormal::Result<Vec<[f64; 3]>> {
        let out = models.generator.predict(&nir.to_tensor::<f32>())?;
        Ok(tensor_components(&out))
    };
    let report = evaluate_items(
        dataset_items(&dataset, cfg.eval.split),
        cfg.eval.split.name(),
        cfg.eval.smoother,
        &mut predict,
    )?;
    write_report(&report, out)?;
    eprintln!(
        "{} images: mean {:.2} deg, median {:.2} deg (raw); mean {:.2} deg (detail)",
        report.images, report.raw.aggregate.mean_angular_deg, report.raw.aggregate.median_angular_deg, report.detail.aggregate.mean_angular_deg
    );
    Ok(to_value(&report))
}

fn infer(config: Option<&Path>, ckpt: &Path, input: &Path, out: &Path, mesh: bool, mesh_scale: Option<f64>) -> Result<Value, Failure> {
    let mut cfg = load_run_config(config)?;
    cfg.infer.mesh |= mesh;
    if let Some(s) = mesh_scale {
        cfg.infer.mesh_scale = s;
    }
    echo(&cfg, &with_suffix(out, ".config.json"))?;
    let start = Instant::now();
    let nir = read_nir(input)?;
    if nir.width < MIN_INFER_SIDE || nir.height < MIN_INFER_SIDE {
        return Err(Failure::other(format!(
            "{}: image is {}x{}, need at least {MIN_INFER_SIDE}x{MIN_INFER_SIDE}",
            input.display(),
            nir.width,
            nir.height
        )));
    }
    let (mut models, iteration, _) = load_models(ckpt, config.map(|_| &cfg.train.nets))?;
    let pred = models.generator.predict(&nir.to_tensor::<f32>())?;
    let (normals, degenerate) = NormalMap::from_vectors(nir.width, nir.height, &tensor_components(&pred))?;
    let nrm_path = with_suffix(out, "_nrm.png");
    write_normal_png(&nrm_path, &normals)?;
    let mut result = json!({
        "checkpoint_iteration": iteration,
        "width": nir.width,
        "height": nir.height,
        "degenerate_pixels": degenerate,
        "normals": nrm_path,
    });
    if cfg.infer.mesh {
        let depth = integrate_normals(&normals, None)?;
        let obj = with_suffix(out, ".obj");
        export_mesh(&depth, &obj, cfg.infer.mesh_scale)?;
        result["mesh"] = to_value(&obj);
    }
    result["seconds"] = json!(start.elapsed().as_secs_f64());
    eprintln!("wrote {} in {:.2}s", nrm_path.display(), start.elapsed().as_secs_f64());
    Ok(result)
}

fn integrate(normals: &Path, out: &Path, mask: Option<&Path>, scale: f64) -> Result<Value, Failure> {
    let resolved = json!({ "normals": normals, "out": out, "mask": mask, "scale": scale });
    echo(&resolved, &config_beside(out))?;
    let map = read_normal_png(normals)?.to_normal_map()?;
    let mask = match mask {
        Some(p) => {
            let (w, h, v) = read_unit_png(p)?;
            if (w, h) != (map.width(), map.height()) {
                return Err(Failure::other(format!(
                    "mask is {w}x{h} but normals are {}x{}",
                    map.width(),
                    map.height()
                )));
            }
            Some(v.into_iter().map(|x| x > 0.5).collect::<Vec<_>>())
        }
        None => None,
    };
    let depth = integrate_normals(&map, mask.as_deref())?;
    export_mesh(&depth, out, scale)?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let pfm = out.with_file_name(format!("{stem}_depth.pfm"));
    write_depth_pfm(&depth, &pfm)?;
    let vertices = depth.valid.iter().filter(|v| **v).count();
    eprintln!("wrote {} ({vertices} vertices) and {}", out.display(), pfm.display());
    Ok(json!({ "mesh": out, "depth": pfm, "vertices": vertices }))
}

fn plot_log(log: &Path, out: &Path) -> Result<Value, Failure> {
    echo(&json!({ "log": log, "out": out }), &config_beside(out))?;
    let (rows, skipped) = read_log(log)?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} corrupt line(s) in {}", log.display());
    }
    if rows.is_empty() {
        return Err(Failure::new(EXIT_EMPTY_LOG, format!("{}: no usable log rows", log.display())));
    }
    let (canvas, summary) = plot::render(&rows, skipped);
    for term in &summary.missing {
        eprintln!("warning: term `{term}` not present in the log; curve omitted");
    }
    write_rgb8_png(out, canvas.width, canvas.height, &canvas.rgb)?;
    Ok(to_value(&summary))
}

fn run(cli: &Cli) -> Result<Value, Failure> {
    match &cli.command {
        Command::Generate { config, manifest, out } => generate(cli, config.as_deref(), manifest.as_deref(), out),
        Command::Train {
            config,
            data,
            out,
            resume,
            progress_every,
        } => train(cli, config.as_deref(), data, out, resume.as_deref(), *progress_every),
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            config,
            smoother,
            sigma,
        } => eval(config.as_deref(), ckpt, data, split.as_deref(), out, *smoother, *sigma),
        Command::Infer {
            ckpt,
            input,
            out,
            mesh,
            mesh_scale,
            config,
        } => infer(config.as_deref(), ckpt, input, out, *mesh, *mesh_scale),
        Command::Integrate { normals, out, mask, scale } => integrate(normals, out, mask.as_deref(), *scale),
        Command::Plot { log, out } => plot_log(log, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(&cli) {
        Ok(result) => {
            if cli.json {
                println!("{}", json!({ "command": name, "status": "ok", "result": result }));
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            if cli.json {
                println!(
                    "{}",
                    json!({ "command": name, "status": "error", "exit_code": f.code, "message": f.message })
                );
            }
            ExitCode::from(f.code)
        }
    }
}
