//! Alternating adversarial training with checkpoints and a JSON-lines log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nirnormal_tensor::{adam_step, AdamState, Scalar, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{arch_hash, hex, Checkpoint};
use crate::error::{Error, Result};
use crate::losses::{loss_discriminator, loss_generator, LossWeights};
use crate::nets::{Discriminator, Generator, NetConfig, NetMode};
use crate::synth::{Dataset, Split, SplitData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: u64,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weights: LossWeights,
    pub nets: NetConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            total_iterations: 46_000,
            lr0: 2e-4,
            lr_decay: 0.95,
            lr_decay_every: 5_000,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            weights: LossWeights::default(),
            nets: NetConfig::default(),
            seed: 0,
            checkpoint_every: 5_000,
            d_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.lr_decay_every == 0 || self.checkpoint_every == 0 || self.d_steps == 0 {
            return bad("lr_decay_every, checkpoint_every and d_steps must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be > 0".into());
        }
        self.weights.validate()?;
        self.nets.validate()
    }
}

/// `lr0 · decay^⌊iteration / every⌋`.
pub fn lr_schedule(iteration: u64, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay.powi((iteration / config.lr_decay_every) as i32)
}

/// Stratified sampling without replacement.
///
/// Stream position `t` draws from light `t mod L` (over the lights that have
/// samples); each light's pool is reshuffled every time it is exhausted. The
/// sample at any position is a pure function of the seed and the position.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    pools: Vec<(usize, Vec<usize>)>,
    seed: u64,
}

impl BalancedSampler {
    /// `lights[i]` is the light index of sample `i`; `None` treats the data as
    /// one stratum.
    pub fn new(len: usize, lights: Option<&[usize]>, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("cannot sample from an empty split".into()));
        }
        let mut pools: Vec<(usize, Vec<usize>)> = Vec::new();
        match lights {
            Some(ls) => {
                let count = ls.iter().max().map_or(0, |m| m + 1);
                for light in 0..count {
                    let members: Vec<usize> = (0..len).filter(|&i| ls[i] == light).collect();
                    if !members.is_empty() {
                        pools.push((light, members));
                    }
                }
            }
            None => pools.push((0, (0..len).collect())),
        }
        Ok(Self { pools, seed })
    }

    pub fn strata(&self) -> usize {
        self.pools.len()
    }

    pub fn index_at(&self, position: u64) -> usize {
        let l = self.pools.len() as u64;
        let (light, pool) = &self.pools[(position % l) as usize];
        let k = position / l;
        let n = pool.len() as u64;
        let (epoch, offset) = (k / n, (k % n) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((*light as u64) << 40) ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        order[offset]
    }

    pub fn batch(&self, start: u64, size: usize) -> Vec<usize> {
        (0..size as u64).map(|i| self.index_at(start + i)).collect()
    }
}

/// Both networks and their optimizers.
pub struct Models<T: Scalar> {
    pub config: NetConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub opt_g: AdamState<T>,
    pub opt_d: AdamState<T>,
}

impl<T: Scalar> Models<T> {
    pub fn new(config: &TrainConfig) -> Self {
        let generator = Generator::new(&config.nets, config.seed);
        let discriminator = Discriminator::new(&config.nets, config.seed);
        let adam = |p: &[Tensor<T>]| AdamState::new(p, config.lr0, config.beta1, config.beta2, config.epsilon);
        Self {
            config: config.nets.clone(),
            opt_g: adam(generator.net.params()),
            opt_d: adam(discriminator.net.params()),
            generator,
            discriminator,
        }
    }

    pub fn arch_hash(&self) -> [u8; 8] {
        arch_hash(&self.config.arch_description())
    }

    pub fn to_checkpoint(&self, iteration: u64) -> Checkpoint<T> {
        let mut tensors = Vec::new();
        for net in [&self.generator.net, &self.discriminator.net] {
            for (name, p) in net.param_names().iter().zip(net.params()) {
                tensors.push((name.clone(), p.clone()));
            }
            for (name, mean, var) in net.running_stats() {
                tensors.push((format!("{name}.running_mean"), mean));
                tensors.push((format!("{name}.running_var"), var));
            }
        }
        Checkpoint {
            arch_hash: self.arch_hash(),
            iteration,
            tensors,
            optimizers: vec![("g".into(), self.opt_g.clone()), ("d".into(), self.opt_d.clone())],
        }
    }

    /// Restores parameters, running statistics and optimizer state.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        if ckpt.arch_hash != self.arch_hash() {
            return Err(Error::ArchMismatch {
                expected: hex(&self.arch_hash()),
                found: hex(&ckpt.arch_hash),
            });
        }
        for net in [&mut self.generator.net, &mut self.discriminator.net] {
            restore_net(net, ckpt)?;
        }
        for (name, slot) in [("g", &mut self.opt_g), ("d", &mut self.opt_d)] {
            let state = ckpt
                .optimizer(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint has no optimizer `{name}`")))?;
            if state.first_moment.len() != slot.first_moment.len() {
                return Err(Error::Invalid(format!("optimizer `{name}` has the wrong number of buffers")));
            }
            *slot = state.clone();
        }
        Ok(())
    }
}

fn restore_net<T: Scalar>(net: &mut crate::nets::Net<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    let names = net.param_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let t = ckpt
            .tensor(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor `{name}`")))?;
        if t.shape() != net.params()[i].shape() {
            return Err(Error::Extent(format!("tensor `{name}` has shape {:?}", t.shape())));
        }
        net.params_mut()[i] = t.clone();
    }
    let prefix = format!("{}.bn", net.prefix());
    let stats: Vec<(String, Tensor<T>, Tensor<T>)> = ckpt
        .tensors
        .iter()
        .filter_map(|(n, mean)| {
            let base = n.strip_suffix(".running_mean")?;
            base.starts_with(&prefix).then_some(())?;
            let var = ckpt.tensor(&format!("{base}.running_var"))?;
            Some((base.to_string(), mean.clone(), var.clone()))
        })
        .collect();
    for (base, mean, var) in stats {
        net.set_running_stats(&base, mean, var)?;
    }
    Ok(())
}

/// Loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub d_loss: f64,
    pub g_bce: f64,
    pub l_p: f64,
    pub l_ang: f64,
    pub l_curl: f64,
    pub lr: f64,
}

fn diverged(iteration: u64, what: &str) -> Error {
    Error::Diverged {
        iteration,
        detail: format!("{what} is not finite"),
    }
}

fn adam<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, iteration: u64, net: &str) -> Result<()> {
    adam_step(params, grads, state).map_err(|e| match e {
        TensorError::Diverged { param } => Error::Diverged {
            iteration,
            detail: format!("non-finite gradient in {net} parameter {param}"),
        },
        other => other.into(),
    })
}

/// One discriminator update followed by one generator update.
///
/// `d_batches` feeds the discriminator steps (one per entry); the generator
/// step uses the last of them. `iteration` counts completed iterations before
/// this one and selects the learning rate.
pub fn train_step<T: Scalar>(
    models: &mut Models<T>,
    d_batches: &[(Tensor<T>, Tensor<T>)],
    config: &TrainConfig,
    iteration: u64,
) -> Result<StepReport> {
    let lr = lr_schedule(iteration, config);
    models.opt_g.learning_rate = lr;
    models.opt_d.learning_rate = lr;
    let (z, y) = d_batches.last().ok_or_else(|| Error::Invalid("no batch given".into()))?;
    let step = iteration + 1;

    // the generator runs once; its output is reused (detached) by D
    let mut g_tape = Tape::new();
    let g_bound = models.generator.net.bind(&mut g_tape, true);
    let zv = g_tape.constant(z.clone());
    let (fake, _) = models.generator.forward(&mut g_tape, &g_bound, zv, NetMode::Train)?;

    let mut d_loss = 0.0;
    let mut fake_stats = Vec::new();
    for (k, (zb, yb)) in d_batches.iter().enumerate() {
        let last = k + 1 == d_batches.len();
        let fake_value = if last {
            g_tape.value(fake).clone()
        } else {
            models.generator.predict_train(zb)?
        };
        let mut tape = Tape::new();
        let bound = models.discriminator.net.bind(&mut tape, true);
        let zc = tape.constant(zb.clone());
        let yc = tape.constant(yb.clone());
        let fc = tape.constant(fake_value);
        let (d_real, _) = models.discriminator.forward(&mut tape, &bound, zc, yc, NetMode::Train)?;
        let (d_fake, stats) = models.discriminator.forward(&mut tape, &bound, zc, fc, NetMode::Train)?;
        let loss = loss_discriminator(&mut tape, d_real, d_fake);
        d_loss = tape.item(loss);
        if !d_loss.is_finite() {
            return Err(diverged(step, "discriminator loss"));
        }
        tape.backward(loss)?;
        let grads = models.discriminator.net.grads(&tape, &bound);
        adam(models.discriminator.net.params_mut(), &grads, &mut models.opt_d, step, "discriminator")?;
        fake_stats = stats;
    }

    let zv_d = zv;
    let yv = g_tape.constant(y.clone());
    let d_bound = models.discriminator.net.bind(&mut g_tape, false);
    let (d_fake, _) = models
        .discriminator
        .forward(&mut g_tape, &d_bound, zv_d, fake, NetMode::Frozen(&fake_stats))?;
    let terms = loss_generator(&mut g_tape, d_fake, yv, fake, &config.weights)?;
    let total = g_tape.item(terms.total);
    if !total.is_finite() {
        return Err(diverged(step, "generator loss"));
    }
    g_tape.backward(terms.total)?;
    let grads = models.generator.net.grads(&g_tape, &g_bound);
    adam(models.generator.net.params_mut(), &grads, &mut models.opt_g, step, "generator")?;

    Ok(StepReport {
        iteration: step,
        d_loss,
        g_bce: g_tape.item(terms.g_bce),
        l_p: g_tape.item(terms.l_p),
        l_ang: g_tape.item(terms.l_ang),
        l_curl: g_tape.item(terms.l_curl),
        lr,
    })
}

pub const LOG_FILE: &str = "losses.jsonl";
pub const CONFIG_FILE: &str = "config.json";

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{iteration}.bin"))
}

/// JSON written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSidecar {
    pub format_version: u32,
    pub iteration: u64,
    pub arch_hash: String,
    pub train: TrainConfig,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save_checkpoint(models: &Models<f32>, config: &TrainConfig, path: &Path, iteration: u64) -> Result<()> {
    models.to_checkpoint(iteration).save(path)?;
    let sidecar = CheckpointSidecar {
        format_version: crate::checkpoint::VERSION,
        iteration,
        arch_hash: hex(&models.arch_hash()),
        train: config.clone(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_sidecar(ckpt: &Path) -> Result<CheckpointSidecar> {
    let path = sidecar_path(ckpt);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Loads a checkpoint with the network configuration from `nets`, or from its
/// sidecar when `nets` is `None`.
pub fn load_models(ckpt: &Path, nets: Option<&NetConfig>) -> Result<(Models<f32>, u64, TrainConfig)> {
    let mut config = match (read_sidecar(ckpt), nets) {
        (Ok(side), _) => side.train,
        (Err(_), Some(_)) => TrainConfig::default(),
        (Err(e), None) => return Err(e),
    };
    if let Some(n) = nets {
        config.nets = n.clone();
    }
    let mut models = Models::new(&config);
    let loaded = Checkpoint::load(ckpt, Some(models.arch_hash()))?;
    models.load_checkpoint(&loaded)?;
    Ok((models, loaded.iteration, config))
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub start_iteration: u64,
    pub final_iteration: u64,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Keeps log lines up to `iteration` and drops the rest.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let it = serde_json::from_str::<StepReport>(&line).map(|r| r.iteration);
        if matches!(it, Ok(i) if i <= iteration) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains on an in-memory split. `resume` continues from a checkpoint;
/// `observer` sees every step report.
pub fn train_on(
    config: &TrainConfig,
    data: &SplitData<f32>,
    out_dir: &Path,
    resume: Option<&Path>,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<TrainSummary> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(config)? + "\n").map_err(|e| Error::io(&config_path, e))?;

    let mut models = Models::<f32>::new(config);
    let mut start = 0;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path, Some(models.arch_hash()))?;
        models.load_checkpoint(&ckpt)?;
        start = ckpt.iteration;
    }
    let log_path = out_dir.join(LOG_FILE);
    if start == 0 {
        fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
    } else {
        truncate_log(&log_path, start)?;
    }
    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let sampler = BalancedSampler::new(data.len(), data.lights.as_deref(), config.seed)?;
    let per_iter = (config.batch_size * config.d_steps) as u64;
    let mut checkpoints = Vec::new();
    let mut final_checkpoint = resume.map(Path::to_path_buf).unwrap_or_default();
    for it in start..config.total_iterations {
        let mut batches = Vec::with_capacity(config.d_steps);
        for s in 0..config.d_steps {
            let pos = it * per_iter + (s * config.batch_size) as u64;
            batches.push(data.batch(&sampler.batch(pos, config.batch_size))?);
        }
        let report = train_step(&mut models, &batches, config, it)?;
        let line = serde_json::to_string(&report)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        observer(&report);
        let done = it + 1;
        if done % config.checkpoint_every == 0 || done == config.total_iterations {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let path = checkpoint_path(out_dir, done);
            save_checkpoint(&models, config, &path, done)?;
            checkpoints.push(path.clone());
            final_checkpoint = path;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if start >= config.total_iterations && resume.is_none() {
        let path = checkpoint_path(out_dir, start);
        save_checkpoint(&models, config, &path, start)?;
        final_checkpoint = path;
    }
    Ok(TrainSummary {
        start_iteration: start,
        final_iteration: config.total_iterations.max(start),
        checkpoints,
        final_checkpoint,
        log: log_path,
    })
}

/// Trains on the `train` split of `dataset_dir`.
pub fn train(config: &TrainConfig, dataset_dir: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let dataset = Dataset::open(dataset_dir)?;
    if dataset.len(Split::Train) == 0 {
        return Err(Error::Config(format!("{} has no training samples", dataset_dir.display())));
    }
    let data = dataset.load_split::<f32>(Split::Train)?;
    train_on(config, &data, out_dir, resume, &mut |_| {})
}

/// Reads a loss log, skipping lines that do not parse.
pub fn read_log(path: &Path) -> Result<(Vec<serde_json::Value>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut bad = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<serde_json::Value>(line) {
            Ok(v) if v.is_object() => rows.push(v),
            _ => bad += 1,
        }
    }
    Ok((rows, bad))
}
