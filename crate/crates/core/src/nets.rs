//! Generator and discriminator networks.
//!
//! Parameters live outside the tape. Each forward pass binds them as leaves
//! (see [`Net::bind`]) so the caller can read their gradients afterwards.

use nirnormal_tensor::{BatchNorm2d, BatchStats, BnMode, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

/// What the discriminator sees besides the normal map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// NIR and normals, concatenated to 4 channels.
    #[default]
    Pair,
    NormalsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch_norm: bool,
    pub bias: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Filters of the four hidden generator layers.
    pub generator_widths: [usize; 4],
    /// Filters of the five discriminator layers.
    pub discriminator_widths: [usize; 5],
    pub leaky_slope: f64,
    pub conditioning: Conditioning,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            generator_widths: [128, 256, 256, 128],
            discriminator_widths: [64, 128, 256, 512, 256],
            leaky_slope: 0.2,
            conditioning: Conditioning::Pair,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generator_widths.contains(&0) || self.discriminator_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope must be in [0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn generator_layers(&self) -> Vec<LayerSpec> {
        let w = self.generator_widths;
        let chans = [1, w[0], w[1], w[2], w[3], 3];
        (0..5)
            .map(|i| {
                let last = i == 4;
                LayerSpec {
                    c_in: chans[i],
                    c_out: chans[i + 1],
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    batch_norm: !last,
                    bias: last,
                    activation: if last { Activation::Tanh } else { Activation::Relu },
                }
            })
            .collect()
    }

    pub fn discriminator_input_channels(&self) -> usize {
        match self.conditioning {
            Conditioning::Pair => 4,
            Conditioning::NormalsOnly => 3,
        }
    }

    pub fn discriminator_layers(&self) -> Vec<LayerSpec> {
        let w = self.discriminator_widths;
        let chans = [self.discriminator_input_channels(), w[0], w[1], w[2], w[3], w[4]];
        (0..5)
            .map(|i| {
                let last = i == 4;
                let bn = (1..4).contains(&i);
                LayerSpec {
                    c_in: chans[i],
                    c_out: chans[i + 1],
                    kernel: if last { 1 } else { 3 },
                    stride: if last { 1 } else { 2 },
                    pad: 0,
                    batch_norm: bn,
                    bias: !bn,
                    activation: if last { Activation::Sigmoid } else { Activation::LeakyRelu },
                }
            })
            .collect()
    }

    /// Canonical text of both architectures; its hash guards checkpoints.
    pub fn arch_description(&self) -> String {
        let layers = |ls: Vec<LayerSpec>| {
            ls.iter()
                .map(|l| {
                    format!(
                        "{}>{}k{}s{}p{}{}{}{:?}",
                        l.c_in,
                        l.c_out,
                        l.kernel,
                        l.stride,
                        l.pad,
                        if l.batch_norm { "bn" } else { "" },
                        if l.bias { "b" } else { "" },
                        l.activation
                    )
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "G[{}];D[{}]",
            layers(self.generator_layers()),
            layers(self.discriminator_layers())
        )
    }
}

/// How batch normalization behaves in one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum NetMode<'a> {
    Train,
    Eval,
    /// Fixed statistics, one entry per batch-norm layer.
    Frozen(&'a [BatchStats]),
}

struct Layer<T: Scalar> {
    spec: LayerSpec,
    kernel: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize, BatchNorm2d<T>)>,
}

/// A stack of convolution layers with named parameters.
pub struct Net<T: Scalar> {
    prefix: &'static str,
    layers: Vec<Layer<T>>,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    leaky_slope: f64,
}

impl<T: Scalar> Net<T> {
    fn new(prefix: &'static str, specs: Vec<LayerSpec>, leaky_slope: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut add = |name: String, t: Tensor<T>| {
            params.push(t);
            names.push(name);
            params.len() - 1
        };
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let n = i + 1;
                let kshape = [spec.c_out, spec.c_in, spec.kernel, spec.kernel];
                let kernel = add(format!("{prefix}.conv{n}.weight"), Tensor::randn(&kshape, INIT_STD, &mut rng));
                let bias = spec
                    .bias
                    .then(|| add(format!("{prefix}.conv{n}.bias"), Tensor::zeros(&[spec.c_out])));
                let norm = spec.batch_norm.then(|| {
                    let g = add(format!("{prefix}.bn{n}.gamma"), Tensor::ones(&[spec.c_out]));
                    let b = add(format!("{prefix}.bn{n}.beta"), Tensor::zeros(&[spec.c_out]));
                    (g, b, BatchNorm2d::new(spec.c_out, BN_EPS, BN_MOMENTUM))
                });
                Layer {
                    spec,
                    kernel,
                    bias,
                    norm,
                }
            })
            .collect();
        Self {
            prefix,
            layers,
            params,
            names,
            leaky_slope,
        }
    }

    pub fn prefix(&self) -> &str {
        self.prefix
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`, in [`Net::params`] order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    /// Gradients of bound parameters; zeros where none reached them.
    pub fn grads(&self, tape: &Tape<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        bound
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    /// `(name, running mean, running var)` for each batch-norm layer that has
    /// seen a training batch.
    pub fn running_stats(&self) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let (_, _, bn) = l.norm.as_ref()?;
                let (m, v) = bn.running_stats()?;
                Some((format!("{}.bn{}", self.prefix, i + 1), m.clone(), v.clone()))
            })
            .collect()
    }

    pub fn set_running_stats(&mut self, name: &str, mean: Tensor<T>, var: Tensor<T>) -> Result<()> {
        let prefix = self.prefix;
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some((_, _, bn)) = l.norm.as_mut() {
                if format!("{prefix}.bn{}", i + 1) == name {
                    if mean.shape() != [bn.channels] || var.shape() != [bn.channels] {
                        return Err(Error::Extent(format!("running stats for {name} have the wrong shape")));
                    }
                    bn.set_running_stats(mean, var);
                    return Ok(());
                }
            }
        }
        Err(Error::Invalid(format!("no batch-norm layer named {name}")))
    }

    fn clear_running_stats(&mut self) {
        for l in &mut self.layers {
            if let Some((_, _, bn)) = l.norm.as_mut() {
                *bn = BatchNorm2d::new(bn.channels, bn.eps, bn.momentum);
            }
        }
    }

    pub fn batch_norm_count(&self) -> usize {
        self.layers.iter().filter(|l| l.norm.is_some()).count()
    }

    /// Runs the layer stack on `x`. Returns the output and, in training mode,
    /// the statistics of every batch-norm layer.
    fn run(&mut self, tape: &mut Tape<T>, bound: &[Var], x: Var, mode: NetMode<'_>) -> Result<(Var, Vec<BatchStats>)> {
        if bound.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{} parameters bound, {} expected",
                bound.len(),
                self.params.len()
            )));
        }
        if let NetMode::Frozen(stats) = mode {
            if stats.len() != self.batch_norm_count() {
                return Err(Error::Invalid("frozen statistics do not match the batch-norm layers".into()));
            }
        }
        let mut h = x;
        let mut collected = Vec::new();
        let mut bn_index = 0;
        for layer in &mut self.layers {
            let s = layer.spec;
            h = tape.conv2d(h, bound[layer.kernel], s.stride, s.pad)?;
            if let Some(b) = layer.bias {
                h = tape.channel_bias(h, bound[b])?;
            }
            if let Some((g, b, bn)) = layer.norm.as_mut() {
                let bn_mode = match mode {
                    NetMode::Train => BnMode::Train,
                    NetMode::Eval => BnMode::Eval,
                    NetMode::Frozen(stats) => BnMode::Frozen(&stats[bn_index]),
                };
                let (y, stats) = bn.forward(tape, h, bound[*g], bound[*b], bn_mode)?;
                collected.extend(stats);
                h = y;
                bn_index += 1;
            }
            h = match s.activation {
                Activation::Relu => tape.relu(h),
                Activation::LeakyRelu => tape.leaky_relu(h, self.leaky_slope),
                Activation::Sigmoid => tape.sigmoid(h),
                Activation::Tanh => tape.tanh(h),
            };
        }
        Ok((h, collected))
    }
}

/// NIR `[B,1,H,W]` → normals `[B,3,H,W]` in `(−1, 1)`; any spatial size.
pub struct Generator<T: Scalar> {
    pub net: Net<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: &NetConfig, seed: u64) -> Self {
        Self {
            net: Net::new("g", config.generator_layers(), config.leaky_slope, seed ^ 0x4745_4E00),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &[Var], z: Var, mode: NetMode<'_>) -> Result<(Var, Vec<BatchStats>)> {
        let shape = tape.shape(z);
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Extent(format!("generator expects [B, 1, H, W], got {shape:?}")));
        }
        self.net.run(tape, bound, z, mode)
    }

    /// Evaluation-mode prediction without gradients.
    pub fn predict(&mut self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (out, _) = self.forward(&mut tape, &bound, zv, NetMode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Training-mode prediction (batch statistics) that leaves the running
    /// statistics untouched.
    pub fn predict_train(&mut self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let saved = self.net.running_stats();
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (out, _) = self.forward(&mut tape, &bound, zv, NetMode::Train)?;
        self.net.clear_running_stats();
        for (name, m, v) in saved {
            self.net.set_running_stats(&name, m, v)?;
        }
        Ok(tape.value(out).clone())
    }
}

/// Scores (NIR, normals) pairs of size 64×64; output `[B]` in `(0, 1)`.
pub struct Discriminator<T: Scalar> {
    pub net: Net<T>,
    pub conditioning: Conditioning,
}

pub const DISCRIMINATOR_SIZE: usize = 64;

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: &NetConfig, seed: u64) -> Self {
        Self {
            net: Net::new("d", config.discriminator_layers(), config.leaky_slope, seed ^ 0x4449_5300),
            conditioning: config.conditioning,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &[Var], z: Var, n: Var, mode: NetMode<'_>) -> Result<(Var, Vec<BatchStats>)> {
        let (zs, ns) = (tape.shape(z).to_vec(), tape.shape(n).to_vec());
        let ok = zs.len() == 4
            && ns.len() == 4
            && zs[0] == ns[0]
            && zs[1] == 1
            && ns[1] == 3
            && zs[2..] == [DISCRIMINATOR_SIZE, DISCRIMINATOR_SIZE]
            && ns[2..] == [DISCRIMINATOR_SIZE, DISCRIMINATOR_SIZE];
        if !ok {
            return Err(Error::Extent(format!(
                "discriminator expects [B,1,64,64] and [B,3,64,64], got {zs:?} and {ns:?}"
            )));
        }
        let input = match self.conditioning {
            Conditioning::Pair => tape.concat(&[z, n], 1)?,
            Conditioning::NormalsOnly => n,
        };
        let (maps, stats) = self.net.run(tape, bound, input, mode)?;
        Ok((tape.mean_per_sample(maps)?, stats))
    }
}
