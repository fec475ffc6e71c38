//! Synthetic training corpus: random fine-detail heightfields, their normals,
//! rendered NIR patches, and the on-disk dataset layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! train/000000_nir.png   raw radiance, 16-bit gray (or _nir.pfm, normalized)
//! train/000000_nrm.png   normals, 16-bit RGB
//! train/000000_alb.png   albedo, 16-bit gray
//! val/...
//! test/...
//! ```
//!
//! Per-sample lights and surface parameters are a pure function of the
//! manifest, so they are recomputed rather than stored.

use std::fs;
use std::path::{Path, PathBuf};

use nirnormal_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, dequantize_unit, quantize_unit, EncodedNormals};
use crate::photometry::{light_rings, render_lambertian_raw, LightDirection, NirImage, NormalMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceKind {
    GaussianBumps,
    SinusoidWeave,
    FractalNoise,
    Composite,
    /// A single plane; `amplitude` is its slope.
    TiltedPlane,
}

/// Parameters of one random surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub kind: SurfaceKind,
    /// Characteristic slope (height units per pixel).
    pub amplitude: f64,
    /// Characteristic feature size in pixels.
    pub feature_scale: f64,
    pub seed: u64,
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Invalid(format!("amplitude must be > 0, got {}", self.amplitude)));
        }
        if !(self.feature_scale >= 2.0) || !self.feature_scale.is_finite() {
            return Err(Error::Invalid(format!(
                "feature scale must be >= 2 pixels, got {}",
                self.feature_scale
            )));
        }
        Ok(())
    }
}

/// Heights sampled on the pixel grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub width: usize,
    pub height: usize,
    pub z: Vec<f64>,
}

impl Heightfield {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let z = (0..width * height)
            .map(|i| f((i % width) as f64, (i / width) as f64))
            .collect();
        Self { width, height, z }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.z[y * self.width + x]
    }
}

/// Central-difference gradients `(∂z/∂x, ∂z/∂y)`, one-sided on the border.
pub fn height_gradients(hf: &Heightfield) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (hf.width, hf.height);
    let mut p = vec![0.0; w * h];
    let mut q = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            if x1 > x0 {
                p[y * w + x] = (hf.at(x1, y) - hf.at(x0, y)) / (x1 - x0) as f64;
            }
            if y1 > y0 {
                q[y * w + x] = (hf.at(x, y1) - hf.at(x, y0)) / (y1 - y0) as f64;
            }
        }
    }
    (p, q)
}

/// Unit normals `∝ (−∂z/∂x, −∂z/∂y, 1)` with central differences.
pub fn normals_from_heights(hf: &Heightfield) -> NormalMap {
    let (p, q) = height_gradients(hf);
    NormalMap::from_gradients(hf.width, hf.height, &p, &q).expect("gradient extents match")
}

fn smootherstep(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lattice_value(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    // splitmix64 over the lattice coordinates
    let mut z = seed
        ^ octave.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (ix as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (iy as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(seed: u64, octave: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (smootherstep(x - fx), smootherstep(y - fy));
    let (ix, iy) = (fx as i64, fy as i64);
    let v = |dx: i64, dy: i64| lattice_value(seed, octave, ix + dx, iy + dy);
    let top = v(0, 0) + (v(1, 0) - v(0, 0)) * tx;
    let bottom = v(0, 1) + (v(1, 1) - v(0, 1)) * tx;
    top + (bottom - top) * ty
}

type HeightFn = Box<dyn Fn(f64, f64) -> f64>;

fn bumps(rng: &mut ChaCha8Rng, w: usize, h: usize, amp: f64, scale: f64) -> HeightFn {
    let count = ((w * h) as f64 / (2.0 * scale * scale)).round().max(1.0) as usize;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let cx = rng.random_range(-2.0 * scale..w as f64 + 2.0 * scale);
            let cy = rng.random_range(-2.0 * scale..h as f64 + 2.0 * scale);
            let sigma = scale * rng.random_range(0.6..1.4);
            // peak slope of a Gaussian bump is height * e^{-1/2} / sigma
            let height = amp * sigma * 1.65 * rng.random_range(-1.0..1.0);
            (cx, cy, sigma, height)
        })
        .collect();
    Box::new(move |x, y| {
        bumps
            .iter()
            .map(|&(cx, cy, s, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
            .sum()
    })
}

fn weave(rng: &mut ChaCha8Rng, amp: f64, scale: f64) -> HeightFn {
    let terms: Vec<(f64, f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let k = 1.0 / (scale * rng.random_range(0.8..2.0));
            let phase_u = rng.random_range(0.0..std::f64::consts::TAU);
            let phase_v = rng.random_range(0.0..std::f64::consts::TAU);
            (theta, k, phase_u, phase_v, amp / k * 0.5)
        })
        .collect();
    Box::new(move |x, y| {
        terms
            .iter()
            .map(|&(th, k, pu, pv, a)| {
                let u = x * th.cos() + y * th.sin();
                let v = -x * th.sin() + y * th.cos();
                a * (k * u + pu).sin() * (0.5 * k * v + pv).cos()
            })
            .sum()
    })
}

fn fractal(rng: &mut ChaCha8Rng, amp: f64, scale: f64) -> HeightFn {
    let seed = rng.next_u64();
    let cells: Vec<f64> = [4.0, 2.0, 1.0].iter().map(|m| m * scale).collect();
    Box::new(move |x, y| {
        cells
            .iter()
            .enumerate()
            .map(|(o, &c)| 0.45 * amp * c * value_noise(seed, o as u64, x / c, y / c))
            .sum()
    })
}

fn height_function(spec: &SurfaceSpec, width: usize, height: usize) -> Result<HeightFn> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (amp, scale) = (spec.amplitude, spec.feature_scale);
    Ok(match spec.kind {
        SurfaceKind::GaussianBumps => bumps(&mut rng, width, height, amp, scale),
        SurfaceKind::SinusoidWeave => weave(&mut rng, amp, scale),
        SurfaceKind::FractalNoise => fractal(&mut rng, amp, scale),
        SurfaceKind::Composite => {
            let part = amp / 3f64.sqrt();
            let parts = [
                bumps(&mut rng, width, height, part, scale),
                weave(&mut rng, part, scale),
                fractal(&mut rng, part, scale),
            ];
            Box::new(move |x, y| parts.iter().map(|f| f(x, y)).sum())
        }
        SurfaceKind::TiltedPlane => {
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            Box::new(move |x, y| amp * (x * phi.cos() + y * phi.sin()))
        }
    })
}

/// Samples the heightfield described by `spec` on a `width x height` grid.
pub fn generate_heightfield(spec: &SurfaceSpec, width: usize, height: usize) -> Result<Heightfield> {
    let f = height_function(spec, width, height)?;
    Ok(Heightfield::from_fn(width, height, f))
}

/// Heightfield and its central-difference normals. Same spec, same output.
pub fn generate_surface(spec: &SurfaceSpec, width: usize, height: usize) -> Result<(Heightfield, NormalMap)> {
    let f = height_function(spec, width, height)?;
    // one extra sample beyond each border so every pixel gets central differences
    let padded = Heightfield::from_fn(width + 2, height + 2, |x, y| f(x - 1.0, y - 1.0));
    let mut p = Vec::with_capacity(width * height);
    let mut q = Vec::with_capacity(width * height);
    let mut z = Vec::with_capacity(width * height);
    for y in 1..=height {
        for x in 1..=width {
            p.push((padded.at(x + 1, y) - padded.at(x - 1, y)) / 2.0);
            q.push((padded.at(x, y + 1) - padded.at(x, y - 1)) / 2.0);
            z.push(padded.at(x, y));
        }
    }
    let normals = NormalMap::from_gradients(width, height, &p, &q)?;
    Ok((Heightfield { width, height, z }, normals))
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightModel {
    pub polar_deg: Vec<f64>,
    pub per_ring: usize,
    pub ring_offset_deg: f64,
}

impl Default for LightModel {
    fn default() -> Self {
        Self {
            polar_deg: vec![30.0, 55.0],
            per_ring: 6,
            ring_offset_deg: 30.0,
        }
    }
}

impl LightModel {
    pub fn lights(&self) -> Vec<LightDirection> {
        light_rings(&self.polar_deg, self.per_ring, self.ring_offset_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceSampling {
    pub kinds: Vec<SurfaceKind>,
    /// Uniform range `[lo, hi]`.
    pub amplitude: [f64; 2],
    pub feature_scale: [f64; 2],
}

impl Default for SurfaceSampling {
    fn default() -> Self {
        Self {
            kinds: vec![
                SurfaceKind::GaussianBumps,
                SurfaceKind::SinusoidWeave,
                SurfaceKind::FractalNoise,
                SurfaceKind::Composite,
            ],
            amplitude: [0.2, 0.5],
            feature_scale: [4.0, 10.0],
        }
    }
}

/// Piecewise-constant albedo: up to `max_regions` Voronoi cells, each with a
/// uniform value in `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlbedoModel {
    pub min: f64,
    pub max: f64,
    pub max_regions: usize,
}

impl Default for AlbedoModel {
    fn default() -> Self {
        Self {
            min: 0.5,
            max: 1.0,
            max_regions: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NirFormat {
    /// Raw radiance, 16-bit grayscale PNG.
    #[default]
    Png16,
    /// Normalized values, PFM.
    Pfm,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub patch_size: usize,
    pub counts: SplitCounts,
    pub lights: LightModel,
    pub seed: u64,
    pub surfaces: SurfaceSampling,
    pub albedo: AlbedoModel,
    /// Std. dev. of additive Gaussian noise on raw radiance.
    pub noise_sigma: f64,
    pub nir_format: NirFormat,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            patch_size: 64,
            counts: SplitCounts::default(),
            lights: LightModel::default(),
            seed: 0,
            surfaces: SurfaceSampling::default(),
            albedo: AlbedoModel::default(),
            noise_sigma: 0.0,
            nir_format: NirFormat::Png16,
        }
    }
}

/// Everything a generated sample is made from.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub surface: SurfaceSpec,
    pub light_index: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.format_version != MANIFEST_VERSION {
            return bad(format!("unsupported manifest version {}", self.format_version));
        }
        if self.patch_size < 4 {
            return bad(format!("patch_size must be >= 4, got {}", self.patch_size));
        }
        if self.lights.polar_deg.is_empty() || self.lights.per_ring == 0 {
            return bad("light model has no lights".into());
        }
        if self.lights.polar_deg.iter().any(|p| !(0.0..90.0).contains(p)) {
            return bad("light polar angles must lie in [0, 90)".into());
        }
        if self.surfaces.kinds.is_empty() {
            return bad("no surface kinds".into());
        }
        let [a0, a1] = self.surfaces.amplitude;
        let [s0, s1] = self.surfaces.feature_scale;
        if !(a0 > 0.0 && a1 >= a0) || !(s0 >= 2.0 && s1 >= s0) {
            return bad("surface amplitude/feature_scale ranges are invalid".into());
        }
        let al = &self.albedo;
        if !(0.0 <= al.min && al.min <= al.max && al.max <= 1.0) || al.max_regions == 0 {
            return bad("albedo range must satisfy 0 <= min <= max <= 1 with >= 1 region".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        Ok(())
    }

    pub fn light_set(&self) -> Vec<LightDirection> {
        self.lights.lights()
    }

    /// Splits use disjoint seed ranges: the split id occupies the top byte.
    pub fn sample_seed(&self, split: Split, index: usize) -> u64 {
        self.seed ^ (split.id() << 56) ^ index as u64
    }

    /// Within every aligned block of `L` samples each light appears once.
    pub fn light_index(&self, split: Split, index: usize) -> usize {
        let count = self.lights.polar_deg.len() * self.lights.per_ring;
        let block = (index / count) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (split.id() << 56) ^ 0x4C49_4748_5400_0000 ^ block);
        let mut perm: Vec<usize> = (0..count).collect();
        perm.shuffle(&mut rng);
        perm[index % count]
    }

    pub fn plan(&self, split: Split, index: usize) -> SamplePlan {
        let seed = self.sample_seed(split, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &self.surfaces;
        let kind = s.kinds[rng.random_range(0..s.kinds.len())];
        let amplitude = uniform(&mut rng, s.amplitude);
        let feature_scale = uniform(&mut rng, s.feature_scale);
        SamplePlan {
            surface: SurfaceSpec {
                kind,
                amplitude,
                feature_scale,
                seed: rng.next_u64(),
            },
            light_index: self.light_index(split, index),
            seed,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Voronoi albedo, already quantized to the 16-bit storage grid.
pub fn generate_albedo(model: &AlbedoModel, size: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA1BE_D000_0000_0000);
    let regions = rng.random_range(1..=model.max_regions);
    let sites: Vec<(f64, f64, f64)> = (0..regions)
        .map(|_| {
            let x = rng.random_range(0.0..size as f64);
            let y = rng.random_range(0.0..size as f64);
            let v = uniform(&mut rng, [model.min, model.max]);
            (x, y, dequantize_unit(quantize_unit(v)))
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            sites
                .iter()
                .map(|&(sx, sy, v)| ((x - sx).powi(2) + (y - sy).powi(2), v))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map_or(1.0, |(_, v)| v)
        })
        .collect()
}

/// One generated sample, values exactly as they will be read back.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub heights: Heightfield,
    /// Normals after the 16-bit round trip.
    pub normals: EncodedNormals,
    pub albedo: Vec<f64>,
    pub light: LightDirection,
    pub light_index: usize,
    /// Raw radiance before storage quantization.
    pub nir: NirImage,
}

pub fn generate_sample(manifest: &DatasetManifest, split: Split, index: usize) -> Result<GeneratedSample> {
    let plan = manifest.plan(split, index);
    let size = manifest.patch_size;
    let (heights, exact) = generate_surface(&plan.surface, size, size)?;
    let components = exact
        .normals()
        .iter()
        .map(|n| n.map(|c| formats::dequantize_component(formats::quantize_component(c))))
        .collect();
    let normals = EncodedNormals {
        width: size,
        height: size,
        components,
    };
    let albedo = generate_albedo(&manifest.albedo, size, plan.seed);
    let light = manifest.light_set()[plan.light_index];
    let mut nir = render_lambertian_raw(&normals.to_normal_map()?, &albedo, light)?;
    if manifest.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, manifest.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x0015_E000_0000_0000);
        for v in &mut nir.values {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(GeneratedSample {
        heights,
        normals,
        albedo,
        light,
        light_index: plan.light_index,
        nir,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sample_stem(index: usize) -> String {
    format!("{index:06}")
}

/// Files written for one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub split: Split,
    pub samples: usize,
    pub files: usize,
    pub per_light: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildSummary {
    pub out_dir: PathBuf,
    pub counts: SplitCounts,
    pub splits: Vec<SplitSummary>,
}

fn write_sample(manifest: &DatasetManifest, dir: &Path, index: usize, sample: &GeneratedSample) -> Result<usize> {
    let size = manifest.patch_size;
    let stem = sample_stem(index);
    match manifest.nir_format {
        NirFormat::Png16 => formats::write_unit_png(&dir.join(format!("{stem}_nir.png")), size, size, &sample.nir.values)?,
        NirFormat::Pfm => {
            let values: Vec<f32> = sample.nir.normalized().values.iter().map(|&v| v as f32).collect();
            formats::write_pfm(&dir.join(format!("{stem}_nir.pfm")), size, size, &values)?
        }
    }
    let nrm = dir.join(format!("{stem}_nrm.png"));
    formats::write_normal_components_png(&nrm, &sample.normals)?;
    formats::write_unit_png(&dir.join(format!("{stem}_alb.png")), size, size, &sample.albedo)?;
    Ok(3)
}

/// Generates every split of `manifest` under `out_dir` and writes the manifest.
///
/// Existing sample files are overwritten; a failure mid-way reports the last
/// index that was fully written.
pub fn build_dataset(manifest: &DatasetManifest, out_dir: &Path) -> Result<BuildSummary> {
    manifest.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = serde_json::to_string_pretty(manifest)? + "\n";
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let n_lights = manifest.light_set().len();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let dir = out_dir.join(split.name());
        let mut summary = SplitSummary {
            split,
            samples: 0,
            files: 0,
            per_light: vec![0; n_lights],
        };
        let partial = |completed: usize, source: Error| Error::PartialOutput {
            split: split.name().into(),
            last_completed: completed.checked_sub(1),
            completed,
            source: Box::new(source),
        };
        fs::create_dir_all(&dir).map_err(|e| partial(0, Error::io(&dir, e)))?;
        for index in 0..manifest.counts.get(split) {
            let written = generate_sample(manifest, split, index)
                .and_then(|s| {
                    let files = write_sample(manifest, &dir, index, &s)?;
                    Ok((s.light_index, files))
                })
                .map_err(|e| partial(index, e))?;
            summary.per_light[written.0] += 1;
            summary.files += written.1;
            summary.samples += 1;
        }
        splits.push(summary);
    }
    Ok(BuildSummary {
        out_dir: out_dir.to_path_buf(),
        counts: manifest.counts,
        splits,
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

/// File locations of one (NIR, normal) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePaths {
    pub nir: PathBuf,
    pub normals: PathBuf,
}

/// A sample as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub nir: NirImage,
    pub normals: EncodedNormals,
}

/// A dataset directory: either one written by [`build_dataset`], or any
/// directory with `train/`, `val/`, `test/` holding `<stem>_nir.{png,pfm}` and
/// `<stem>_nrm.png` pairs.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Option<DatasetManifest>,
    samples: [Vec<SamplePaths>; 3],
}

fn split_slot(split: Split) -> usize {
    (split.id() - 1) as usize
}

fn scan_split(dir: &Path) -> Result<Vec<SamplePaths>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_nrm.png") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    stems
        .into_iter()
        .map(|stem| {
            let normals = dir.join(format!("{stem}_nrm.png"));
            let nir = ["png", "pfm"]
                .iter()
                .map(|ext| dir.join(format!("{stem}_nir.{ext}")))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::format(&normals, "no matching _nir.png or _nir.pfm"))?;
            Ok(SamplePaths { nir, normals })
        })
        .collect()
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
        }
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = if manifest_path.is_file() {
            Some(read_manifest(&manifest_path)?)
        } else {
            None
        };
        let samples = match &manifest {
            Some(m) => Split::ALL.map(|split| {
                let dir = root.join(split.name());
                let ext = match m.nir_format {
                    NirFormat::Png16 => "png",
                    NirFormat::Pfm => "pfm",
                };
                (0..m.counts.get(split))
                    .map(|i| SamplePaths {
                        nir: dir.join(format!("{}_nir.{ext}", sample_stem(i))),
                        normals: dir.join(format!("{}_nrm.png", sample_stem(i))),
                    })
                    .collect()
            }),
            None => [
                scan_split(&root.join("train"))?,
                scan_split(&root.join("val"))?,
                scan_split(&root.join("test"))?,
            ],
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Option<&DatasetManifest> {
        self.manifest.as_ref()
    }

    pub fn len(&self, split: Split) -> usize {
        self.samples[split_slot(split)].len()
    }

    pub fn paths(&self, split: Split, index: usize) -> Result<&SamplePaths> {
        let all = &self.samples[split_slot(split)];
        all.get(index).ok_or_else(|| {
            Error::Invalid(format!(
                "index {index} out of range for split `{}` with {} samples",
                split.name(),
                all.len()
            ))
        })
    }

    /// Light index of a generated sample; `None` for external datasets.
    pub fn light_index(&self, split: Split, index: usize) -> Option<usize> {
        self.manifest.as_ref().map(|m| m.light_index(split, index))
    }

    pub fn light_count(&self) -> Option<usize> {
        self.manifest.as_ref().map(|m| m.light_set().len())
    }

    pub fn load_sample(&self, split: Split, index: usize) -> Result<StoredSample> {
        let paths = self.paths(split, index)?;
        let nir = formats::read_nir(&paths.nir)?;
        let normals = formats::read_normal_png(&paths.normals)?;
        if (nir.width, nir.height) != (normals.width, normals.height) {
            return Err(Error::format(
                &paths.nir,
                format!(
                    "NIR is {}x{} but normals are {}x{}",
                    nir.width, nir.height, normals.width, normals.height
                ),
            ));
        }
        Ok(StoredSample { nir, normals })
    }

    /// `([B,1,H,W]` normalized NIR, `[B,3,H,W]` stored normal components`)`.
    /// All indices are checked before anything is read.
    pub fn load_batch<T: Scalar>(&self, split: Split, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        for &i in indices {
            self.paths(split, i)?;
        }
        let mut nirs = Vec::with_capacity(indices.len());
        let mut normals = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.load_sample(split, i)?;
            nirs.push(s.nir.to_tensor::<T>());
            normals.push(encoded_to_tensor::<T>(&s.normals));
        }
        let nir_refs: Vec<&Tensor<T>> = nirs.iter().collect();
        let nrm_refs: Vec<&Tensor<T>> = normals.iter().collect();
        Ok((Tensor::stack_batch(&nir_refs)?, Tensor::stack_batch(&nrm_refs)?))
    }

    /// Whole split in memory.
    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<SplitData<T>> {
        let indices: Vec<usize> = (0..self.len(split)).collect();
        if indices.is_empty() {
            return Err(Error::Config(format!(
                "split `{}` of {} is empty",
                split.name(),
                self.root.display()
            )));
        }
        let (nir, normals) = self.load_batch(split, &indices)?;
        let lights = self
            .manifest
            .as_ref()
            .map(|m| indices.iter().map(|&i| m.light_index(split, i)).collect());
        Ok(SplitData { nir, normals, lights })
    }
}

/// `[1, 3, H, W]` tensor of stored components.
pub fn encoded_to_tensor<T: Scalar>(n: &EncodedNormals) -> Tensor<T> {
    let plane = n.width * n.height;
    Tensor::from_fn(&[1, 3, n.height, n.width], |i| T::of(n.components[i % plane][i / plane]))
}

/// A split held in memory.
#[derive(Debug, Clone)]
pub struct SplitData<T: Scalar> {
    /// `[N, 1, H, W]`, normalized.
    pub nir: Tensor<T>,
    /// `[N, 3, H, W]`.
    pub normals: Tensor<T>,
    /// Light index per sample, when known.
    pub lights: Option<Vec<usize>>,
}

impl<T: Scalar> SplitData<T> {
    pub fn len(&self) -> usize {
        self.nir.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.nir.select_batch(indices)?, self.normals.select_batch(indices)?))
    }
}
