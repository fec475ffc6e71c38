//! Accuracy metrics for predicted normal maps and the JSON report.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photometry::{NirImage, NormalMap};
use crate::synth::{Dataset, Split};
use crate::trainer::load_models;

pub const THRESHOLDS_DEG: [f64; 3] = [10.0, 15.0, 20.0];
pub const REPORT_VERSION: u32 = 1;

/// Per-pixel angle in degrees between two maps of equal extent.
pub fn angular_error_map(y: &NormalMap, g: &NormalMap) -> Result<Vec<f64>> {
    y.same_extent(g)?;
    Ok(y.normals()
        .iter()
        .zip(g.normals())
        .map(|(a, b)| {
            let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            d.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect())
}

/// Fraction of errors strictly below each threshold.
pub fn good_pixels(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Invalid("no valid pixels to evaluate".into()));
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / n)
        .collect())
}

/// Absolute componentwise differences of two encoded normal fields.
pub fn intensity_errors(y: &[[f64; 3]], g: &[[f64; 3]]) -> Result<Vec<f64>> {
    if y.len() != g.len() {
        return Err(Error::Extent(format!("{} vs {} pixels", y.len(), g.len())));
    }
    Ok(y.iter()
        .zip(g)
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
        .collect())
}

/// Smoothing filter of the detail map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Smoother {
    Identity,
    /// Separable Gaussian, radius `ceil(2σ)`, mirrored borders.
    Gaussian { sigma: f64 },
}

impl Default for Smoother {
    fn default() -> Self {
        Smoother::Gaussian { sigma: 3.0 }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (2.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

fn blur_plane(values: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * values[y * w + reflect(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * tmp[reflect(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Applies `f` to each component of a vector field.
pub fn smooth_field(field: &[[f64; 3]], w: usize, h: usize, f: Smoother) -> Vec<[f64; 3]> {
    match f {
        Smoother::Identity => field.to_vec(),
        Smoother::Gaussian { sigma } if sigma <= 0.0 => field.to_vec(),
        Smoother::Gaussian { sigma } => {
            let kernel = gaussian_kernel(sigma);
            let planes: Vec<Vec<f64>> = (0..3)
                .map(|c| {
                    let plane: Vec<f64> = field.iter().map(|v| v[c]).collect();
                    blur_plane(&plane, w, h, &kernel)
                })
                .collect();
            (0..w * h).map(|i| [planes[0][i], planes[1][i], planes[2][i]]).collect()
        }
    }
}

/// `f(Y) + G − f(G)`, renormalized per pixel.
pub fn detail_map(y: &NormalMap, g: &NormalMap, f: Smoother) -> Result<NormalMap> {
    y.same_extent(g)?;
    let (w, h) = (y.width(), y.height());
    let fy = smooth_field(y.normals(), w, h, f);
    let fg = smooth_field(g.normals(), w, h, f);
    let m: Vec<[f64; 3]> = (0..w * h)
        .map(|i| {
            let gi = g.normals()[i];
            [0, 1, 2].map(|c| fy[i][c] + gi[c] - fg[i][c])
        })
        .collect();
    Ok(NormalMap::from_vectors(w, h, &m)?.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixels: usize,
    pub mean_angular_deg: f64,
    pub median_angular_deg: f64,
    /// Fractions below 10°, 15° and 20°.
    pub good_pixels: [f64; 3],
    pub mean_intensity_error: f64,
    pub median_intensity_error: f64,
}

impl Metrics {
    pub fn from_errors(angular: &[f64], intensity: &[f64]) -> Result<Self> {
        let good = good_pixels(angular, &THRESHOLDS_DEG)?;
        if intensity.is_empty() {
            return Err(Error::Invalid("no valid pixels to evaluate".into()));
        }
        Ok(Self {
            pixels: angular.len(),
            mean_angular_deg: mean(angular),
            median_angular_deg: median(angular),
            good_pixels: [good[0], good[1], good[2]],
            mean_intensity_error: mean(intensity),
            median_intensity_error: median(intensity),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub aggregate: Metrics,
    pub per_image: Vec<Metrics>,
}

/// Published full-scale results, kept for orientation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub mean_angular_deg_all_views_l2_ang: f64,
    pub detail_map_mean_angular_deg_l2_ang: f64,
    pub note: String,
}

impl Default for ReferenceValues {
    fn default() -> Self {
        Self {
            mean_angular_deg_all_views_l2_ang: 15.56,
            detail_map_mean_angular_deg_l2_ang: 3.61,
            note: "published full-scale results on real captures; not reproducible with synthetic desk-scale data".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub split: String,
    pub images: usize,
    pub smoother: Smoother,
    /// Medians are taken over all pixels of all images.
    pub median_kind: String,
    pub thresholds_deg: [f64; 3],
    /// Predicted pixels whose vector was too short to normalize.
    pub degenerate_predictions: usize,
    pub raw: VariantMetrics,
    pub detail: VariantMetrics,
    pub reference: ReferenceValues,
}

/// One evaluation image: NIR input and the stored ground truth.
pub struct EvalItem {
    pub nir: NirImage,
    /// Encoded components as stored.
    pub truth: Vec<[f64; 3]>,
}

/// Evaluates `predict` (NIR → encoded normal components) on `items`.
///
/// Ground-truth pixels too short to normalize are excluded.
pub fn evaluate_items(
    items: impl IntoIterator<Item = Result<EvalItem>>,
    split: &str,
    smoother: Smoother,
    predict: &mut dyn FnMut(&NirImage) -> Result<Vec<[f64; 3]>>,
) -> Result<MetricsReport> {
    let mut all = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    let mut per_image = [Vec::new(), Vec::new()];
    let mut degenerate = 0;
    let mut images = 0;
    for item in items {
        let item = item?;
        let (w, h) = (item.nir.width, item.nir.height);
        let pred = predict(&item.nir)?;
        if pred.len() != w * h || item.truth.len() != w * h {
            return Err(Error::Extent(format!("prediction or truth does not cover the {w}x{h} image")));
        }
        let valid: Vec<bool> = item.truth.iter().map(|v| v.iter().map(|c| c * c).sum::<f64>() >= 1e-12).collect();
        let (truth, _) = NormalMap::from_vectors(w, h, &item.truth)?;
        let (g, bad) = NormalMap::from_vectors(w, h, &pred)?;
        degenerate += bad;
        let detail = detail_map(&truth, &g, smoother)?;
        let variants = [(&g, &pred), (&detail, &detail.normals().to_vec())];
        for (v, (map, comps)) in variants.into_iter().enumerate() {
            let ang = angular_error_map(&truth, map)?;
            let ang: Vec<f64> = ang.into_iter().zip(&valid).filter(|(_, &ok)| ok).map(|(e, _)| e).collect();
            let t: Vec<[f64; 3]> = item.truth.iter().zip(&valid).filter(|(_, &ok)| ok).map(|(c, _)| *c).collect();
            let p: Vec<[f64; 3]> = comps.iter().zip(&valid).filter(|(_, &ok)| ok).map(|(c, _)| *c).collect();
            let inten = intensity_errors(&t, &p)?;
            if ang.is_empty() {
                continue;
            }
            per_image[v].push(Metrics::from_errors(&ang, &inten)?);
            all[v].0.extend(ang);
            all[v].1.extend(inten);
        }
        images += 1;
    }
    if images == 0 {
        return Err(Error::Config(format!("split `{split}` has no images to evaluate")));
    }
    let [raw_errs, detail_errs] = all;
    let [raw_imgs, detail_imgs] = per_image;
    Ok(MetricsReport {
        schema_version: REPORT_VERSION,
        split: split.to_string(),
        images,
        smoother,
        median_kind: "per-pixel".into(),
        thresholds_deg: THRESHOLDS_DEG,
        degenerate_predictions: degenerate,
        raw: VariantMetrics {
            aggregate: Metrics::from_errors(&raw_errs.0, &raw_errs.1)?,
            per_image: raw_imgs,
        },
        detail: VariantMetrics {
            aggregate: Metrics::from_errors(&detail_errs.0, &detail_errs.1)?,
            per_image: detail_imgs,
        },
        reference: ReferenceValues::default(),
    })
}

/// Iterates over a dataset split as evaluation items.
pub fn dataset_items(dataset: &Dataset, split: Split) -> impl Iterator<Item = Result<EvalItem>> + '_ {
    (0..dataset.len(split)).map(move |i| {
        let s = dataset.load_sample(split, i)?;
        Ok(EvalItem {
            nir: s.nir,
            truth: s.normals.components,
        })
    })
}

/// Evaluates the generator of `ckpt` (eval-mode batch norm) on a split.
pub fn evaluate(ckpt: &Path, dataset_dir: &Path, split: Split, smoother: Smoother) -> Result<MetricsReport> {
    let (mut models, _, _) = load_models(ckpt, None)?;
    let dataset = Dataset::open(dataset_dir)?;
    let mut predict = |nir: &NirImage| -> Result<Vec<[f64; 3]>> {
        let out = models.generator.predict(&nir.to_tensor::<f32>())?;
        Ok(tensor_components(&out))
    };
    evaluate_items(dataset_items(&dataset, split), split.name(), smoother, &mut predict)
}

/// Components of a `[1, 3, H, W]` (or `[3, H, W]`) tensor as per-pixel vectors.
pub fn tensor_components<T: nirnormal_tensor::Scalar>(t: &nirnormal_tensor::Tensor<T>) -> Vec<[f64; 3]> {
    let plane = t.len() / 3;
    let d = t.data();
    (0..plane)
        .map(|i| [d[i].as_f64(), d[plane + i].as_f64(), d[2 * plane + i].as_f64()])
        .collect()
}


pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(path, e))
}
