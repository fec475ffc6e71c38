//! Lambertian image formation, photometric stereo and normal-map codecs.

use nalgebra::{Matrix3, Vector3};
use nirnormal_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Tolerance on ‖n‖ for stored normals.
pub const UNIT_TOLERANCE: f64 = 1e-4;

/// Per-pixel unit normals on the camera-facing hemisphere, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    normals: Vec<[f64; 3]>,
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl NormalMap {
    pub fn new(width: usize, height: usize, normals: Vec<[f64; 3]>) -> Result<Self> {
        if normals.len() != width * height {
            return Err(Error::Extent(format!(
                "{width}x{height} normal map given {} normals",
                normals.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if (norm3(*n) - 1.0).abs() > UNIT_TOLERANCE || n[2] < 0.0 || !n.iter().all(|c| c.is_finite()) {
                return Err(Error::Invalid(format!(
                    "normal {n:?} at pixel {i} is not a unit vector with nz >= 0"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            normals,
        })
    }

    /// Every pixel facing the camera.
    pub fn flat(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            normals: vec![[0.0, 0.0, 1.0]; width * height],
        }
    }

    /// Builds a map from arbitrary vectors, normalizing each one.
    ///
    /// Vectors are clamped to `nz >= 0` first; near-zero vectors become
    /// `(0, 0, 1)` and are counted in the second return value.
    pub fn from_vectors(width: usize, height: usize, vectors: &[[f64; 3]]) -> Result<(Self, usize)> {
        if vectors.len() != width * height {
            return Err(Error::Extent(format!(
                "{width}x{height} normal map given {} vectors",
                vectors.len()
            )));
        }
        let mut degenerate = 0;
        let normals = vectors
            .iter()
            .map(|&[x, y, z]| {
                let v = [x, y, z.max(0.0)];
                let n = norm3(v);
                if n < 1e-6 || !n.is_finite() {
                    degenerate += 1;
                    [0.0, 0.0, 1.0]
                } else {
                    [v[0] / n, v[1] / n, v[2] / n]
                }
            })
            .collect();
        Ok((
            Self {
                width,
                height,
                normals,
            },
            degenerate,
        ))
    }

    /// Unit normals of the surface `z(x, y)` given its gradient field,
    /// `n ∝ (−p, −q, 1)`.
    pub fn from_gradients(width: usize, height: usize, p: &[f64], q: &[f64]) -> Result<Self> {
        if p.len() != width * height || q.len() != width * height {
            return Err(Error::Extent("gradient fields do not match extent".into()));
        }
        let normals = p
            .iter()
            .zip(q)
            .map(|(&p, &q)| {
                let n = (p * p + q * q + 1.0).sqrt();
                [-p / n, -q / n, 1.0 / n]
            })
            .collect();
        Ok(Self {
            width,
            height,
            normals,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn normals(&self) -> &[[f64; 3]] {
        &self.normals
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.normals[y * self.width + x]
    }

    pub fn same_extent(&self, other: &NormalMap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Extent(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// How the values of a [`NirImage`] are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Radiance {
    /// Radiance in `[0, 1]`.
    Raw,
    /// `2v − 1`, in `[−1, 1]`.
    Normalized,
}

/// Single-channel NIR image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NirImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub radiance: Radiance,
}

impl NirImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>, radiance: Radiance) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Extent(format!(
                "{width}x{height} image given {} values",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            radiance,
        })
    }

    pub fn normalized(&self) -> NirImage {
        match self.radiance {
            Radiance::Normalized => self.clone(),
            Radiance::Raw => NirImage {
                values: self.values.iter().map(|v| 2.0 * v - 1.0).collect(),
                radiance: Radiance::Normalized,
                ..*self
            },
        }
    }

    pub fn raw(&self) -> NirImage {
        match self.radiance {
            Radiance::Raw => self.clone(),
            Radiance::Normalized => NirImage {
                values: self.values.iter().map(|v| (v + 1.0) / 2.0).collect(),
                radiance: Radiance::Raw,
                ..*self
            },
        }
    }

    /// `[1, 1, H, W]` tensor of normalized values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.normalized();
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| T::of(n.values[i]))
    }
}

/// Unit light direction on the upper hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightDirection([f64; 3]);

impl LightDirection {
    /// Accepts a vector within 1e-6 of unit length with positive z.
    pub fn new(l: [f64; 3]) -> Result<Self> {
        if (norm3(l) - 1.0).abs() > 1e-6 || l[2] <= 0.0 {
            return Err(Error::Invalid(format!(
                "light {l:?} is not a unit vector on the upper hemisphere"
            )));
        }
        Ok(Self(l))
    }

    /// Direction at `polar` degrees from the optical axis and `azimuth` degrees
    /// around it.
    pub fn from_angles(polar_deg: f64, azimuth_deg: f64) -> Result<Self> {
        let (t, p) = (polar_deg.to_radians(), azimuth_deg.to_radians());
        Self::new([t.sin() * p.cos(), t.sin() * p.sin(), t.cos()])
    }

    pub fn vector(&self) -> [f64; 3] {
        self.0
    }
}

/// Twelve lights: two rings at 30° and 55° from the optical axis, six
/// equally spaced azimuths each, the outer ring rotated by 30°.
pub fn standard_lights() -> Vec<LightDirection> {
    light_rings(&[30.0, 55.0], 6, 30.0)
}

/// Rings of equally spaced lights; ring `k` is rotated by `k * ring_offset_deg`.
pub fn light_rings(polar_deg: &[f64], per_ring: usize, ring_offset_deg: f64) -> Vec<LightDirection> {
    polar_deg
        .iter()
        .enumerate()
        .flat_map(|(k, &polar)| {
            (0..per_ring).map(move |j| {
                let az = 360.0 * j as f64 / per_ring as f64 + k as f64 * ring_offset_deg;
                LightDirection::from_angles(polar, az).expect("ring polar angles below 90°")
            })
        })
        .collect()
}

/// Raw radiance `albedo · max(0, n·l)` per pixel.
pub fn render_lambertian_raw(normals: &NormalMap, albedo: &[f64], light: LightDirection) -> Result<NirImage> {
    if albedo.len() != normals.normals.len() {
        return Err(Error::Extent(format!(
            "albedo has {} values for a {}x{} normal map",
            albedo.len(),
            normals.width,
            normals.height
        )));
    }
    let l = light.vector();
    let values = normals
        .normals
        .iter()
        .zip(albedo)
        .map(|(&n, &a)| a * dot3(n, l).max(0.0))
        .collect();
    NirImage::new(normals.width, normals.height, values, Radiance::Raw)
}

/// Lambertian rendering mapped to `[−1, 1]` by `v ↦ 2v − 1`.
pub fn render_lambertian(normals: &NormalMap, albedo: &[f64], light: LightDirection) -> Result<NirImage> {
    Ok(render_lambertian_raw(normals, albedo, light)?.normalized())
}

/// Normals, albedo and validity recovered by photometric stereo.
#[derive(Debug, Clone)]
pub struct StereoResult {
    pub normals: NormalMap,
    pub albedo: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Photometric stereo from calibrated light directions.
pub fn photometric_stereo(images: &[NirImage], lights: &[LightDirection]) -> Result<StereoResult> {
    let rows: Vec<[f64; 3]> = lights.iter().map(|l| l.vector()).collect();
    photometric_stereo_rows(images, &rows)
}

fn solve_rows(rows: &[[f64; 3]], intensities: &[f64]) -> Option<Vector3<f64>> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (r, &i) in rows.iter().zip(intensities) {
        let v = Vector3::from(*r);
        ata += v * v.transpose();
        atb += v * i;
    }
    ata.cholesky().map(|c| c.solve(&atb))
}

fn rank(rows: &[[f64; 3]]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let m = nalgebra::DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    m.rank(1e-9)
}

/// Per-pixel least squares of `I = L · (ρ n)` for arbitrary light rows.
///
/// With more than three lights, zero-intensity rows are treated as shadowed
/// and dropped; a pixel keeping fewer than three rows is invalid. With exactly
/// three lights every row is used. Invalid pixels report `(0, 0, 1)` and
/// albedo 0.
pub fn photometric_stereo_rows(images: &[NirImage], rows: &[[f64; 3]]) -> Result<StereoResult> {
    if images.len() != rows.len() {
        return Err(Error::Invalid(format!(
            "{} images for {} lights",
            images.len(),
            rows.len()
        )));
    }
    if images.len() < 3 {
        return Err(Error::Invalid("photometric stereo needs at least 3 images".into()));
    }
    if rank(rows) < 3 {
        return Err(Error::Invalid("light matrix is rank deficient".into()));
    }
    let (w, h) = (images[0].width, images[0].height);
    if images.iter().any(|im| im.width != w || im.height != h) {
        return Err(Error::Extent("images are not pixel-aligned".into()));
    }
    let raw: Vec<NirImage> = images.iter().map(NirImage::raw).collect();
    let drop_shadowed = rows.len() > 3;

    let mut normals = Vec::with_capacity(w * h);
    let mut albedo = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    let mut sel_rows = Vec::with_capacity(rows.len());
    let mut sel_vals = Vec::with_capacity(rows.len());
    for px in 0..w * h {
        sel_rows.clear();
        sel_vals.clear();
        for (im, r) in raw.iter().zip(rows) {
            let v = im.values[px];
            if !drop_shadowed || v > 0.0 {
                sel_rows.push(*r);
                sel_vals.push(v);
            }
        }
        let all_dark = sel_vals.iter().all(|&v| v <= 0.0);
        let solution = if all_dark || sel_rows.len() < 3 || rank(&sel_rows) < 3 {
            None
        } else {
            solve_rows(&sel_rows, &sel_vals)
        };
        let recovered = solution.and_then(|b| {
            let b = Vector3::new(b.x, b.y, b.z.max(0.0));
            let rho = b.norm();
            (rho > 1e-12).then(|| (rho, [b.x / rho, b.y / rho, b.z / rho]))
        });
        match recovered {
            Some((rho, n)) => {
                normals.push(n);
                albedo.push(rho);
                valid.push(true);
            }
            None => {
                normals.push([0.0, 0.0, 1.0]);
                albedo.push(0.0);
                valid.push(false);
            }
        }
    }
    Ok(StereoResult {
        normals: NormalMap {
            width: w,
            height: h,
            normals,
        },
        albedo,
        valid,
    })
}

/// `[3, H, W]` tensor of normal components.
pub fn encode_normals<T: Scalar>(n: &NormalMap) -> Tensor<T> {
    let hw = n.width * n.height;
    Tensor::from_fn(&[3, n.height, n.width], |i| T::of(n.normals[i % hw][i / hw]))
}

/// Inverse of [`encode_normals`] for `[3, H, W]` or `[1, 3, H, W]` input.
///
/// Returns the map and the number of near-zero vectors replaced by `(0, 0, 1)`.
pub fn decode_normals<T: Scalar>(t: &Tensor<T>) -> Result<(NormalMap, usize)> {
    let (h, w) = match t.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => return Err(Error::Invalid(format!("cannot decode normals from shape {s:?}"))),
    };
    let hw = h * w;
    let d = t.data();
    let vectors: Vec<[f64; 3]> = (0..hw)
        .map(|i| [d[i].as_f64(), d[hw + i].as_f64(), d[2 * hw + i].as_f64()])
        .collect();
    NormalMap::from_vectors(w, h, &vectors)
}

/// Angle between two unit vectors in degrees.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot3(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}
