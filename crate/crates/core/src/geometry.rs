//! Depth from normals and mesh export.
//!
//! Integration solves the least-squares problem
//! `min Σ (z[x+1] − z[x] − p̄)² + Σ (z[y+1] − z[y] − q̄)²` with `p̄`, `q̄` the
//! slopes averaged onto grid edges. Its normal equations are a Neumann
//! Poisson problem, diagonalized by the 2-D DCT (the Fourier basis of the
//! even-symmetric extension).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::formats;
use crate::photometry::NormalMap;
use crate::synth::{normals_from_heights, Heightfield};

pub const NZ_MIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Height in pixel units, row-major.
    pub z: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.z[y * self.width + x]
    }

    /// Subtracts the mean over valid pixels.
    fn anchor(&mut self) {
        let n = self.valid.iter().filter(|&&v| v).count();
        if n == 0 {
            return;
        }
        let m = self.z.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(z, _)| z).sum::<f64>() / n as f64;
        self.z.iter_mut().for_each(|z| *z -= m);
    }
}

/// Slopes `(p, q) = (−nx/nz, −ny/nz)` with `nz` clamped to at least 0.05.
pub fn normals_to_gradients(n: &NormalMap) -> (Vec<f64>, Vec<f64>) {
    n.normals()
        .iter()
        .map(|v| {
            let nz = v[2].max(NZ_MIN);
            (-v[0] / nz, -v[1] / nz)
        })
        .unzip()
}

struct Dct {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    twiddle: Vec<Complex64>,
}

impl Dct {
    fn new(n: usize, planner: &mut FftPlanner<f64>) -> Self {
        let twiddle = (0..n)
            .map(|k| Complex64::from_polar(1.0, -std::f64::consts::PI * k as f64 / (2 * n) as f64))
            .collect();
        Self {
            n,
            fwd: planner.plan_fft_forward(2 * n),
            inv: planner.plan_fft_inverse(2 * n),
            twiddle,
        }
    }

    /// `X[k] = Σ x[j] cos(πk(2j+1)/2N)`.
    fn forward(&self, x: &mut [f64], buf: &mut [Complex64]) {
        let n = self.n;
        for j in 0..n {
            buf[j] = Complex64::new(x[j], 0.0);
            buf[2 * n - 1 - j] = Complex64::new(x[j], 0.0);
        }
        self.fwd.process(buf);
        for k in 0..n {
            x[k] = (self.twiddle[k] * buf[k]).re / 2.0;
        }
    }

    /// Inverse of [`Dct::forward`].
    fn inverse(&self, x: &mut [f64], buf: &mut [Complex64]) {
        let n = self.n;
        for k in 0..2 * n {
            buf[k] = if k < n {
                let w = if k == 0 { 1.0 } else { 2.0 };
                self.twiddle[k].conj() * (w * x[k])
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        self.inv.process(buf);
        for j in 0..n {
            x[j] = buf[j].re / n as f64;
        }
    }
}

/// 2-D separable transform applied in place to a row-major `w × h` grid.
fn transform2(grid: &mut [f64], w: usize, h: usize, rows: &Dct, cols: &Dct, inverse: bool) {
    let mut buf = vec![Complex64::new(0.0, 0.0); 2 * w.max(h)];
    for row in grid.chunks_mut(w) {
        if inverse {
            rows.inverse(row, &mut buf[..2 * w]);
        } else {
            rows.forward(row, &mut buf[..2 * w]);
        }
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        if inverse {
            cols.inverse(&mut col, &mut buf[..2 * h]);
        } else {
            cols.forward(&mut col, &mut buf[..2 * h]);
        }
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
}

/// Least-squares depth whose forward differences best match the slopes.
/// Output has mean 0 over valid pixels.
pub fn integrate_gradients(w: usize, h: usize, p: &[f64], q: &[f64], valid: Vec<bool>) -> Result<DepthMap> {
    if p.len() != w * h || q.len() != w * h || valid.len() != w * h {
        return Err(Error::Extent(format!("gradient fields do not cover {w}x{h}")));
    }
    // edge slopes and their divergence (right-hand side of the normal equations)
    let mut b = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let e = (p[y * w + x] + p[y * w + x + 1]) / 2.0;
            b[y * w + x] -= e;
            b[y * w + x + 1] += e;
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let e = (q[y * w + x] + q[(y + 1) * w + x]) / 2.0;
            b[y * w + x] -= e;
            b[(y + 1) * w + x] += e;
        }
    }
    let mut planner = FftPlanner::new();
    let rows = Dct::new(w, &mut planner);
    let cols = Dct::new(h, &mut planner);
    transform2(&mut b, w, h, &rows, &cols, false);
    let lx: Vec<f64> = (0..w).map(|k| 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / w as f64).cos()).collect();
    let ly: Vec<f64> = (0..h).map(|k| 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / h as f64).cos()).collect();
    for ky in 0..h {
        for kx in 0..w {
            let lambda = lx[kx] + ly[ky];
            b[ky * w + kx] = if lambda > 0.0 { b[ky * w + kx] / lambda } else { 0.0 };
        }
    }
    transform2(&mut b, w, h, &rows, &cols, true);
    let mut depth = DepthMap {
        width: w,
        height: h,
        z: b,
        valid,
    };
    depth.anchor();
    Ok(depth)
}

/// Integrates a normal map to depth. With a mask, slopes outside it are
/// treated as zero and those pixels are marked invalid.
pub fn integrate_normals(n: &NormalMap, mask: Option<&[bool]>) -> Result<DepthMap> {
    let (w, h) = (n.width(), n.height());
    if let Some(m) = mask {
        if m.len() != w * h {
            return Err(Error::Extent(format!("mask has {} entries for {w}x{h}", m.len())));
        }
    }
    let valid: Vec<bool> = (0..w * h).map(|i| mask.is_none_or(|m| m[i])).collect();
    if !n.normals().iter().zip(&valid).any(|(v, &ok)| ok && v[2] >= NZ_MIN) {
        return Err(Error::Invalid("every pixel is at a grazing angle; nothing to integrate".into()));
    }
    let (mut p, mut q) = normals_to_gradients(n);
    for i in 0..w * h {
        if !valid[i] {
            p[i] = 0.0;
            q[i] = 0.0;
        }
    }
    integrate_gradients(w, h, &p, &q, valid)
}

/// Central-difference normals of a depth map.
pub fn depth_to_normals(depth: &DepthMap) -> NormalMap {
    normals_from_heights(&Heightfield {
        width: depth.width,
        height: depth.height,
        z: depth.z.clone(),
    })
}

/// Writes a triangulated height grid as OBJ: vertex `(x, y, scale·z)` per
/// valid pixel, its normal, and two triangles per fully valid pixel quad.
pub fn export_mesh(depth: &DepthMap, path: &Path, scale: f64) -> Result<()> {
    let (w, h) = (depth.width, depth.height);
    let scaled = DepthMap {
        z: depth.z.iter().map(|z| z * scale).collect(),
        ..depth.clone()
    };
    let normals = depth_to_normals(&scaled);
    let mut ids = vec![0usize; w * h];
    let mut out = String::new();
    let mut next = 1;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if depth.valid[i] {
                let _ = writeln!(out, "v {} {} {}", x, y, scaled.z[i]);
                ids[i] = next;
                next += 1;
            }
        }
    }
    for i in 0..w * h {
        if depth.valid[i] {
            let n = normals.normals()[i];
            let _ = writeln!(out, "vn {} {} {}", n[0], n[1], n[2]);
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let [v00, v01, v10, v11] = [y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1];
            if [v00, v01, v10, v11].iter().all(|&i| depth.valid[i]) {
                for tri in [[v00, v01, v10], [v01, v11, v10]] {
                    let [a, b, c] = tri.map(|i| ids[i]);
                    let _ = writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}");
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjMesh {
    pub vertices: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    /// Zero-based vertex indices.
    pub faces: Vec<[usize; 3]>,
}

impl ObjMesh {
    /// Unit normal of each face from its winding.
    pub fn face_normals(&self) -> Vec<[f64; 3]> {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                n.map(|c| c / len)
            })
            .collect()
    }
}

/// Reads `v`, `vn` and triangular `f` records; other records are ignored.
pub fn read_obj(path: &Path) -> Result<ObjMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mesh = ObjMesh::default();
    for (lineno, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", lineno + 1));
        let mut parts = line.split_whitespace();
        let triple = |parts: std::str::SplitWhitespace| -> Result<[f64; 3]> {
            let v: Vec<f64> = parts.map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad number"))?;
            v.try_into().map_err(|_| bad("expected three numbers"))
        };
        match parts.next() {
            Some("v") => mesh.vertices.push(triple(parts)?),
            Some("vn") => mesh.normals.push(triple(parts)?),
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| s.split('/').next().and_then(|i| i.parse::<usize>().ok()).filter(|&i| i >= 1))
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad("bad face index"))?;
                let face: [usize; 3] = idx.try_into().map_err(|_| bad("only triangles are supported"))?;
                mesh.faces.push(face.map(|i| i - 1));
            }
            _ => {}
        }
    }
    if mesh.faces.iter().flatten().any(|&i| i >= mesh.vertices.len()) {
        return Err(Error::format(path, "face refers to a missing vertex"));
    }
    Ok(mesh)
}

pub fn write_depth_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    let values: Vec<f32> = depth.z.iter().map(|&z| z as f32).collect();
    formats::write_pfm(path, depth.width, depth.height, &values)
}
