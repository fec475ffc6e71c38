//! im2col convolution kernels.

use crate::Scalar;

/// Output extent of a convolution along one axis, `None` if the kernel does
/// not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Largest column buffer (in elements) before the output rows are tiled.
const COLS_BUDGET: usize = 1 << 22;

/// Range of output columns `ow` whose input column `ow*stride + kj - pad`
/// falls inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds output rows `rows` of one image `[c_in, h, w]` into
/// `[c_in*kh*kw, rows.len()*wo]`.
fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], rows: std::ops::Range<usize>, cols: &mut [T]) {
    let p = rows.len() * g.wo;
    for c in 0..g.c_in {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for (r, oh) in rows.clone().enumerate() {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[r * g.wo..(r + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize || lo >= hi {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (out, v) in seg[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *out = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image gradient.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], rows: std::ops::Range<usize>, image: &mut [T]) {
    let p = rows.len() * g.wo;
    for c in 0..g.c_in {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                for (r, oh) in rows.clone().enumerate() {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let seg = &src[r * g.wo + lo..r * g.wo + hi];
                    let start = lo * g.stride + kj - g.pad;
                    for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(seg) {
                        *d = *d + *v;
                    }
                }
            }
        }
    }
}

/// Splits the output rows into tiles whose column buffer fits the budget.
fn row_tiles(g: &ConvGeom, budget: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let per_row = (g.patch_len() * g.wo).max(1);
    let step = (budget / per_row).clamp(1, g.ho.max(1));
    let ho = g.ho;
    (0..ho).step_by(step).map(move |r| r..(r + step).min(ho))
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T]) -> Vec<T> {
    forward_tiled(g, input, kernel, COLS_BUDGET)
}

fn forward_tiled<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], budget: usize) -> Vec<T> {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let mut out = vec![T::zero(); g.batch * g.c_out * p];
    let mut cols = Vec::new();
    let in_stride = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        let image = &input[b * in_stride..(b + 1) * in_stride];
        let dst = &mut out[b * g.c_out * p..(b + 1) * g.c_out * p];
        for rows in row_tiles(g, budget) {
            let tp = rows.len() * g.wo;
            cols.resize(k * tp, T::zero());
            im2col(g, image, rows.clone(), &mut cols);
            T::gemm(
                g.c_out,
                k,
                tp,
                T::one(),
                kernel,
                (k, 1),
                &cols,
                (tp, 1),
                T::zero(),
                &mut dst[rows.start * g.wo..],
                (p, 1),
            );
        }
    }
    out
}

/// Gradients w.r.t. input and kernel; either may be skipped.
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    backward_tiled(g, input, kernel, grad_out, want_input, want_kernel, COLS_BUDGET)
}

fn backward_tiled<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
    budget: usize,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let in_stride = g.c_in * g.h * g.w;
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut cols = Vec::new();
    for b in 0..g.batch {
        let dy = &grad_out[b * g.c_out * p..(b + 1) * g.c_out * p];
        for rows in row_tiles(g, budget) {
            let tp = rows.len() * g.wo;
            let dy_tile = &dy[rows.start * g.wo..];
            cols.resize(k * tp, T::zero());
            if let Some(dk) = d_kernel.as_mut() {
                im2col(g, &input[b * in_stride..(b + 1) * in_stride], rows.clone(), &mut cols);
                // dK[c_out, k] += dY[c_out, tp] * cols^T[tp, k]
                T::gemm(g.c_out, tp, k, T::one(), dy_tile, (p, 1), &cols, (1, tp), T::one(), dk, (k, 1));
            }
            if let Some(dx) = d_input.as_mut() {
                // dcols[k, tp] = K^T[k, c_out] * dY[c_out, tp]
                T::gemm(k, g.c_out, tp, T::one(), kernel, (1, k), dy_tile, (p, 1), T::zero(), &mut cols, (tp, 1));
                col2im(g, &cols, rows, &mut dx[b * in_stride..(b + 1) * in_stride]);
            }
        }
    }
    (d_input, d_kernel)
}
