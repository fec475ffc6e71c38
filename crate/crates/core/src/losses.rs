//! Training objectives, built on a [`Tape`] so they can be differentiated.
//!
//! Normal-map tensors are `[B, 3, H, W]`; discriminator outputs are `[B]`.

use nirnormal_tensor::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;
pub const ANGULAR_EPS: f64 = 1e-8;
pub const CURL_NZ_MIN: f64 = 0.05;
pub const CURL_WINDOW: usize = 5;
pub const CURL_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_ang: f64,
    pub lambda_curl: f64,
    /// 1 or 2.
    pub p_norm: u8,
    /// Weight of the generator's adversarial term.
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_ang: 1.0,
            lambda_curl: 1.0,
            p_norm: 2,
            adversarial: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.p_norm, 1 | 2) {
            return Err(Error::Config(format!("p_norm must be 1 or 2, got {}", self.p_norm)));
        }
        let w = [self.lambda_p, self.lambda_ang, self.lambda_curl, self.adversarial];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of `pred` against a constant `label`.
pub fn bce<T: Scalar>(tape: &mut Tape<T>, pred: Var, label: f64) -> Var {
    let p = tape.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = tape.ln(p);
    let one_minus = tape.neg(p);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let log_q = tape.ln(one_minus);
    let mean_p = tape.mean(log_p);
    let mean_q = tape.mean(log_q);
    let a = tape.scale(mean_p, -label);
    let b = tape.scale(mean_q, label - 1.0);
    tape.add(a, b).expect("scalars")
}

pub fn loss_discriminator<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Var {
    let real = bce(tape, d_real, 1.0);
    let fake = bce(tape, d_fake, 0.0);
    tape.add(real, fake).expect("scalars")
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Extent(format!(
            "{op}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean of `|y − g|^p` over all elements.
pub fn loss_lp<T: Scalar>(tape: &mut Tape<T>, y: Var, g: Var, p: u8) -> Result<Var> {
    same_shape(tape, "loss_lp", y, g)?;
    let d = tape.sub(y, g)?;
    let e = match p {
        1 => tape.abs(d),
        2 => tape.square(d),
        _ => return Err(Error::Config(format!("p_norm must be 1 or 2, got {p}"))),
    };
    Ok(tape.mean(e))
}

/// Mean over pixels of `1 − cos(y, g)`.
pub fn loss_angular<T: Scalar>(tape: &mut Tape<T>, y: Var, g: Var) -> Result<Var> {
    same_shape(tape, "loss_angular", y, g)?;
    let yg = tape.mul(y, g)?;
    let dot = tape.sum_channels(yg)?;
    let norm = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let sq = tape.square(v);
        let s = tape.sum_channels(sq)?;
        Ok(tape.sqrt(s))
    };
    let ny = norm(tape, y)?;
    let ng = norm(tape, g)?;
    let denom = tape.mul(ny, ng)?;
    let denom = tape.add_scalar(denom, ANGULAR_EPS);
    let cos = tape.div(dot, denom)?;
    let mean = tape.mean(cos);
    let neg = tape.neg(mean);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Window-averaged absolute curl of the gradient field implied by `g`.
///
/// Normals become slopes `p = −nx/nz`, `q = −ny/nz` with `nz` clamped to at
/// least 0.05. The residual `∂p/∂y − ∂q/∂x` uses central differences on the
/// interior `(H−2)×(W−2)` grid; its absolute value is averaged over 5×5
/// windows with stride 2 and the window means are averaged.
pub fn loss_curl<T: Scalar>(tape: &mut Tape<T>, g: Var) -> Result<Var> {
    let [_, c, h, w] = tape.value(g).dims4()?;
    if c != 3 || h < 3 || w < 3 {
        return Err(Error::Extent(format!(
            "loss_curl needs [B, 3, H>=3, W>=3], got {:?}",
            tape.shape(g)
        )));
    }
    let nx = tape.narrow(g, 1, 0, 1)?;
    let ny = tape.narrow(g, 1, 1, 1)?;
    let nz = tape.narrow(g, 1, 2, 1)?;
    let nz = tape.clamp(nz, CURL_NZ_MIN, f64::INFINITY);
    let p = tape.div(nx, nz)?;
    let p = tape.neg(p);
    let q = tape.div(ny, nz)?;
    let q = tape.neg(q);
    let (hr, wr) = (h - 2, w - 2);
    let crop = |tape: &mut Tape<T>, v: Var, y0: usize, x0: usize| -> Result<Var> {
        let rows = tape.narrow(v, 2, y0, hr)?;
        Ok(tape.narrow(rows, 3, x0, wr)?)
    };
    let p_down = crop(tape, p, 2, 1)?;
    let p_up = crop(tape, p, 0, 1)?;
    let q_right = crop(tape, q, 1, 2)?;
    let q_left = crop(tape, q, 1, 0)?;
    let dp = tape.sub(p_down, p_up)?;
    let dq = tape.sub(q_right, q_left)?;
    let r = tape.sub(dp, dq)?;
    let r = tape.scale(r, 0.5);
    let a = tape.abs(r);
    let windows = tape.avg_pool2d(a, CURL_WINDOW.min(hr), CURL_WINDOW.min(wr), CURL_STRIDE)?;
    Ok(tape.mean(windows))
}

/// Generator objective and its terms (each unweighted).
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub g_bce: Var,
    pub l_p: Var,
    pub l_ang: Var,
    pub l_curl: Var,
}

/// `adversarial·bce(d_fake, 1) + λ_p·L_p + λ_ang·L_ang + λ_curl·L_curl`.
///
/// Zero-weighted terms are still evaluated for logging but left out of
/// `total`, so no gradient flows through them.
pub fn loss_generator<T: Scalar>(tape: &mut Tape<T>, d_fake: Var, y: Var, g: Var, w: &LossWeights) -> Result<GeneratorLoss> {
    w.validate()?;
    let g_bce = bce(tape, d_fake, 1.0);
    let l_p = loss_lp(tape, y, g, w.p_norm)?;
    let l_ang = loss_angular(tape, y, g)?;
    let l_curl = loss_curl(tape, g)?;
    let mut total: Option<Var> = None;
    for (term, weight) in [(g_bce, w.adversarial), (l_p, w.lambda_p), (l_ang, w.lambda_ang), (l_curl, w.lambda_curl)] {
        if weight == 0.0 {
            continue;
        }
        let t = tape.scale(term, weight);
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    let total = total.unwrap_or_else(|| tape.scale(g_bce, 0.0));
    Ok(GeneratorLoss {
        total,
        g_bce,
        l_p,
        l_ang,
        l_curl,
    })
}
