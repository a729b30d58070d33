//! Layer building blocks recorded on a [`Tape`].

use rand::Rng;

use super::{FeatureMatrix, FfnParams, GateParams, LinearParams, MhaParams, Tape, Var};
use crate::error::{Error, Result};

pub fn linear(t: &mut Tape, x: Var, p: &LinearParams) -> Result<Var> {
    if t.shape(x).1 != p.fan_in {
        return Err(Error::ShapeMismatch { op: "linear", left: t.shape(x), right: (p.fan_in, p.fan_out) });
    }
    let w = t.param(p.w);
    let b = t.param(p.b);
    let xw = t.matmul(x, w)?;
    t.add_row(xw, b)
}

/// Multi-head scaled dot-product attention of `q_in` over `kv_in`.
///
/// Each head computes `softmax(Q_h K_hᵀ / √d_h) V_h` on its column block of
/// the projections; the heads are concatenated and passed through the output
/// projection. `keep[j] == false` masks key row `j`.
pub fn attention(t: &mut Tape, q_in: Var, kv_in: Var, p: &MhaParams, keep: Option<&[bool]>) -> Result<Var> {
    let d = p.dim();
    let (qs, ks) = (t.shape(q_in), t.shape(kv_in));
    if qs.1 != d || ks.1 != d {
        return Err(Error::ShapeMismatch { op: "attention", left: qs, right: ks });
    }
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::HeadsNotDivisible { dim: d, heads: p.heads });
    }
    if let Some(k) = keep {
        if k.len() != ks.0 {
            return Err(Error::ShapeMismatch { op: "attention mask", left: ks, right: (k.len(), 1) });
        }
    }
    let q = linear(t, q_in, &p.query)?;
    let k = linear(t, kv_in, &p.key)?;
    let v = linear(t, kv_in, &p.value)?;
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (t.slice_cols(q, lo, hi)?, t.slice_cols(k, lo, hi)?, t.slice_cols(v, lo, hi)?)
        };
        let logits = t.matmul_nt(qh, kh)?;
        let logits = t.affine(logits, scale, 0.0);
        let weights = t.softmax_rows(logits, keep)?;
        heads.push(t.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads)? };
    linear(t, joined, &p.output)
}

/// Linear, ReLU, linear.
pub fn ffn(t: &mut Tape, x: Var, p: &FfnParams) -> Result<Var> {
    let h = linear(t, x, &p.hidden)?;
    let h = t.relu(h);
    linear(t, h, &p.out)
}

/// `ω = δ(a W_g + b W_c + b_I)`, `out = ω ⊙ a + (1 − ω) ⊙ b`.
///
/// Returns `(out, ω)`.
pub fn sigmoid_gate(t: &mut Tape, a: Var, b: Var, p: &GateParams) -> Result<(Var, Var)> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::ShapeMismatch { op: "sigmoid_gate", left: t.shape(a), right: t.shape(b) });
    }
    let (wg, wc, bias) = (t.param(p.w_g), t.param(p.w_c), t.param(p.bias));
    let ga = t.matmul(a, wg)?;
    let gb = t.matmul(b, wc)?;
    let pre = t.add(ga, gb)?;
    let pre = t.add_row(pre, bias)?;
    let omega = t.sigmoid(pre);
    // ω⊙a + (1−ω)⊙b == b + ω⊙(a − b)
    let diff = t.sub(a, b)?;
    let scaled = t.mul(omega, diff)?;
    let out = t.add(b, scaled)?;
    Ok((out, omega))
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1/(1−rate)`. Identity when not training or when `rate == 0`.
pub fn dropout<R: Rng + ?Sized>(t: &mut Tape, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidDropout(rate));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let (rows, cols) = t.shape(x);
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..rows * cols).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale }).collect();
    t.mul_const(x, FeatureMatrix::from_vec(rows, cols, mask)?)
}
