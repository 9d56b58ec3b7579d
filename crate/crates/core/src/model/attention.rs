//! Scaled dot-product attention.

use candle_core::Tensor;

use super::ops::softmax_last;
use crate::error::{Result, TltError};

/// Output of [`scaled_dot_product_attention`].
#[derive(Debug, Clone)]
pub struct Attention {
    /// `(B, P, d_v)`
    pub output: Tensor,
    /// `(B, heads, P, S)`; each row is a probability vector.
    pub weights: Tensor,
}

/// `softmax(Q K^T / sqrt(d_k)) V` for queries `(B, P, d_k)`, keys
/// `(B, S, d_k)` and values `(B, S, d_v)`. With `heads > 1` the key and
/// value widths are split evenly and `d_k` is the per-head key width.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Attention> {
    let (b, p, dq) = q.dims3()?;
    let (bk, s, dk) = k.dims3()?;
    let (bv, sv, dv) = v.dims3()?;
    if dq != dk {
        return Err(TltError::Config(format!("query width {dq} does not match key width {dk}")));
    }
    if b != bk || b != bv || s != sv {
        return Err(TltError::Config("query/key/value batch or length mismatch".into()));
    }
    if heads == 0 || dk % heads != 0 || dv % heads != 0 {
        return Err(TltError::Config(format!(
            "{heads} heads do not divide key width {dk} and value width {dv}"
        )));
    }
    let hk = dk / heads;
    let hv = dv / heads;
    let split = |x: &Tensor, n: usize, w: usize| -> Result<Tensor> {
        Ok(x.reshape((b, n, heads, w))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = split(q, p, hk)?;
    let kh = split(k, s, hk)?;
    let vh = split(v, s, hv)?;
    let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? / (hk as f64).sqrt())?;
    let weights = softmax_last(&scores)?;
    let out = weights.matmul(&vh)?; // (B, heads, P, hv)
    let output = out.transpose(1, 2)?.contiguous()?.reshape((b, p, dv))?;
    Ok(Attention { output, weights })
}
