//! Scaled dot-product multi-head attention over batched token sets.

use vip_tensor::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};

/// Additive mask value for disallowed pairs; `exp` of it underflows to 0.
pub const MASKED: f64 = -1e9;

pub struct Attention {
    /// `[B, N, c]`
    pub out: Var,
    /// Attention weights `[B, heads, N, Nk]`.
    pub weights: Var,
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(g.permute(r, &[0, 2, 1, 3])?)
}

/// `softmax(q k^T / sqrt(d) + bias + mask) v` with `q: [B, N, c]`,
/// `k, v: [B, Nk, c]`, `bias: [heads, N, Nk]` and `mask: [B, heads, N, Nk]`.
pub fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
    mask: Option<&Tensor>,
) -> Result<Attention> {
    let (b, n, c) = match *g.shape(q) {
        [b, n, c] => (b, n, c),
        ref s => return Err(CoreError::Invalid(format!("attention query must be rank 3, got {s:?}"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(CoreError::Invalid(format!("{heads} heads do not divide {c} channels")));
    }
    let d = c / heads;
    let (qh, kh, vh) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let scores = g.matmul_nt(qh, kh)?;
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(bias) = bias {
        scores = g.add_suffix(scores, bias)?;
    }
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores, 3)?;
    let o = g.matmul(weights, vh)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let out = g.reshape(o, &[b, n, c])?;
    Ok(Attention { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1));
        let k = g.constant(Tensor::from_fn(&[2, 1, 4], |i| i as f64 * -0.3));
        let v = g.constant(Tensor::from_fn(&[2, 1, 4], |i| 1.0 + i as f64));
        let a = multi_head(&mut g, q, k, v, 2, None, None).unwrap();
        let out = g.value(a.out);
        for b in 0..2 {
            for n in 0..3 {
                for c in 0..4 {
                    assert_eq!(out.at(&[b, n, c]), 1.0 + (b * 4 + c) as f64);
                }
            }
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 2, 6]));
        assert!(multi_head(&mut g, q, q, q, 4, None, None).is_err());
    }
}
