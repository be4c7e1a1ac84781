//! Multi-pyramid decoder: view fusion per stage, deep-to-shallow gating,
//! frequency attention and top-down integration with the global feature.
//!
//! All decoder maps are `[S, S, c]`; stage 0 is the finest.

use vip_tensor::{Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::layers::{conv2d_same, group_norm, linear, Decls};

fn stage_input_dim(cfg: &ModelConfig, s: usize) -> usize {
    (0..cfg.views.len()).map(|v| cfg.view_dim(v, s)).sum()
}

pub fn declare(cfg: &ModelConfig, d: &mut Decls) {
    let k = cfg.stages();
    let dims = &cfg.decoder.dims;
    let fc = 3 * cfg.channels;
    for s in 0..k {
        let cl = dims[s];
        let cin = stage_input_dim(cfg, s);
        if cfg.decoder.tff_enabled {
            d.conv(&format!("dec.tff.s{s}.conv"), &[3, 3, 3], cin, cl);
            d.norm(&format!("dec.tff.s{s}.gn"), cl);
        } else {
            d.linear(&format!("dec.tff.s{s}.proj"), cin, cl, true);
        }
        if s + 1 < k {
            d.linear(&format!("dec.acc.s{s}"), dims[s + 1..].iter().sum(), cl, true);
        }
        if cfg.frequency.enabled {
            let lk = cfg.decoder.lk_kernel;
            d.conv(&format!("dec.freq.s{s}.lk"), &[lk, lk], cl, fc);
            d.zero_linear(&format!("dec.freq.s{s}.back"), fc, cl);
        }
        if s + 1 == k {
            d.linear("dec.guide.proj", cfg.global.dim, cl, true);
            d.linear("dec.guide.fuse", 2 * cl, cl, true);
        } else {
            d.conv(&format!("dec.int.s{s}"), &[3, 3], cl + dims[s + 1], cl);
        }
    }
    d.conv("dec.head.conv", &[3, 3], dims[0], dims[0]);
    d.linear("dec.head.out", dims[0], 1, true);
}

/// Fuses the per-view stage features `[T_v, S, S, c_v]` into `f^l[S, S, c_l]`:
/// temporal replication to the longest view, channel concat, 3x3x3
/// convolution, group normalization, temporal mean.
pub fn tff_fuse(g: &mut Graph, feats: &[Var], cfg: &ModelConfig, s: usize) -> Result<Var> {
    let first = g.shape(feats[0]).to_vec();
    for &f in feats {
        let sh = g.shape(f);
        if sh.len() != 4 || sh[1..3] != first[1..3] {
            return Err(CoreError::Invalid(format!("tff: spatial mismatch {:?} vs {first:?}", sh)));
        }
    }
    if !cfg.decoder.tff_enabled {
        let mut means = Vec::with_capacity(feats.len());
        for &f in feats {
            means.push(g.mean_axis(f, 0)?);
        }
        let cat = g.concat(&means, 2)?;
        return linear(g, cat, &format!("dec.tff.s{s}.proj"));
    }
    let v = feats.iter().map(|&f| g.shape(f)[0]).max().unwrap_or(1);
    let mut expanded = Vec::with_capacity(feats.len());
    for &f in feats {
        expanded.push(if g.shape(f)[0] == v { f } else { g.repeat_axis(f, 0, v)? });
    }
    let cat = g.concat(&expanded, 3)?;
    let w = g.param(&format!("dec.tff.s{s}.conv.w"))?;
    let b = g.param(&format!("dec.tff.s{s}.conv.b"))?;
    let y = g.conv3d(cat, w, [1, 1, 1], [1, 1, 1])?;
    let y = g.add_suffix(y, b)?;
    let y = group_norm(g, y, &format!("dec.tff.s{s}.gn"), cfg.decoder.groups)?;
    Ok(g.mean_axis(y, 0)?)
}

fn resize(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let sh = g.shape(x);
    if sh[0] == h && sh[1] == w {
        return Ok(x);
    }
    Ok(g.upsample_bilinear(x, h, w)?)
}

/// `f^l_c = f^l * sigmoid(conv1x1(concat(upsampled deeper maps)))`; the
/// deepest map passes through unchanged.
pub fn accumulate_deep(g: &mut Graph, fused: &[Var]) -> Result<Vec<Var>> {
    let k = fused.len();
    let mut out = Vec::with_capacity(k);
    for s in 0..k {
        if s + 1 == k {
            out.push(fused[s]);
            continue;
        }
        let (h, w) = (g.shape(fused[s])[0], g.shape(fused[s])[1]);
        let mut ups = Vec::with_capacity(k - s - 1);
        for &f in &fused[s + 1..] {
            ups.push(resize(g, f, h, w)?);
        }
        let cat = g.concat(&ups, 2)?;
        let u = linear(g, cat, &format!("dec.acc.s{s}"))?;
        let gate = g.sigmoid(u);
        out.push(g.mul(fused[s], gate)?);
    }
    Ok(out)
}

/// `f^l_c' = f^l_c + conv1x1(LKConv(f^l_c) * f^l_a)`.
pub fn fuse_frequency(g: &mut Graph, fc: Var, fa: &Tensor, s: usize) -> Result<Var> {
    let sh = g.shape(fc).to_vec();
    if fa.shape().len() != 3 || fa.shape()[..2] != sh[..2] {
        return Err(CoreError::Invalid(format!(
            "frequency fusion: spatial mismatch {:?} vs {sh:?}",
            fa.shape()
        )));
    }
    let lk = conv2d_same(g, fc, &format!("dec.freq.s{s}.lk"))?;
    let a = g.constant(fa.clone());
    let prod = g.mul(lk, a)?;
    let back = linear(g, prod, &format!("dec.freq.s{s}.back"))?;
    Ok(g.add(fc, back)?)
}

pub struct Prediction {
    /// `[H, W]` probabilities.
    pub prob: Var,
    /// `[H, W]` pre-sigmoid scores.
    pub logits: Var,
}

/// Top-down integration of the frequency-fused maps with the global feature
/// and the detection head.
pub fn integrate_and_predict(g: &mut Graph, fcp: &[Var], fh: Var, cfg: &ModelConfig) -> Result<Prediction> {
    let k = fcp.len();
    let deepest = g.shape(fcp[k - 1]).to_vec();
    if g.shape(fh)[..2] != deepest[..2] {
        return Err(CoreError::Invalid(format!(
            "global feature {:?} does not match deepest stage {deepest:?}",
            g.shape(fh)
        )));
    }
    let proj = linear(g, fh, "dec.guide.proj")?;
    let cat = g.concat(&[fcp[k - 1], proj], 2)?;
    let mut cur = linear(g, cat, "dec.guide.fuse")?;
    for s in (0..k - 1).rev() {
        let (h, w) = (g.shape(fcp[s])[0], g.shape(fcp[s])[1]);
        let (ch, cw) = (g.shape(cur)[0], g.shape(cur)[1]);
        if (h, w) != (2 * ch, 2 * cw) {
            return Err(CoreError::Invalid(format!("stage {s} side {h}x{w} is not twice {ch}x{cw}")));
        }
        let up = g.upsample_bilinear(cur, h, w)?;
        let cat = g.concat(&[fcp[s], up], 2)?;
        let y = conv2d_same(g, cat, &format!("dec.int.s{s}"))?;
        cur = g.gelu(y);
    }
    let y = conv2d_same(g, cur, "dec.head.conv")?;
    let y = g.gelu(y);
    let y = g.upsample_bilinear(y, cfg.height, cfg.width)?;
    let y = linear(g, y, "dec.head.out")?;
    let logits = g.reshape(y, &[cfg.height, cfg.width])?;
    let prob = g.sigmoid(logits);
    Ok(Prediction { prob, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use vip_tensor::ParamStore;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn store(cfg: &ModelConfig) -> ParamStore {
        let mut d = Decls::default();
        declare(cfg, &mut d);
        d.build(21).unwrap()
    }

    fn view_feats(g: &mut Graph, s: usize) -> Vec<Var> {
        let side = 8 >> s;
        [(3, 16), (1, 24), (1, 32)]
            .iter()
            .enumerate()
            .map(|(i, &(t, c))| g.constant(rand(&[t, side, side, c << s], 30 + i as u64)))
            .collect()
    }

    #[test]
    fn tff_shapes() {
        let cfg = ModelConfig::desk();
        let s = store(&cfg);
        let mut g = Graph::with_params(&s);
        let f = view_feats(&mut g, 0);
        let y = tff_fuse(&mut g, &f, &cfg, 0).unwrap();
        assert_eq!(g.shape(y), &[8, 8, 16]);
        let bad = g.constant(rand(&[1, 4, 4, 24], 1));
        assert!(tff_fuse(&mut g, &[f[0], bad], &cfg, 0).is_err());
    }

    #[test]
    fn tff_single_view_is_conv_and_norm() {
        let mut cfg = ModelConfig::desk();
        cfg.views = vec![1];
        cfg.embed_dims = vec![16];
        let s = store(&cfg);
        let mut g = Graph::with_params(&s);
        let x = g.constant(rand(&[3, 8, 8, 16], 2));
        let y = tff_fuse(&mut g, &[x], &cfg, 0).unwrap();
        let w = g.param("dec.tff.s0.conv.w").unwrap();
        let b = g.param("dec.tff.s0.conv.b").unwrap();
        let c = g.conv3d(x, w, [1, 1, 1], [1, 1, 1]).unwrap();
        let c = g.add_suffix(c, b).unwrap();
        let n = group_norm(&mut g, c, "dec.tff.s0.gn", 4).unwrap();
        let m = g.mean_axis(n, 0).unwrap();
        assert_eq!(g.value(y), g.value(m));
    }

    #[test]
    fn saturated_and_zero_gates() {
        let cfg = ModelConfig::desk();
        let mut s = store(&cfg);
        *s.value_mut("dec.acc.s0.w").unwrap() = Tensor::zeros(&[32, 16]);
        *s.value_mut("dec.acc.s0.b").unwrap() = Tensor::full(&[16], 20.0);
        let f0 = rand(&[8, 8, 16], 3);
        let f1 = rand(&[4, 4, 32], 4);
        let run = |s: &ParamStore| {
            let mut g = Graph::with_params(s);
            let a = g.constant(f0.clone());
            let b = g.constant(f1.clone());
            let out = accumulate_deep(&mut g, &[a, b]).unwrap();
            (g.value(out[0]).clone(), g.value(out[1]).clone())
        };
        let (c0, c1) = run(&s);
        assert!(c0.max_abs_diff(&f0) <= 1e-8);
        assert_eq!(c1, f1);
        *s.value_mut("dec.acc.s0.b").unwrap() = Tensor::zeros(&[16]);
        let (c0, _) = run(&s);
        assert!(c0.max_abs_diff(&f0.map(|x| 0.5 * x)) <= 1e-15);
    }

    #[test]
    fn single_stage_accumulation_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(rand(&[4, 4, 8], 5));
        assert_eq!(accumulate_deep(&mut g, &[a]).unwrap(), vec![a]);
    }

    #[test]
    fn frequency_fusion_neutral_cases() {
        let cfg = ModelConfig::desk();
        let s = store(&cfg);
        let fc = rand(&[8, 8, 16], 6);
        let fa = rand(&[8, 8, 9], 7);
        // zero-initialized return projection
        let mut g = Graph::with_params(&s);
        let x = g.constant(fc.clone());
        let y = fuse_frequency(&mut g, x, &fa, 0).unwrap();
        assert_eq!(g.value(y), &fc);
        // annihilating frequency map with a live return projection
        let mut s2 = s.clone();
        *s2.value_mut("dec.freq.s0.back.w").unwrap() = rand(&[9, 16], 8);
        let mut g = Graph::with_params(&s2);
        let x = g.constant(fc.clone());
        let y = fuse_frequency(&mut g, x, &Tensor::zeros(&[8, 8, 9]), 0).unwrap();
        assert_eq!(g.value(y), &fc);
        let bad = Tensor::zeros(&[4, 4, 9]);
        assert!(fuse_frequency(&mut g, x, &bad, 0).is_err());
    }

    #[test]
    fn zero_head_gives_one_half() {
        let cfg = ModelConfig::desk();
        let mut s = store(&cfg);
        *s.value_mut("dec.head.out.w").unwrap() = Tensor::zeros(&[16, 1]);
        let mut g = Graph::with_params(&s);
        let a = g.constant(rand(&[8, 8, 16], 9));
        let b = g.constant(rand(&[4, 4, 32], 10));
        let fh = g.constant(rand(&[4, 4, 32], 11));
        let p = integrate_and_predict(&mut g, &[a, b], fh, &cfg).unwrap();
        assert_eq!(g.shape(p.prob), &[32, 32]);
        assert!(g.value(p.prob).data().iter().all(|&m| m == 0.5));
    }
}
