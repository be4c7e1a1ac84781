//! Per-view shifted-window transformer branches and the global encoder.
//!
//! A view's tokens `[T_v, S, S, c]` are processed slice by slice: the
//! temporal axis acts as a batch axis inside every block.

use std::rc::Rc;

use vip_tensor::{Graph, SparseMap, Tensor, Var};

use crate::attention::{multi_head, Attention, MASKED};
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::layers::{layer_norm, linear, linear_nobias, Decls, Init};

/// Bookkeeping to undo [`window_partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub window: usize,
    pub channels: usize,
}

impl WindowLayout {
    pub fn new(shape: &[usize], window: usize) -> Result<Self> {
        let [batch, height, width, channels] = *shape else {
            return Err(CoreError::Invalid(format!("window partition needs [B,H,W,C], got {shape:?}")));
        };
        if window == 0 {
            return Err(CoreError::Invalid("window must be positive".into()));
        }
        let up = |n: usize| n.div_ceil(window) * window;
        Ok(Self {
            batch,
            height,
            width,
            padded_height: up(height),
            padded_width: up(width),
            window,
            channels,
        })
    }

    pub fn windows_per_item(&self) -> usize {
        (self.padded_height / self.window) * (self.padded_width / self.window)
    }

    pub fn windows(&self) -> usize {
        self.batch * self.windows_per_item()
    }

    pub fn is_padded(&self) -> bool {
        self.padded_height != self.height || self.padded_width != self.width
    }

    /// Padded-input flat index feeding each element of the windowed
    /// `[B * nW, M * M, C]` layout, windows in row-major order.
    fn sources(&self) -> Vec<usize> {
        let (m, c) = (self.window, self.channels);
        let (hp, wp) = (self.padded_height, self.padded_width);
        let mut src = Vec::with_capacity(self.batch * hp * wp * c);
        for b in 0..self.batch {
            for wy in 0..hp / m {
                for wx in 0..wp / m {
                    for iy in 0..m {
                        for ix in 0..m {
                            let base = ((b * hp + wy * m + iy) * wp + wx * m + ix) * c;
                            src.extend(base..base + c);
                        }
                    }
                }
            }
        }
        src
    }

    fn padded_shape(&self) -> [usize; 4] {
        [self.batch, self.padded_height, self.padded_width, self.channels]
    }

    fn windowed_shape(&self) -> [usize; 3] {
        [self.windows(), self.window * self.window, self.channels]
    }

    fn gather(&self) -> SparseMap {
        let idx: Vec<Option<usize>> = self.sources().into_iter().map(Some).collect();
        SparseMap::from_indices(&self.padded_shape(), &self.windowed_shape(), &idx)
    }

    fn scatter(&self) -> SparseMap {
        let src = self.sources();
        let mut idx = vec![None; src.len()];
        for (o, s) in src.into_iter().enumerate() {
            idx[s] = Some(o);
        }
        SparseMap::from_indices(&self.windowed_shape(), &self.padded_shape(), &idx)
    }
}

/// Splits `x[B, H, W, C]` into `[B * K, M * M, C]` windows, zero-padding the
/// spatial sides up to a multiple of `window` first.
pub fn window_partition(g: &mut Graph, x: Var, window: usize) -> Result<(Var, WindowLayout)> {
    let layout = WindowLayout::new(g.shape(x), window)?;
    let x = if layout.is_padded() {
        g.pad(
            x,
            &[
                (0, 0),
                (0, layout.padded_height - layout.height),
                (0, layout.padded_width - layout.width),
                (0, 0),
            ],
        )?
    } else {
        x
    };
    let y = g.gather_map(x, Rc::new(layout.gather()))?;
    Ok((y, layout))
}

/// Reassembles windows into `[B, H, W, C]`, stripping any padding.
pub fn window_merge(g: &mut Graph, y: Var, layout: &WindowLayout) -> Result<Var> {
    let mut x = g.gather_map(y, Rc::new(layout.scatter()))?;
    if layout.padded_height != layout.height {
        x = g.narrow(x, 1, 0, layout.height)?;
    }
    if layout.padded_width != layout.width {
        x = g.narrow(x, 2, 0, layout.width)?;
    }
    Ok(x)
}

/// Region mask for shifted windows over a padded `hp x wp` grid: entry
/// `[w, i, j]` is 0 when tokens `i` and `j` of window `w` came from the same
/// pre-shift region and [`MASKED`] otherwise.
pub fn shift_mask(hp: usize, wp: usize, window: usize, shift: usize) -> Tensor {
    let region = |p: usize, n: usize| {
        if p < n - window {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw, nn) = (hp / window, wp / window, window * window);
    let mut out = Vec::with_capacity(nh * nw * nn * nn);
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..nn)
                .map(|i| {
                    let (y, x) = (wy * window + i / window, wx * window + i % window);
                    3 * region(y, hp) + region(x, wp)
                })
                .collect();
            for &li in &labels {
                out.extend(labels.iter().map(|&lj| if li == lj { 0.0 } else { MASKED }));
            }
        }
    }
    Tensor::new(&[nh * nw, nn, nn], out).expect("mask shape")
}

/// Gather from the `[(2M-1)^2, heads]` bias table to `[heads, M*M, M*M]`.
fn relative_bias_map(window: usize, heads: usize) -> SparseMap {
    let (m, nn, side) = (window, window * window, 2 * window - 1);
    let mut idx = Vec::with_capacity(heads * nn * nn);
    for h in 0..heads {
        for i in 0..nn {
            for j in 0..nn {
                let dy = i / m + m - 1 - j / m;
                let dx = i % m + m - 1 - j % m;
                idx.push(Some((dy * side + dx) * heads + h));
            }
        }
    }
    SparseMap::from_indices(&[side * side, heads], &[heads, nn, nn], &idx)
}

pub(crate) fn block_prefix(v: usize, s: usize, j: usize) -> String {
    format!("enc.v{v}.s{s}.b{j}")
}

fn declare_block(d: &mut Decls, p: &str, c: usize, heads: usize, window: usize, ratio: usize) {
    d.norm(&format!("{p}.ln1"), c);
    for n in ["q", "k", "v", "o"] {
        d.linear(&format!("{p}.attn.{n}"), c, c, true);
    }
    let side = 2 * window - 1;
    d.add(format!("{p}.attn.rpb"), &[side * side, heads], Init::Normal(0.02));
    declare_mlp(d, p, c, ratio);
}

fn declare_mlp(d: &mut Decls, p: &str, c: usize, ratio: usize) {
    d.norm(&format!("{p}.ln2"), c);
    d.linear(&format!("{p}.mlp.fc1"), c, c * ratio, true);
    d.linear(&format!("{p}.mlp.fc2"), c * ratio, c, true);
}

pub fn declare(cfg: &ModelConfig, d: &mut Decls) {
    for v in 0..cfg.views.len() {
        for s in 0..cfg.stages() {
            let c = cfg.view_dim(v, s);
            if s > 0 {
                let p = format!("enc.v{v}.s{s}.merge");
                d.norm(&format!("{p}.ln"), 2 * c);
                d.linear(&format!("{p}.red"), 2 * c, c, false);
            }
            for j in 0..2 * cfg.depths[s] {
                declare_block(d, &block_prefix(v, s, j), c, cfg.heads[s], cfg.window, cfg.mlp_ratio);
            }
        }
    }
    let gc = &cfg.global;
    d.conv("enc.global.embed", &[gc.patch, gc.patch], cfg.channels, gc.dim);
    for j in 0..gc.depth {
        let p = format!("enc.global.b{j}");
        d.norm(&format!("{p}.ln1"), gc.dim);
        for n in ["q", "k", "v", "o"] {
            d.linear(&format!("{p}.attn.{n}"), gc.dim, gc.dim, true);
        }
        declare_mlp(d, &p, gc.dim, cfg.mlp_ratio);
    }
}

fn mlp_residual(g: &mut Graph, x: Var, p: &str) -> Result<Var> {
    let h = layer_norm(g, x, &format!("{p}.ln2"))?;
    let h = linear(g, h, &format!("{p}.mlp.fc1"))?;
    let h = g.gelu(h);
    let h = linear(g, h, &format!("{p}.mlp.fc2"))?;
    Ok(g.add(x, h)?)
}

/// Windowed self-attention sub-layer (without residual) on `x[B, H, W, c]`.
/// With `shifted`, the grid is rolled by `-floor(M/2)` first and
/// cross-region pairs are masked.
pub fn window_attention(g: &mut Graph, x: Var, p: &str, heads: usize, window: usize, shifted: bool) -> Result<Attention> {
    let layout = WindowLayout::new(g.shape(x), window)?;
    let mut h = x;
    if layout.is_padded() {
        h = g.pad(
            h,
            &[
                (0, 0),
                (0, layout.padded_height - layout.height),
                (0, layout.padded_width - layout.width),
                (0, 0),
            ],
        )?;
    }
    let shift = window / 2;
    let shifted = shifted && shift > 0;
    if shifted {
        h = g.roll(h, 1, -(shift as isize))?;
        h = g.roll(h, 2, -(shift as isize))?;
    }
    let (win, _) = window_partition(g, h, window)?;
    let q = linear(g, win, &format!("{p}.attn.q"))?;
    let k = linear(g, win, &format!("{p}.attn.k"))?;
    let v = linear(g, win, &format!("{p}.attn.v"))?;
    let table = g.param(&format!("{p}.attn.rpb"))?;
    let bias = g.gather_map(table, Rc::new(relative_bias_map(window, heads)))?;
    let mask = shifted.then(|| {
        let m = shift_mask(layout.padded_height, layout.padded_width, window, shift);
        let nn = window * window;
        let per = m.data();
        let data: Vec<f64> = (0..layout.batch)
            .flat_map(|_| {
                (0..layout.windows_per_item()).flat_map(move |w| {
                    (0..heads).flat_map(move |_| per[w * nn * nn..(w + 1) * nn * nn].iter().copied())
                })
            })
            .collect();
        Tensor::new(&[layout.windows(), heads, nn, nn], data).expect("mask shape")
    });
    let att = multi_head(g, q, k, v, heads, Some(bias), mask.as_ref())?;
    let o = linear(g, att.out, &format!("{p}.attn.o"))?;
    let padded = WindowLayout {
        height: layout.padded_height,
        width: layout.padded_width,
        ..layout
    };
    let mut y = window_merge(g, o, &padded)?;
    if shifted {
        y = g.roll(y, 1, shift as isize)?;
        y = g.roll(y, 2, shift as isize)?;
    }
    if layout.padded_height != layout.height {
        y = g.narrow(y, 1, 0, layout.height)?;
    }
    if layout.padded_width != layout.width {
        y = g.narrow(y, 2, 0, layout.width)?;
    }
    Ok(Attention {
        out: y,
        weights: att.weights,
    })
}

/// One transformer block with (shifted) window attention on `[B, H, W, c]`.
pub fn swin_block(g: &mut Graph, x: Var, p: &str, heads: usize, window: usize, shifted: bool) -> Result<Var> {
    let h = layer_norm(g, x, &format!("{p}.ln1"))?;
    let a = window_attention(g, h, p, heads, window, shifted)?;
    let x = g.add(x, a.out)?;
    mlp_residual(g, x, p)
}

/// W-MSA block followed by the SW-MSA block.
pub fn swin_block_pair(g: &mut Graph, x: Var, p0: &str, p1: &str, heads: usize, window: usize) -> Result<Var> {
    let x = swin_block(g, x, p0, heads, window, false)?;
    swin_block(g, x, p1, heads, window, true)
}

/// Gathers 2x2 neighbourhoods of `[B, H, W, C]` into `[B, H/2, W/2, 4C]`.
fn merge_map(shape: &[usize]) -> Result<SparseMap> {
    let [b, h, w, c] = *shape else {
        return Err(CoreError::Invalid(format!("patch merging needs [B,H,W,C], got {shape:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::Invalid(format!("patch merging needs even sides, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((bi * h + 2 * y + dy) * w + 2 * x + dx) * c;
                    idx.extend((0..c).map(|ch| Some(base + ch)));
                }
            }
        }
    }
    Ok(SparseMap::from_indices(shape, &[b, oh, ow, 4 * c], &idx))
}

pub fn patch_merge(g: &mut Graph, x: Var, p: &str) -> Result<Var> {
    let map = merge_map(g.shape(x))?;
    let m = g.gather_map(x, Rc::new(map))?;
    let m = layer_norm(g, m, &format!("{p}.ln"))?;
    linear_nobias(g, m, &format!("{p}.red"))
}

/// Stage `s` of view `v`: patch merging (from the second stage on), then
/// `depths[s]` block pairs.
pub fn run_stage(g: &mut Graph, x: Var, cfg: &ModelConfig, v: usize, s: usize) -> Result<Var> {
    let mut x = x;
    if s > 0 {
        x = patch_merge(g, x, &format!("enc.v{v}.s{s}.merge"))?;
    }
    for pair in 0..cfg.depths[s] {
        let (p0, p1) = (block_prefix(v, s, 2 * pair), block_prefix(v, s, 2 * pair + 1));
        x = swin_block_pair(g, x, &p0, &p1, cfg.heads[s], cfg.window)?;
    }
    Ok(x)
}

/// Per-stage outputs of one view branch with no cross-view interaction.
pub fn encode_view(g: &mut Graph, tokens: Var, cfg: &ModelConfig, v: usize) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(cfg.stages());
    let mut x = tokens;
    for s in 0..cfg.stages() {
        x = run_stage(g, x, cfg, v, s)?;
        outs.push(x);
    }
    Ok(outs)
}

/// Plain pre-norm transformer over `[1, N, c]` tokens.
pub fn global_block(g: &mut Graph, x: Var, p: &str, heads: usize) -> Result<Var> {
    let h = layer_norm(g, x, &format!("{p}.ln1"))?;
    let q = linear(g, h, &format!("{p}.attn.q"))?;
    let k = linear(g, h, &format!("{p}.attn.k"))?;
    let v = linear(g, h, &format!("{p}.attn.v"))?;
    let a = multi_head(g, q, k, v, heads, None, None)?;
    let o = linear(g, a.out, &format!("{p}.attn.o"))?;
    let x = g.add(x, o)?;
    mlp_residual(g, x, p)
}

/// High-level feature `f_h[H/pg, W/pg, c_g]` from the middle frame.
pub fn global_encode(g: &mut Graph, clip: Var, cfg: &ModelConfig) -> Result<Var> {
    let [_, h, w, c] = *g.shape(clip) else {
        return Err(CoreError::Invalid(format!("clip must be [T,H,W,C], got {:?}", g.shape(clip))));
    };
    let gc = &cfg.global;
    let frame = g.narrow(clip, 0, cfg.middle_frame(), 1)?;
    let frame = g.reshape(frame, &[h, w, c])?;
    let kw = g.param("enc.global.embed.w")?;
    let kb = g.param("enc.global.embed.b")?;
    let e = g.conv2d(frame, kw, [gc.patch, gc.patch], [0, 0])?;
    let e = g.add_suffix(e, kb)?;
    let (gh, gw) = (h / gc.patch, w / gc.patch);
    let mut x = g.reshape(e, &[1, gh * gw, gc.dim])?;
    for j in 0..gc.depth {
        x = global_block(g, x, &format!("enc.global.b{j}"), gc.heads)?;
    }
    Ok(g.reshape(x, &[gh, gw, gc.dim])?)
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

    #[test]
    fn partition_counts_and_round_trip() {
        let mut g = Graph::new();
        let t = rand(&[2, 8, 8, 3], 1);
        let x = g.constant(t.clone());
        let (w, layout) = window_partition(&mut g, x, 4).unwrap();
        assert_eq!(layout.windows_per_item(), 4);
        assert_eq!(g.shape(w), &[8, 16, 3]);
        let back = window_merge(&mut g, w, &layout).unwrap();
        assert_eq!(g.value(back), &t);
    }

    #[test]
    fn partition_pads_and_merge_strips() {
        let mut g = Graph::new();
        let t = rand(&[1, 6, 6, 2], 2);
        let x = g.constant(t.clone());
        let (w, layout) = window_partition(&mut g, x, 4).unwrap();
        assert_eq!((layout.padded_height, layout.padded_width), (8, 8));
        assert_eq!(g.shape(w), &[4, 16, 2]);
        let back = window_merge(&mut g, w, &layout).unwrap();
        assert_eq!(g.value(back), &t);
    }

    #[test]
    fn window_holds_contiguous_block() {
        let mut g = Graph::new();
        let t = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let x = g.constant(t);
        let (w, _) = window_partition(&mut g, x, 2).unwrap();
        assert_eq!(&g.value(w).data()[..8], &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn roll_then_unroll_is_identity() {
        let mut g = Graph::new();
        let t = rand(&[1, 8, 8, 2], 3);
        let x = g.constant(t.clone());
        let r = g.roll(x, 1, -2).unwrap();
        let r = g.roll(r, 2, -2).unwrap();
        let u = g.roll(r, 1, 2).unwrap();
        let u = g.roll(u, 2, 2).unwrap();
        assert_eq!(g.value(u), &t);
    }

    #[test]
    fn shift_mask_regions() {
        let m = shift_mask(8, 8, 4, 2);
        assert_eq!(m.shape(), &[4, 16, 16]);
        // first window lies inside one region
        assert!(m.data()[..256].iter().all(|&x| x == 0.0));
        // last window mixes four regions: token 0 and token 15 differ
        assert_eq!(m.at(&[3, 0, 15]), MASKED);
        assert_eq!(m.at(&[3, 0, 1]), 0.0);
        assert_eq!(m.at(&[3, 0, 2]), MASKED);
    }

    fn store(decl: impl Fn(&mut Decls)) -> ParamStore {
        let mut d = Decls::default();
        decl(&mut d);
        d.build(11).unwrap()
    }

    #[test]
    fn one_token_window_attends_to_itself() {
        let s = store(|d| declare_block(d, "b", 4, 2, 1, 4));
        let mut g = Graph::with_params(&s);
        let x = g.constant(rand(&[1, 3, 3, 4], 4));
        let a = window_attention(&mut g, x, "b", 2, 1, false).unwrap();
        assert!(g.value(a.weights).data().iter().all(|&w| w == 1.0));
        // output is W_o applied to V of the same token
        let mut g2 = Graph::with_params(&s);
        let x2 = g2.constant(rand(&[1, 3, 3, 4], 4));
        let v = linear(&mut g2, x2, "b.attn.v").unwrap();
        let o = linear(&mut g2, v, "b.attn.o").unwrap();
        assert!(g.value(a.out).max_abs_diff(g2.value(o)) < 1e-12);
    }

    #[test]
    fn stage_shapes() {
        let cfg = ModelConfig::desk();
        let s = store(|d| declare(&cfg, d));
        let mut g = Graph::with_params(&s);
        let x = g.constant(rand(&[3, 8, 8, 16], 5));
        let outs = encode_view(&mut g, x, &cfg, 0).unwrap();
        assert_eq!(g.shape(outs[0]), &[3, 8, 8, 16]);
        assert_eq!(g.shape(outs[1]), &[3, 4, 4, 32]);
    }

    #[test]
    fn global_depth_zero_is_patch_embedding() {
        let mut cfg = ModelConfig::desk();
        cfg.global.depth = 0;
        let s = store(|d| declare(&cfg, d));
        let clip = rand(&[3, 32, 32, 3], 6);
        let mut g = Graph::with_params(&s);
        let c = g.constant(clip.clone());
        let fh = global_encode(&mut g, c, &cfg).unwrap();
        assert_eq!(g.shape(fh), &[4, 4, 32]);
        let w = s.value("enc.global.embed.w").unwrap();
        // token (1, 2), channel 5 by direct summation over the 8x8 patch
        let mut want = 0.0;
        for dy in 0..8 {
            for dx in 0..8 {
                for ch in 0..3 {
                    want += clip.at(&[1, 8 + dy, 16 + dx, ch]) * w.at(&[dy, dx, ch, 5]);
                }
            }
        }
        assert!((g.value(fh).at(&[1, 2, 5]) - want).abs() < 1e-12);
    }
}
