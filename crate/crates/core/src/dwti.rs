//! Deformable window cross-attention between adjacent temporal views.
//!
//! Queries come from the larger view; keys and values are bilinearly sampled
//! from the smaller view's matching window at learned offsets around the
//! window's cell centres.

use vip_tensor::{cell_center, Graph, Tensor, Var};

use crate::attention::multi_head;
use crate::config::ModelConfig;
use crate::encoder::{window_merge, window_partition};
use crate::error::{CoreError, Result};
use crate::layers::{linear, linear_nobias, Decls};

pub(crate) fn prefix(s: usize, pair: usize) -> String {
    format!("enc.dwti.s{s}.p{pair}")
}

pub fn declare(cfg: &ModelConfig, d: &mut Decls) {
    if !cfg.dwti.enabled {
        return;
    }
    let c = cfg.dwti.common_dim;
    for s in 0..cfg.stages() {
        for i in 0..cfg.views.len().saturating_sub(1) {
            let p = prefix(s, i);
            let (cs, cl) = (cfg.view_dim(i, s), cfg.view_dim(i + 1, s));
            d.linear(&format!("{p}.align_small"), cs, c, true);
            d.linear(&format!("{p}.align_large"), cl, c, true);
            for n in ["wq", "wk", "wv"] {
                d.linear(&format!("{p}.{n}"), c, c, false);
            }
            d.linear(&format!("{p}.theta1"), c, c / 2, true);
            d.linear(&format!("{p}.theta2"), c / 2, 2, true);
            d.zero_linear(&format!("{p}.proj_back"), c, cl);
        }
    }
}

/// Collapses the temporal axis of both grids by mean and projects each to
/// the common width, giving two `[S, S, c']` maps.
pub fn align_views(g: &mut Graph, small: Var, large: Var, p: &str) -> Result<(Var, Var)> {
    let (ss, sl) = (g.shape(small).to_vec(), g.shape(large).to_vec());
    if ss.len() != 4 || sl.len() != 4 || ss[1..3] != sl[1..3] {
        return Err(CoreError::Invalid(format!("align_views: spatial sides differ, {ss:?} vs {sl:?}")));
    }
    let ms = g.mean_axis(small, 0)?;
    let ml = g.mean_axis(large, 0)?;
    let a = linear(g, ms, &format!("{p}.align_small"))?;
    let b = linear(g, ml, &format!("{p}.align_large"))?;
    Ok((a, b))
}

/// Cell centres of an `m x m` window as `(x, y)` pairs, row-major.
pub fn reference_grid(m: usize) -> Vec<[f64; 2]> {
    (0..m * m).map(|i| [cell_center(i % m, m), cell_center(i / m, m)]).collect()
}

pub struct Deformable {
    /// `[S, S, c']`
    pub out: Var,
    /// Offsets `[K, M*M, 2]` in window-normalized units.
    pub offsets: Var,
    /// Sampling locations, reference grid plus offsets.
    pub coords: Var,
}

/// Deformable cross-attention update for two aligned `[S, S, c']` maps.
pub fn deformable_window_cross_attention(
    g: &mut Graph,
    small: Var,
    large: Var,
    p: &str,
    window: usize,
    max_offset: f64,
    heads: usize,
) -> Result<Deformable> {
    let (ss, sl) = (g.shape(small).to_vec(), g.shape(large).to_vec());
    if ss.len() != 3 || ss != sl {
        return Err(CoreError::Invalid(format!("deformable attention: shapes {ss:?} vs {sl:?}")));
    }
    let (h, w, c) = (ss[0], ss[1], ss[2]);
    let small4 = g.reshape(small, &[1, h, w, c])?;
    let large4 = g.reshape(large, &[1, h, w, c])?;
    let (sw, layout) = window_partition(g, small4, window)?;
    let (lw, _) = window_partition(g, large4, window)?;
    let (k_windows, n) = (layout.windows(), window * window);

    let q = linear_nobias(g, lw, &format!("{p}.wq"))?;
    let t = linear(g, q, &format!("{p}.theta1"))?;
    let t = g.gelu(t);
    let t = linear(g, t, &format!("{p}.theta2"))?;
    let t = g.tanh(t);
    // one window cell spans 2/M in normalized coordinates
    let offsets = g.scale(t, max_offset * 2.0 / window as f64);
    let grid: Vec<f64> = (0..k_windows).flat_map(|_| reference_grid(window).into_iter().flatten()).collect();
    let reference = g.constant(Tensor::new(&[k_windows, n, 2], grid)?);
    let coords = g.add(reference, offsets)?;

    let field = g.reshape(sw, &[k_windows, window, window, c])?;
    let sampled = g.grid_sample(field, coords)?;
    let k = linear_nobias(g, sampled, &format!("{p}.wk"))?;
    let v = linear_nobias(g, sampled, &format!("{p}.wv"))?;
    let att = multi_head(g, q, k, v, heads, None, None)?;
    let merged = window_merge(g, att.out, &layout)?;
    let out = g.reshape(merged, &[h, w, c])?;
    Ok(Deformable { out, offsets, coords })
}

/// Ascending chain over adjacent views at stage `s`: view `i + 1` absorbs a
/// back-projected update computed from the (already updated) view `i`.
pub fn interact_adjacent(g: &mut Graph, views: &mut [Var], cfg: &ModelConfig, s: usize) -> Result<()> {
    if !cfg.dwti.enabled || views.len() < 2 {
        return Ok(());
    }
    for i in 0..views.len() - 1 {
        let p = prefix(s, i);
        let (a, b) = align_views(g, views[i], views[i + 1], &p)?;
        let d = deformable_window_cross_attention(g, a, b, &p, cfg.dwti.window, cfg.dwti.max_offset, cfg.dwti.heads)?;
        let upd = linear(g, d.out, &format!("{p}.proj_back"))?;
        views[i + 1] = g.add_suffix(views[i + 1], upd)?;
    }
    Ok(())
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

    fn store() -> ParamStore {
        let mut d = Decls::default();
        declare(&ModelConfig::desk(), &mut d);
        d.build(3).unwrap()
    }

    #[test]
    fn align_shapes() {
        let s = store();
        let mut g = Graph::with_params(&s);
        let a = g.constant(rand(&[3, 8, 8, 16], 1));
        let b = g.constant(rand(&[1, 8, 8, 24], 2));
        let (x, y) = align_views(&mut g, a, b, "enc.dwti.s0.p0").unwrap();
        assert_eq!(g.shape(x), &[8, 8, 16]);
        assert_eq!(g.shape(y), &[8, 8, 16]);
        let c = g.constant(rand(&[1, 4, 4, 24], 2));
        assert!(align_views(&mut g, a, c, "enc.dwti.s0.p0").is_err());
    }

    #[test]
    fn constant_small_view_gives_its_value_projection() {
        let s = store();
        let mut g = Graph::with_params(&s);
        let small = g.constant(Tensor::full(&[8, 8, 16], 0.3));
        let large = g.constant(rand(&[8, 8, 16], 4));
        let d = deformable_window_cross_attention(&mut g, small, large, "enc.dwti.s0.p0", 4, 1.0, 1).unwrap();
        let wv = s.value("enc.dwti.s0.p0.wv.w").unwrap();
        let col: Vec<f64> = (0..16).map(|j| (0..16).map(|i| 0.3 * wv.at(&[i, j])).sum()).collect();
        let out = g.value(d.out);
        for (i, v) in out.data().iter().enumerate() {
            assert!((v - col[i % 16]).abs() < 1e-12);
        }
    }

    #[test]
    fn offsets_are_bounded() {
        let s = store();
        let mut g = Graph::with_params(&s);
        let small = g.constant(rand(&[8, 8, 16], 5));
        let large = g.constant(rand(&[8, 8, 16], 6).map(|x| 40.0 * x));
        let d = deformable_window_cross_attention(&mut g, small, large, "enc.dwti.s0.p0", 4, 0.7, 1).unwrap();
        let bound = 0.7 * 2.0 / 4.0;
        assert!(g.value(d.offsets).data().iter().all(|o| o.abs() <= bound));
    }

    #[test]
    fn zero_back_projection_leaves_views_unchanged() {
        let cfg = ModelConfig::desk();
        let s = store();
        let mut g = Graph::with_params(&s);
        let vals = [rand(&[3, 8, 8, 16], 7), rand(&[1, 8, 8, 24], 8), rand(&[1, 8, 8, 32], 9)];
        let mut views: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        interact_adjacent(&mut g, &mut views, &cfg, 0).unwrap();
        for (v, t) in views.iter().zip(&vals) {
            assert_eq!(g.value(*v), t);
        }
    }

    #[test]
    fn single_view_is_a_no_op() {
        let cfg = ModelConfig::desk();
        let s = store();
        let mut g = Graph::with_params(&s);
        let x = g.constant(rand(&[3, 8, 8, 16], 10));
        let mut views = vec![x];
        interact_adjacent(&mut g, &mut views, &cfg, 0).unwrap();
        assert_eq!(views, vec![x]);
    }
}
