//! Tubelet tokenization: one strided 3D convolution per temporal view.

use vip_tensor::{Graph, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::layers::Decls;

/// `floor(T/t) * floor(H/h) * floor(W/w)`.
pub fn tubelet_count(frames: usize, height: usize, width: usize, t: usize, h: usize, w: usize) -> Result<usize> {
    if t == 0 || h == 0 || w == 0 {
        return Err(CoreError::Invalid("tubelet size must be positive".into()));
    }
    if t > frames || h > height || w > width {
        return Err(CoreError::Invalid(format!(
            "tubelet {t}x{h}x{w} larger than clip {frames}x{height}x{width}"
        )));
    }
    Ok((frames / t) * (height / h) * (width / w))
}

pub(crate) fn prefix(view: usize) -> String {
    format!("enc.v{view}.embed")
}

pub fn declare(cfg: &ModelConfig, d: &mut Decls) {
    for (v, &t) in cfg.views.iter().enumerate() {
        d.conv(&prefix(v), &[t, cfg.patch, cfg.patch], cfg.channels, cfg.embed_dims[v]);
    }
}

/// Tokens `[floor(T/t), H/p, W/p, c_v]` of view `v` for `clip[T, H, W, C]`.
/// Trailing frames that do not fill a tubelet are dropped.
pub fn tokenize_view(g: &mut Graph, clip: Var, cfg: &ModelConfig, v: usize) -> Result<Var> {
    let t = cfg.views[v];
    let p = cfg.patch;
    let w = g.param(&format!("{}.w", prefix(v)))?;
    let b = g.param(&format!("{}.b", prefix(v)))?;
    let ks = g.shape(w).to_vec();
    if ks[..3] != [t, p, p] || ks[3] != g.shape(clip)[3] {
        return Err(CoreError::Invalid(format!(
            "kernel {ks:?} does not match view {t} with patch {p} on clip {:?}",
            g.shape(clip)
        )));
    }
    let z = g.conv3d(clip, w, [t, p, p], [0, 0, 0])?;
    Ok(g.add_suffix(z, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use vip_tensor::{ParamStore, Tensor};

    #[test]
    fn counts() {
        assert_eq!(tubelet_count(3, 224, 224, 1, 4, 4).unwrap(), 9408);
        assert_eq!(tubelet_count(3, 224, 224, 3, 4, 4).unwrap(), 3136);
        assert_eq!(tubelet_count(3, 32, 32, 2, 4, 4).unwrap(), 64);
        assert!(tubelet_count(3, 32, 32, 0, 4, 4).is_err());
    }

    fn store(cfg: &ModelConfig) -> ParamStore {
        let mut d = Decls::default();
        declare(cfg, &mut d);
        d.build(1).unwrap()
    }

    #[test]
    fn temporal_axes_follow_floor() {
        let cfg = ModelConfig::desk();
        let s = store(&cfg);
        let mut g = Graph::with_params(&s);
        let clip = g.constant(Tensor::full(&[3, 32, 32, 3], 0.5));
        let lens: Vec<usize> = (0..3)
            .map(|v| {
                let z = tokenize_view(&mut g, clip, &cfg, v).unwrap();
                let sh = g.shape(z);
                assert_eq!(sh[1..], [8, 8, cfg.embed_dims[v]]);
                assert_eq!(sh.iter().take(3).product::<usize>(), tubelet_count(3, 32, 32, cfg.views[v], 4, 4).unwrap());
                sh[0]
            })
            .collect();
        assert_eq!(lens, vec![3, 1, 1]);
    }

    #[test]
    fn averaging_kernel_on_constant_clip() {
        let cfg = ModelConfig::desk();
        let mut s = store(&cfg);
        let n = (2 * 4 * 4 * 3) as f64;
        *s.value_mut("enc.v1.embed.w").unwrap() = Tensor::full(&[2, 4, 4, 3, 24], 1.0 / n);
        let mut g = Graph::with_params(&s);
        let clip = g.constant(Tensor::full(&[3, 32, 32, 3], 0.7));
        let z = tokenize_view(&mut g, clip, &cfg, 1).unwrap();
        assert!(g.value(z).data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn kernel_view_mismatch_rejected() {
        let cfg = ModelConfig::desk();
        let mut s = store(&cfg);
        *s.value_mut("enc.v0.embed.w").unwrap() = Tensor::zeros(&[2, 4, 4, 3, 16]);
        let mut g = Graph::with_params(&s);
        let clip = g.constant(Tensor::zeros(&[3, 32, 32, 3]));
        assert!(tokenize_view(&mut g, clip, &cfg, 0).is_err());
    }

    #[test]
    fn linear_with_zero_bias() {
        let cfg = ModelConfig::desk();
        let s = store(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c1 = Tensor::rand_uniform(&[3, 32, 32, 3], 0.0, 1.0, &mut rng);
        let c2 = Tensor::rand_uniform(&[3, 32, 32, 3], 0.0, 1.0, &mut rng);
        let (a, b) = (0.3, -1.7);
        let mix = c1.zip_map(&c2, |x, y| a * x + b * y).unwrap();
        let run = |c: &Tensor| {
            let mut g = Graph::with_params(&s);
            let x = g.constant(c.clone());
            let z = tokenize_view(&mut g, x, &cfg, 2).unwrap();
            g.value(z).clone()
        };
        let lhs = run(&mix);
        let rhs = run(&c1).zip_map(&run(&c2), |x, y| a * x + b * y).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }
}
