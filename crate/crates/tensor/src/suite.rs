//! Finite-difference checks for every primitive that has a backward rule.
//!
//! Each case builds a scalar from one differentiable input (the other operands
//! are fixed random constants) and contracts the op's output against a fixed
//! random weight tensor, so no gradient coordinate is trivially symmetric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::ops::sample::cell_center;
use crate::tensor::Tensor;

type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

struct Case {
    name: &'static str,
    input: Tensor,
    build: Build,
}

/// Contracts `y` with fixed weights in `[-1, 1)` drawn from `seed`.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::rand_uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $input:expr, |$g:ident, $x:ident| $body:expr) => {{
            let s = seed;
            out.push(Case {
                name: $name,
                input: $input,
                build: Box::new(move |$g: &mut Graph, $x: Var| {
                    let y = $body;
                    weighted_sum($g, y, s)
                }),
            });
        }};
    }

    let other = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let pos = uniform(&[3, 4], 0.5, 2.0, &mut rng);
    let o1 = other.clone();
    case!("add", uniform(&[3, 4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(o1.clone());
        g.add(x, c)?
    });
    let o2 = other.clone();
    case!("sub", uniform(&[3, 4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(o2.clone());
        g.sub(c, x)?
    });
    let o3 = other.clone();
    case!("mul", uniform(&[3, 4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(o3.clone());
        let y = g.mul(x, c)?;
        g.mul(y, x)?
    });
    let p1 = pos.clone();
    case!("div.numerator", uniform(&[3, 4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(p1.clone());
        g.div(x, c)?
    });
    let o4 = other.clone();
    case!("div.denominator", uniform(&[3, 4], 0.5, 2.0, &mut rng), |g, x| {
        let c = g.constant(o4.clone());
        g.div(c, x)?
    });
    let base = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b1 = base.clone();
    case!("add_suffix", uniform(&[3, 4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(b1.clone());
        g.add_suffix(c, x)?
    });
    let b2 = base.clone();
    case!("mul_suffix.rhs", uniform(&[4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(b2.clone());
        g.mul_suffix(c, x)?
    });
    let sfx = uniform(&[4], -1.0, 1.0, &mut rng);
    case!("mul_suffix.lhs", uniform(&[2, 3, 4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(sfx.clone());
        g.mul_suffix(x, c)?
    });
    case!("scale", uniform(&[5], -1.0, 1.0, &mut rng), |g, x| g.scale(x, -1.7));
    case!("add_scalar", uniform(&[5], -1.0, 1.0, &mut rng), |g, x| {
        let y = g.add_scalar(x, 0.3);
        g.mul(y, y)?
    });
    case!("exp", uniform(&[6], -1.0, 1.0, &mut rng), |g, x| g.exp(x));
    case!("log", uniform(&[6], 0.5, 2.0, &mut rng), |g, x| g.log(x));
    case!("sqrt", uniform(&[6], 0.5, 2.0, &mut rng), |g, x| g.sqrt(x));
    case!("tanh", uniform(&[6], -2.0, 2.0, &mut rng), |g, x| g.tanh(x));
    case!("sigmoid", uniform(&[6], -3.0, 3.0, &mut rng), |g, x| g.sigmoid(x));
    case!("gelu", uniform(&[6], -3.0, 3.0, &mut rng), |g, x| g.gelu(x));
    case!("powf", uniform(&[6], 0.5, 2.0, &mut rng), |g, x| g.powf(x, 2.5));
    case!("sum", uniform(&[6], -1.0, 1.0, &mut rng), |g, x| {
        let s = g.sum(x);
        g.mul(s, s)?
    });
    case!("mean", uniform(&[6], -1.0, 1.0, &mut rng), |g, x| {
        let s = g.mean(x);
        g.mul(s, s)?
    });
    case!("sum_axis", uniform(&[2, 3, 4], -1.0, 1.0, &mut rng), |g, x| g.sum_axis(x, 1)?);
    case!("mean_axis", uniform(&[2, 3, 4], -1.0, 1.0, &mut rng), |g, x| g.mean_axis(x, 2)?);
    case!("max_axis", uniform(&[3, 5], -1.0, 1.0, &mut rng), |g, x| g.max_axis(x, 1)?);

    let rhs = uniform(&[4, 5], -1.0, 1.0, &mut rng);
    case!("matmul.lhs", uniform(&[3, 4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(rhs.clone());
        g.matmul(x, c)?
    });
    let lhs = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    case!("matmul.rhs", uniform(&[4, 5], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(lhs.clone());
        g.matmul(c, x)?
    });
    let bl = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    case!("batched_matmul_nt", uniform(&[2, 5, 4], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(bl.clone());
        let y = g.matmul_nt(c, x)?;
        g.matmul(y, x)?
    });

    case!("softmax.last", uniform(&[3, 5], -2.0, 2.0, &mut rng), |g, x| g.softmax(x, 1)?);
    case!("softmax.middle", uniform(&[2, 4, 3], -2.0, 2.0, &mut rng), |g, x| g.softmax(x, 1)?);

    let ln_x = uniform(&[4, 6], -2.0, 2.0, &mut rng);
    let ln_gamma = uniform(&[6], 0.5, 1.5, &mut rng);
    let ln_beta = uniform(&[6], -0.5, 0.5, &mut rng);
    let (gm, bt) = (ln_gamma.clone(), ln_beta.clone());
    case!("layer_norm.x", ln_x.clone(), |g, x| {
        let (a, b) = (g.constant(gm.clone()), g.constant(bt.clone()));
        g.layer_norm(x, a, b)?
    });
    let (xx, bt) = (ln_x.clone(), ln_beta.clone());
    case!("layer_norm.gamma", ln_gamma.clone(), |g, p| {
        let (x, b) = (g.constant(xx.clone()), g.constant(bt.clone()));
        g.layer_norm(x, p, b)?
    });
    let (xx, gm) = (ln_x.clone(), ln_gamma.clone());
    case!("layer_norm.beta", ln_beta.clone(), |g, p| {
        let (x, a) = (g.constant(xx.clone()), g.constant(gm.clone()));
        g.layer_norm(x, a, p)?
    });

    let gn_x = uniform(&[3, 3, 8], -2.0, 2.0, &mut rng);
    let gn_gamma = uniform(&[8], 0.5, 1.5, &mut rng);
    let gn_beta = uniform(&[8], -0.5, 0.5, &mut rng);
    let (gm, bt) = (gn_gamma.clone(), gn_beta.clone());
    case!("group_norm.x", gn_x.clone(), |g, x| {
        let (a, b) = (g.constant(gm.clone()), g.constant(bt.clone()));
        g.group_norm(x, a, b, 4)?
    });
    let (xx, bt) = (gn_x.clone(), gn_beta.clone());
    case!("group_norm.gamma", gn_gamma.clone(), |g, p| {
        let (x, b) = (g.constant(xx.clone()), g.constant(bt.clone()));
        g.group_norm(x, p, b, 4)?
    });
    let (xx, gm) = (gn_x, gn_gamma);
    case!("group_norm.beta", gn_beta, |g, p| {
        let (x, a) = (g.constant(xx.clone()), g.constant(gm.clone()));
        g.group_norm(x, a, p, 4)?
    });

    let cw = uniform(&[2, 3, 3, 2, 3], -1.0, 1.0, &mut rng);
    case!("conv3d.x", uniform(&[3, 5, 4, 2], -1.0, 1.0, &mut rng), |g, x| {
        let w = g.constant(cw.clone());
        g.conv3d(x, w, [1, 2, 1], [1, 1, 1])?
    });
    let cx = uniform(&[3, 5, 4, 2], -1.0, 1.0, &mut rng);
    case!("conv3d.w", uniform(&[2, 3, 3, 2, 3], -1.0, 1.0, &mut rng), |g, w| {
        let x = g.constant(cx.clone());
        g.conv3d(x, w, [1, 1, 2], [0, 1, 1])?
    });
    let c2w = uniform(&[3, 3, 2, 4], -1.0, 1.0, &mut rng);
    case!("conv2d.x", uniform(&[5, 5, 2], -1.0, 1.0, &mut rng), |g, x| {
        let w = g.constant(c2w.clone());
        g.conv2d(x, w, [1, 1], [1, 1])?
    });

    case!("reshape", uniform(&[2, 6], -1.0, 1.0, &mut rng), |g, x| {
        let r = g.reshape(x, &[3, 4])?;
        let m = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64 * 0.1 - 0.3));
        g.matmul(r, m)?
    });
    case!("permute", uniform(&[2, 3, 4], -1.0, 1.0, &mut rng), |g, x| {
        let p = g.permute(x, &[2, 0, 1])?;
        g.mul(p, p)?
    });
    let cat_other = uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
    case!("concat", uniform(&[2, 3, 3], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(cat_other.clone());
        let y = g.concat(&[c, x, x], 1)?;
        g.mul(y, y)?
    });
    case!("narrow", uniform(&[3, 5], -1.0, 1.0, &mut rng), |g, x| g.narrow(x, 1, 1, 3)?);
    case!("split", uniform(&[4, 3], -1.0, 1.0, &mut rng), |g, x| {
        let parts = g.split(x, 0, &[1, 3])?;
        let a = g.repeat_axis(parts[0], 0, 3)?;
        g.mul(a, parts[1])?
    });
    case!("pad", uniform(&[3, 3, 2], -1.0, 1.0, &mut rng), |g, x| g.pad(x, &[(1, 0), (0, 2), (0, 0)])?);
    case!("roll", uniform(&[4, 3], -1.0, 1.0, &mut rng), |g, x| {
        let r = g.roll(x, 0, -2)?;
        g.mul(r, x)?
    });
    case!("repeat_axis", uniform(&[1, 3, 2], -1.0, 1.0, &mut rng), |g, x| g.repeat_axis(x, 0, 3)?);
    case!("avg_pool2d", uniform(&[2, 4, 6, 2], -1.0, 1.0, &mut rng), |g, x| g.avg_pool2d(x, 2)?);
    case!("upsample_bilinear", uniform(&[3, 2, 2], -1.0, 1.0, &mut rng), |g, x| g.upsample_bilinear(x, 7, 5)?);

    let coords = uniform(&[2, 6, 2], -1.15, 1.15, &mut rng);
    case!("grid_sample.x", uniform(&[2, 3, 4, 2], -1.0, 1.0, &mut rng), |g, x| {
        let c = g.constant(coords.clone());
        g.grid_sample(x, c)?
    });
    let field = uniform(&[2, 3, 4, 2], -1.0, 1.0, &mut rng);
    // keep sample points off integer pixel positions, where the
    // interpolant has a kink
    let mut cs = uniform(&[2, 6, 2], -0.9, 0.9, &mut rng);
    for (i, v) in cs.data_mut().iter_mut().enumerate() {
        let n = if i % 2 == 0 { 4 } else { 3 };
        let px = ((*v + 1.0) * n as f64 - 1.0) / 2.0;
        if (px - px.round()).abs() < 0.05 {
            *v = cell_center(0, n) + 0.3 / n as f64 + rng.random_range(0.0..0.1);
        }
    }
    case!("grid_sample.coords", cs, |g, c| {
        let x = g.constant(field.clone());
        g.grid_sample(x, c)?
    });
    out
}

/// Runs every primitive check for one seed.
pub fn primitive_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases(seed)
        .into_iter()
        .map(|c| {
            let o = GradCheckOptions {
                seed: opts.seed ^ seed,
                ..*opts
            };
            Ok((c.name, finite_diff_check(&c.build, &c.input, &o)?))
        })
        .collect()
}
