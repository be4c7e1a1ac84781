//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vip_core::dwti::deformable_window_cross_attention;
use vip_core::encoder::{swin_block_pair, window_attention};
use vip_core::model::declarations;
use vip_core::ModelConfig;
use vip_tensor::{Graph, ParamStore, Tensor};

/// `(tp, fp, fn)` by explicit pixel loop.
pub fn brute_counts(pred: &[f64], gt: &[f64], thr: f64) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for i in 0..pred.len() {
        let p = pred[i] > thr;
        let t = gt[i] > 0.5;
        if p && t {
            tp += 1;
        }
        if p && !t {
            fp += 1;
        }
        if !p && t {
            fn_ += 1;
        }
    }
    (tp, fp, fn_)
}

pub fn brute_miou(pred: &[f64], gt: &[f64], thr: f64) -> f64 {
    let (tp, fp, fn_) = brute_counts(pred, gt, thr);
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fn_) as f64
    }
}

pub fn brute_f1(pred: &[f64], gt: &[f64], thr: f64) -> f64 {
    let (tp, fp, fn_) = brute_counts(pred, gt, thr);
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Probability that a random positive outscores a random negative, by
/// enumerating every pair.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Scalar focal term for one pixel.
pub fn focal_scalar(p: f64, y: f64, alpha: f64, gamma: f64, eps: f64) -> f64 {
    -(alpha * (1.0 - p).powf(gamma) * y * (p + eps).ln() + (1.0 - alpha) * p.powf(gamma) * (1.0 - y) * (1.0 - p + eps).ln())
}

pub fn bce(p: f64, y: f64, eps: f64) -> f64 {
    -(y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln())
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let c = *t.shape().last().unwrap();
    &t.data()[i * c..(i + 1) * c]
}

fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    (0..o).map(|b| (0..i).map(|a| x[a] * w.data()[a * o + b]).sum()).collect()
}

/// Plain windowed cross-attention on `[S, S, c]` maps: queries from `large`,
/// keys and values from `small` at the same window's grid cells. No
/// sampling, no padding (S must be a multiple of the window).
pub fn window_cross_attention(
    small: &Tensor,
    large: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    window: usize,
    heads: usize,
) -> Tensor {
    let (s, c) = (small.shape()[0], small.shape()[2]);
    let d = c / heads;
    let mut out = vec![0.0; s * s * c];
    for wy in (0..s).step_by(window) {
        for wx in (0..s).step_by(window) {
            let cells: Vec<usize> = (0..window * window)
                .map(|n| (wy + n / window) * s + wx + n % window)
                .collect();
            let keys: Vec<Vec<f64>> = cells.iter().map(|&j| project(row(small, j), wk)).collect();
            let vals: Vec<Vec<f64>> = cells.iter().map(|&j| project(row(small, j), wv)).collect();
            for &i in &cells {
                let q = project(row(large, i), wq);
                for h in 0..heads {
                    let r = h * d..(h + 1) * d;
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for ch in r.clone() {
                        out[i * c + ch] = e.iter().zip(&vals).map(|(w, v)| w / z * v[ch]).sum();
                    }
                }
            }
        }
    }
    Tensor::new(&[s, s, c], out).unwrap()
}

pub fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn desk_params(seed: u64) -> ParamStore {
    declarations(&ModelConfig::desk()).build(seed).unwrap()
}

fn zero(store: &mut ParamStore, name: &str) {
    let p = store.value_mut(name).unwrap();
    *p = Tensor::zeros(p.shape());
}

/// Max deviation from the input of the first encoder block pair once the
/// residual branches' output layers are zeroed.
pub fn neutral_pair_error(seed: u64, t: usize, side: usize) -> f64 {
    let mut s = desk_params(seed);
    for b in ["enc.v0.s0.b0", "enc.v0.s0.b1"] {
        for l in ["attn.o", "mlp.fc2"] {
            zero(&mut s, &format!("{b}.{l}.w"));
            zero(&mut s, &format!("{b}.{l}.b"));
        }
    }
    let mut g = Graph::with_params(&s);
    let x0 = rand(&[t, side, side, 16], seed + 1);
    let x = g.constant(x0.clone());
    let y = swin_block_pair(&mut g, x, "enc.v0.s0.b0", "enc.v0.s0.b1", 2, 4).unwrap();
    g.value(y).max_abs_diff(&x0)
}

/// Largest attention mass any shifted-window query puts on tokens that were
/// not its neighbours before the cyclic shift.
pub fn cross_region_mass(seed: u64) -> f64 {
    let s = desk_params(seed);
    let (side, m, shift) = (8usize, 4usize, 2usize);
    let mut g = Graph::with_params(&s);
    // two visually distinct regions so that unmasked attention would mix them
    let x0 = Tensor::from_fn(&[1, side, side, 16], |i| {
        let p = i / 16;
        let (y, x) = (p / side, p % side);
        if y < side / 2 && x < side / 2 {
            5.0
        } else {
            -5.0 + 0.01 * (i % 7) as f64
        }
    });
    let x = g.constant(x0);
    let a = window_attention(&mut g, x, "enc.v0.s0.b1", 2, m, true).unwrap();
    let w = g.value(a.weights);
    let [nw, heads, n, _] = *w.shape() else { panic!() };
    let per_side = side / m;
    // tokens in the rolled grid that wrapped around an edge
    let wrapped = |r: usize| r + shift >= side;
    let mut worst: f64 = 0.0;
    for win in 0..nw {
        let (wy, wx) = (win / per_side, win % per_side);
        let label = |t: usize| {
            let (y, x) = (wy * m + t / m, wx * m + t % m);
            (wrapped(y), wrapped(x))
        };
        for h in 0..heads {
            for i in 0..n {
                let own: f64 = (0..n).filter(|&j| label(j) == label(i)).map(|j| w.at(&[win, h, i, j])).sum();
                worst = worst.max((own - 1.0).abs());
            }
        }
    }
    worst
}

/// Deformable cross-attention with zeroed offset networks against the loop
/// reference. Returns the max abs difference, or infinity if any offset is
/// non-zero.
pub fn zero_offset_error(seed: u64, heads: usize) -> f64 {
    let mut s = desk_params(seed);
    for n in ["theta1", "theta2"] {
        zero(&mut s, &format!("enc.dwti.s0.p0.{n}.w"));
        zero(&mut s, &format!("enc.dwti.s0.p0.{n}.b"));
    }
    let small = rand(&[8, 8, 16], seed + 7);
    let large = rand(&[8, 8, 16], seed + 8);
    let mut g = Graph::with_params(&s);
    let (a, b) = (g.constant(small.clone()), g.constant(large.clone()));
    let d = deformable_window_cross_attention(&mut g, a, b, "enc.dwti.s0.p0", 4, 1.0, heads).unwrap();
    if g.value(d.offsets).data().iter().any(|&o| o != 0.0) {
        return f64::INFINITY;
    }
    let p = |n: &str| s.value(&format!("enc.dwti.s0.p0.{n}.w")).unwrap();
    let want = window_cross_attention(&small, &large, p("wq"), p("wk"), p("wv"), 4, heads);
    g.value(d.out).max_abs_diff(&want)
}

/// Cells whose output changed when everything but the top-left 4x4 window of
/// the small map is perturbed, with offsets bounded below half a cell.
pub fn locality_violations(seed: u64) -> Vec<usize> {
    let s = desk_params(seed);
    let small = rand(&[8, 8, 16], seed + 1);
    let large = rand(&[8, 8, 16], seed + 2);
    let other = Tensor::from_fn(&[8, 8, 16], |i| {
        let p = i / 16;
        if p / 8 < 4 && p % 8 < 4 {
            small.data()[i]
        } else {
            small.data()[i] + 3.0
        }
    });
    let run = |sm: &Tensor| {
        let mut g = Graph::with_params(&s);
        let (a, b) = (g.constant(sm.clone()), g.constant(large.clone()));
        let d = deformable_window_cross_attention(&mut g, a, b, "enc.dwti.s0.p0", 4, 0.4, 1).unwrap();
        g.value(d.out).clone()
    };
    let (x, y) = (run(&small), run(&other));
    (0..64)
        .filter(|&p| {
            let inside = p / 8 < 4 && p % 8 < 4;
            let same = (0..16).all(|c| x.data()[p * 16 + c] == y.data()[p * 16 + c]);
            same != inside
        })
        .collect()
}
