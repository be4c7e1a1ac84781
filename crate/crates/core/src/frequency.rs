//! Frequency-assistance features: full-frame DCT band split of the middle
//! frame and its average-pooled pyramid. No learned parameters.

use std::f64::consts::PI;

use vip_tensor::{SparseMap, Tensor};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};

/// Orthonormal DCT-II basis, `d[k][n] = a_k cos(pi (2n + 1) k / 2N)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            d[k * n + i] = a * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    d
}

/// `L x R^T` for `x[h, w]`, or `L^T x R` with `transpose`.
fn sandwich(x: &[f64], h: usize, w: usize, l: &[f64], r: &[f64], transpose: bool) -> Vec<f64> {
    let li = |a: usize, b: usize| if transpose { l[b * h + a] } else { l[a * h + b] };
    let ri = |a: usize, b: usize| if transpose { r[b * w + a] } else { r[a * w + b] };
    let mut tmp = vec![0.0; h * w];
    for u in 0..h {
        for y in 0..h {
            let c = li(u, y);
            for x_ in 0..w {
                tmp[u * w + x_] += c * x[y * w + x_];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            out[u * w + v] = (0..w).map(|x_| tmp[u * w + x_] * ri(v, x_)).sum();
        }
    }
    out
}

fn check_plane(x: &Tensor, op: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        ref s => Err(CoreError::Invalid(format!("{op} needs a non-empty H x W plane, got {s:?}"))),
    }
}

/// Orthonormal 2D DCT-II of an `H x W` plane.
pub fn dct2(x: &Tensor) -> Result<Tensor> {
    let (h, w) = check_plane(x, "dct2")?;
    let out = sandwich(x.data(), h, w, &dct_matrix(h), &dct_matrix(w), false);
    Ok(Tensor::new(&[h, w], out)?)
}

/// Inverse of [`dct2`] (orthonormal DCT-III).
pub fn idct2(x: &Tensor) -> Result<Tensor> {
    let (h, w) = check_plane(x, "idct2")?;
    let out = sandwich(x.data(), h, w, &dct_matrix(h), &dct_matrix(w), true);
    Ok(Tensor::new(&[h, w], out)?)
}

/// Low/mid/high masks over an `H x W` spectrum split on the normalized
/// diagonal index `r = (u + v) / (H - 1 + W - 1)`.
pub fn band_masks(h: usize, w: usize, tau1: f64, tau2: f64) -> Result<[Tensor; 3]> {
    if !(0.0 < tau1 && tau1 < tau2 && tau2 < 1.0) {
        return Err(CoreError::Invalid(format!("band thresholds {tau1}, {tau2} must satisfy 0 < t1 < t2 < 1")));
    }
    if h == 0 || w == 0 {
        return Err(CoreError::Invalid("empty spectrum".into()));
    }
    let denom = (h + w - 2).max(1) as f64;
    let band = |i: usize| {
        let r = ((i / w) + (i % w)) as f64 / denom;
        if r <= tau1 {
            0
        } else if r <= tau2 {
            1
        } else {
            2
        }
    };
    Ok([0, 1, 2].map(|b| Tensor::from_fn(&[h, w], |i| if band(i) == b { 1.0 } else { 0.0 })))
}

/// Frequency features of one clip.
#[derive(Debug, Clone)]
pub struct FrequencyFeatures {
    /// `[H, W, 3C]`, channels ordered band-major (low, mid, high).
    pub base: Tensor,
    /// One map per decoder stage, `[S_l, S_l, 3C]`.
    pub pyramid: Vec<Tensor>,
}

/// Band reconstructions `[low, mid, high]` of one `H x W` plane.
pub fn band_split(plane: &Tensor, tau1: f64, tau2: f64) -> Result<[Tensor; 3]> {
    let (h, w) = check_plane(plane, "band_split")?;
    let coeffs = dct2(plane)?;
    let masks = band_masks(h, w, tau1, tau2)?;
    let mut out = Vec::with_capacity(3);
    for m in &masks {
        out.push(idct2(&coeffs.zip_map(m, |a, b| a * b)?)?);
    }
    Ok(out.try_into().expect("three bands"))
}

/// One frame of `clip[T, H, W, C]` as C separate planes.
pub fn frame_planes(clip: &Tensor, t: usize) -> Result<Vec<Tensor>> {
    let [frames, h, w, c] = *clip.shape() else {
        return Err(CoreError::Invalid(format!("clip must be [T,H,W,C], got {:?}", clip.shape())));
    };
    if t >= frames {
        return Err(CoreError::Invalid(format!("frame {t} out of range for {frames} frames")));
    }
    let d = clip.data();
    Ok((0..c)
        .map(|ch| Tensor::from_fn(&[h, w], |i| d[(t * h * w + i) * c + ch]))
        .collect())
}

/// DCT band features of the middle frame and their pooled pyramid matching
/// each decoder stage side.
pub fn frequency_features(clip: &Tensor, cfg: &ModelConfig) -> Result<FrequencyFeatures> {
    let planes = frame_planes(clip, cfg.middle_frame())?;
    let (h, w, c) = (cfg.height, cfg.width, planes.len());
    let mut base = vec![0.0; h * w * 3 * c];
    for (ch, p) in planes.iter().enumerate() {
        let bands = band_split(p, cfg.frequency.tau1, cfg.frequency.tau2)?;
        for (b, band) in bands.iter().enumerate() {
            for (i, &v) in band.data().iter().enumerate() {
                base[i * 3 * c + b * c + ch] = v;
            }
        }
    }
    let base = Tensor::new(&[h, w, 3 * c], base)?;
    let mut pyramid = Vec::with_capacity(cfg.stages());
    let mut cur = base.clone();
    for s in 0..cfg.stages() {
        let (sh, _) = cfg.stage_side(s);
        while cur.shape()[0] > sh {
            cur = avg_pool2(&cur)?;
        }
        if cur.shape()[0] != sh {
            return Err(CoreError::Invalid(format!("cannot pool {h}x{w} to stage side {sh}")));
        }
        pyramid.push(cur.clone());
    }
    Ok(FrequencyFeatures { base, pyramid })
}

/// 2x2 average pooling of `[H, W, C]`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let map = SparseMap::avg_pool2d(x.shape(), 2)?;
    Ok(Tensor::new(map.out_shape(), map.apply(x.data()))?)
}
