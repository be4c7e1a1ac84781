//! Robustness perturbations: blockwise JPEG-style quantization and additive
//! Gaussian noise at a target SNR.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vip_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::frequency::{dct2, idct2};

/// Standard JPEG luminance quantization table, row-major.
pub const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    None,
    Jpeg(u32),
    Gaussian { snr_db: f64, seed: u64 },
}

impl Perturbation {
    pub fn apply(&self, clip: &Tensor) -> Result<Tensor> {
        match *self {
            Perturbation::None => Ok(clip.clone()),
            Perturbation::Jpeg(q) => perturb_jpeg(clip, q),
            Perturbation::Gaussian { snr_db, seed } => Ok(perturb_gaussian(clip, snr_db, seed)?.0),
        }
    }
}

/// Quality scale factor: `5000/Q` below 50, `200 - 2Q` otherwise, over 100.
pub fn quality_scale(q: u32) -> f64 {
    let q = q as f64;
    (if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q }) / 100.0
}

pub fn quant_table(q: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&q) {
        return Err(CoreError::Invalid(format!("JPEG quality {q} outside 1..=100")));
    }
    let s = quality_scale(q);
    Ok(LUMA_TABLE.map(|t| (t * s + 0.5).floor().max(1.0)))
}

/// Quantizes one `[H, W]` plane in `[0, 1]` block by block. Partial edge
/// blocks are padded by edge replication.
pub fn jpeg_plane(plane: &Tensor, table: &[f64; 64]) -> Result<Tensor> {
    let [h, w] = *plane.shape() else {
        return Err(CoreError::Invalid(format!("jpeg_plane needs [H,W], got {:?}", plane.shape())));
    };
    let mut out = vec![0.0; h * w];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let block = Tensor::from_fn(&[8, 8], |i| {
                let y = (by + i / 8).min(h - 1);
                let x = (bx + i % 8).min(w - 1);
                plane.data()[y * w + x] * 255.0 - 128.0
            });
            let coef = dct2(&block)?;
            let q = Tensor::from_fn(&[8, 8], |i| (coef.data()[i] / table[i]).round() * table[i]);
            let rec = idct2(&q)?;
            for i in 0..64 {
                let (y, x) = (by + i / 8, bx + i % 8);
                if y < h && x < w {
                    out[y * w + x] = ((rec.data()[i] + 128.0) / 255.0).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(Tensor::new(&[h, w], out)?)
}

/// Applies [`jpeg_plane`] to every frame and channel of `[T, H, W, C]`.
pub fn perturb_jpeg(clip: &Tensor, quality: u32) -> Result<Tensor> {
    let table = quant_table(quality)?;
    let [t, h, w, c] = *clip.shape() else {
        return Err(CoreError::Invalid(format!("clip must be [T,H,W,C], got {:?}", clip.shape())));
    };
    let mut out = clip.clone();
    for f in 0..t {
        for ch in 0..c {
            let idx = |p: usize| ((f * h * w) + p) * c + ch;
            let plane = Tensor::from_fn(&[h, w], |p| clip.data()[idx(p)]);
            let q = jpeg_plane(&plane, &table)?;
            for p in 0..h * w {
                out.data_mut()[idx(p)] = q.data()[p];
            }
        }
    }
    Ok(out)
}

/// Adds white Gaussian noise with power `mean(x^2) / 10^(snr/10)` and clamps
/// to `[0, 1]`. Also returns the SNR measured before clamping.
pub fn perturb_gaussian(clip: &Tensor, snr_db: f64, seed: u64) -> Result<(Tensor, f64)> {
    if !snr_db.is_finite() {
        return Err(CoreError::Invalid(format!("SNR {snr_db} dB is not finite")));
    }
    let signal = clip.data().iter().map(|x| x * x).sum::<f64>() / clip.numel() as f64;
    let std = (signal / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..clip.numel()).map(|_| std * normal.sample(&mut rng)).collect();
    let noise_power = noise.iter().map(|n| n * n).sum::<f64>() / noise.len() as f64;
    let measured = 10.0 * (signal / noise_power).log10();
    let data = clip.data().iter().zip(&noise).map(|(x, n)| (x + n).clamp(0.0, 1.0)).collect();
    Ok((Tensor::new(clip.shape(), data)?, measured))
}

/// Peak SNR in dB for signals in `[0, 1]`; infinite for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.zip_map(b, |x, y| (x - y) * (x - y))?;
    let mse = d.mean();
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
