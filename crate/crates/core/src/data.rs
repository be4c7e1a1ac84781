//! Synthetic forgery clips and their on-disk form.
//!
//! A clip shows a static textured background and a moving textured object.
//! The inpainted version removes the object: every frame's object footprint
//! is refilled with blurred background plus a per-frame brightness flicker.
//! The authentic counterpart keeps the object. Masks mark the middle frame's
//! footprint.
//!
//! On disk a clip is a directory of P6 frames, `manifest.txt` listing them in
//! order, and a P5 `mask.pgm` (255 = inpainted).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vip_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T, H, W, C]` in `[0, 1]`.
    pub clip: Tensor,
    /// `[H, W]` with values in `{0, 1}`.
    pub mask: Tensor,
}

impl Sample {
    pub fn is_inpainted(&self) -> bool {
        self.mask.data().iter().any(|&m| m > 0.5)
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.mean()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inpainted: Vec<Sample>,
    pub authentic: Vec<Sample>,
}

/// Rectangle `[y0, y0 + h) x [x0, x0 + w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    y0: isize,
    x0: isize,
    h: usize,
    w: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (y, x) = (y as isize, x as isize);
        y >= self.y0 && y < self.y0 + self.h as isize && x >= self.x0 && x < self.x0 + self.w as isize
    }

    fn shifted(&self, dy: isize, dx: isize) -> Self {
        Self {
            y0: self.y0 + dy,
            x0: self.x0 + dx,
            ..*self
        }
    }
}

fn quantize(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn texture(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..0.7)).collect();
    let waves: Vec<(f64, f64, f64, Vec<f64>)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.03..0.08),
                rng.random_range(1.0..5.0),
                rng.random_range(1.0..5.0),
                (0..c).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
            )
        })
        .collect();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = base[ch];
                for (a, fy, fx, ph) in &waves {
                    let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                    v += a * (arg + ph[ch]).sin();
                }
                v += rng.random_range(-0.2..0.2);
                out[(y * w + x) * c + ch] = v;
            }
        }
    }
    out
}

/// `(2r+1)^2` box blur with edge clamping.
fn box_blur(img: &[f64], h: usize, w: usize, c: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let r = r as isize;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += img[(yy * w + xx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = s / ((2 * r + 1) * (2 * r + 1)) as f64;
            }
        }
    }
    out
}

/// Side lengths on the `grid` lattice whose area fraction lies in
/// `[0.02, 0.4]`.
fn pick_footprint(h: usize, w: usize, grid: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let max_side = |n: usize| ((n * 5 / 8) / grid) * grid;
    let sides = |n: usize| -> Vec<usize> { (1..).map(|k| k * grid).skip_while(|&s| s < 8).take_while(|&s| s <= max_side(n)).collect() };
    let (hs, ws) = (sides(h), sides(w));
    let ok: Vec<(usize, usize)> = hs
        .iter()
        .flat_map(|&a| ws.iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| {
            let f = (a * b) as f64 / (h * w) as f64;
            (0.02..=0.4).contains(&f)
        })
        .collect();
    if ok.is_empty() {
        return Err(CoreError::Invalid(format!("no mask footprint fits a {h}x{w} frame on a {grid}-pixel grid")));
    }
    Ok(ok[rng.random_range(0..ok.len())])
}

/// One inpainted clip and its authentic counterpart, fully determined by
/// `(seed, index)`.
pub fn generate_pair(cfg: &ModelConfig, seed: u64, index: usize) -> Result<(Sample, Sample)> {
    let (t, h, w, c) = (cfg.frames, cfg.height, cfg.width, cfg.channels);
    let grid = cfg.patch;
    let mut rng = clip_rng(seed, index);
    let bg = texture(h, w, c, &mut rng);
    let blurred = box_blur(&bg, h, w, c, 2);
    let obj = texture(h, w, c, &mut rng);
    let checker: Vec<f64> = (0..c).map(|_| rng.random_range(-0.2..0.2)).collect();

    let (rh, rw) = pick_footprint(h, w, grid, &mut rng)?;
    let y0 = grid * rng.random_range(0..=(h - rh) / grid);
    let x0 = grid * rng.random_range(0..=(w - rw) / grid);
    let footprint = Rect {
        y0: y0 as isize,
        x0: x0 as isize,
        h: rh,
        w: rw,
    };
    let (vy, vx) = (rng.random_range(-3..=3i64) as isize, rng.random_range(-3..=3i64) as isize);
    let mid = cfg.middle_frame() as isize;
    let flicker: Vec<Vec<f64>> = (0..t).map(|_| (0..c).map(|_| rng.random_range(-0.1..0.1)).collect()).collect();

    let mut fake = vec![0.0; t * h * w * c];
    let mut real = vec![0.0; t * h * w * c];
    for f in 0..t {
        let r = footprint.shifted(vy * (f as isize - mid), vx * (f as isize - mid));
        for y in 0..h {
            for x in 0..w {
                let inside = r.contains(y, x);
                let (ly, lx) = ((y as isize - r.y0) as usize, (x as isize - r.x0) as usize);
                for ch in 0..c {
                    let p = (y * w + x) * c + ch;
                    let o = ((f * h + y) * w + x) * c + ch;
                    if inside {
                        let sign = if (ly / 2 + lx / 2) % 2 == 0 { 1.0 } else { -1.0 };
                        real[o] = quantize(obj[(ly * w + lx) * c + ch] + sign * checker[ch]);
                        fake[o] = quantize(blurred[p] + flicker[f][ch]);
                    } else {
                        real[o] = quantize(bg[p]);
                        fake[o] = real[o];
                    }
                }
            }
        }
    }
    let mask = Tensor::from_fn(&[h, w], |i| if footprint.contains(i / w, i % w) { 1.0 } else { 0.0 });
    let shape = [t, h, w, c];
    Ok((
        Sample {
            id: format!("clip_{index:03}"),
            clip: Tensor::new(&shape, fake)?,
            mask,
        },
        Sample {
            id: format!("clip_{index:03}"),
            clip: Tensor::new(&shape, real)?,
            mask: Tensor::zeros(&[h, w]),
        },
    ))
}

pub fn generate_dataset(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(CoreError::Invalid("dataset needs at least one clip".into()));
    }
    let mut inpainted = Vec::with_capacity(n);
    let mut authentic = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = generate_pair(cfg, seed, i)?;
        inpainted.push(a);
        authentic.push(b);
    }
    Ok(Dataset { inpainted, authentic })
}

fn to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CoreError::data(path, e.to_string()))?;
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes an `[H, W, 3]` image in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let [h, w, 3] = *img.shape() else {
        return Err(CoreError::data(path, format!("PPM needs [H,W,3], got {:?}", img.shape())));
    };
    write_pnm(path, "P6", w, h, &to_bytes(img.data()))
}

/// Writes an `[H, W]` plane in `[0, 1]` as binary PGM.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let [h, w] = *img.shape() else {
        return Err(CoreError::data(path, format!("PGM needs [H,W], got {:?}", img.shape())));
    };
    write_pnm(path, "P5", w, h, &to_bytes(img.data()))
}

/// Reads a binary P5/P6 file with maxval 255 as `[H, W]` or `[H, W, 3]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CoreError::data(path, e.to_string()))?;
    let bad = |m: &str| CoreError::data(path, m.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported")));
    }
    let n = w * h * channels;
    let payload = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated payload"))?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let shape = if channels == 1 { vec![h, w] } else { vec![h, w, 3] };
    Ok(Tensor::new(&shape, data)?)
}

fn frame(clip: &Tensor, f: usize) -> Result<Tensor> {
    let [_, h, w, c] = *clip.shape() else {
        unreachable!("clip is rank 4")
    };
    let n = h * w * c;
    Ok(Tensor::new(&[h, w, c], clip.data()[f * n..(f + 1) * n].to_vec())?)
}

pub fn write_clip(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::data(dir, e.to_string()))?;
    let t = s.clip.shape()[0];
    let mut manifest = String::new();
    for f in 0..t {
        let name = format!("frame_{f:03}.ppm");
        write_ppm(&dir.join(&name), &frame(&s.clip, f)?)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    write_pgm(&dir.join("mask.pgm"), &s.mask)
}

pub fn read_clip(dir: &Path) -> Result<Sample> {
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| CoreError::data(&manifest, e.to_string()))?;
    let mut frames = Vec::new();
    for name in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        frames.push(read_pnm(&dir.join(name))?);
    }
    let first = frames.first().ok_or_else(|| CoreError::data(&manifest, "no frames listed"))?;
    let fshape = first.shape().to_vec();
    if fshape.len() != 3 || frames.iter().any(|f| f.shape() != fshape.as_slice()) {
        return Err(CoreError::data(dir, "frames must be same-sized colour images"));
    }
    let mut data = Vec::with_capacity(frames.len() * first.numel());
    for f in &frames {
        data.extend_from_slice(f.data());
    }
    let clip = Tensor::new(&[frames.len(), fshape[0], fshape[1], 3], data)?;
    let mask_path = dir.join("mask.pgm");
    let mask = if mask_path.exists() {
        read_pnm(&mask_path)?.map(|m| if m > 0.5 { 1.0 } else { 0.0 })
    } else {
        Tensor::zeros(&fshape[..2])
    };
    if mask.shape() != &fshape[..2] {
        return Err(CoreError::data(&mask_path, format!("mask {:?} vs frame {:?}", mask.shape(), fshape)));
    }
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Sample { id, clip, mask })
}

/// Writes `inpainted/clip_XXX` and `authentic/clip_XXX` under `dir`.
pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    for (sub, set) in [("inpainted", &d.inpainted), ("authentic", &d.authentic)] {
        for s in set {
            write_clip(&dir.join(sub).join(&s.id), s)?;
        }
    }
    Ok(())
}

fn clip_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CoreError::data(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").exists())
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let load = |sub: &str| -> Result<Vec<Sample>> { clip_dirs(&dir.join(sub))?.iter().map(|p| read_clip(p)).collect() };
    let d = Dataset {
        inpainted: load("inpainted")?,
        authentic: load("authentic")?,
    };
    if d.inpainted.is_empty() {
        return Err(CoreError::data(dir, "no clips under inpainted/"));
    }
    Ok(d)
}
