//! Experiment configuration: `key = value` text with dotted keys.
//!
//! Every key has a default (the desk preset). Unknown keys, malformed values
//! and violated divisibility constraints are rejected before any model is
//! built.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::perturb::Perturbation;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwtiConfig {
    pub enabled: bool,
    pub window: usize,
    /// Bound on each offset component, in window cells.
    pub max_offset: f64,
    pub common_dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyConfig {
    pub enabled: bool,
    pub tau1: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub dims: Vec<usize>,
    pub groups: usize,
    pub lk_kernel: usize,
    pub tff_enabled: bool,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub views: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub global: GlobalConfig,
    pub dwti: DwtiConfig,
    pub frequency: FrequencyConfig,
    pub decoder: DecoderConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub min_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub eval_every: usize,
    pub data_dir: Option<PathBuf>,
    /// Clips generated in memory when no data directory is given.
    pub clips: usize,
    pub data_seed: u64,
    /// Interleave the authentic counterparts (empty masks) into training.
    pub authentic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    /// Applied to evaluation clips only.
    pub perturb: Perturbation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            lambda1: 1.0,
            lambda2: 1.0,
            eps: 1e-7,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 0.001,
            lr_decoder: 0.01,
            min_lr: 1e-5,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            iters: 500,
            batch: 4,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eval_every: 50,
            data_dir: None,
            clips: 8,
            data_seed: 0,
            authentic: true,
        }
    }
}

impl ModelConfig {
    /// 32x32 frames, T=3, patch 4, views {1,2,3}, two stages.
    pub fn desk() -> Self {
        Self {
            frames: 3,
            height: 32,
            width: 32,
            channels: 3,
            patch: 4,
            views: vec![1, 2, 3],
            embed_dims: vec![16, 24, 32],
            depths: vec![2, 2],
            heads: vec![2, 4],
            window: 4,
            mlp_ratio: 4,
            global: GlobalConfig {
                patch: 8,
                dim: 32,
                depth: 1,
                heads: 2,
            },
            dwti: DwtiConfig {
                enabled: true,
                window: 4,
                max_offset: 1.0,
                common_dim: 16,
                heads: 1,
            },
            frequency: FrequencyConfig {
                enabled: true,
                tau1: 1.0 / 3.0,
                tau2: 2.0 / 3.0,
            },
            decoder: DecoderConfig {
                dims: vec![16, 32],
                groups: 4,
                lk_kernel: 7,
                tff_enabled: true,
            },
        }
    }

    /// Full-resolution geometry: 224x224 frames, four stages, window 7.
    /// Used for complexity accounting only.
    pub fn full() -> Self {
        Self {
            frames: 3,
            height: 224,
            width: 224,
            channels: 3,
            patch: 4,
            views: vec![1, 2, 3],
            embed_dims: vec![96, 96, 128],
            depths: vec![2, 2, 6, 2],
            heads: vec![4, 8, 16, 32],
            window: 7,
            mlp_ratio: 4,
            global: GlobalConfig {
                patch: 32,
                dim: 768,
                depth: 12,
                heads: 12,
            },
            dwti: DwtiConfig {
                enabled: true,
                window: 7,
                max_offset: 1.0,
                common_dim: 96,
                heads: 1,
            },
            frequency: FrequencyConfig {
                enabled: true,
                tau1: 1.0 / 3.0,
                tau2: 2.0 / 3.0,
            },
            decoder: DecoderConfig {
                dims: vec![64, 128, 256, 512],
                groups: 4,
                lk_kernel: 7,
                tff_enabled: true,
            },
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Token grid side (height, width) at 0-based stage `s`.
    pub fn stage_side(&self, s: usize) -> (usize, usize) {
        (self.height / self.patch >> s, self.width / self.patch >> s)
    }

    /// Channel width of view `v` (0-based) at stage `s`.
    pub fn view_dim(&self, v: usize, s: usize) -> usize {
        self.embed_dims[v] << s
    }

    /// Temporal length of view `v` after tokenization.
    pub fn view_frames(&self, v: usize) -> usize {
        self.frames / self.views[v]
    }

    /// Index of the frame the detection map refers to.
    pub fn middle_frame(&self) -> usize {
        (self.frames - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return err("clip geometry must be positive".into());
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return err(format!("patch {} must divide {}x{}", self.patch, self.height, self.width));
        }
        if self.views.is_empty() {
            return err("at least one view is required".into());
        }
        if self.views.windows(2).any(|w| w[0] >= w[1]) || self.views[0] == 0 {
            return err(format!("views {:?} must be positive and strictly ascending", self.views));
        }
        if *self.views.last().unwrap() > self.frames {
            return err(format!("view {} exceeds clip length {}", self.views.last().unwrap(), self.frames));
        }
        if self.embed_dims.len() != self.views.len() {
            return err(format!("{} embed dims for {} views", self.embed_dims.len(), self.views.len()));
        }
        let k = self.stages();
        if k == 0 || self.depths.contains(&0) {
            return err("every stage needs depth >= 1".into());
        }
        if self.heads.len() != k || self.decoder.dims.len() != k {
            return err(format!(
                "{} stages but {} head counts and {} decoder dims",
                k,
                self.heads.len(),
                self.decoder.dims.len()
            ));
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return err("window and mlp ratio must be positive".into());
        }
        let (h0, w0) = (self.height / self.patch, self.width / self.patch);
        if h0 % (1 << (k - 1)) != 0 || w0 % (1 << (k - 1)) != 0 {
            return err(format!("token grid {h0}x{w0} cannot be halved {} times", k - 1));
        }
        for s in 0..k {
            let (h, w) = self.stage_side(s);
            if h < self.window || w < self.window {
                return err(format!("stage {s} side {h}x{w} is smaller than window {}", self.window));
            }
            for v in 0..self.views.len() {
                let c = self.view_dim(v, s);
                if self.heads[s] == 0 || c % self.heads[s] != 0 {
                    return err(format!("stage {s} view {v}: {} heads do not divide {c}", self.heads[s]));
                }
            }
        }
        let g = &self.global;
        if g.patch == 0 || self.height % g.patch != 0 || self.width % g.patch != 0 {
            return err(format!("global patch {} must divide the frame", g.patch));
        }
        if (self.height / g.patch, self.width / g.patch) != self.stage_side(k - 1) {
            return err(format!(
                "global feature {}x{} does not match deepest stage {:?}",
                self.height / g.patch,
                self.width / g.patch,
                self.stage_side(k - 1)
            ));
        }
        if g.dim == 0 || g.heads == 0 || g.dim % g.heads != 0 {
            return err(format!("global heads {} must divide dim {}", g.heads, g.dim));
        }
        let d = &self.dwti;
        if d.window == 0 || d.common_dim < 2 || d.heads == 0 || d.common_dim % d.heads != 0 {
            return err("dwti window, common_dim and heads must be positive with heads | common_dim".into());
        }
        if !(d.max_offset >= 0.0 && d.max_offset.is_finite()) {
            return err(format!("dwti.max_offset {} must be finite and non-negative", d.max_offset));
        }
        let f = &self.frequency;
        if !(0.0 < f.tau1 && f.tau1 < f.tau2 && f.tau2 < 1.0) {
            return err(format!("frequency thresholds {} < {} must lie in (0, 1)", f.tau1, f.tau2));
        }
        for s in 0..k {
            let (h, w) = self.stage_side(s);
            let r = self.height / h;
            if !r.is_power_of_two() || self.width / w != r {
                return err(format!("frequency pyramid cannot pool {}x{} to {h}x{w}", self.height, self.width));
            }
        }
        let dec = &self.decoder;
        if dec.dims.iter().any(|&c| c == 0 || c % dec.groups.max(1) != 0) || dec.groups == 0 {
            return err(format!("decoder dims {:?} must be divisible by {} groups", dec.dims, dec.groups));
        }
        if dec.lk_kernel % 2 == 0 {
            return err(format!("large kernel {} must be odd", dec.lk_kernel));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            perturb: Perturbation::None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoreError::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CoreError::config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

/// `none`, `jpeg:Q` or `gaussian:DB`.
fn parse_perturb(key: &str, v: &str) -> Result<Perturbation> {
    match v.split_once(':') {
        None if v == "none" => Ok(Perturbation::None),
        Some(("jpeg", q)) => Ok(Perturbation::Jpeg(parse(key, q.trim())?)),
        Some(("gaussian", db)) => Ok(Perturbation::Gaussian {
            snr_db: parse(key, db.trim())?,
            seed: 0,
        }),
        _ => Err(CoreError::config(format!("{key}: expected none, jpeg:Q or gaussian:DB, got {v:?}"))),
    }
}

fn perturb_text(p: &Perturbation) -> String {
    match p {
        Perturbation::None => "none".into(),
        Perturbation::Jpeg(q) => format!("jpeg:{q}"),
        Perturbation::Gaussian { snr_db, .. } => format!("gaussian:{snr_db:?}"),
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "clip.frames" => m.frames = parse(key, v)?,
            "clip.height" => m.height = parse(key, v)?,
            "clip.width" => m.width = parse(key, v)?,
            "clip.channels" => m.channels = parse(key, v)?,
            "encoder.patch" => m.patch = parse(key, v)?,
            "encoder.views" => m.views = parse_list(key, v)?,
            "encoder.dims" => m.embed_dims = parse_list(key, v)?,
            "encoder.depths" => m.depths = parse_list(key, v)?,
            "encoder.heads" => m.heads = parse_list(key, v)?,
            "encoder.window" => m.window = parse(key, v)?,
            "encoder.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "global.patch" => m.global.patch = parse(key, v)?,
            "global.dim" => m.global.dim = parse(key, v)?,
            "global.depth" => m.global.depth = parse(key, v)?,
            "global.heads" => m.global.heads = parse(key, v)?,
            "dwti.enabled" => m.dwti.enabled = parse_bool(key, v)?,
            "dwti.window" => m.dwti.window = parse(key, v)?,
            "dwti.max_offset" => m.dwti.max_offset = parse(key, v)?,
            "dwti.common_dim" => m.dwti.common_dim = parse(key, v)?,
            "dwti.heads" => m.dwti.heads = parse(key, v)?,
            "frequency.enabled" => m.frequency.enabled = parse_bool(key, v)?,
            "frequency.tau1" => m.frequency.tau1 = parse(key, v)?,
            "frequency.tau2" => m.frequency.tau2 = parse(key, v)?,
            "tff.enabled" => m.decoder.tff_enabled = parse_bool(key, v)?,
            "decoder.dims" => m.decoder.dims = parse_list(key, v)?,
            "decoder.groups" => m.decoder.groups = parse(key, v)?,
            "decoder.lk_kernel" => m.decoder.lk_kernel = parse(key, v)?,
            "loss.alpha" => self.loss.alpha = parse(key, v)?,
            "loss.gamma" => self.loss.gamma = parse(key, v)?,
            "loss.lambda1" => self.loss.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = parse(key, v)?,
            "loss.eps" => self.loss.eps = parse(key, v)?,
            "optim.lr_encoder" => self.optim.lr_encoder = parse(key, v)?,
            "optim.lr_decoder" => self.optim.lr_decoder = parse(key, v)?,
            "optim.min_lr" => self.optim.min_lr = parse(key, v)?,
            "optim.power" => self.optim.power = parse(key, v)?,
            "optim.momentum" => self.optim.momentum = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.iters" => self.optim.iters = parse(key, v)?,
            "optim.batch" => self.optim.batch = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.authentic" => self.train.authentic = parse_bool(key, v)?,
            "data.dir" => self.train.data_dir = Some(PathBuf::from(v)),
            "data.clips" => self.train.clips = parse(key, v)?,
            "data.seed" => self.train.data_seed = parse(key, v)?,
            "perturb" => self.perturb = parse_perturb(key, v)?,
            _ => return Err(CoreError::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let mut e = vec![
            ("clip.frames", m.frames.to_string()),
            ("clip.height", m.height.to_string()),
            ("clip.width", m.width.to_string()),
            ("clip.channels", m.channels.to_string()),
            ("encoder.patch", m.patch.to_string()),
            ("encoder.views", list(&m.views)),
            ("encoder.dims", list(&m.embed_dims)),
            ("encoder.depths", list(&m.depths)),
            ("encoder.heads", list(&m.heads)),
            ("encoder.window", m.window.to_string()),
            ("encoder.mlp_ratio", m.mlp_ratio.to_string()),
            ("global.patch", m.global.patch.to_string()),
            ("global.dim", m.global.dim.to_string()),
            ("global.depth", m.global.depth.to_string()),
            ("global.heads", m.global.heads.to_string()),
            ("dwti.enabled", m.dwti.enabled.to_string()),
            ("dwti.window", m.dwti.window.to_string()),
            ("dwti.max_offset", format!("{:?}", m.dwti.max_offset)),
            ("dwti.common_dim", m.dwti.common_dim.to_string()),
            ("dwti.heads", m.dwti.heads.to_string()),
            ("frequency.enabled", m.frequency.enabled.to_string()),
            ("frequency.tau1", format!("{:?}", m.frequency.tau1)),
            ("frequency.tau2", format!("{:?}", m.frequency.tau2)),
            ("tff.enabled", m.decoder.tff_enabled.to_string()),
            ("decoder.dims", list(&m.decoder.dims)),
            ("decoder.groups", m.decoder.groups.to_string()),
            ("decoder.lk_kernel", m.decoder.lk_kernel.to_string()),
            ("loss.alpha", format!("{:?}", self.loss.alpha)),
            ("loss.gamma", format!("{:?}", self.loss.gamma)),
            ("loss.lambda1", format!("{:?}", self.loss.lambda1)),
            ("loss.lambda2", format!("{:?}", self.loss.lambda2)),
            ("loss.eps", format!("{:?}", self.loss.eps)),
            ("optim.lr_encoder", format!("{:?}", self.optim.lr_encoder)),
            ("optim.lr_decoder", format!("{:?}", self.optim.lr_decoder)),
            ("optim.min_lr", format!("{:?}", self.optim.min_lr)),
            ("optim.power", format!("{:?}", self.optim.power)),
            ("optim.momentum", format!("{:?}", self.optim.momentum)),
            ("optim.weight_decay", format!("{:?}", self.optim.weight_decay)),
            ("optim.iters", self.optim.iters.to_string()),
            ("optim.batch", self.optim.batch.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.eval_every", self.train.eval_every.to_string()),
            ("train.authentic", self.train.authentic.to_string()),
        ];
        if let Some(d) = &self.train.data_dir {
            e.push(("data.dir", d.display().to_string()));
        }
        e.push(("data.clips", self.train.clips.to_string()));
        e.push(("data.seed", self.train.data_seed.to_string()));
        e.push(("perturb", perturb_text(&self.perturb)));
        e
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses config text on top of the desk defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CoreError::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::data(path, e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let l = &self.loss;
        if !(l.alpha > 0.0 && l.alpha < 1.0) || l.gamma < 0.0 || l.lambda1 < 0.0 || l.lambda2 < 0.0 || l.eps <= 0.0 {
            return Err(CoreError::config(format!("invalid loss settings {l:?}")));
        }
        let o = &self.optim;
        if o.batch == 0 || o.iters == 0 || o.power <= 0.0 || o.min_lr < 0.0 || !(0.0..1.0).contains(&o.momentum) {
            return Err(CoreError::config(format!("invalid optimizer settings {o:?}")));
        }
        match self.perturb {
            Perturbation::Jpeg(q) if !(1..=100).contains(&q) => {
                return Err(CoreError::config(format!("JPEG quality {q} outside 1..=100")));
            }
            Perturbation::Gaussian { snr_db, .. } if !snr_db.is_finite() => {
                return Err(CoreError::config(format!("SNR {snr_db} dB is not finite")));
            }
            _ => {}
        }
        if self.train.clips == 0 && self.train.data_dir.is_none() {
            return Err(CoreError::config("data.clips must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_full_presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.dwti.enabled = false;
        cfg.optim.lr_decoder = 0.05;
        cfg.train.data_dir = Some("clips".into());
        cfg.perturb = Perturbation::Jpeg(70);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = ExperimentConfig::parse("dwti.enable = true").unwrap_err();
        assert!(e.to_string().contains("unknown key"), "{e}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = ExperimentConfig::parse("# desk\n\n dwti.enabled = false # off\n").unwrap();
        assert!(!cfg.model.dwti.enabled);
    }

    #[test]
    fn divisibility_checked() {
        assert!(ExperimentConfig::parse("encoder.patch = 5").is_err());
        assert!(ExperimentConfig::parse("encoder.heads = 3,4").is_err());
        assert!(ExperimentConfig::parse("encoder.views = 2,1,3").is_err());
        assert!(ExperimentConfig::parse("encoder.window = 8").is_err());
        assert!(ExperimentConfig::parse("global.patch = 4").is_err());
        assert!(ExperimentConfig::parse("perturb = jpeg:0").is_err());
        assert!(ExperimentConfig::parse("perturb = blur:3").is_err());
    }

    #[test]
    fn middle_frame_for_odd_and_even_lengths() {
        let mut m = ModelConfig::desk();
        m.frames = 3;
        assert_eq!(m.middle_frame(), 1);
        m.frames = 4;
        assert_eq!(m.middle_frame(), 1);
        m.frames = 1;
        assert_eq!(m.middle_frame(), 0);
    }
}
