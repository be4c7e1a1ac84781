//! Full detector: tokenizer, view branches with interaction, global encoder,
//! frequency pyramid and decoder.

use vip_tensor::{Graph, ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::decoder::{self, Prediction};
use crate::dwti;
use crate::encoder;
use crate::error::{CoreError, Result};
use crate::frequency::frequency_features;
use crate::layers::Decls;
use crate::tokenizer;

/// Every parameter of the model for `cfg`.
pub fn declarations(cfg: &ModelConfig) -> Decls {
    let mut d = Decls::default();
    tokenizer::declare(cfg, &mut d);
    encoder::declare(cfg, &mut d);
    dwti::declare(cfg, &mut d);
    decoder::declare(cfg, &mut d);
    d
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = declarations(&cfg).build(seed)?;
        Ok(Self { cfg, params })
    }

    /// Wraps loaded parameters after checking names and shapes against the
    /// declarations for `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let decls = declarations(&cfg);
        if decls.0.len() != params.len() {
            return Err(CoreError::Invalid(format!(
                "checkpoint has {} tensors, config declares {}",
                params.len(),
                decls.0.len()
            )));
        }
        for d in &decls.0 {
            let p = params.get(&d.name)?;
            if p.value.shape() != d.shape.as_slice() {
                return Err(CoreError::Invalid(format!(
                    "{}: shape {:?}, expected {:?}",
                    d.name,
                    p.value.shape(),
                    d.shape
                )));
            }
        }
        Ok(Self { cfg, params })
    }
}

/// Intermediate values of one forward pass.
pub struct Forward {
    /// Per stage, per view `[T_v, S, S, c]` after interaction.
    pub stages: Vec<Vec<Var>>,
    pub global: Var,
    pub fused: Vec<Var>,
    pub accumulated: Vec<Var>,
    pub frequency_fused: Vec<Var>,
    pub prediction: Prediction,
}

/// Runs the model on `clip[T, H, W, C]`. `g` must carry the model's
/// parameters.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, clip: &Tensor) -> Result<Forward> {
    let want = [cfg.frames, cfg.height, cfg.width, cfg.channels];
    if clip.shape() != want {
        return Err(CoreError::Invalid(format!("clip shape {:?}, expected {want:?}", clip.shape())));
    }
    let x = g.constant(clip.clone());
    let mut views = Vec::with_capacity(cfg.views.len());
    for v in 0..cfg.views.len() {
        views.push(tokenizer::tokenize_view(g, x, cfg, v)?);
    }
    let mut stages = Vec::with_capacity(cfg.stages());
    for s in 0..cfg.stages() {
        for (v, z) in views.iter_mut().enumerate() {
            *z = encoder::run_stage(g, *z, cfg, v, s)?;
        }
        dwti::interact_adjacent(g, &mut views, cfg, s)?;
        stages.push(views.clone());
    }
    let global = encoder::global_encode(g, x, cfg)?;
    let mut fused = Vec::with_capacity(cfg.stages());
    for (s, feats) in stages.iter().enumerate() {
        fused.push(decoder::tff_fuse(g, feats, cfg, s)?);
    }
    let accumulated = decoder::accumulate_deep(g, &fused)?;
    let frequency_fused = if cfg.frequency.enabled {
        let f = frequency_features(clip, cfg)?;
        let mut out = Vec::with_capacity(cfg.stages());
        for (s, &fc) in accumulated.iter().enumerate() {
            out.push(decoder::fuse_frequency(g, fc, &f.pyramid[s], s)?);
        }
        out
    } else {
        accumulated.clone()
    };
    let prediction = decoder::integrate_and_predict(g, &frequency_fused, global, cfg)?;
    Ok(Forward {
        stages,
        global,
        fused,
        accumulated,
        frequency_fused,
        prediction,
    })
}

/// Probability map `[H, W]` for one clip, without keeping the graph.
pub fn predict(model: &Model, clip: &Tensor) -> Result<Tensor> {
    let mut g = Graph::with_params(&model.params);
    let f = forward(&mut g, &model.cfg, clip)?;
    Ok(g.value(f.prediction.prob).clone())
}
