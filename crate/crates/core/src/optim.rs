//! SGD with momentum and weight decay, two learning-rate groups and poly
//! decay.

use std::collections::BTreeMap;

use vip_tensor::{ParamStore, Tensor};

use crate::config::OptimConfig;
use crate::error::{CoreError, Result};

/// Poly decay from `lr0` to `min_lr`; iterations past the end stay at
/// `min_lr`.
pub fn poly(lr0: f64, iter: usize, cfg: &OptimConfig) -> f64 {
    if iter >= cfg.iters {
        return cfg.min_lr;
    }
    let frac = 1.0 - iter as f64 / cfg.iters as f64;
    (lr0 - cfg.min_lr) * frac.powf(cfg.power) + cfg.min_lr
}

/// `(encoder, decoder)` learning rates at `iter`.
pub fn poly_lr(iter: usize, cfg: &OptimConfig) -> (f64, f64) {
    (poly(cfg.lr_encoder, iter, cfg), poly(cfg.lr_decoder, iter, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
}

pub fn group_of(name: &str) -> Result<Group> {
    if name.starts_with("enc.") {
        Ok(Group::Encoder)
    } else if name.starts_with("dec.") {
        Ok(Group::Decoder)
    } else {
        Err(CoreError::Invalid(format!("parameter {name} belongs to no learning-rate group")))
    }
}

/// `v <- mu v + g + wd theta; theta <- theta - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Tensor>) {
        self.buffers = buffers;
    }

    /// Updates every parameter from its stored gradient. All gradients are
    /// checked before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, lr: (f64, f64)) -> Result<()> {
        for p in params.iter() {
            match &p.grad {
                None => return Err(CoreError::MissingGrad(p.name.clone())),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(CoreError::Invalid(format!(
                        "{}: gradient shape {:?} vs {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => group_of(&p.name)?,
            };
        }
        for p in params.iter_mut() {
            let rate = match group_of(&p.name)? {
                Group::Encoder => lr.0,
                Group::Decoder => lr.1,
            };
            let g = p.grad.as_ref().expect("checked above");
            let v = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (mu, wd) = (self.momentum, self.weight_decay);
            for ((vi, &gi), th) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vi = mu * *vi + gi + wd * *th;
                *th -= rate * *vi;
            }
        }
        Ok(())
    }
}
