//! Training loop and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vip_tensor::{param_grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{generate_dataset, generate_pair, read_dataset, Dataset, Sample};
use crate::error::{CoreError, Result};
use crate::model::{forward, predict, Model};
use crate::objectives::{auc, f1_metric, frame_score, miou_metric, total_loss};
use crate::optim::{poly_lr, Sgd};
use crate::perturb::Perturbation;

pub const THRESHOLD: f64 = 0.5;

/// Clips from `data.dir` when set, otherwise generated in memory.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.train.data_dir {
        Some(dir) => read_dataset(dir),
        None => generate_dataset(&cfg.model, cfg.train.clips, cfg.train.data_seed),
    }
}

/// Loss and summed parameter gradients for one clip.
pub fn clip_loss(model: &Model, cfg: &ExperimentConfig, s: &Sample) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::with_params(&model.params);
    let f = forward(&mut g, &model.cfg, &s.clip)?;
    let loss = total_loss(&mut g, f.prediction.prob, &s.mask, &cfg.loss)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), g.param_grads(&grads)))
}

/// Central differences against autodiff for the training loss of a freshly
/// initialized model on one synthetic clip. Zero-initialized tensors are
/// jittered first so that every path carries gradient.
pub fn model_gradcheck(cfg: &ExperimentConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for p in model.params.iter_mut() {
        if p.value.data().iter().all(|&x| x == 0.0) {
            p.value = Tensor::rand_normal(p.value.shape(), 0.05, &mut rng);
        }
    }
    let (sample, _) = generate_pair(&cfg.model, cfg.train.data_seed, 0)?;
    let report = param_grad_check(
        &model.params,
        |g| {
            let f = forward(g, &model.cfg, &sample.clip).map_err(to_tensor_err)?;
            total_loss(g, f.prediction.prob, &sample.mask, &cfg.loss).map_err(to_tensor_err)
        },
        opts,
    )?;
    Ok(report)
}

fn to_tensor_err(e: CoreError) -> vip_tensor::TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => vip_tensor::TensorError::Invalid {
            op: "model loss",
            msg: other.to_string(),
        },
    }
}

pub struct Trainer<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a Dataset,
    pub model: Model,
    pub opt: Sgd,
    /// Next iteration to run.
    pub iter: usize,
    pub log: Vec<String>,
    order: Vec<&'a Sample>,
}

/// Training order: inpainted clips, each followed by its authentic
/// counterpart when enabled.
fn training_order<'a>(cfg: &ExperimentConfig, data: &'a Dataset) -> Vec<&'a Sample> {
    let mut out = Vec::new();
    for (i, s) in data.inpainted.iter().enumerate() {
        out.push(s);
        if cfg.train.authentic {
            out.extend(data.authentic.get(i));
        }
    }
    out
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.inpainted.is_empty() {
            return Err(CoreError::config("training set is empty"));
        }
        Ok(Self {
            cfg,
            data,
            model: Model::new(cfg.model.clone(), cfg.train.seed)?,
            opt: Sgd::new(&cfg.optim),
            iter: 0,
            log: Vec::new(),
            order: training_order(cfg, data),
        })
    }

    pub fn resume(cfg: &'a ExperimentConfig, data: &'a Dataset, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        t.model = Model::from_params(cfg.model.clone(), ckpt.params)?;
        t.opt.set_buffers(ckpt.momentum);
        t.iter = ckpt.iter;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.model.params.clone();
        params.clear_grads();
        Checkpoint {
            iter: self.iter,
            params,
            momentum: self.opt.buffers().clone(),
        }
    }

    /// Indices into the training order for iteration `i`, cycling through
    /// the set.
    pub fn batch(&self, i: usize) -> Vec<usize> {
        let n = self.order.len();
        (0..self.cfg.optim.batch).map(|j| (i * self.cfg.optim.batch + j) % n).collect()
    }

    /// One SGD step on the mean batch loss. Returns that loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.batch(self.iter);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        for &k in &batch {
            let (l, grads) = clip_loss(&self.model, self.cfg, self.order[k])?;
            loss += l * scale;
            for (name, g) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { iter: self.iter, loss });
        }
        for g in sum.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
        self.model.params.set_grads(sum);
        let lr = poly_lr(self.iter, &self.cfg.optim);
        self.opt.step(&mut self.model.params, lr)?;
        self.model.params.clear_grads();
        self.log.push(format!("iter {} loss {:?} lr_enc {:?} lr_dec {:?}", self.iter, loss, lr.0, lr.1));
        self.iter += 1;
        Ok(loss)
    }

    /// Runs until `end` (exclusive), evaluating on the training data every
    /// `train.eval_every` iterations and after the last one.
    pub fn run_until(&mut self, end: usize) -> Result<()> {
        while self.iter < end {
            self.step()?;
            let every = self.cfg.train.eval_every;
            if (every > 0 && self.iter % every == 0) || self.iter == self.cfg.optim.iters {
                let r = evaluate(&self.model, self.data, Perturbation::None)?;
                self.log.push(format!("eval {} {}", self.iter, r.summary()));
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.optim.iters)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipReport {
    pub id: String,
    pub inpainted: bool,
    pub miou: f64,
    pub f1: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipReport>,
    /// Means over inpainted clips.
    pub miou: f64,
    pub f1: f64,
    /// Frame-level AUC, when both classes are present.
    pub auc: Option<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        match self.auc {
            Some(a) => format!("miou {:?} f1 {:?} auc {:?}", self.miou, self.f1, a),
            None => format!("miou {:?} f1 {:?} auc none", self.miou, self.f1),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("clip_id miou f1 frame_score\n");
        for c in &self.clips {
            let kind = if c.inpainted { "inpainted" } else { "authentic" };
            let _ = writeln!(s, "{kind}/{} {:.6} {:.6} {:.6}", c.id, c.miou, c.f1, c.score);
        }
        let auc = self.auc.map_or("none".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(s, "mean {:.6} {:.6} auc={auc}", self.miou, self.f1);
        s
    }
}

fn perturbed(p: Perturbation, clip: &Tensor, index: usize) -> Result<Tensor> {
    match p {
        Perturbation::Gaussian { snr_db, seed } => Perturbation::Gaussian {
            snr_db,
            seed: seed.wrapping_add(index as u64),
        }
        .apply(clip),
        other => other.apply(clip),
    }
}

/// Per-clip mIoU/F1 at 0.5 and frame scores; AUC over inpainted vs
/// authentic clips.
pub fn evaluate(model: &Model, data: &Dataset, perturb: Perturbation) -> Result<EvalReport> {
    let mut clips = Vec::new();
    let all = data.inpainted.iter().map(|s| (s, true)).chain(data.authentic.iter().map(|s| (s, false)));
    for (i, (s, inpainted)) in all.enumerate() {
        let clip = perturbed(perturb, &s.clip, i)?;
        let p = predict(model, &clip)?;
        clips.push(ClipReport {
            id: s.id.clone(),
            inpainted,
            miou: miou_metric(p.data(), s.mask.data(), THRESHOLD),
            f1: f1_metric(p.data(), s.mask.data(), THRESHOLD),
            score: frame_score(p.data()),
        });
    }
    let pos: Vec<&ClipReport> = clips.iter().filter(|c| c.inpainted).collect();
    let n = pos.len().max(1) as f64;
    let miou = pos.iter().map(|c| c.miou).sum::<f64>() / n;
    let f1 = pos.iter().map(|c| c.f1).sum::<f64>() / n;
    let auc = if pos.is_empty() || pos.len() == clips.len() {
        None
    } else {
        let scores: Vec<f64> = clips.iter().map(|c| c.score).collect();
        let labels: Vec<bool> = clips.iter().map(|c| c.inpainted).collect();
        Some(auc(&scores, &labels)?)
    };
    Ok(EvalReport { clips, miou, f1, auc })
}
