//! Training losses on the graph and thresholded evaluation metrics.

use vip_tensor::{Graph, Tensor, Var};

use crate::config::LossConfig;
use crate::error::{CoreError, Result};

fn check_same(g: &Graph, m: Var, gt: &Tensor, op: &str) -> Result<()> {
    if g.shape(m) != gt.shape() {
        return Err(CoreError::Invalid(format!("{op}: shape {:?} vs {:?}", g.shape(m), gt.shape())));
    }
    Ok(())
}

/// Soft IoU loss `1 - sum(M G) / sum(M + G - M G)`; 0 when both masks are
/// empty.
pub fn miou_loss(g: &mut Graph, m: Var, gt: &Tensor, eps: f64) -> Result<Var> {
    check_same(g, m, gt, "miou_loss")?;
    let gv = g.constant(gt.clone());
    let inter = g.mul(m, gv)?;
    let union = g.add(m, gv)?;
    let union = g.sub(union, inter)?;
    let i = g.sum(inter);
    let u = g.sum(union);
    if g.value(u).item() < eps {
        let zero = g.scale(i, 0.0);
        return Ok(zero);
    }
    let ratio = g.div(i, u)?;
    Ok(g.rsub_scalar(1.0, ratio))
}

/// Pixel-mean focal loss:
/// `-[a (1-M)^y G log(M+eps) + (1-a) M^y (1-G) log(1-M+eps)]`.
pub fn focal_loss(g: &mut Graph, m: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_same(g, m, gt, "focal_loss")?;
    let pos = g.constant(gt.map(|x| cfg.alpha * x));
    let neg = g.constant(gt.map(|x| (1.0 - cfg.alpha) * (1.0 - x)));
    let one_minus = g.rsub_scalar(1.0, m);
    let lp = g.add_scalar(m, cfg.eps);
    let lp = g.log(lp);
    let ln = g.add_scalar(one_minus, cfg.eps);
    let ln = g.log(ln);
    let wp = g.powf(one_minus, cfg.gamma);
    let wn = g.powf(m, cfg.gamma);
    let a = g.mul(wp, lp)?;
    let a = g.mul(a, pos)?;
    let b = g.mul(wn, ln)?;
    let b = g.mul(b, neg)?;
    let s = g.add(a, b)?;
    let mean = g.mean(s);
    Ok(g.neg(mean))
}

/// `lambda1 * miou_loss + lambda2 * focal_loss`.
pub fn total_loss(g: &mut Graph, m: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let a = miou_loss(g, m, gt, cfg.eps)?;
    let b = focal_loss(g, m, gt, cfg)?;
    let a = g.scale(a, cfg.lambda1);
    let b = g.scale(b, cfg.lambda2);
    Ok(g.add(a, b)?)
}

/// Confusion counts after binarizing `pred > thr` (ground truth `> 0.5`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn counts(pred: &[f64], gt: &[f64], thr: f64) -> Counts {
    let mut c = Counts::default();
    for (&p, &t) in pred.iter().zip(gt) {
        match (p > thr, t > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

/// `TP / (TP + FP + FN)`, 1 when both masks are empty.
pub fn miou_metric(pred: &[f64], gt: &[f64], thr: f64) -> f64 {
    let c = counts(pred, gt, thr);
    let d = c.tp + c.fp + c.fn_;
    if d == 0 {
        1.0
    } else {
        c.tp as f64 / d as f64
    }
}

/// `2 TP / (2 TP + FP + FN)`, 1 when both masks are empty.
pub fn f1_metric(pred: &[f64], gt: &[f64], thr: f64) -> f64 {
    let c = counts(pred, gt, thr);
    let d = 2 * c.tp + c.fp + c.fn_;
    if d == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / d as f64
    }
}

/// Frame-level score: mean pixel probability.
pub fn frame_score(pred: &[f64]) -> f64 {
    pred.iter().sum::<f64>() / pred.len() as f64
}

/// Mann-Whitney AUC: the fraction of (inpainted, authentic) pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], inpainted: &[bool]) -> Result<f64> {
    if scores.len() != inpainted.len() {
        return Err(CoreError::Invalid(format!("{} scores for {} labels", scores.len(), inpainted.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut pos, mut neg) = (0usize, 0usize);
    // sum over positives of (#negatives strictly below + half the tied ones)
    let mut twice = 0usize;
    let mut i = 0;
    let mut neg_below = 0usize;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let p = order[i..j].iter().filter(|&&k| inpainted[k]).count();
        let n = (j - i) - p;
        twice += p * (2 * neg_below + n);
        neg_below += n;
        pos += p;
        neg += n;
        i = j;
    }
    if pos == 0 || neg == 0 {
        return Err(CoreError::Invalid(format!(
            "AUC needs both classes, got {pos} inpainted and {neg} authentic"
        )));
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}
