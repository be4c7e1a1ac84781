//! Central-difference verification of autodiff gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check every coordinate up to this many, otherwise a random subset of
    /// this size.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-5,
            max_coords: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate (flat index, or `name[index]` for parameter checks) with
    /// the largest error.
    pub worst: String,
    pub checked: usize,
    pub pass: bool,
    /// Set when the function produced a non-finite value.
    pub failure: Option<String>,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Accum {
    max_rel_err: f64,
    worst: String,
    checked: usize,
    failure: Option<String>,
}

impl Accum {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
            checked: 0,
            failure: None,
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, plus: f64, minus: f64, eps: f64) {
        if !(plus.is_finite() && minus.is_finite()) {
            if self.failure.is_none() {
                self.failure = Some(format!("non-finite value at {}", label()));
            }
            return;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = label();
        }
    }

    fn finish(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            pass: self.failure.is_none() && self.max_rel_err <= tol,
            max_rel_err: self.max_rel_err,
            worst: self.worst,
            checked: self.checked,
            failure: self.failure,
        }
    }
}

fn pick(numel: usize, opts: &GradCheckOptions) -> Vec<usize> {
    if numel <= opts.max_coords {
        (0..numel).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut v = sample(&mut rng, numel, opts.max_coords).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares the autodiff gradient of the scalar built by `f` from input `x`
/// against central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let mut acc = Accum::new();
    if !g.value(loss).item().is_finite() {
        acc.failure = Some("non-finite value at base point".into());
        return Ok(acc.finish(opts.tol));
    }
    let grads = g.backward(loss)?;
    let analytic = grads.get_or_zeros(xv, x.shape());
    for i in pick(x.numel(), opts) {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.eps;
        acc.record(|| i.to_string(), analytic.data()[i], eval(plus)?, eval(minus)?, opts.eps);
    }
    Ok(acc.finish(opts.tol))
}

/// Same check over scalars sampled uniformly from every parameter in `store`.
pub fn param_grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    let mut acc = Accum::new();
    if !g.value(loss).item().is_finite() {
        acc.failure = Some("non-finite value at base point".into());
        return Ok(acc.finish(opts.tol));
    }
    let grads = g.backward(loss)?;
    let named = g.param_grads(&grads);
    drop(g);

    let index: Vec<(&str, usize)> = store.iter().map(|p| (p.name.as_str(), p.value.numel())).collect();
    let total: usize = index.iter().map(|(_, n)| n).sum();
    let mut scratch = store.clone();
    for flat in pick(total, opts) {
        let mut rem = flat;
        let (name, i) = index
            .iter()
            .find_map(|&(name, n)| {
                if rem < n {
                    Some((name, rem))
                } else {
                    rem -= n;
                    None
                }
            })
            .expect("flat index within total");
        let analytic = named.get(name).map_or(0.0, |t| t.data()[i]);
        let orig = store.value(name)?.data()[i];
        scratch.value_mut(name)?.data_mut()[i] = orig + opts.eps;
        let plus = eval(&scratch)?;
        scratch.value_mut(name)?.data_mut()[i] = orig - opts.eps;
        let minus = eval(&scratch)?;
        scratch.value_mut(name)?.data_mut()[i] = orig;
        acc.record(|| format!("{name}[{i}]"), analytic, plus, minus, opts.eps);
    }
    Ok(acc.finish(opts.tol))
}
