//! Analytic parameter and FLOP counts.
//!
//! FLOPs count the multiply-accumulates of linear layers, convolutions,
//! attention products and the DCT sandwiches, two FLOPs each. Norms,
//! activations, pooling, resampling and bias additions are ignored.

use std::fmt::Write as _;

use crate::config::ModelConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Complexity {
    pub entries: Vec<Entry>,
}

impl Complexity {
    pub fn params(&self) -> usize {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    fn add(&mut self, name: impl Into<String>, params: usize, flops: u64) {
        self.entries.push(Entry {
            name: name.into(),
            params,
            flops,
        });
    }

    /// Dense layer applied to `n` tokens.
    fn linear(&mut self, name: impl Into<String>, n: usize, i: usize, o: usize, bias: bool) {
        self.add(name, i * o + if bias { o } else { 0 }, 2 * (n * i * o) as u64);
    }

    /// Convolution with `k` kernel elements over `positions` outputs, plus
    /// bias.
    fn conv(&mut self, name: impl Into<String>, positions: usize, k: usize, ci: usize, co: usize) {
        self.add(name, k * ci * co + co, 2 * (positions * k * ci * co) as u64);
    }

    fn norm(&mut self, name: impl Into<String>, c: usize) {
        self.add(name, 2 * c, 0);
    }

    /// Score and weighted-sum products for `windows` groups of `nq` queries
    /// over `nk` keys of width `c`.
    fn attention(&mut self, name: impl Into<String>, windows: usize, nq: usize, nk: usize, c: usize) {
        self.add(name, 0, 4 * (windows * nq * nk * c) as u64);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("module params flops\n");
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {}", e.name, e.params, e.flops);
        }
        let _ = writeln!(
            s,
            "total {} {} ({:.4} M params, {:.4} GFLOPs)",
            self.params(),
            self.flops(),
            self.params() as f64 / 1e6,
            self.flops() as f64 / 1e9
        );
        s
    }
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Pre-norm block: attention over `windows` groups of `nk` tokens, then a
/// `ratio`-wide MLP. `n` tokens in total, `n_att` after window padding.
#[allow(clippy::too_many_arguments)]
fn block(out: &mut Complexity, p: &str, n: usize, n_att: usize, windows: usize, nk: usize, c: usize, ratio: usize) {
    out.norm(format!("{p}.ln1"), c);
    for m in ["q", "k", "v", "o"] {
        out.linear(format!("{p}.attn.{m}"), n_att, c, c, true);
    }
    out.attention(format!("{p}.attn.scores"), windows, nk, nk, c);
    out.norm(format!("{p}.ln2"), c);
    out.linear(format!("{p}.mlp.fc1"), n, c, ratio * c, true);
    out.linear(format!("{p}.mlp.fc2"), n, ratio * c, c, true);
}

pub fn count_params_flops(cfg: &ModelConfig) -> Result<Complexity> {
    cfg.validate()?;
    let mut out = Complexity::default();
    let (h, w, ch, p) = (cfg.height, cfg.width, cfg.channels, cfg.patch);

    for (v, &t) in cfg.views.iter().enumerate() {
        let n = cfg.view_frames(v) * (h / p) * (w / p);
        out.conv(format!("enc.v{v}.embed"), n, t * p * p, ch, cfg.embed_dims[v]);
    }

    let m = cfg.window;
    for v in 0..cfg.views.len() {
        let b = cfg.view_frames(v);
        for s in 0..cfg.stages() {
            let c = cfg.view_dim(v, s);
            let (sh, sw) = cfg.stage_side(s);
            if s > 0 {
                let pre = format!("enc.v{v}.s{s}.merge");
                out.norm(format!("{pre}.ln"), 2 * c);
                out.linear(format!("{pre}.red"), b * sh * sw, 2 * c, c, false);
            }
            let (ph, pw) = (round_up(sh, m), round_up(sw, m));
            let windows = b * (ph / m) * (pw / m);
            for j in 0..2 * cfg.depths[s] {
                let pre = format!("enc.v{v}.s{s}.b{j}");
                block(&mut out, &pre, b * sh * sw, b * ph * pw, windows, m * m, c, cfg.mlp_ratio);
                let side = 2 * m - 1;
                out.add(format!("{pre}.attn.rpb"), side * side * cfg.heads[s], 0);
            }
        }
    }

    let g = &cfg.global;
    let ng = (h / g.patch) * (w / g.patch);
    out.conv("enc.global.embed", ng, g.patch * g.patch, ch, g.dim);
    for j in 0..g.depth {
        block(&mut out, &format!("enc.global.b{j}"), ng, ng, 1, ng, g.dim, cfg.mlp_ratio);
    }

    if cfg.dwti.enabled {
        let d = &cfg.dwti;
        let c = d.common_dim;
        let n = d.window * d.window;
        for s in 0..cfg.stages() {
            let (sh, sw) = cfg.stage_side(s);
            let (ph, pw) = (round_up(sh, d.window), round_up(sw, d.window));
            let (np, windows) = (ph * pw, (ph / d.window) * (pw / d.window));
            for i in 0..cfg.views.len().saturating_sub(1) {
                let pre = format!("enc.dwti.s{s}.p{i}");
                let (cs, cl) = (cfg.view_dim(i, s), cfg.view_dim(i + 1, s));
                out.linear(format!("{pre}.align_small"), sh * sw, cs, c, true);
                out.linear(format!("{pre}.align_large"), sh * sw, cl, c, true);
                for m in ["wq", "wk", "wv"] {
                    out.linear(format!("{pre}.{m}"), np, c, c, false);
                }
                out.linear(format!("{pre}.theta1"), np, c, c / 2, true);
                out.linear(format!("{pre}.theta2"), np, c / 2, 2, true);
                out.attention(format!("{pre}.scores"), windows, n, n, c);
                out.linear(format!("{pre}.proj_back"), sh * sw, c, cl, true);
            }
        }
    }

    let dims = &cfg.decoder.dims;
    let k = cfg.stages();
    let fc = 3 * ch;
    let longest = (0..cfg.views.len()).map(|v| cfg.view_frames(v)).max().unwrap_or(1);
    if cfg.frequency.enabled {
        let sandwich = 2 * (h * h * w + h * w * w) as u64;
        // one forward and three inverse transforms per channel
        out.add("freq.dct", 0, 4 * ch as u64 * sandwich);
    }
    for s in 0..k {
        let (sh, sw) = cfg.stage_side(s);
        let n = sh * sw;
        let cl = dims[s];
        let cin: usize = (0..cfg.views.len()).map(|v| cfg.view_dim(v, s)).sum();
        if cfg.decoder.tff_enabled {
            out.conv(format!("dec.tff.s{s}.conv"), longest * n, 27, cin, cl);
            out.norm(format!("dec.tff.s{s}.gn"), cl);
        } else {
            out.linear(format!("dec.tff.s{s}.proj"), n, cin, cl, true);
        }
        if s + 1 < k {
            out.linear(format!("dec.acc.s{s}"), n, dims[s + 1..].iter().sum(), cl, true);
        }
        if cfg.frequency.enabled {
            let lk = cfg.decoder.lk_kernel;
            out.conv(format!("dec.freq.s{s}.lk"), n, lk * lk, cl, fc);
            out.linear(format!("dec.freq.s{s}.back"), n, fc, cl, true);
        }
        if s + 1 == k {
            out.linear("dec.guide.proj", n, g.dim, cl, true);
            out.linear("dec.guide.fuse", n, 2 * cl, cl, true);
        } else {
            out.conv(format!("dec.int.s{s}"), n, 9, cl + dims[s + 1], cl);
        }
    }
    let (s0h, s0w) = cfg.stage_side(0);
    out.conv("dec.head.conv", s0h * s0w, 9, dims[0], dims[0]);
    out.linear("dec.head.out", h * w, dims[0], 1, true);
    Ok(out)
}
