//! Layout ops and fixed linear resampling maps.
//!
//! Padding, cyclic shifts, window partitioning, pooling, bilinear upsampling
//! and axis replication are all expressed as a [`SparseMap`]: every output
//! element is a fixed weighted sum of input elements. One forward and one
//! backward rule cover them all.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::graph::{check_axis, GradAcc, Graph, Op, Var};
use crate::tensor::{strides_of, Tensor};

/// Fixed sparse linear map from a tensor of `in_shape` to one of `out_shape`.
#[derive(Debug, Clone)]
pub struct SparseMap {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weight: Vec<f64>,
}

impl SparseMap {
    /// Pure gather: output `i` copies input `idx[i]`, or is zero for `None`.
    pub fn from_indices(in_shape: &[usize], out_shape: &[usize], idx: &[Option<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(idx.len() + 1);
        let mut src = Vec::with_capacity(idx.len());
        offsets.push(0);
        for i in idx {
            if let Some(s) = *i {
                src.push(s);
            }
            offsets.push(src.len());
        }
        let weight = vec![1.0; src.len()];
        Self {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            offsets,
            src,
            weight,
        }
    }

    /// Output `i` is `sum_j w_j * input[s_j]` over `entries[i]`.
    pub fn from_weighted(in_shape: &[usize], out_shape: &[usize], entries: &[Vec<(usize, f64)>]) -> Self {
        let mut offsets = vec![0];
        let mut src = Vec::new();
        let mut weight = Vec::new();
        for e in entries {
            for &(s, w) in e {
                src.push(s);
                weight.push(w);
            }
            offsets.push(src.len());
        }
        Self {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            offsets,
            src,
            weight,
        }
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.offsets.len() - 1)
            .map(|i| {
                (self.offsets[i]..self.offsets[i + 1])
                    .map(|e| self.weight[e] * input[self.src[e]])
                    .sum()
            })
            .collect()
    }

    fn apply_transpose(&self, gout: &[f64], gin: &mut [f64]) {
        for (i, go) in gout.iter().enumerate() {
            for e in self.offsets[i]..self.offsets[i + 1] {
                gin[self.src[e]] += self.weight[e] * go;
            }
        }
    }
}

/// Splits `[.., H, W, C]` into `(batch, H, W, C)`.
fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(TensorError::invalid(op, format!("expected [.., H, W, C], got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 3].iter().product(), shape[r - 3], shape[r - 2], shape[r - 1]))
}

impl SparseMap {
    /// Zero padding: `pads[a] = (before, after)` for every axis.
    pub fn pad(in_shape: &[usize], pads: &[(usize, usize)]) -> Result<Self> {
        if pads.len() != in_shape.len() {
            return Err(TensorError::invalid("pad", "one (before, after) pair per axis required"));
        }
        let out_shape: Vec<usize> = in_shape.iter().zip(pads).map(|(d, (b, a))| d + b + a).collect();
        let in_strides = strides_of(in_shape);
        let numel: usize = out_shape.iter().product();
        let out_strides = strides_of(&out_shape);
        let idx: Vec<Option<usize>> = (0..numel)
            .map(|flat| {
                let mut src = 0;
                for a in 0..out_shape.len() {
                    let c = (flat / out_strides[a]) % out_shape[a];
                    let (b, _) = pads[a];
                    if c < b || c >= b + in_shape[a] {
                        return None;
                    }
                    src += (c - b) * in_strides[a];
                }
                Some(src)
            })
            .collect();
        Ok(Self::from_indices(in_shape, &out_shape, &idx))
    }

    /// Cyclic shift along `axis`: `out[i] = in[(i - shift) mod n]`.
    pub fn roll(in_shape: &[usize], axis: usize, shift: isize) -> Result<Self> {
        check_axis("roll", axis, in_shape.len())?;
        let strides = strides_of(in_shape);
        let n = in_shape[axis] as isize;
        let numel: usize = in_shape.iter().product();
        let idx: Vec<Option<usize>> = (0..numel)
            .map(|flat| {
                let c = ((flat / strides[axis]) % in_shape[axis]) as isize;
                let s = (c - shift).rem_euclid(n) as usize;
                Some(flat - c as usize * strides[axis] + s * strides[axis])
            })
            .collect();
        Ok(Self::from_indices(in_shape, in_shape, &idx))
    }

    /// Nearest replication of `axis` to `new_len`: `out[j] = in[floor(j * n / new_len)]`.
    pub fn repeat_axis(in_shape: &[usize], axis: usize, new_len: usize) -> Result<Self> {
        check_axis("repeat_axis", axis, in_shape.len())?;
        let mut out_shape = in_shape.to_vec();
        out_shape[axis] = new_len;
        let (outer, n, inner) = (
            in_shape[..axis].iter().product::<usize>(),
            in_shape[axis],
            in_shape[axis + 1..].iter().product::<usize>(),
        );
        let mut idx = Vec::with_capacity(outer * new_len * inner);
        for o in 0..outer {
            for j in 0..new_len {
                let s = j * n / new_len;
                for i in 0..inner {
                    idx.push(Some((o * n + s) * inner + i));
                }
            }
        }
        Ok(Self::from_indices(in_shape, &out_shape, &idx))
    }

    /// Non-overlapping `k x k` average pooling over `[.., H, W, C]`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn avg_pool2d(in_shape: &[usize], k: usize) -> Result<Self> {
        let (b, h, w, c) = spatial_dims("avg_pool2d", in_shape)?;
        if k == 0 || h < k || w < k {
            return Err(TensorError::invalid("avg_pool2d", format!("kernel {k} for {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out_shape = in_shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 3] = oh;
        out_shape[r - 2] = ow;
        let wgt = 1.0 / (k * k) as f64;
        let mut entries = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let mut e = Vec::with_capacity(k * k);
                        for dy in 0..k {
                            for dx in 0..k {
                                let src = ((bi * h + y * k + dy) * w + x * k + dx) * c + ch;
                                e.push((src, wgt));
                            }
                        }
                        entries.push(e);
                    }
                }
            }
        }
        Ok(Self::from_weighted(in_shape, &out_shape, &entries))
    }

    /// Bilinear resize of `[.., H, W, C]` to `out_h x out_w` with half-pixel
    /// centres (align-corners false), edges clamped.
    pub fn upsample_bilinear(in_shape: &[usize], out_h: usize, out_w: usize) -> Result<Self> {
        let (b, h, w, c) = spatial_dims("upsample_bilinear", in_shape)?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::invalid("upsample_bilinear", "empty spatial size"));
        }
        let taps = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            let scale = n_in as f64 / n_out as f64;
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut out_shape = in_shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 3] = out_h;
        out_shape[r - 2] = out_w;
        let mut entries = Vec::with_capacity(b * out_h * out_w * c);
        for bi in 0..b {
            for y in 0..out_h {
                let (y0, y1, fy) = taps(y, h, out_h);
                for x in 0..out_w {
                    let (x0, x1, fx) = taps(x, w, out_w);
                    for ch in 0..c {
                        let at = |yy: usize, xx: usize| ((bi * h + yy) * w + xx) * c + ch;
                        entries.push(vec![
                            (at(y0, x0), (1.0 - fy) * (1.0 - fx)),
                            (at(y0, x1), (1.0 - fy) * fx),
                            (at(y1, x0), fy * (1.0 - fx)),
                            (at(y1, x1), fy * fx),
                        ]);
                    }
                }
            }
        }
        Ok(Self::from_weighted(in_shape, &out_shape, &entries))
    }
}

impl Graph<'_> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.derive(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, permute_data(self.value(x).data(), &shape, perm))?;
        Ok(self.derive(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(a, (x, y))| a != axis && x != y) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.derive(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis length {}", start + len, shape[axis]),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::new(&oshape, out)?;
        Ok(self.derive(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Splits `axis` into consecutive chunks of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        check_axis("split", axis, self.shape(x).len())?;
        if sizes.iter().sum::<usize>() != self.shape(x)[axis] {
            return Err(TensorError::invalid("split", format!("sizes {sizes:?} do not cover axis {axis}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    /// Applies a fixed [`SparseMap`].
    pub fn gather_map(&mut self, x: Var, map: Rc<SparseMap>) -> Result<Var> {
        if self.shape(x) != map.in_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_map",
                lhs: self.shape(x).to_vec(),
                rhs: map.in_shape().to_vec(),
            });
        }
        let value = Tensor::new(map.out_shape(), map.apply(self.value(x).data()))?;
        Ok(self.derive(value, Op::Gather { x, map }, &[x]))
    }

    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let map = SparseMap::pad(self.shape(x), pads)?;
        self.gather_map(x, Rc::new(map))
    }

    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let map = SparseMap::roll(self.shape(x), axis, shift)?;
        self.gather_map(x, Rc::new(map))
    }

    pub fn repeat_axis(&mut self, x: Var, axis: usize, new_len: usize) -> Result<Var> {
        let map = SparseMap::repeat_axis(self.shape(x), axis, new_len)?;
        self.gather_map(x, Rc::new(map))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let map = SparseMap::avg_pool2d(self.shape(x), k)?;
        self.gather_map(x, Rc::new(map))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let map = SparseMap::upsample_bilinear(self.shape(x), out_h, out_w)?;
        self.gather_map(x, Rc::new(map))
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for a in (0..idx.len()).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

pub(crate) fn backward(g: &Graph, out: Var, op: &Op, gout: &[f64], acc: &mut GradAcc) {
    match op {
        &Op::Reshape(x) => acc.add(g, x, gout.to_vec()),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            acc.add(g, *x, permute_data(gout, g.shape(out), &inv));
        }
        Op::Concat { xs, axis } => {
            let shape = g.shape(out);
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut offset = 0;
            for &v in xs {
                let len = g.shape(v)[*axis] * inner;
                if g.requires_grad(v) {
                    let mut part = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        part.extend_from_slice(&gout[o * row + offset..o * row + offset + len]);
                    }
                    acc.add(g, v, part);
                }
                offset += len;
            }
        }
        &Op::Narrow { x, axis, start } => {
            let shape = g.shape(x);
            let len = g.shape(out)[axis];
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            if let Some(gx) = acc.slot(g, x) {
                for o in 0..outer {
                    let b = (o * shape[axis] + start) * inner;
                    for (d, s) in gx[b..b + len * inner].iter_mut().zip(&gout[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Gather { x, map } => {
            if let Some(gx) = acc.slot(g, *x) {
                map.apply_transpose(gout, gx);
            }
        }
        _ => unreachable!("not a shape op"),
    }
}
