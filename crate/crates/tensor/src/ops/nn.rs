use crate::error::{Result, TensorError};
use crate::graph::{check_axis, GradAcc, Graph, Op, Var};
use crate::ops::elementwise::split_axis;
use crate::tensor::Tensor;

/// Variance guard used by every normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Normalizes `n` groups of values given as index lists, returning
/// `(xhat, rstd per group)`.
fn normalize_groups(x: &[f64], groups: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(groups.len());
    for idx in groups {
        let m = idx.len() as f64;
        let rough = idx.iter().map(|&i| x[i]).sum::<f64>() / m;
        // one correction pass: constant groups then centre to exactly zero
        let mean = rough + idx.iter().map(|&i| x[i] - rough).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / m;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        for &i in idx {
            xhat[i] = (x[i] - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Conv geometry for channels-last `x[D,H,W,Ci]` and `w[kd,kh,kw,Ci,Co]`.
#[derive(Clone, Copy)]
struct ConvDims {
    inp: [usize; 3],
    ker: [usize; 3],
    out: [usize; 3],
    ci: usize,
    co: usize,
    stride: [usize; 3],
    pad: [usize; 3],
}

fn conv_dims(g: &Graph, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<ConvDims> {
    let (sx, sw) = (g.shape(x), g.shape(w));
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv3d",
        lhs: sx.to_vec(),
        rhs: sw.to_vec(),
    };
    if sx.len() != 4 || sw.len() != 5 || sx[3] != sw[3] {
        return Err(mismatch());
    }
    if stride.contains(&0) {
        return Err(TensorError::invalid("conv3d", "zero stride"));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = sx[a] + 2 * pad[a];
        if padded < sw[a] {
            return Err(mismatch());
        }
        out[a] = (padded - sw[a]) / stride[a] + 1;
    }
    Ok(ConvDims {
        inp: [sx[0], sx[1], sx[2]],
        ker: [sw[0], sw[1], sw[2]],
        out,
        ci: sx[3],
        co: sw[4],
        stride,
        pad,
    })
}

impl ConvDims {
    /// Calls `f(out_pos, in_pos, ker_pos)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [od, oh, ow] = self.out;
        let [kd, kh, kw] = self.ker;
        let [d, h, w] = self.inp;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let opos = (z * oh + y) * ow + x;
                    for dz in 0..kd {
                        let iz = (z * self.stride[0] + dz) as isize - self.pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for dy in 0..kh {
                            let iy = (y * self.stride[1] + dy) as isize - self.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (x * self.stride[2] + dx) as isize - self.pad[2] as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ipos = (iz as usize * h + iy as usize) * w + ix as usize;
                                let kpos = (dz * kh + dy) * kw + dx;
                                f(opos, ipos, kpos);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph<'_> {
    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.derive(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| TensorError::invalid("layer_norm", "rank 0 input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / c.max(1);
        let groups: Vec<Vec<usize>> = (0..rows).map(|r| (r * c..(r + 1) * c).collect()).collect();
        let (xhat, rstd) = normalize_groups(self.value(x).data(), &groups);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat.iter().enumerate().map(|(i, v)| v * gm[i % c] + bt[i % c]).collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.derive(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Group normalization for channels-last input `[.., C]`: channels are
    /// split into `groups` contiguous groups, statistics span all positions.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| TensorError::invalid("group_norm", "rank 0 input"))?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "group_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let positions = self.value(x).numel() / c;
        let cg = c / groups;
        let idx: Vec<Vec<usize>> = (0..groups)
            .map(|gi| {
                (0..positions)
                    .flat_map(|p| (gi * cg..(gi + 1) * cg).map(move |ch| p * c + ch))
                    .collect()
            })
            .collect();
        let (xhat, rstd) = normalize_groups(self.value(x).data(), &idx);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat.iter().enumerate().map(|(i, v)| v * gm[i % c] + bt[i % c]).collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.derive(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// 3D convolution, channels last: `x[D,H,W,Ci]`, `w[kd,kh,kw,Ci,Co]`,
    /// zero padding. No bias; add one with [`Graph::add_suffix`].
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let d = conv_dims(self, x, w, stride, pad)?;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let kvol = d.ci * d.co;
        let mut out = vec![0.0; d.out.iter().product::<usize>() * d.co];
        d.for_each_tap(|opos, ipos, kpos| {
            let xrow = &xv[ipos * d.ci..(ipos + 1) * d.ci];
            let orow = &mut out[opos * d.co..(opos + 1) * d.co];
            let kbase = kpos * kvol;
            for (c, &xc) in xrow.iter().enumerate() {
                let wrow = &wv[kbase + c * d.co..kbase + (c + 1) * d.co];
                for (o, wc) in orow.iter_mut().zip(wrow) {
                    *o += xc * wc;
                }
            }
        });
        let value = Tensor::new(&[d.out[0], d.out[1], d.out[2], d.co], out)?;
        Ok(self.derive(value, Op::Conv3d { x, w, stride, pad }, &[x, w]))
    }

    /// 2D convolution, channels last: `x[H,W,Ci]`, `w[kh,kw,Ci,Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let x3 = self.reshape(x, &[1, sx[0], sx[1], sx[2]])?;
        let w3 = self.reshape(w, &[1, sw[0], sw[1], sw[2], sw[3]])?;
        let y = self.conv3d(x3, w3, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &ys[1..])
    }
}

fn norm_backward(
    g: &Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    rstd: &[f64],
    groups: &[Vec<usize>],
    gout: &[f64],
    acc: &mut GradAcc,
) {
    let c = g.value(gamma).numel();
    let gm = g.value(gamma).data();
    if let Some(gg) = acc.slot(g, gamma) {
        for (i, go) in gout.iter().enumerate() {
            gg[i % c] += go * xhat[i];
        }
    }
    if let Some(gb) = acc.slot(g, beta) {
        for (i, go) in gout.iter().enumerate() {
            gb[i % c] += go;
        }
    }
    if let Some(gx) = acc.slot(g, x) {
        for (idx, &r) in groups.iter().zip(rstd) {
            let m = idx.len() as f64;
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for &i in idx {
                let d = gout[i] * gm[i % c];
                mean_d += d;
                mean_dx += d * xhat[i];
            }
            mean_d /= m;
            mean_dx /= m;
            for &i in idx {
                let d = gout[i] * gm[i % c];
                gx[i] += r * (d - mean_d - xhat[i] * mean_dx);
            }
        }
    }
}

pub(crate) fn backward(g: &Graph, out: Var, op: &Op, gout: &[f64], acc: &mut GradAcc) {
    match op {
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(g.shape(x), axis);
            let y = g.value(out).data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| gout[at(k)] * y[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = y[at(k)] * (gout[at(k)] - dot);
                    }
                }
            }
            acc.add(g, x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = g.value(*gamma).numel();
            let rows = xhat.len() / c.max(1);
            let groups: Vec<Vec<usize>> = (0..rows).map(|r| (r * c..(r + 1) * c).collect()).collect();
            norm_backward(g, *x, *gamma, *beta, xhat, rstd, &groups, gout, acc);
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            rstd,
        } => {
            let c = g.value(*gamma).numel();
            let positions = xhat.len() / c;
            let cg = c / groups;
            let idx: Vec<Vec<usize>> = (0..*groups)
                .map(|gi| {
                    (0..positions)
                        .flat_map(|p| (gi * cg..(gi + 1) * cg).map(move |ch| p * c + ch))
                        .collect()
                })
                .collect();
            norm_backward(g, *x, *gamma, *beta, xhat, rstd, &idx, gout, acc);
        }
        &Op::Conv3d { x, w, stride, pad } => {
            let d = conv_dims(g, x, w, stride, pad).expect("validated in forward");
            let (xv, wv) = (g.value(x).data(), g.value(w).data());
            let kvol = d.ci * d.co;
            if let Some(gx) = acc.slot(g, x) {
                d.for_each_tap(|opos, ipos, kpos| {
                    let grow = &gout[opos * d.co..(opos + 1) * d.co];
                    let kbase = kpos * kvol;
                    for c in 0..d.ci {
                        let wrow = &wv[kbase + c * d.co..kbase + (c + 1) * d.co];
                        gx[ipos * d.ci + c] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            if let Some(gw) = acc.slot(g, w) {
                d.for_each_tap(|opos, ipos, kpos| {
                    let grow = &gout[opos * d.co..(opos + 1) * d.co];
                    let kbase = kpos * kvol;
                    for c in 0..d.ci {
                        let xc = xv[ipos * d.ci + c];
                        let gwrow = &mut gw[kbase + c * d.co..kbase + (c + 1) * d.co];
                        for (o, gv) in gwrow.iter_mut().zip(grow) {
                            *o += xc * gv;
                        }
                    }
                });
            }
        }
        _ => unreachable!("not an nn op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_axis_zero_sums_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3));
        let y = g.softmax(x, 0).unwrap();
        for col in 0..4 {
            let s: f64 = (0..3).map(|r| g.value(y).at(&[r, col])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 4, 8], 3.7));
        let gamma = g.constant(Tensor::ones(&[8]));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.group_norm(x, gamma, beta, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 6]));
        let gamma = g.constant(Tensor::ones(&[6]));
        let beta = g.constant(Tensor::zeros(&[6]));
        assert!(g.group_norm(x, gamma, beta, 4).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 5], |i| (i * i) as f64));
        let gamma = g.constant(Tensor::ones(&[5]));
        let beta = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = (0..5).map(|c| g.value(y).at(&[r, c])).collect();
            let mean = row.iter().sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_shapes_and_box_filter() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[5, 5, 2]));
        let w = g.constant(Tensor::ones(&[3, 3, 2, 1]));
        let y = g.conv2d(x, w, [1, 1], [1, 1]).unwrap();
        assert_eq!(g.shape(y), &[5, 5, 1]);
        assert_eq!(g.value(y).at(&[2, 2, 0]), 18.0);
        assert_eq!(g.value(y).at(&[0, 0, 0]), 8.0);
        let s = g.conv2d(x, w, [2, 2], [0, 0]).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 1]);
    }

    #[test]
    fn conv3d_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 4, 4, 3]));
        let w = g.constant(Tensor::ones(&[1, 2, 2, 2, 4]));
        let err = g.conv3d(x, w, [1, 1, 1], [0, 0, 0]).unwrap_err().to_string();
        assert!(err.contains("conv3d"));
    }
}
