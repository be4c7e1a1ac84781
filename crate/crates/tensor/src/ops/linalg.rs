use crate::error::{Result, TensorError};
use crate::graph::{GradAcc, Graph, Op, Var};
use crate::tensor::Tensor;

/// Geometry of a (possibly batched) product `a[.., n, k] x b[.., k, m]`.
struct MatDims {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    shared_b: bool,
}

fn dims(g: &Graph, a: Var, b: Var, trans_b: bool) -> Result<(MatDims, Vec<usize>)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch());
    }
    let n = sa[sa.len() - 2];
    let k = sa[sa.len() - 1];
    let (bk, m) = if trans_b {
        (sb[sb.len() - 1], sb[sb.len() - 2])
    } else {
        (sb[sb.len() - 2], sb[sb.len() - 1])
    };
    if bk != k {
        return Err(mismatch());
    }
    let shared_b = sb.len() == 2;
    if !shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(mismatch());
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut out_shape = sa.to_vec();
    *out_shape.last_mut().unwrap() = m;
    Ok((
        MatDims {
            batch,
            n,
            k,
            m,
            shared_b,
        },
        out_shape,
    ))
}

impl Graph<'_> {
    /// Matrix product over the last two axes. `b` is either rank 2 (shared by
    /// every leading index of `a`) or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (d, out_shape) = dims(self, a, b, trans_b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; d.batch * d.n * d.m];
        for bi in 0..d.batch {
            let ao = bi * d.n * d.k;
            let bo = if d.shared_b { 0 } else { bi * d.k * d.m };
            let oo = bi * d.n * d.m;
            for i in 0..d.n {
                let arow = &av[ao + i * d.k..ao + (i + 1) * d.k];
                let orow = &mut out[oo + i * d.m..oo + (i + 1) * d.m];
                if trans_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        let brow = &bv[bo + j * d.k..bo + (j + 1) * d.k];
                        *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                } else {
                    for (p, &x) in arow.iter().enumerate() {
                        let brow = &bv[bo + p * d.m..bo + (p + 1) * d.m];
                        for (o, y) in orow.iter_mut().zip(brow) {
                            *o += x * y;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.derive(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// `x W (+ bias)` with `W: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_suffix(y, b),
            None => Ok(y),
        }
    }
}

pub(crate) fn backward(g: &Graph, _out: Var, op: &Op, gout: &[f64], acc: &mut GradAcc) {
    let Op::MatMul { a, b, trans_b } = *op else {
        unreachable!("not a matmul")
    };
    let (d, _) = dims(g, a, b, trans_b).expect("validated in forward");
    let (av, bv) = (g.value(a).data(), g.value(b).data());
    if let Some(ga) = acc.slot(g, a) {
        for bi in 0..d.batch {
            let ao = bi * d.n * d.k;
            let bo = if d.shared_b { 0 } else { bi * d.k * d.m };
            let oo = bi * d.n * d.m;
            for i in 0..d.n {
                let grow = &gout[oo + i * d.m..oo + (i + 1) * d.m];
                let garow = &mut ga[ao + i * d.k..ao + (i + 1) * d.k];
                if trans_b {
                    // da[i,p] += sum_j g[i,j] b[j,p]
                    for (j, &gv) in grow.iter().enumerate() {
                        let brow = &bv[bo + j * d.k..bo + (j + 1) * d.k];
                        for (x, y) in garow.iter_mut().zip(brow) {
                            *x += gv * y;
                        }
                    }
                } else {
                    for (p, x) in garow.iter_mut().enumerate() {
                        let brow = &bv[bo + p * d.m..bo + (p + 1) * d.m];
                        *x += grow.iter().zip(brow).map(|(u, v)| u * v).sum::<f64>();
                    }
                }
            }
        }
    }
    if let Some(gb) = acc.slot(g, b) {
        for bi in 0..d.batch {
            let ao = bi * d.n * d.k;
            let bo = if d.shared_b { 0 } else { bi * d.k * d.m };
            let oo = bi * d.n * d.m;
            for i in 0..d.n {
                let arow = &av[ao + i * d.k..ao + (i + 1) * d.k];
                let grow = &gout[oo + i * d.m..oo + (i + 1) * d.m];
                if trans_b {
                    // db[j,p] += a[i,p] g[i,j]
                    for (j, &gv) in grow.iter().enumerate() {
                        let gbrow = &mut gb[bo + j * d.k..bo + (j + 1) * d.k];
                        for (x, y) in gbrow.iter_mut().zip(arow) {
                            *x += gv * y;
                        }
                    }
                } else {
                    for (p, &x) in arow.iter().enumerate() {
                        let gbrow = &mut gb[bo + p * d.m..bo + (p + 1) * d.m];
                        for (o, gv) in gbrow.iter_mut().zip(grow) {
                            *o += x * gv;
                        }
                    }
                }
            }
        }
    }
}
