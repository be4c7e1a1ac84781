use crate::error::{Result, TensorError};
use crate::graph::{check_axis, GradAcc, Graph, Op, Unary, Var};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn suffix_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(g.value(b).numel())
}

impl Graph<'_> {
    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        same_shape(self, op, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.derive(value, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = suffix_shape(self, "add_suffix", a, b)?;
        let bd = self.value(b).data();
        let mut value = self.value(a).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bd[i % n];
        }
        Ok(self.derive(value, Op::AddSuffix(a, b), &[a, b]))
    }

    /// `a * b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn mul_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = suffix_shape(self, "mul_suffix", a, b)?;
        let bd = self.value(b).data();
        let mut value = self.value(a).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= bd[i % n];
        }
        Ok(self.derive(value, Op::MulSuffix(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.derive(value, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.derive(value, Op::AddScalar(a), &[a])
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Sqrt => Box::new(f64::sqrt),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Gelu => Box::new(gelu),
            Unary::Powf(p) => Box::new(move |x: f64| x.powf(p)),
        };
        let value = self.value(a).map(f);
        self.derive(value, Op::Unary(a, kind), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// Natural log; callers guard the argument away from zero.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    /// `a^p` for a constant exponent. `p == 0` yields ones with zero gradient.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Unary::Powf(p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.derive(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("sum_axis", axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let value = Tensor::new(&oshape, out)?;
        Ok(self.derive(value, Op::SumAxis { x: a, axis }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", axis, self.shape(a).len())?;
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Max over `axis`, removing it. Ties route the gradient to the first max.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("max_axis", axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(TensorError::invalid("max_axis", "empty axis"));
        }
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let flat = (o * len + k) * inner + i;
                    let slot = o * inner + i;
                    if src[flat] > out[slot] || k == 0 {
                        out[slot] = src[flat];
                        argmax[slot] = flat;
                    }
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let value = Tensor::new(&oshape, out)?;
        Ok(self.derive(value, Op::MaxAxis { x: a, argmax }, &[a]))
    }
}

/// `(outer, len, inner)` around `axis` for a row-major shape.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn backward(g: &Graph, out: Var, op: &Op, gout: &[f64], acc: &mut GradAcc) {
    match *op {
        Op::Add(a, b) => {
            acc.add(g, a, gout.to_vec());
            acc.add(g, b, gout.to_vec());
        }
        Op::Sub(a, b) => {
            acc.add(g, a, gout.to_vec());
            acc.add(g, b, gout.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (g.value(a).data(), g.value(b).data());
            if g.requires_grad(a) {
                acc.add(g, a, gout.iter().zip(bv).map(|(go, y)| go * y).collect());
            }
            if g.requires_grad(b) {
                acc.add(g, b, gout.iter().zip(av).map(|(go, x)| go * x).collect());
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (g.value(a).data(), g.value(b).data());
            if g.requires_grad(a) {
                acc.add(g, a, gout.iter().zip(bv).map(|(go, y)| go / y).collect());
            }
            if g.requires_grad(b) {
                let c = gout
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(go, (x, y))| -go * x / (y * y))
                    .collect();
                acc.add(g, b, c);
            }
        }
        Op::AddSuffix(a, b) => {
            acc.add(g, a, gout.to_vec());
            if let Some(gb) = acc.slot(g, b) {
                let n = gb.len();
                for (i, go) in gout.iter().enumerate() {
                    gb[i % n] += go;
                }
            }
        }
        Op::MulSuffix(a, b) => {
            let (av, bv) = (g.value(a).data(), g.value(b).data());
            let n = bv.len();
            if g.requires_grad(a) {
                acc.add(g, a, gout.iter().enumerate().map(|(i, go)| go * bv[i % n]).collect());
            }
            if let Some(gb) = acc.slot(g, b) {
                for (i, go) in gout.iter().enumerate() {
                    gb[i % n] += go * av[i];
                }
            }
        }
        Op::Scale(a, s) => acc.add(g, a, gout.iter().map(|x| x * s).collect()),
        Op::AddScalar(a) => acc.add(g, a, gout.to_vec()),
        Op::Unary(a, kind) => {
            let x = g.value(a).data();
            let y = g.value(out).data();
            let d: Vec<f64> = match kind {
                Unary::Exp => gout.iter().zip(y).map(|(go, y)| go * y).collect(),
                Unary::Log => gout.iter().zip(x).map(|(go, x)| go / x).collect(),
                Unary::Sqrt => gout.iter().zip(y).map(|(go, y)| go * 0.5 / y).collect(),
                Unary::Tanh => gout.iter().zip(y).map(|(go, y)| go * (1.0 - y * y)).collect(),
                Unary::Sigmoid => gout.iter().zip(y).map(|(go, y)| go * y * (1.0 - y)).collect(),
                Unary::Gelu => gout.iter().zip(x).map(|(go, x)| go * gelu_grad(*x)).collect(),
                Unary::Powf(p) => {
                    if p == 0.0 {
                        vec![0.0; gout.len()]
                    } else {
                        gout.iter()
                            .zip(x)
                            .map(|(go, x)| go * p * x.powf(p - 1.0))
                            .collect()
                    }
                }
            };
            acc.add(g, a, d);
        }
        Op::Sum(a) => {
            let n = g.value(a).numel();
            acc.add(g, a, vec![gout[0]; n]);
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = split_axis(g.shape(x), axis);
            if let Some(gx) = acc.slot(g, x) {
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for i in 0..inner {
                            gx[base + i] += gout[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::MaxAxis { x, ref argmax } => {
            if let Some(gx) = acc.slot(g, x) {
                for (slot, &flat) in argmax.iter().enumerate() {
                    gx[flat] += gout[slot];
                }
            }
        }
        _ => unreachable!("not an elementwise op"),
    }
}
