use crate::error::{Result, TensorError};
use crate::graph::{GradAcc, Graph, Op, Var};
use crate::tensor::Tensor;

/// Bilinear taps for one normalized coordinate along an axis of length `n`.
///
/// Normalized `-1` / `+1` are the outer edges of the first / last cell, so
/// cell `i` has its centre at `(2i + 1) / n - 1`. Pixel positions outside
/// `[0, n - 1]` are clamped to the border; the clamped side has zero slope.
#[derive(Debug, Clone, Copy)]
struct Taps {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(pixel position) / d(normalized coordinate), zero when clamped.
    slope: f64,
}

fn taps(coord: f64, n: usize) -> Taps {
    let px = ((coord + 1.0) * n as f64 - 1.0) / 2.0;
    let hi = (n - 1) as f64;
    let (p, slope) = if px < 0.0 {
        (0.0, 0.0)
    } else if px > hi {
        (hi, 0.0)
    } else {
        (px, n as f64 / 2.0)
    };
    let i0 = (p.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Taps {
        i0,
        i1,
        frac: p - i0 as f64,
        slope,
    }
}

fn dims(g: &Graph, x: Var, coords: Var) -> Result<(usize, usize, usize, usize, usize)> {
    let (sx, sc) = (g.shape(x), g.shape(coords));
    if sx.len() != 4 || sc.len() != 3 || sc[2] != 2 || sx[0] != sc[0] || sx[1] == 0 || sx[2] == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "grid_sample",
            lhs: sx.to_vec(),
            rhs: sc.to_vec(),
        });
    }
    Ok((sx[0], sx[1], sx[2], sx[3], sc[1]))
}

impl Graph<'_> {
    /// Bilinear sampling of `x[B,H,W,C]` at normalized `(x, y)` locations
    /// `coords[B,N,2]`, giving `[B,N,C]`. Differentiable in both the data and
    /// the coordinates; out-of-range locations are clamped to the border.
    pub fn grid_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let (b, h, w, c, n) = dims(self, x, coords)?;
        let (xv, cv) = (self.value(x).data(), self.value(coords).data());
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            for q in 0..n {
                let ci = (bi * n + q) * 2;
                let tx = taps(cv[ci], w);
                let ty = taps(cv[ci + 1], h);
                let at = |yy: usize, xx: usize| ((bi * h + yy) * w + xx) * c;
                let corners = [
                    (at(ty.i0, tx.i0), (1.0 - ty.frac) * (1.0 - tx.frac)),
                    (at(ty.i0, tx.i1), (1.0 - ty.frac) * tx.frac),
                    (at(ty.i1, tx.i0), ty.frac * (1.0 - tx.frac)),
                    (at(ty.i1, tx.i1), ty.frac * tx.frac),
                ];
                let orow = &mut out[(bi * n + q) * c..(bi * n + q + 1) * c];
                for (base, wgt) in corners {
                    for (o, v) in orow.iter_mut().zip(&xv[base..base + c]) {
                        *o += wgt * v;
                    }
                }
            }
        }
        let value = Tensor::new(&[b, n, c], out)?;
        Ok(self.derive(value, Op::GridSample { x, coords }, &[x, coords]))
    }
}

pub(crate) fn backward(g: &Graph, _out: Var, op: &Op, gout: &[f64], acc: &mut GradAcc) {
    let Op::GridSample { x, coords } = *op else {
        unreachable!("not grid_sample")
    };
    let (b, h, w, c, n) = dims(g, x, coords).expect("validated in forward");
    let (xv, cv) = (g.value(x).data(), g.value(coords).data());
    let mut gcoords = g.requires_grad(coords).then(|| vec![0.0; cv.len()]);
    let mut gx = g.requires_grad(x).then(|| vec![0.0; xv.len()]);
    for bi in 0..b {
        for q in 0..n {
            let ci = (bi * n + q) * 2;
            let tx = taps(cv[ci], w);
            let ty = taps(cv[ci + 1], h);
            let at = |yy: usize, xx: usize| ((bi * h + yy) * w + xx) * c;
            let (p00, p01, p10, p11) = (at(ty.i0, tx.i0), at(ty.i0, tx.i1), at(ty.i1, tx.i0), at(ty.i1, tx.i1));
            let grow = &gout[(bi * n + q) * c..(bi * n + q + 1) * c];
            if let Some(gx) = gx.as_mut() {
                let corners = [
                    (p00, (1.0 - ty.frac) * (1.0 - tx.frac)),
                    (p01, (1.0 - ty.frac) * tx.frac),
                    (p10, ty.frac * (1.0 - tx.frac)),
                    (p11, ty.frac * tx.frac),
                ];
                for (base, wgt) in corners {
                    for (d, go) in gx[base..base + c].iter_mut().zip(grow) {
                        *d += wgt * go;
                    }
                }
            }
            if let Some(gc) = gcoords.as_mut() {
                let mut dfx = 0.0;
                let mut dfy = 0.0;
                for ch in 0..c {
                    let (v00, v01, v10, v11) = (xv[p00 + ch], xv[p01 + ch], xv[p10 + ch], xv[p11 + ch]);
                    dfx += grow[ch] * ((1.0 - ty.frac) * (v01 - v00) + ty.frac * (v11 - v10));
                    dfy += grow[ch] * ((1.0 - tx.frac) * (v10 - v00) + tx.frac * (v11 - v01));
                }
                gc[ci] += dfx * tx.slope;
                gc[ci + 1] += dfy * ty.slope;
            }
        }
    }
    if let Some(d) = gx {
        acc.add(g, x, d);
    }
    if let Some(d) = gcoords {
        acc.add(g, coords, d);
    }
}

/// Normalized centre coordinate of cell `i` along an axis of `n` cells.
pub fn cell_center(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_grid_reproduces_source() {
        let (h, w, c) = (3, 5, 2);
        let src = Tensor::from_fn(&[1, h, w, c], |i| (i as f64 * 0.37).sin());
        let mut coords = Vec::new();
        for y in 0..h {
            for x in 0..w {
                coords.push(cell_center(x, w));
                coords.push(cell_center(y, h));
            }
        }
        let mut g = Graph::new();
        let xs = g.constant(src.clone());
        let cs = g.constant(Tensor::new(&[1, h * w, 2], coords).unwrap());
        let out = g.grid_sample(xs, cs).unwrap();
        let expect = src.reshape(&[1, h * w, c]).unwrap();
        assert!(g.value(out).max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let mut g = Graph::new();
        let xs = g.constant(Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64));
        let cs = g.constant(Tensor::new(&[1, 2, 2], vec![-5.0, -5.0, 9.0, 9.0]).unwrap());
        let out = g.grid_sample(xs, cs).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 3.0]);
    }

    #[test]
    fn midpoint_interpolates() {
        let mut g = Graph::new();
        let xs = g.constant(Tensor::new(&[1, 1, 2, 1], vec![2.0, 4.0]).unwrap());
        let cs = g.constant(Tensor::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap());
        let out = g.grid_sample(xs, cs).unwrap();
        assert_eq!(g.value(out).data(), &[3.0]);
    }
}
