//! Reductions and normalizations along one axis.

use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower bound on the norm used by `l2_normalize`.
pub const L2_NORM_FLOOR: f64 = 1e-12;

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| shape_err(op, "needs at least one axis"))
}

impl Tape {
    /// Mean over `axis` (removed from the shape), or over everything when
    /// `axis` is `None`, giving a scalar.
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let out = match axis {
            None => {
                let n = xv.numel() as f64;
                Tensor::scalar(xv.data().iter().sum::<f64>() / n)
            }
            Some(ax) => {
                if ax >= xv.ndim() {
                    return Err(shape_err("mean", format!("axis {ax} out of range for {:?}", xv.shape())));
                }
                let (outer, len, inner) = around(xv.shape(), ax);
                let mut out = vec![0.0; outer * inner];
                let d = xv.data();
                for o in 0..outer {
                    for a in 0..len {
                        let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                        out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(acc, v)| *acc += v);
                    }
                }
                let scale = 1.0 / len as f64;
                out.iter_mut().for_each(|v| *v *= scale);
                let mut shape = xv.shape().to_vec();
                shape.remove(ax);
                Tensor::from_parts(shape, out)
            }
        };
        self.push(out, Op::Mean { x, axis })
    }

    /// Sum of every element, recorded as a mean followed by a scale.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let m = self.mean(x, None)?;
        self.scale(m, n)
    }

    /// Sum over `axis`, recorded as a mean followed by a scale.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err("mean", format!("axis {axis} out of range")))? as f64;
        let m = self.mean(x, Some(axis))?;
        self.scale(m, n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = last_dim("softmax", xv.shape())?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(out, Op::Softmax { x })
    }

    /// Layer normalization over the last axis with gain `gamma` and shift
    /// `beta`, both shaped like that axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xv = self.value(x);
        let n = last_dim("layer_norm", xv.shape())?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} and shift {:?} must both be [{n}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(n) {
            let (mean, rstd) = moments(row);
            out.extend(
                row.iter()
                    .zip(gv.iter().zip(bv))
                    .map(|(v, (g, b))| (v - mean) * rstd * g + b),
            );
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(out, Op::LayerNorm { x, gamma, beta })
    }

    /// Scales each vector along the last axis to unit L2 norm, dividing by
    /// `max(‖x‖, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = last_dim("l2_normalize", xv.shape())?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(out, Op::L2Normalize { x })
    }

    /// `Σ|x|` as a scalar. The subgradient at zero is zero.
    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::AbsSum { x })
    }
}

fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn mean_backward(in_shape: &[usize], axis: Option<usize>, g: &[f64]) -> Vec<f64> {
    let n: usize = in_shape.iter().product();
    match axis {
        None => vec![g[0] / n as f64; n],
        Some(ax) => {
            let (outer, len, inner) = around(in_shape, ax);
            let scale = 1.0 / len as f64;
            let mut dx = vec![0.0; n];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for a in 0..len {
                    dx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, v)| *d = v * scale);
                }
            }
            dx
        }
    }
}

pub(crate) fn softmax_backward(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let n = *y.shape().last().unwrap_or(&1);
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks_exact(n).zip(g.chunks_exact(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
    }
    dx
}

pub(crate) fn layer_norm_backward(x: &Tensor, gamma: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = gamma.numel();
    let gv = gamma.data();
    let mut dx = Vec::with_capacity(x.numel());
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    let mut xhat = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for (row, grow) in x.data().chunks_exact(n).zip(g.chunks_exact(n)) {
        let (mean, rstd) = moments(row);
        for i in 0..n {
            xhat[i] = (row[i] - mean) * rstd;
            dxhat[i] = grow[i] * gv[i];
            dgamma[i] += grow[i] * xhat[i];
            dbeta[i] += grow[i];
        }
        let m1 = dxhat.iter().sum::<f64>() / n as f64;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        dx.extend((0..n).map(|i| rstd * (dxhat[i] - m1 - xhat[i] * m2)));
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn l2_normalize_backward(x: &Tensor, y: &Tensor, g: &[f64]) -> Vec<f64> {
    let n = *x.shape().last().unwrap_or(&1);
    let mut dx = Vec::with_capacity(x.numel());
    for ((xr, yr), gr) in x.data().chunks_exact(n).zip(y.data().chunks_exact(n)).zip(g.chunks_exact(n)) {
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > L2_NORM_FLOOR {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norm));
        } else {
            dx.extend(gr.iter().map(|gv| gv / L2_NORM_FLOOR));
        }
    }
    dx
}

pub(crate) fn abs_sum_backward(x: &Tensor, g: f64) -> Vec<f64> {
    x.data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                g
            } else if v < 0.0 {
                -g
            } else {
                0.0
            }
        })
        .collect()
}
