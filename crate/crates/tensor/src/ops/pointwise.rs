//! Elementwise arithmetic and activations.

use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `rhs` may equal `lhs` or be a trailing suffix of it.
fn check_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        Ok(())
    } else {
        Err(shape_err(op, format!("{rhs:?} does not broadcast onto {lhs:?}")))
    }
}

/// Sums `g` over its leading repeats down to `n` trailing elements.
pub(crate) fn reduce_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

/// `f(a[i], b[i mod len(b)])`; `b` tiles `a` exactly.
fn broadcast_zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for (o, x) in out.chunks_exact_mut(b.len()).zip(a.chunks_exact(b.len())) {
        for i in 0..b.len() {
            o[i] = f(x[i], b[i]);
        }
    }
    out
}

/// `tanh` through a single `exp`; `f64::tanh` is several times slower and
/// this sits on the hottest elementwise path.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    /// Elementwise sum. `b` may be a trailing-suffix broadcast of `a`
    /// (a bias `[C]` onto `[B, T, C]`, say).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        check_broadcast("add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = broadcast_zip(av.data(), bv.data(), |x, y| x + y);
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Add { a, b })
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        check_broadcast("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = broadcast_zip(av.data(), bv.data(), |x, y| x * y);
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar { x })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// `a - b`, recorded as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp { x })
    }

    /// Natural log; non-positive inputs yield a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log { x })
    }
}

pub(crate) fn mul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = b.numel();
    let da = need_a.then(|| broadcast_zip(g, b.data(), |d, y| d * y));
    let db = need_b.then(|| {
        let prod: Vec<f64> = g.iter().zip(a.data()).map(|(d, x)| d * x).collect();
        reduce_broadcast(&prod, n)
    });
    (da, db)
}

pub(crate) fn relu_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

pub(crate) fn gelu_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data().iter().zip(g).map(|(&v, &d)| d * gelu_grad(v)).collect()
}
