//! Central finite-difference verification of tape gradients.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// (input index, element index) where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Checks `f` (scalar-valued) at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, tol)
}

/// Checks the gradient of `f` with respect to every element of every input.
///
/// `eps` must lie in `[1e-7, 1e-3]`. The function is evaluated twice at the
/// base point first; any disagreement is reported as non-determinism.
pub fn finite_difference_check_multi<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            detail: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }

    let evaluate = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let first = evaluate(inputs)?;
    let second = evaluate(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| x.map(|_| 0.0)))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tol };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A scalar-valued probe around one operator, with its random inputs.
pub struct GradCase {
    pub name: &'static str,
    pub kind: OpKind,
    pub inputs: Vec<Tensor>,
    f: CaseFn,
}

impl GradCase {
    pub fn new(
        name: &'static str,
        kind: OpKind,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        GradCase { name, kind, inputs, f: Box::new(f) }
    }

    pub fn evaluate(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        (self.f)(tape, vars)
    }

    pub fn check(&self, eps: f64, tol: f64) -> Result<GradCheckReport> {
        finite_difference_check_multi(&self.f, &self.inputs, eps, tol)
    }
}

/// Uniform in ±[0.1, 1] so that kinks at zero are never straddled.
fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

fn normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng).expect("valid shape")
}

/// Contracts an operator output against fixed random weights so that every
/// output element contributes to the scalar.
fn probe<R: Rng + ?Sized>(
    name: &'static str,
    kind: OpKind,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    rng: &mut R,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    let weights = normal(out_shape, rng);
    GradCase::new(name, kind, inputs, move |tape, vars| {
        let y = op(tape, vars)?;
        let w = tape.constant(weights.clone());
        let yw = tape.mul(y, w)?;
        tape.sum(yw)
    })
}

/// One random instance of every operator in [`OpKind::ALL`], each input
/// holding at most 64 elements.
pub fn operator_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut add = |c: GradCase| cases.push(c);

    add(probe("matmul/shared-rhs", OpKind::MatMul, vec![normal(&[2, 3, 4], rng), normal(&[4, 5], rng)], &[2, 3, 5], rng,
        |t, v| t.matmul(v[0], v[1])));
    add(probe("matmul/batched", OpKind::MatMul, vec![normal(&[2, 3, 4], rng), normal(&[2, 4, 3], rng)], &[2, 3, 3], rng,
        |t, v| t.matmul(v[0], v[1])));
    add(probe("conv2d/3x3", OpKind::Conv2d,
        vec![normal(&[1, 3, 3, 2], rng), normal(&[3, 3, 2, 2], rng), normal(&[2], rng)], &[1, 3, 3, 2], rng,
        |t, v| t.conv2d(v[0], v[1], v[2])));
    add(probe("conv2d/1x1", OpKind::Conv2d,
        vec![normal(&[2, 2, 2, 3], rng), normal(&[1, 1, 3, 2], rng), normal(&[2], rng)], &[2, 2, 2, 2], rng,
        |t, v| t.conv2d(v[0], v[1], v[2])));
    add(probe("add/broadcast", OpKind::Add, vec![normal(&[3, 4], rng), normal(&[4], rng)], &[3, 4], rng,
        |t, v| t.add(v[0], v[1])));
    add(probe("mul/elementwise", OpKind::Mul, vec![normal(&[3, 4], rng), normal(&[3, 4], rng)], &[3, 4], rng,
        |t, v| t.mul(v[0], v[1])));
    add(probe("mul/broadcast", OpKind::Mul, vec![normal(&[2, 3, 2], rng), normal(&[3, 2], rng)], &[2, 3, 2], rng,
        |t, v| t.mul(v[0], v[1])));
    add(probe("concat", OpKind::Concat, vec![normal(&[2, 2, 3], rng), normal(&[2, 1, 3], rng)], &[2, 3, 3], rng,
        |t, v| t.concat(&[v[0], v[1]], 1)));
    add(probe("split", OpKind::Split, vec![normal(&[3, 4], rng)], &[3, 2], rng,
        |t, v| t.slice(v[0], 1, 1, 2)));
    add(probe("reshape", OpKind::Reshape, vec![normal(&[2, 6], rng)], &[3, 4], rng,
        |t, v| t.reshape(v[0], &[3, 4])));
    add(probe("transpose", OpKind::Transpose, vec![normal(&[2, 3, 4], rng)], &[4, 2, 3], rng,
        |t, v| t.transpose(v[0], &[2, 0, 1])));
    add(probe("mean/axis", OpKind::Mean, vec![normal(&[3, 4, 2], rng)], &[3, 2], rng,
        |t, v| t.mean(v[0], Some(1))));
    add(probe("mean/all", OpKind::Mean, vec![normal(&[3, 4], rng)], &[], rng,
        |t, v| t.mean(v[0], None)));
    add(probe("softmax", OpKind::Softmax, vec![normal(&[3, 5], rng)], &[3, 5], rng,
        |t, v| t.softmax(v[0])));
    add(probe("layer_norm", OpKind::LayerNorm,
        vec![normal(&[3, 6], rng), normal(&[6], rng), normal(&[6], rng)], &[3, 6], rng,
        |t, v| t.layer_norm(v[0], v[1], v[2])));
    add(probe("gelu", OpKind::Gelu, vec![normal(&[12], rng)], &[12], rng, |t, v| t.gelu(v[0])));
    add(probe("relu", OpKind::Relu, vec![away_from_zero(&[12], rng)], &[12], rng, |t, v| t.relu(v[0])));
    add(probe("l2_normalize", OpKind::L2Normalize, vec![normal(&[3, 4], rng)], &[3, 4], rng,
        |t, v| t.l2_normalize(v[0])));
    add(probe("abs_sum", OpKind::AbsSum, vec![away_from_zero(&[10], rng)], &[], rng, |t, v| t.abs_sum(v[0])));
    let positive = Tensor::uniform(&[8], 0.5, 2.0, rng).expect("valid shape");
    add(probe("log", OpKind::Log, vec![positive], &[8], rng, |t, v| t.log(v[0])));
    add(probe("exp", OpKind::Exp, vec![normal(&[8], rng)], &[8], rng, |t, v| t.exp(v[0])));
    add(probe("bilinear_upsample_2x", OpKind::BilinearUpsample2x, vec![normal(&[1, 2, 3, 2], rng)], &[1, 4, 6, 2], rng,
        |t, v| t.bilinear_upsample_2x(v[0])));
    add(probe("patch_merge", OpKind::PatchMerge, vec![normal(&[1, 4, 4, 2], rng)], &[1, 2, 2, 8], rng,
        |t, v| t.patch_merge(v[0])));
    let c = rng.gen_range(-2.0..2.0);
    add(probe("scalar/scale", OpKind::Scalar, vec![normal(&[6], rng)], &[6], rng, move |t, v| t.scale(v[0], c)));
    add(probe("scalar/shift", OpKind::Scalar, vec![normal(&[6], rng)], &[6], rng, move |t, v| {
        let s = t.add_scalar(v[0], c)?;
        t.mul(s, s)
    }));
    cases
}
