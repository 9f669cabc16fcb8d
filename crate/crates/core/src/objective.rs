//! Learnable uncertainty weighting of the two losses.

use repre_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Initial log-variances; zero gives unit weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectiveConfig {
    pub s_contrast: f64,
    pub s_reconstruct: f64,
}

/// Learnable log-variances `s₁`, `s₂`; the effective weights are
/// `λ = exp(−s)`.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyWeights {
    pub s_contrast: ParamId,
    pub s_reconstruct: ParamId,
}

impl UncertaintyWeights {
    pub fn init(config: &ObjectiveConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        if !config.s_contrast.is_finite() || !config.s_reconstruct.is_finite() {
            return Err(Error::Config("initial log-variances must be finite".into()));
        }
        Ok(Self {
            s_contrast: store.add(format!("{prefix}.s_contrast"), Tensor::scalar(config.s_contrast), false)?,
            s_reconstruct: store.add(
                format!("{prefix}.s_reconstruct"),
                Tensor::scalar(config.s_reconstruct),
                false,
            )?,
        })
    }

    /// `(λ₁, λ₂)` at the current parameter values.
    pub fn lambdas(&self, store: &ParamStore) -> (f64, f64) {
        let s1 = store.value(self.s_contrast).data()[0];
        let s2 = store.value(self.s_reconstruct).data()[0];
        ((-s1).exp(), (-s2).exp())
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.s_contrast, self.s_reconstruct]
    }

    pub fn combine(&self, tape: &mut Tape, p: &Bound, l_contrast: Var, l_reconstruct: Var) -> Result<Var> {
        combined_loss(tape, l_contrast, l_reconstruct, p[self.s_contrast], p[self.s_reconstruct])
    }
}

/// `exp(−s₁)·L_c + s₁ + exp(−s₂)·L_r + s₂` over scalar inputs.
pub fn combined_loss(tape: &mut Tape, l_contrast: Var, l_reconstruct: Var, s1: Var, s2: Var) -> Result<Var> {
    for (v, what) in [
        (l_contrast, "contrastive loss"),
        (l_reconstruct, "reconstruction loss"),
        (s1, "s_contrast"),
        (s2, "s_reconstruct"),
    ] {
        let t = tape.value(v);
        if t.numel() != 1 {
            return Err(Error::Invalid(format!("{what} must be a scalar, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::Invalid(format!("{what} is not finite")));
        }
    }
    let t1 = weighted(tape, l_contrast, s1)?;
    let t2 = weighted(tape, l_reconstruct, s2)?;
    Ok(tape.add(t1, t2)?)
}

fn weighted(tape: &mut Tape, loss: Var, s: Var) -> Result<Var> {
    let ns = tape.neg(s)?;
    let lambda = tape.exp(ns)?;
    let term = tape.mul(lambda, loss)?;
    Ok(tape.add(term, s)?)
}
