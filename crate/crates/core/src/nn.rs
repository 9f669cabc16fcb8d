//! Layers shared by the encoder, heads and decoder.

use rand::Rng;
use repre_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub(crate) const INIT_STD: f64 = 0.02;

/// Affine map over the last axis: `x·W + b`, `W` shaped `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[in_dim, out_dim], INIT_STD, rng)?,
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])?, false)?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        Ok(tape.add(y, p[self.bias])?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// Multiply-accumulates per input row.
    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)?, false)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim])?, false)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p[self.gamma], p[self.beta])?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Two linear layers with an activation in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], rng)?;
        Ok(Self { fc1, fc2, activation })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = match self.activation {
            Activation::Gelu => tape.gelu(h)?,
            Activation::Relu => tape.relu(h)?,
        };
        self.fc2.forward(tape, p, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs() + self.fc2.macs()
    }
}

/// Multi-head self-attention with separate query/key/value projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng)?,
            heads,
        })
    }

    fn dims(&self, tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
        match *tape.shape(x) {
            [b, t, c] if c == self.query.in_dim => Ok((b, t, c)),
            ref s => Err(Error::Invalid(format!(
                "attention expects [batch, tokens, {}], got {s:?}",
                self.query.in_dim
            ))),
        }
    }

    /// Scaled query-key logits, `[B, heads, T, T]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (b, t, c) = self.dims(tape, x)?;
        let d = c / self.heads;
        let q = self.query.forward(tape, p, x)?;
        let q = tape.reshape(q, &[b, t, self.heads, d])?;
        let q = tape.transpose(q, &[0, 2, 1, 3])?;
        let k = self.key.forward(tape, p, x)?;
        let k = tape.reshape(k, &[b, t, self.heads, d])?;
        let kt = tape.transpose(k, &[0, 2, 3, 1])?;
        let s = tape.matmul(q, kt)?;
        Ok(tape.scale(s, 1.0 / (d as f64).sqrt())?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (b, t, c) = self.dims(tape, x)?;
        let d = c / self.heads;
        let logits = self.logits(tape, p, x)?;
        let attn = tape.softmax(logits)?;
        let v = self.value.forward(tape, p, x)?;
        let v = tape.reshape(v, &[b, t, self.heads, d])?;
        let v = tape.transpose(v, &[0, 2, 1, 3])?;
        let o = tape.matmul(attn, v)?;
        let o = tape.transpose(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, t, c])?;
        self.proj.forward(tape, p, o)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.proj]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }

    /// Multiply-accumulates for one sequence of `tokens` tokens.
    pub fn macs(&self, tokens: usize) -> u64 {
        let c = self.query.in_dim as u64;
        let t = tokens as u64;
        4 * t * c * c + 2 * t * t * c
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub const MLP_RATIO: usize = 4;

    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                [dim, dim * Self::MLP_RATIO, dim],
                Activation::Gelu,
                rng,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.norm1.params();
        v.extend(self.attn.params());
        v.extend(self.norm2.params());
        v.extend(self.mlp.params());
        v
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        self.attn.macs(tokens) + tokens as u64 * self.mlp.macs()
    }
}

/// Square convolution (`k` ∈ {1, 3}) over `[B, H, W, C]` grids, zero padded
/// so the spatial size is kept.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[kernel, kernel, in_ch, out_ch], INIT_STD, rng)?,
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])?, false)?;
        Ok(Self { weight, bias, kernel, in_ch, out_ch })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p[self.weight], p[self.bias])?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// Multiply-accumulates per output position.
    pub fn macs(&self) -> u64 {
        (self.kernel * self.kernel * self.in_ch * self.out_ch) as u64
    }
}
