//! Siamese contrastive branch: heads, negative queue, both loss families
//! and the EMA target update.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use repre_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::{module_rng, Bound, ParamId, ParamStore};

/// Allowed deviation of a key's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastMode {
    /// InfoNCE against a queue (or the batch) of negatives.
    WithNegatives,
    /// Negative cosine similarity through a predictor.
    WithoutNegatives,
}

impl fmt::Display for ContrastMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastMode::WithNegatives => "with_negatives",
            ContrastMode::WithoutNegatives => "without_negatives",
        })
    }
}

impl FromStr for ContrastMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_negatives" => Ok(ContrastMode::WithNegatives),
            "without_negatives" => Ok(ContrastMode::WithoutNegatives),
            other => Err(Error::Config(format!("unknown contrast mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub predictor_hidden: usize,
    pub temperature: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projector_hidden: 256,
            projector_out: 128,
            predictor_hidden: 256,
            temperature: 0.2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.projector_hidden == 0 || self.projector_out == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Projector (and predictor, in cosine mode) on top of an encoder.
#[derive(Clone, Debug)]
pub struct Heads {
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
}

impl Heads {
    /// The predictor exists iff `mode` is [`ContrastMode::WithoutNegatives`].
    pub fn new(
        config: &HeadConfig,
        mode: ContrastMode,
        in_dim: usize,
        store: &mut ParamStore,
        prefix: &str,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = module_rng(seed, "projector");
        let projector = Mlp::new(
            store,
            &format!("{prefix}.projector"),
            [in_dim, config.projector_hidden, config.projector_out],
            Activation::Relu,
            &mut rng,
        )?;
        let predictor = match mode {
            ContrastMode::WithNegatives => None,
            ContrastMode::WithoutNegatives => {
                let mut rng = module_rng(seed, "predictor");
                Some(Mlp::new(
                    store,
                    &format!("{prefix}.predictor"),
                    [config.projector_out, config.predictor_hidden, config.projector_out],
                    Activation::Relu,
                    &mut rng,
                )?)
            }
        };
        Ok(Self { projector, predictor })
    }

    pub fn project(&self, tape: &mut Tape, p: &Bound, repr: Var) -> Result<Var> {
        self.projector.forward(tape, p, repr)
    }

    /// Predictor output, or the projection itself when there is no predictor.
    pub fn predict(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        match &self.predictor {
            Some(m) => m.forward(tape, p, z),
            None => Ok(z),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.projector.params();
        if let Some(m) = &self.predictor {
            v.extend(m.params());
        }
        v
    }
}

/// FIFO of detached unit-norm keys.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and key width must be positive".into()));
        }
        Ok(Self { capacity, dim, entries: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends the rows of `keys` (`[b, D]`) in order, evicting the oldest
    /// entries beyond capacity. Every row must have unit norm.
    pub fn enqueue_keys(&mut self, keys: &Tensor) -> Result<()> {
        if keys.ndim() != 2 || keys.shape()[1] != self.dim {
            return Err(Error::Invalid(format!(
                "keys {:?} do not match queue width {}",
                keys.shape(),
                self.dim
            )));
        }
        for row in keys.data().chunks_exact(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Invalid(format!("queue key has norm {norm}, expected 1")));
            }
        }
        for row in keys.data().chunks_exact(self.dim) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(row.to_vec());
        }
        Ok(())
    }

    /// Entries as a `[len, D]` tensor, oldest first.
    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flatten().copied().collect();
        Tensor::new(&[self.entries.len(), self.dim], data).ok()
    }
}

/// Where the negatives of an InfoNCE term come from.
#[derive(Clone, Copy, Debug)]
pub enum Negatives<'a> {
    Queue(&'a NegativeQueue),
    /// Every other key in the batch; positives sit on the diagonal.
    InBatch,
}

fn check_unit_rows(tape: &Tape, x: Var, what: &str) -> Result<()> {
    let v = tape.value(x);
    let d = *v.shape().last().unwrap_or(&0);
    if v.ndim() != 2 || d == 0 {
        return Err(Error::Invalid(format!("{what} must be [batch, D], got {:?}", v.shape())));
    }
    for row in v.data().chunks_exact(d) {
        let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Invalid(format!(
                "{what} rows must be l2-normalized (found norm {norm})"
            )));
        }
    }
    Ok(())
}

fn check_nonzero_rows(tape: &Tape, x: Var, what: &str) -> Result<()> {
    let v = tape.value(x);
    let d = *v.shape().last().unwrap_or(&0);
    if v.ndim() != 2 || d == 0 {
        return Err(Error::Invalid(format!("{what} must be [batch, D], got {:?}", v.shape())));
    }
    if v.data().chunks_exact(d).any(|row| row.iter().all(|&a| a == 0.0)) {
        return Err(Error::Invalid(format!("{what} has a zero-norm row")));
    }
    Ok(())
}

/// Mean over the batch of `−log softmax(logits)[positive]`, where `mask`
/// is one at each row's positive column.
fn cross_entropy(tape: &mut Tape, logits: Var, mask: Tensor) -> Result<Var> {
    let b = tape.shape(logits)[0] as f64;
    let prob = tape.softmax(logits)?;
    let logp = tape.log(prob)?;
    let mask = tape.constant(mask);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / b)?)
}

/// InfoNCE with `Kq + 1` logits per query: the positive `q·k₊/τ` followed
/// by `q·kᵢ/τ` for every negative. `q` and `k_pos` are `[B, D]`, unit norm.
/// Averaged over the batch.
pub fn info_nce_loss(tape: &mut Tape, q: Var, k_pos: Var, negatives: Negatives<'_>, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    check_unit_rows(tape, q, "query")?;
    check_unit_rows(tape, k_pos, "positive key")?;
    if tape.shape(q) != tape.shape(k_pos) {
        return Err(Error::Invalid(format!(
            "query {:?} and key {:?} shapes differ",
            tape.shape(q),
            tape.shape(k_pos)
        )));
    }
    let (b, d) = (tape.shape(q)[0], tape.shape(q)[1]);
    match negatives {
        Negatives::Queue(queue) => {
            if queue.dim() != d {
                return Err(Error::Invalid(format!("queue width {} differs from key width {d}", queue.dim())));
            }
            let bank = queue
                .to_tensor()
                .ok_or_else(|| Error::Invalid("negative queue is empty".into()))?;
            let kq = bank.shape()[0];
            let prod = tape.mul(q, k_pos)?;
            let pos = tape.sum_axis(prod, 1)?;
            let pos = tape.reshape(pos, &[b, 1])?;
            let bank = tape.constant(bank);
            let bank_t = tape.transpose_last(bank)?;
            let neg = tape.matmul(q, bank_t)?;
            let logits = tape.concat(&[pos, neg], 1)?;
            let logits = tape.scale(logits, 1.0 / tau)?;
            let mut mask = vec![0.0; b * (kq + 1)];
            (0..b).for_each(|i| mask[i * (kq + 1)] = 1.0);
            cross_entropy(tape, logits, Tensor::new(&[b, kq + 1], mask)?)
        }
        Negatives::InBatch => {
            let kt = tape.transpose_last(k_pos)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, 1.0 / tau)?;
            let mut mask = vec![0.0; b * b];
            (0..b).for_each(|i| mask[i * b + i] = 1.0);
            cross_entropy(tape, logits, Tensor::new(&[b, b], mask)?)
        }
    }
}

/// `−⟨p/‖p‖, z/‖z‖⟩` averaged over the batch; `z` is detached first.
pub fn cosine_loss(tape: &mut Tape, p: Var, z: Var) -> Result<Var> {
    check_nonzero_rows(tape, p, "prediction")?;
    check_nonzero_rows(tape, z, "target")?;
    if tape.shape(p) != tape.shape(z) {
        return Err(Error::Invalid(format!(
            "prediction {:?} and target {:?} shapes differ",
            tape.shape(p),
            tape.shape(z)
        )));
    }
    let b = tape.shape(p)[0] as f64;
    let z = tape.detach(z);
    let pn = tape.l2_normalize(p)?;
    let zn = tape.l2_normalize(z)?;
    let prod = tape.mul(pn, zn)?;
    let total = tape.sum(prod)?;
    Ok(tape.scale(total, -1.0 / b)?)
}

/// Online outputs of one view: the normalized query and the prediction.
#[derive(Clone, Copy, Debug)]
pub struct ViewOutputs {
    /// Projection (InfoNCE mode) or prediction (cosine mode).
    pub online: Var,
    /// Target-branch projection, detached.
    pub target: Var,
}

/// `ctr(q1, k2) + ctr(q2, k1)`. With negatives, queries and keys are
/// l2-normalized here; `queue = None` means in-batch negatives. A queue in
/// cosine mode is an error.
pub fn symmetrized_contrast(
    tape: &mut Tape,
    mode: ContrastMode,
    v1: ViewOutputs,
    v2: ViewOutputs,
    queue: Option<&NegativeQueue>,
    tau: f64,
) -> Result<Var> {
    match mode {
        ContrastMode::WithNegatives => {
            let negatives = match queue {
                Some(q) if !q.is_empty() => Negatives::Queue(q),
                Some(_) => return Err(Error::Invalid("negative queue is empty".into())),
                None => Negatives::InBatch,
            };
            let q1 = tape.l2_normalize(v1.online)?;
            let q2 = tape.l2_normalize(v2.online)?;
            let k1 = tape.detach(v1.target);
            let k1 = tape.l2_normalize(k1)?;
            let k2 = tape.detach(v2.target);
            let k2 = tape.l2_normalize(k2)?;
            let a = info_nce_loss(tape, q1, k2, negatives, tau)?;
            let b = info_nce_loss(tape, q2, k1, negatives, tau)?;
            Ok(tape.add(a, b)?)
        }
        ContrastMode::WithoutNegatives => {
            if queue.is_some() {
                return Err(Error::Invalid("cosine mode takes no negative queue".into()));
            }
            let a = cosine_loss(tape, v1.online, v2.target)?;
            let b = cosine_loss(tape, v2.online, v1.target)?;
            Ok(tape.add(a, b)?)
        }
    }
}

/// `target ← m·target + (1−m)·online` for every target parameter, matched
/// to the online parameter of the same name.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Invalid(format!("momentum {momentum} outside [0, 1]")));
    }
    let ids: Vec<ParamId> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        let src = online
            .id(&name)
            .ok_or_else(|| Error::Invalid(format!("online branch has no parameter {name}")))?;
        let src = online.value(src);
        let dst = target.value_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::Invalid(format!(
                "parameter {name}: target {:?} vs online {:?}",
                dst.shape(),
                src.shape()
            )));
        }
        dst.data_mut()
            .iter_mut()
            .zip(src.data())
            .for_each(|(t, o)| *t = momentum * *t + (1.0 - momentum) * o);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter().map(|a| a / n).collect()
    }

    #[test]
    fn two_term_softmax_by_hand() {
        let mut queue = NegativeQueue::new(1, 2).unwrap();
        queue.enqueue_keys(&Tensor::new(&[1, 2], vec![-1.0, 0.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let l = info_nce_loss(&mut tape, q, k, Negatives::Queue(&queue), 1.0).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        assert!(info_nce_loss(&mut tape, q, k, Negatives::InBatch, 0.2).is_err());
        assert!(info_nce_loss(&mut tape, k, k, Negatives::InBatch, 0.0).is_err());
        let z = tape.constant(Tensor::zeros(&[1, 2]).unwrap());
        assert!(cosine_loss(&mut tape, k, z).is_err());
    }

    #[test]
    fn queue_is_fifo_and_checks_norms() {
        let mut queue = NegativeQueue::new(4, 2).unwrap();
        let keys: Vec<f64> = (0..5).flat_map(|i| unit(&[1.0, i as f64])).collect();
        queue.enqueue_keys(&Tensor::new(&[5, 2], keys.clone()).unwrap()).unwrap();
        assert_eq!(queue.len(), 4);
        let stored: Vec<f64> = queue.entries().flatten().copied().collect();
        assert_eq!(stored, keys[2..]);
        assert!(queue.enqueue_keys(&Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn in_batch_single_pair_is_zero_loss() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
        let l = info_nce_loss(&mut tape, q, q, Negatives::InBatch, 0.2).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn ema_scalar_example() {
        let mut online = ParamStore::new();
        online.add("w", Tensor::scalar(1.0), false).unwrap();
        let mut target = ParamStore::new();
        target.add("w", Tensor::scalar(0.0), false).unwrap();
        ema_update(&mut target, &online, 0.99).unwrap();
        let v = target.value(target.id("w").unwrap()).item().unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        let mut bad = ParamStore::new();
        bad.add("w", Tensor::vector(&[1.0, 2.0]), false).unwrap();
        assert!(ema_update(&mut target, &bad, 0.5).is_err());
    }

    #[test]
    fn cosine_mode_rejects_a_queue() {
        let queue = NegativeQueue::new(2, 2).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let v = ViewOutputs { online: a, target: a };
        assert!(symmetrized_contrast(&mut tape, ContrastMode::WithoutNegatives, v, v, Some(&queue), 0.2).is_err());
    }
}
