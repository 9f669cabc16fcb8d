//! Linear-probe evaluation on frozen encoder representations.

use repre_tensor::{Tape, Tensor};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::augment::AugmentationPolicy;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::{OptimConfig, TrainConfig};
use crate::pipeline::data::Dataset;
use crate::pipeline::optim::AdamW;
use crate::pipeline::train::{embed_with, Trainer, ENCODER_PREFIX};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Full-batch optimizer iterations.
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 300, lr: 0.05, weight_decay: 1e-4 }
    }
}

/// An encoder with its own copy of the encoder parameters and nothing
/// else; there is no decoder on this path.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    encoder: Encoder,
    params: ParamStore,
    policy: AugmentationPolicy,
}

impl FrozenEncoder {
    fn build(config: &TrainConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut params, ENCODER_PREFIX, config.seed)?;
        Ok(Self { encoder, params, policy: config.augment.clone() })
    }

    fn copy_from(&mut self, source: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let t = source(&name).ok_or_else(|| Error::Checkpoint(format!("missing encoder parameter {name}")))?;
            if t.shape() != self.params.value(id).shape() {
                return Err(Error::Checkpoint(format!("encoder parameter {name} has shape {:?}", t.shape())));
            }
            *self.params.value_mut(id) = t;
        }
        Ok(())
    }

    /// Freshly initialized encoder, the probe baseline.
    pub fn random(config: &TrainConfig) -> Result<Self> {
        Self::build(config)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut f = Self::build(&ckpt.config)?;
        f.copy_from(|n| ckpt.online.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone()))?;
        Ok(f)
    }

    pub fn from_trainer(trainer: &Trainer) -> Result<Self> {
        let mut f = Self::build(trainer.config())?;
        let store = trainer.online_params();
        f.copy_from(|n| store.id(n).map(|id| store.value(id).clone()))?;
        Ok(f)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// `[n, repr_width]` representations.
    pub fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        embed_with(&self.encoder, &self.params, &self.policy, images)
    }

    pub fn digest(&self) -> [u8; 32] {
        self.params.digest()
    }
}

/// Softmax regression on standardized features.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weight: Tensor,
    bias: Tensor,
}

fn check_xy(x: &Tensor, y: &[usize]) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, d] if n == y.len() => Ok((n, d)),
        ref s => Err(Error::Invalid(format!("{} labels for features of shape {s:?}", y.len()))),
    }
}

impl LinearClassifier {
    fn standardize(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) * self.scale[j];
            }
        }
        out
    }

    pub fn fit(x: &Tensor, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let (n, d) = check_xy(x, y)?;
        if n == 0 || classes == 0 || y.iter().any(|&l| l >= classes) {
            return Err(Error::Invalid(format!("labels must lie in 0..{classes} and the set must be non-empty")));
        }
        let mut mean = vec![0.0; d];
        for row in x.data().chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for row in x.data().chunks_exact(d) {
            var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n as f64);
        }
        let scale = var.iter().map(|v| 1.0 / v.sqrt().max(1e-8)).collect();
        let mut clf = Self { mean, scale, weight: Tensor::zeros(&[d, classes])?, bias: Tensor::zeros(&[classes])? };
        let xs = clf.standardize(x);
        let mut onehot = vec![0.0; n * classes];
        y.iter().enumerate().for_each(|(i, &l)| onehot[i * classes + l] = 1.0);
        let onehot = Tensor::new(&[n, classes], onehot)?;

        let mut store = ParamStore::new();
        let w = store.add("weight", clf.weight.clone(), true)?;
        let b = store.add("bias", clf.bias.clone(), false)?;
        let optim = OptimConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..OptimConfig::default() };
        let mut opt = AdamW::new(&optim, &store);
        for _ in 0..cfg.iterations {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let xv = tape.constant(xs.clone());
            let logits = tape.matmul(xv, p[w])?;
            let logits = tape.add(logits, p[b])?;
            let prob = tape.softmax(logits)?;
            let logp = tape.log(prob)?;
            let mask = tape.constant(onehot.clone());
            let picked = tape.mul(logp, mask)?;
            let total = tape.sum(picked)?;
            let loss = tape.scale(total, -1.0 / n as f64)?;
            tape.backward(loss)?;
            store.zero_grads();
            store.accumulate_grads(&tape, &p);
            opt.step(&mut store, cfg.lr)?;
        }
        clf.weight = store.value(w).clone();
        clf.bias = store.value(b).clone();
        Ok(clf)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let d = self.mean.len();
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(Error::Invalid(format!("features {:?} do not have width {d}", x.shape())));
        }
        let xs = self.standardize(x);
        let k = self.bias.numel();
        Ok(xs
            .data()
            .chunks_exact(d)
            .map(|row| {
                (0..k)
                    .map(|c| {
                        let mut s = self.bias.data()[c];
                        for (j, v) in row.iter().enumerate() {
                            s += v * self.weight.data()[j * k + c];
                        }
                        s
                    })
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        check_xy(x, y)?;
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub digest_before: [u8; 32],
    pub digest_after: [u8; 32],
}

impl ProbeReport {
    pub fn encoder_unchanged(&self) -> bool {
        self.digest_before == self.digest_after
    }
}

/// Trains a linear layer on `train` features and reports test top-1
/// accuracy. The encoder is only read.
pub fn linear_probe(train: &Dataset, test: &Dataset, encoder: &FrozenEncoder, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if train.num_classes() != test.num_classes() {
        return Err(Error::Data(format!(
            "train set has {} classes, test set {}",
            train.num_classes(),
            test.num_classes()
        )));
    }
    let digest_before = encoder.digest();
    let xtr = encoder.features(&train.images)?;
    let xte = encoder.features(&test.images)?;
    let clf = LinearClassifier::fit(&xtr, &train.labels, train.num_classes(), cfg)?;
    Ok(ProbeReport {
        accuracy: clf.accuracy(&xte, &test.labels)?,
        train_accuracy: clf.accuracy(&xtr, &train.labels)?,
        digest_before,
        digest_after: encoder.digest(),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn separable_two_class_features_are_learned_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..80 {
            let l = i % 2;
            let offset = if l == 0 { -2.0 } else { 2.0 };
            data.push(offset + rng.gen_range(-1.0..1.0));
            data.push(rng.gen_range(-3.0..3.0));
            labels.push(l);
        }
        let x = Tensor::new(&[80, 2], data).unwrap();
        let clf = LinearClassifier::fit(&x, &labels, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(clf.accuracy(&x, &labels).unwrap(), 1.0);
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[400, 8], 1.0, &mut rng).unwrap();
        let y: Vec<usize> = (0..400).map(|_| rng.gen_range(0..4)).collect();
        let xt = Tensor::randn(&[400, 8], 1.0, &mut rng).unwrap();
        let yt: Vec<usize> = (0..400).map(|_| rng.gen_range(0..4)).collect();
        let clf = LinearClassifier::fit(&x, &y, 4, &ProbeConfig::default()).unwrap();
        let acc = clf.accuracy(&xt, &yt).unwrap();
        // 0.25 ± 4 binomial standard deviations (≈ 0.087).
        assert!((acc - 0.25).abs() < 0.087, "accuracy {acc}");
    }

    #[test]
    fn label_count_mismatch_is_an_error() {
        let x = Tensor::zeros(&[3, 2]).unwrap();
        assert!(LinearClassifier::fit(&x, &[0, 1], 2, &ProbeConfig::default()).is_err());
    }
}
