//! The pre-training loop: two views, online and target branches,
//! reconstruction of the first view, weighted objective, AdamW and EMA.

use std::time::Instant;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use repre_tensor::{Tape, TensorError, Tensor};
use serde::{Deserialize, Serialize};

use crate::contrastive::{ema_update, symmetrized_contrast, ContrastMode, Heads, NegativeQueue, ViewOutputs};
use crate::decoder::{decoder_cost_ratio, reconstruction_loss, CostRatio, Decoder};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::objective::UncertaintyWeights;
use crate::params::{module_rng, ParamStore};
use crate::pipeline::augment::augment_two_views;
use crate::pipeline::config::{DataSource, TrainConfig};
use crate::pipeline::data::{self, Dataset};
use crate::pipeline::optim::{lr_at, AdamW};

pub const ENCODER_PREFIX: &str = "encoder";
const HEADS_PREFIX: &str = "heads";
const DECODER_PREFIX: &str = "decoder";
const OBJECTIVE_PREFIX: &str = "objective";

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// One-based index of the completed step.
    pub step: u64,
    pub l_contrast: f64,
    pub l_reconstruct: Option<f64>,
    pub combined: f64,
    pub lambda_contrast: f64,
    pub lambda_reconstruct: Option<f64>,
    pub psnr: Option<f64>,
    pub param_ratio: f64,
    pub flop_ratio: f64,
    pub step_seconds: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Generator for one purpose within one step, independent of history.
pub fn step_rng(seed: u64, step: u64, stream: &str) -> ChaCha8Rng {
    module_rng(seed, &format!("step/{step}/{stream}"))
}

/// Online network: encoder, heads, optional decoder and loss weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub heads: Heads,
    pub decoder: Option<Decoder>,
    pub weights: Option<UncertaintyWeights>,
}

/// Target network: encoder and projector only.
#[derive(Clone, Debug)]
pub struct TargetModel {
    pub encoder: Encoder,
    pub heads: Heads,
}

pub fn build_dataset(config: &TrainConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Synthetic { seed, size, classes } => {
            data::synthetic(*seed, *size, *classes, config.encoder.image_size)
        }
        DataSource::Directory(path) => data::load_dir(path, config.encoder.image_size),
    }
}

fn as_loss<T>(r: Result<T>, term: &'static str, step: u64) -> Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. }) => {
            Error::NonFiniteLoss { term, step }
        }
        e => e,
    })
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(&shape, data)?)
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(repre_tensor::L2_NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    online: ParamStore,
    target: ParamStore,
    model: Model,
    target_model: TargetModel,
    queue: Option<NegativeQueue>,
    optimizer: AdamW,
    step: u64,
    cost: CostRatio,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let dataset = build_dataset(&config)?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.len() < config.batch_size {
            return Err(Error::Config(format!(
                "dataset has {} images, fewer than the batch size {}",
                dataset.len(),
                config.batch_size
            )));
        }
        let seed = config.seed;
        let mode = config.contrast.mode;
        let mut online = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut online, ENCODER_PREFIX, seed)?;
        let repr = config.encoder.repr_width();
        let heads = Heads::new(&config.contrast.heads, mode, repr, &mut online, HEADS_PREFIX, seed)?;
        let (decoder, weights) = if config.reconstruction {
            (
                Some(Decoder::new(&config.decoder, &config.encoder, &mut online, DECODER_PREFIX, seed)?),
                Some(UncertaintyWeights::init(&config.objective, &mut online, OBJECTIVE_PREFIX)?),
            )
        } else {
            (None, None)
        };
        let mut target = ParamStore::new();
        let target_model = TargetModel {
            encoder: Encoder::new(&config.encoder, &mut target, ENCODER_PREFIX, seed)?,
            heads: Heads::new(
                &config.contrast.heads,
                ContrastMode::WithNegatives,
                repr,
                &mut target,
                HEADS_PREFIX,
                seed,
            )?,
        };
        let queue = match (mode, config.contrast.queue_capacity) {
            (ContrastMode::WithNegatives, cap) if cap > 0 => {
                Some(NegativeQueue::new(cap, config.contrast.heads.projector_out)?)
            }
            _ => None,
        };
        let optimizer = AdamW::new(&config.optim, &online);
        let cost = decoder_cost_ratio(&encoder, decoder.as_ref(), &online);
        Ok(Self {
            dataset,
            online,
            target,
            model: Model { encoder, heads, decoder, weights },
            target_model,
            queue,
            optimizer,
            step: 0,
            cost,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn target_model(&self) -> &TargetModel {
        &self.target_model
    }

    pub fn online_params(&self) -> &ParamStore {
        &self.online
    }

    pub fn online_params_mut(&mut self) -> &mut ParamStore {
        &mut self.online
    }

    pub fn target_params(&self) -> &ParamStore {
        &self.target
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn queue(&self) -> Option<&NegativeQueue> {
        self.queue.as_ref()
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn cost_ratio(&self) -> CostRatio {
        self.cost
    }

    /// Images drawn (without replacement) for the next step.
    pub fn next_batch(&self) -> Vec<&Tensor> {
        let mut rng = step_rng(self.config.seed, self.step, "batch");
        index::sample(&mut rng, self.dataset.len(), self.config.batch_size)
            .into_iter()
            .map(|i| &self.dataset.images[i])
            .collect()
    }

    /// Draws the next batch from the dataset and trains on it.
    pub fn step_once(&mut self) -> Result<MetricsRecord> {
        let batch: Vec<Tensor> = self.next_batch().into_iter().cloned().collect();
        self.train_step(&batch)
    }

    /// Runs `n` steps, handing every record to `sink`.
    pub fn run(&mut self, n: u64, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        for _ in 0..n {
            let record = self.step_once()?;
            sink(&record)?;
        }
        Ok(())
    }

    /// One optimization step on `images` (`[H, W, 3]` each, in `[0, 1]`).
    pub fn train_step(&mut self, images: &[Tensor]) -> Result<MetricsRecord> {
        let started = Instant::now();
        let step = self.step;
        let cfg = &self.config;
        let b = images.len();
        if b == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let in_batch = cfg.contrast.mode == ContrastMode::WithNegatives
            && self.queue.as_ref().map_or(true, NegativeQueue::is_empty);
        if in_batch && b < 2 {
            return Err(Error::Invalid("in-batch negatives need at least two images".into()));
        }

        let mut rng = step_rng(cfg.seed, step, "augment");
        let views = images
            .iter()
            .map(|img| augment_two_views(img, &cfg.augment, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<&Tensor> = views.iter().map(|v| &v.v1_norm).chain(views.iter().map(|v| &v.v2_norm)).collect();
        let inputs = stack(&inputs)?;

        // Target branch on its own constant-only tape.
        let keys = {
            let mut tape = Tape::new();
            let p = self.target.bind(&mut tape, false);
            let x = tape.constant(inputs.clone());
            let out = self.target_model.encoder.forward(&mut tape, &p, x)?;
            let z = self.target_model.heads.project(&mut tape, &p, out.repr)?;
            tape.value(z).clone()
        };

        let mut tape = Tape::new();
        let p = self.online.bind(&mut tape, true);
        let x = tape.constant(inputs);
        let out = self.model.encoder.forward(&mut tape, &p, x)?;
        let z = self.model.heads.project(&mut tape, &p, out.repr)?;
        let q = self.model.heads.predict(&mut tape, &p, z)?;
        let k = tape.constant(keys.clone());
        let l_contrast = as_loss(
            (|| {
                let v1 = ViewOutputs { online: tape.slice(q, 0, 0, b)?, target: tape.slice(k, 0, 0, b)? };
                let v2 = ViewOutputs { online: tape.slice(q, 0, b, b)?, target: tape.slice(k, 0, b, b)? };
                let queue = if in_batch { None } else { self.queue.as_ref() };
                symmetrized_contrast(&mut tape, cfg.contrast.mode, v1, v2, queue, cfg.contrast.heads.temperature)
            })(),
            "contrastive",
            step,
        )?;

        let mut recon_stats = None;
        let total = match (&self.model.decoder, &self.model.weights) {
            (Some(decoder), Some(weights)) => {
                let raw = stack(&views.iter().map(|v| &v.v1_raw).collect::<Vec<_>>())?;
                let l_reconstruct = as_loss(
                    (|| {
                        let taps = out.taps.leading(&mut tape, b)?;
                        let recon = decoder.reconstruct(&mut tape, &p, &taps)?;
                        let img = tape.constant(raw);
                        let l = reconstruction_loss(&mut tape, img, recon)?;
                        Ok((l, recon, img))
                    })(),
                    "reconstruction",
                    step,
                )?;
                let (l_r, recon, img) = l_reconstruct;
                let mse = tape
                    .value(recon)
                    .data()
                    .iter()
                    .zip(tape.value(img).data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / tape.value(img).numel() as f64;
                recon_stats = Some((tape.value(l_r).data()[0], 10.0 * (1.0 / mse).log10()));
                as_loss(weights.combine(&mut tape, &p, l_contrast, l_r), "combined", step)?
            }
            _ => l_contrast,
        };
        let l_c = tape.value(l_contrast).data()[0];
        let combined = tape.value(total).data()[0];
        as_loss(tape.backward(total).map_err(Error::from), "gradient", step)?;

        self.online.zero_grads();
        self.online.accumulate_grads(&tape, &p);
        drop(tape);
        let lr = lr_at(&cfg.optim, step, cfg.steps);
        self.optimizer.step(&mut self.online, lr)?;
        ema_update(&mut self.target, &self.online, cfg.contrast.momentum)?;
        if let Some(queue) = &mut self.queue {
            queue.enqueue_keys(&unit_rows(&keys)?)?;
        }
        self.step += 1;

        let (lambda_contrast, lambda_reconstruct) = match &self.model.weights {
            Some(w) => {
                let (a, b) = w.lambdas(&self.online);
                (a, Some(b))
            }
            None => (1.0, None),
        };
        Ok(MetricsRecord {
            step: self.step,
            l_contrast: l_c,
            l_reconstruct: recon_stats.map(|s| s.0),
            combined,
            lambda_contrast,
            lambda_reconstruct,
            psnr: recon_stats.map(|s| s.1),
            param_ratio: self.cost.param_ratio,
            flop_ratio: self.cost.flop_ratio,
            step_seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Class (or pooled) representations of `images`, normalized with the
    /// policy statistics, `[n, repr_width]`.
    pub fn embed(&self, images: &[Tensor]) -> Result<Tensor> {
        embed_with(&self.model.encoder, &self.online, &self.config.augment, images)
    }

    pub(crate) fn restore_parts(
        &mut self,
        step: u64,
        online: ParamStore,
        target: ParamStore,
        optimizer: AdamW,
        queue: Option<NegativeQueue>,
    ) {
        self.step = step;
        self.online = online;
        self.target = target;
        self.optimizer = optimizer;
        self.queue = queue;
    }
}

/// Runs `encoder` over normalized `images` in chunks on no-grad tapes.
pub fn embed_with(
    encoder: &Encoder,
    store: &ParamStore,
    policy: &crate::pipeline::augment::AugmentationPolicy,
    images: &[Tensor],
) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let width = encoder.config().repr_width();
    let mut data = Vec::with_capacity(images.len() * width);
    for chunk in images.chunks(CHUNK) {
        let normed: Vec<Tensor> = chunk.iter().map(|i| policy.normalize(i)).collect();
        let batch = stack(&normed.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(batch);
        let out = encoder.forward(&mut tape, &p, x)?;
        data.extend_from_slice(tape.value(out.repr).data());
    }
    if images.is_empty() {
        return Err(Error::Invalid("no images to embed".into()));
    }
    Ok(Tensor::new(&[images.len(), width], data)?)
}
