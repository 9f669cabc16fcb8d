//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::contrastive::{ContrastMode, HeadConfig};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{io_err, Error, Result};
use crate::objective::ObjectiveConfig;
use crate::pipeline::augment::AugmentationPolicy;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Seeded colored-shape images; the class is the shape.
    Synthetic { seed: u64, size: usize, classes: usize },
    /// Class subdirectories of `.ppm` / `.rawt` images.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub mode: ContrastMode,
    pub heads: HeadConfig,
    pub momentum: f64,
    /// Zero means in-batch negatives.
    pub queue_capacity: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            mode: ContrastMode::WithNegatives,
            heads: HeadConfig::default(),
            momentum: 0.99,
            queue_capacity: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// When false the decoder is not built and the objective is the bare
    /// contrastive loss.
    pub reconstruction: bool,
    pub contrast: ContrastConfig,
    pub objective: ObjectiveConfig,
    pub data: DataSource,
    pub augment: AugmentationPolicy,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint interval in steps; zero saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            reconstruction: true,
            contrast: ContrastConfig::default(),
            objective: ObjectiveConfig::default(),
            data: DataSource::Synthetic { seed: 0, size: 2048, classes: 4 },
            augment: AugmentationPolicy::default(),
            optim: OptimConfig::default(),
            batch_size: 32,
            steps: 500,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated numbers")))
}

fn triple(v: [f64; 3]) -> String {
    format!("{:?},{:?},{:?}", v[0], v[1], v[2])
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.contrast.heads.validate()?;
        self.augment.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.contrast.momentum) {
            return bad("contrast.momentum must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.contrast.mode == ContrastMode::WithNegatives && self.contrast.queue_capacity == 0 && self.batch_size < 2 {
            return bad("in-batch negatives need train.batch_size >= 2");
        }
        if self.contrast.mode == ContrastMode::WithoutNegatives && self.contrast.queue_capacity != 0 {
            return bad("contrast.queue_capacity must be 0 in without_negatives mode");
        }
        if !(self.optim.lr >= 0.0 && self.optim.lr.is_finite()) || self.optim.weight_decay < 0.0 {
            return bad("optim.lr and optim.weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.optim.warmup_fraction) {
            return bad("optim.warmup_fraction must lie in [0, 1]");
        }
        if let DataSource::Synthetic { size, classes, .. } = self.data {
            if size == 0 || !(1..=4).contains(&classes) {
                return bad("data.size must be positive and data.classes in 1..=4");
            }
        }
        Ok(())
    }

    /// Flat `key = value` lines covering every field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let e = &self.encoder;
        put("encoder.image_size", e.image_size.to_string());
        put("encoder.patch_size", e.patch_size.to_string());
        put("encoder.depth", e.depth.to_string());
        put("encoder.width", e.width.to_string());
        put("encoder.heads", e.heads.to_string());
        put("encoder.variant", e.variant.to_string());
        put("encoder.taps", e.taps.to_string());
        put("decoder.enabled", self.reconstruction.to_string());
        put("decoder.fusion_op", self.decoder.fusion_op.to_string());
        put("decoder.fusion_layers", self.decoder.fusion_layers.to_string());
        let c = &self.contrast;
        put("contrast.mode", c.mode.to_string());
        put("contrast.temperature", format!("{:?}", c.heads.temperature));
        put("contrast.momentum", format!("{:?}", c.momentum));
        put("contrast.queue_capacity", c.queue_capacity.to_string());
        put("contrast.projector_hidden", c.heads.projector_hidden.to_string());
        put("contrast.projector_out", c.heads.projector_out.to_string());
        put("contrast.predictor_hidden", c.heads.predictor_hidden.to_string());
        put("objective.s_contrast", format!("{:?}", self.objective.s_contrast));
        put("objective.s_reconstruct", format!("{:?}", self.objective.s_reconstruct));
        match &self.data {
            DataSource::Synthetic { seed, size, classes } => {
                put("data.source", "synthetic".into());
                put("data.seed", seed.to_string());
                put("data.size", size.to_string());
                put("data.classes", classes.to_string());
            }
            DataSource::Directory(p) => {
                put("data.source", "directory".into());
                put("data.path", p.display().to_string());
            }
        }
        let a = &self.augment;
        put("augment.crop_scale", format!("{:?},{:?}", a.crop_scale.0, a.crop_scale.1));
        put("augment.crop_ratio", format!("{:?},{:?}", a.crop_ratio.0, a.crop_ratio.1));
        put("augment.flip_prob", format!("{:?}", a.flip_prob));
        put("augment.brightness", format!("{:?}", a.brightness));
        put("augment.contrast", format!("{:?}", a.contrast));
        put("augment.saturation", format!("{:?}", a.saturation));
        put("augment.hue", format!("{:?}", a.hue));
        put("augment.grayscale_prob", format!("{:?}", a.grayscale_prob));
        put("augment.mean", triple(a.mean));
        put("augment.std", triple(a.std));
        let o = &self.optim;
        put("optim.lr", format!("{:?}", o.lr));
        put("optim.weight_decay", format!("{:?}", o.weight_decay));
        put("optim.warmup_fraction", format!("{:?}", o.warmup_fraction));
        put("optim.beta1", format!("{:?}", o.beta1));
        put("optim.beta2", format!("{:?}", o.beta2));
        put("optim.eps", format!("{:?}", o.eps));
        put("train.batch_size", self.batch_size.to_string());
        put("train.steps", self.steps.to_string());
        put("train.seed", self.seed.to_string());
        put("train.out_dir", self.out_dir.display().to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Parses the text form. Missing keys keep their defaults; unknown or
    /// repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut source = None;
        let mut data_seed = 0;
        let mut data_size = 2048;
        let mut data_classes = 4;
        let mut data_path = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            let k = key;
            match k {
                "encoder.image_size" => cfg.encoder.image_size = parse(k, value)?,
                "encoder.patch_size" => cfg.encoder.patch_size = parse(k, value)?,
                "encoder.depth" => cfg.encoder.depth = parse(k, value)?,
                "encoder.width" => cfg.encoder.width = parse(k, value)?,
                "encoder.heads" => cfg.encoder.heads = parse(k, value)?,
                "encoder.variant" => cfg.encoder.variant = value.parse()?,
                "encoder.taps" => cfg.encoder.taps = parse(k, value)?,
                "decoder.enabled" => cfg.reconstruction = parse(k, value)?,
                "decoder.fusion_op" => cfg.decoder.fusion_op = value.parse()?,
                "decoder.fusion_layers" => cfg.decoder.fusion_layers = parse(k, value)?,
                "contrast.mode" => cfg.contrast.mode = value.parse()?,
                "contrast.temperature" => cfg.contrast.heads.temperature = parse(k, value)?,
                "contrast.momentum" => cfg.contrast.momentum = parse(k, value)?,
                "contrast.queue_capacity" => cfg.contrast.queue_capacity = parse(k, value)?,
                "contrast.projector_hidden" => cfg.contrast.heads.projector_hidden = parse(k, value)?,
                "contrast.projector_out" => cfg.contrast.heads.projector_out = parse(k, value)?,
                "contrast.predictor_hidden" => cfg.contrast.heads.predictor_hidden = parse(k, value)?,
                "objective.s_contrast" => cfg.objective.s_contrast = parse(k, value)?,
                "objective.s_reconstruct" => cfg.objective.s_reconstruct = parse(k, value)?,
                "data.source" => source = Some(value.to_string()),
                "data.seed" => data_seed = parse(k, value)?,
                "data.size" => data_size = parse(k, value)?,
                "data.classes" => data_classes = parse(k, value)?,
                "data.path" => data_path = Some(PathBuf::from(value)),
                "augment.crop_scale" => cfg.augment.crop_scale = parse_pair(k, value)?,
                "augment.crop_ratio" => cfg.augment.crop_ratio = parse_pair(k, value)?,
                "augment.flip_prob" => cfg.augment.flip_prob = parse(k, value)?,
                "augment.brightness" => cfg.augment.brightness = parse(k, value)?,
                "augment.contrast" => cfg.augment.contrast = parse(k, value)?,
                "augment.saturation" => cfg.augment.saturation = parse(k, value)?,
                "augment.hue" => cfg.augment.hue = parse(k, value)?,
                "augment.grayscale_prob" => cfg.augment.grayscale_prob = parse(k, value)?,
                "augment.mean" => cfg.augment.mean = parse_triple(k, value)?,
                "augment.std" => cfg.augment.std = parse_triple(k, value)?,
                "optim.lr" => cfg.optim.lr = parse(k, value)?,
                "optim.weight_decay" => cfg.optim.weight_decay = parse(k, value)?,
                "optim.warmup_fraction" => cfg.optim.warmup_fraction = parse(k, value)?,
                "optim.beta1" => cfg.optim.beta1 = parse(k, value)?,
                "optim.beta2" => cfg.optim.beta2 = parse(k, value)?,
                "optim.eps" => cfg.optim.eps = parse(k, value)?,
                "train.batch_size" => cfg.batch_size = parse(k, value)?,
                "train.steps" => cfg.steps = parse(k, value)?,
                "train.seed" => cfg.seed = parse(k, value)?,
                "train.out_dir" => cfg.out_dir = PathBuf::from(value),
                "train.checkpoint_every" => cfg.checkpoint_every = parse(k, value)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other}", lineno + 1))),
            }
        }
        cfg.data = match source.as_deref() {
            None | Some("synthetic") => {
                if data_path.is_some() {
                    return Err(Error::Config("data.path needs data.source = directory".into()));
                }
                DataSource::Synthetic { seed: data_seed, size: data_size, classes: data_classes }
            }
            Some("directory") => DataSource::Directory(
                data_path.ok_or_else(|| Error::Config("data.source = directory needs data.path".into()))?,
            ),
            Some(other) => return Err(Error::Config(format!("unknown data.source {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text)
    }
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match value.split_once(',') {
        Some((a, b)) => Ok((parse(key, a.trim())?, parse(key, b.trim())?)),
        None => Err(Error::Config(format!("{key}: expected two comma-separated numbers"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::FusionOp;
    use crate::encoder::Variant;

    #[test]
    fn default_round_trips() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn non_default_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.encoder.variant = Variant::Hierarchical;
        cfg.encoder.taps = 2;
        cfg.decoder.fusion_op = FusionOp::Transformer;
        cfg.contrast.heads.temperature = 0.1 + 0.2;
        cfg.data = DataSource::Directory(PathBuf::from("/data/shapes"));
        cfg.augment.mean = [0.1, 1.0 / 3.0, 0.7];
        cfg.optim.lr = 3e-4;
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        assert!(TrainConfig::from_text("encoder.depthh = 3").is_err());
        assert!(TrainConfig::from_text("train.seed = 1\ntrain.seed = 2").is_err());
        assert!(TrainConfig::from_text("train.seed").is_err());
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = TrainConfig::from_text("# tiny\ntrain.steps = 7 # short\n\n").unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.encoder, EncoderConfig::default());
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        assert!(TrainConfig::from_text("encoder.taps = 8").is_err());
        assert!(TrainConfig::from_text("encoder.image_size = 30").is_err());
    }
}
