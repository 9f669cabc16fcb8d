#![allow(dead_code)]

use std::path::Path;

use repre::contrastive::HeadConfig;
use repre::encoder::{EncoderConfig, Variant};
use repre::pipeline::config::{DataSource, TrainConfig};
use repre::pipeline::train::MetricsRecord;

/// A configuration small enough to train for a handful of steps in well
/// under a second.
pub fn tiny(out_dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.encoder = EncoderConfig {
        image_size: 8,
        patch_size: 2,
        depth: 5,
        width: 8,
        heads: 2,
        variant: Variant::Vit,
        taps: 2,
    };
    cfg.contrast.heads = HeadConfig {
        projector_hidden: 16,
        projector_out: 8,
        predictor_hidden: 16,
        temperature: 0.2,
    };
    cfg.contrast.queue_capacity = 16;
    cfg.data = DataSource::Synthetic { seed: 3, size: 24, classes: 4 };
    cfg.batch_size = 4;
    cfg.steps = 6;
    cfg.seed = 5;
    cfg.out_dir = out_dir.to_path_buf();
    cfg
}

/// Drops the wall-clock field, which is the only non-deterministic one.
pub fn timeless(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records
        .iter()
        .map(|r| MetricsRecord { step_seconds: 0.0, ..r.clone() })
        .collect()
}
