//! Ablation harness over decoder and tap configurations.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::decoder::FusionOp;
use crate::error::{io_err, Error, Result};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::train::{MetricsRecord, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    FusionOp,
    FusionLayers,
    Taps,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion-op" => Ok(Self::FusionOp),
            "fusion-layers" => Ok(Self::FusionLayers),
            "taps" => Ok(Self::Taps),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FusionOp => "fusion-op",
            Self::FusionLayers => "fusion-layers",
            Self::Taps => "taps",
        })
    }
}

/// Named configurations compared along `axis`.
pub fn variants(base: &TrainConfig, axis: AblationAxis) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        c.reconstruction = true;
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::FusionOp => [FusionOp::Conv, FusionOp::Transformer]
            .into_iter()
            .map(|op| (format!("{op}-{}", base.decoder.fusion_layers), with(&|c| c.decoder.fusion_op = op)))
            .collect(),
        AblationAxis::FusionLayers => [1, 2, 4]
            .into_iter()
            .map(|n| (format!("{}-{n}", base.decoder.fusion_op), with(&|c| c.decoder.fusion_layers = n)))
            .collect(),
        AblationAxis::Taps => [1, 4]
            .into_iter()
            .map(|k| (format!("taps-{k}"), with(&|c| c.encoder.taps = k)))
            .collect(),
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub decoder_params: usize,
    pub param_ratio: f64,
    pub flop_ratio: f64,
    pub steps: u64,
    pub final_l_contrast: f64,
    pub final_l_reconstruct: Option<f64>,
    pub final_psnr: Option<f64>,
}

/// Trains every variant for `steps` steps, writing
/// `<out_dir>/<variant>.jsonl` metrics and `<out_dir>/summary.json`.
pub fn run_ablation(base: &TrainConfig, axis: AblationAxis, steps: u64, out_dir: &Path) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rows = Vec::new();
    for (name, mut cfg) in variants(base, axis) {
        cfg.steps = steps;
        cfg.out_dir = out_dir.join(&name);
        let mut trainer = Trainer::new(cfg)?;
        let path = out_dir.join(format!("{name}.jsonl"));
        let mut file = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        let mut last: Option<MetricsRecord> = None;
        trainer.run(steps, |r| {
            writeln!(file, "{}", r.to_json_line()).map_err(io_err(&path))?;
            last = Some(r.clone());
            Ok(())
        })?;
        file.flush().map_err(io_err(&path))?;
        let store = trainer.online_params();
        let decoder_params = trainer.model().decoder.as_ref().map_or(0, |d| store.count(d.params()));
        let cost = trainer.cost_ratio();
        let last = last.ok_or_else(|| Error::Config("ablation needs at least one step".into()))?;
        rows.push(AblationRow {
            variant: name,
            params: store.total_count(),
            decoder_params,
            param_ratio: cost.param_ratio,
            flop_ratio: cost.flop_ratio,
            steps,
            final_l_contrast: last.l_contrast,
            final_l_reconstruct: last.l_reconstruct,
            final_psnr: last.psnr,
        });
    }
    let summary = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    fs::write(&summary, json).map_err(io_err(&summary))?;
    Ok(rows)
}
