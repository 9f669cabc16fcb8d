//! Reconstruction decoder: folds hierarchy taps deep to shallow and
//! regresses raw pixels.

use std::fmt;
use std::str::FromStr;

use repre_tensor::{Tape, Var};

use crate::encoder::{Encoder, EncoderConfig, FeatureMap, HierarchyFeatures};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, TransformerBlock};
use crate::params::{module_rng, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionOp {
    Conv,
    Transformer,
}

impl fmt::Display for FusionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionOp::Conv => "conv",
            FusionOp::Transformer => "transformer",
        })
    }
}

impl FromStr for FusionOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(FusionOp::Conv),
            "transformer" => Ok(FusionOp::Transformer),
            other => Err(Error::Config(format!("unknown fusion operator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub fusion_op: FusionOp,
    /// Fusion layers per block: 1, 2 or 4.
    pub fusion_layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { fusion_op: FusionOp::Conv, fusion_layers: 2 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.fusion_layers) {
            return Err(Error::Config(format!(
                "fusion layers per block must be 1, 2 or 4, got {}",
                self.fusion_layers
            )));
        }
        Ok(())
    }
}

/// A `[B, gh, gw, C]` feature grid.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid {
    pub grid: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

/// Row-major reshape of a `[B, gh·gw, C]` token map into a grid.
pub fn tokens_to_grid(tape: &mut Tape, tokens: Var, grid_h: usize, grid_w: usize) -> Result<FeatureGrid> {
    let (b, n, c) = match *tape.shape(tokens) {
        [b, n, c] => (b, n, c),
        ref s => return Err(Error::Invalid(format!("expected [batch, tokens, channels], got {s:?}"))),
    };
    if n != grid_h * grid_w {
        return Err(Error::Invalid(format!("{n} tokens do not fill a {grid_h}x{grid_w} grid")));
    }
    let grid = tape.reshape(tokens, &[b, grid_h, grid_w, c])?;
    Ok(FeatureGrid { grid, grid_h, grid_w, channels: c })
}

pub fn grid_to_tokens(tape: &mut Tape, grid: &FeatureGrid) -> Result<Var> {
    let b = tape.shape(grid.grid)[0];
    Ok(tape.reshape(grid.grid, &[b, grid.grid_h * grid.grid_w, grid.channels])?)
}

fn map_grid(tape: &mut Tape, f: &FeatureMap) -> Result<FeatureGrid> {
    tokens_to_grid(tape, f.tokens, f.grid_h, f.grid_w)
}

#[derive(Clone, Debug)]
enum FusionLayers {
    Conv(Vec<Conv2d>),
    Transformer { blocks: Vec<TransformerBlock>, proj: Linear },
}

/// Aligns a deep grid to a shallow one, concatenates (deep first) and maps
/// `2C → C` through the fusion layers.
#[derive(Clone, Debug)]
pub struct FuseBlock {
    /// Deep-to-shallow channel projection, when widths differ.
    align: Option<Linear>,
    layers: FusionLayers,
    deep_channels: usize,
    channels: usize,
}

impl FuseBlock {
    fn new(
        config: &DecoderConfig,
        deep_channels: usize,
        channels: usize,
        heads: usize,
        store: &mut ParamStore,
        name: &str,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let align = (deep_channels != channels)
            .then(|| Linear::new(store, &format!("{name}.align"), deep_channels, channels, rng))
            .transpose()?;
        let n = config.fusion_layers;
        let layers = match config.fusion_op {
            FusionOp::Conv => FusionLayers::Conv(
                (0..n)
                    .map(|i| {
                        let cin = if i == 0 { 2 * channels } else { channels };
                        Conv2d::new(store, &format!("{name}.fuse.{i}"), 3, cin, channels, rng)
                    })
                    .collect::<Result<_>>()?,
            ),
            FusionOp::Transformer => FusionLayers::Transformer {
                blocks: (0..n)
                    .map(|i| TransformerBlock::new(store, &format!("{name}.fuse.{i}"), 2 * channels, heads, rng))
                    .collect::<Result<_>>()?,
                proj: Linear::new(store, &format!("{name}.fuse.proj"), 2 * channels, channels, rng)?,
            },
        };
        Ok(Self { align, layers, deep_channels, channels })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, deep: FeatureGrid, shallow: FeatureGrid) -> Result<FeatureGrid> {
        if deep.channels != self.deep_channels || shallow.channels != self.channels {
            return Err(Error::Invalid(format!(
                "fuse block expects {}/{} channels, got {}/{}",
                self.deep_channels, self.channels, deep.channels, shallow.channels
            )));
        }
        let mut d = deep.grid;
        if (deep.grid_h * 2, deep.grid_w * 2) == (shallow.grid_h, shallow.grid_w) {
            d = tape.bilinear_upsample_2x(d)?;
        } else if (deep.grid_h, deep.grid_w) != (shallow.grid_h, shallow.grid_w) {
            return Err(Error::Invalid(format!(
                "cannot align a {}x{} grid with a {}x{} grid",
                deep.grid_h, deep.grid_w, shallow.grid_h, shallow.grid_w
            )));
        }
        if let Some(align) = &self.align {
            d = align.forward(tape, p, d)?;
        }
        let mut x = tape.concat(&[d, shallow.grid], 3)?;
        match &self.layers {
            FusionLayers::Conv(convs) => {
                for conv in convs {
                    x = conv.forward(tape, p, x)?;
                    x = tape.relu(x)?;
                }
            }
            FusionLayers::Transformer { blocks, proj } => {
                let b = tape.shape(x)[0];
                let n = shallow.grid_h * shallow.grid_w;
                let mut t = tape.reshape(x, &[b, n, 2 * self.channels])?;
                for blk in blocks {
                    t = blk.forward(tape, p, t)?;
                }
                let t = proj.forward(tape, p, t)?;
                x = tape.reshape(t, &[b, shallow.grid_h, shallow.grid_w, self.channels])?;
            }
        }
        Ok(FeatureGrid { grid: x, ..shallow })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.align.iter().flat_map(Linear::params).collect();
        match &self.layers {
            FusionLayers::Conv(convs) => v.extend(convs.iter().flat_map(Conv2d::params)),
            FusionLayers::Transformer { blocks, proj } => {
                v.extend(blocks.iter().flat_map(TransformerBlock::params));
                v.extend(proj.params());
            }
        }
        v
    }

    /// Multiply-accumulates at a `positions`-cell output grid.
    fn macs(&self, positions: usize) -> u64 {
        let pos = positions as u64;
        let mut total = self.align.as_ref().map_or(0, |l| pos * l.macs());
        match &self.layers {
            FusionLayers::Conv(convs) => total += convs.iter().map(|c| pos * c.macs()).sum::<u64>(),
            FusionLayers::Transformer { blocks, proj } => {
                total += blocks.iter().map(|b| b.macs(positions)).sum::<u64>();
                total += pos * proj.macs();
            }
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    encoder: EncoderConfig,
    pub blocks: Vec<FuseBlock>,
    /// Final 1×1 convolution to `P·P·3` pixel values per token.
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(config: &DecoderConfig, encoder: &EncoderConfig, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        let mut rng = module_rng(seed, "decoder");
        let k = encoder.taps;
        // Block j fuses the running deep grid with tap K-2-j.
        let blocks = (0..k - 1)
            .map(|j| {
                let shallow = k - 2 - j;
                FuseBlock::new(
                    config,
                    encoder.tap_width(shallow + 1),
                    encoder.tap_width(shallow),
                    encoder.heads,
                    store,
                    &format!("{prefix}.blocks.{j}"),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let p = encoder.patch_size;
        let head = Conv2d::new(store, &format!("{prefix}.head"), 1, encoder.tap_width(0), p * p * 3, &mut rng)?;
        Ok(Self { config: config.clone(), encoder: encoder.clone(), blocks, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Reconstructs `[B, H, W, 3]` images from `K` taps.
    pub fn reconstruct(&self, tape: &mut Tape, p: &Bound, taps: &HierarchyFeatures) -> Result<Var> {
        let k = self.encoder.taps;
        if taps.len() != k {
            return Err(Error::Invalid(format!("decoder expects {k} taps, got {}", taps.len())));
        }
        let mut deep = map_grid(tape, &taps.features[k - 1])?;
        for (j, block) in self.blocks.iter().enumerate() {
            let shallow = map_grid(tape, &taps.features[k - 2 - j])?;
            deep = block.forward(tape, p, deep, shallow)?;
        }
        let pix = self.head.forward(tape, p, deep.grid)?;
        let b = tape.shape(pix)[0];
        let (g, ps, h) = (deep.grid_h, self.encoder.patch_size, self.encoder.image_size);
        let x = tape.reshape(pix, &[b, g, g, ps, ps, 3])?;
        let x = tape.transpose(x, &[0, 1, 3, 2, 4, 5])?;
        Ok(tape.reshape(x, &[b, h, h, 3])?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.blocks.iter().flat_map(FuseBlock::params).collect();
        v.extend(self.head.params());
        v
    }

    /// Forward multiply-accumulates for one image.
    pub fn macs(&self) -> u64 {
        let k = self.encoder.taps;
        let cells = |t: usize| self.encoder.tap_grid(t).pow(2);
        let mut total: u64 = self
            .blocks
            .iter()
            .enumerate()
            .map(|(j, b)| b.macs(cells(k - 2 - j)))
            .sum();
        total += cells(0) as u64 * self.head.macs();
        total
    }
}

/// Mean absolute error over every pixel and channel.
pub fn reconstruction_loss(tape: &mut Tape, img: Var, recon: Var) -> Result<Var> {
    if tape.shape(img) != tape.shape(recon) {
        return Err(Error::Invalid(format!(
            "image {:?} and reconstruction {:?} shapes differ",
            tape.shape(img),
            tape.shape(recon)
        )));
    }
    let n = tape.value(img).numel() as f64;
    let diff = tape.sub(recon, img)?;
    let total = tape.abs_sum(diff)?;
    Ok(tape.scale(total, 1.0 / n)?)
}

/// Decoder cost relative to the encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostRatio {
    pub param_ratio: f64,
    pub flop_ratio: f64,
}

pub fn decoder_cost_ratio(encoder: &Encoder, decoder: Option<&Decoder>, store: &ParamStore) -> CostRatio {
    match decoder {
        None => CostRatio { param_ratio: 0.0, flop_ratio: 0.0 },
        Some(d) => CostRatio {
            param_ratio: store.count(d.params()) as f64 / store.count(encoder.params()) as f64,
            flop_ratio: d.macs() as f64 / encoder.macs() as f64,
        },
    }
}

#[cfg(test)]
mod tests {
    use repre_tensor::Tensor;

    use super::*;

    #[test]
    fn grid_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 6 * 3).map(f64::from).collect();
        let t = tape.constant(Tensor::new(&[2, 6, 3], data.clone()).unwrap());
        let g = tokens_to_grid(&mut tape, t, 2, 3).unwrap();
        assert_eq!(tape.shape(g.grid), &[2, 2, 3, 3]);
        let back = grid_to_tokens(&mut tape, &g).unwrap();
        assert_eq!(tape.value(back).data(), data.as_slice());
        assert!(tokens_to_grid(&mut tape, t, 2, 2).is_err());
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::full(&[1, 2, 2, 3], 0.3).unwrap());
        let off = tape.constant(Tensor::full(&[1, 2, 2, 3], 0.8).unwrap());
        let l = reconstruction_loss(&mut tape, img, img).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let l = reconstruction_loss(&mut tape, img, off).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.5).abs() < 1e-15);
        let zero = tape.constant(Tensor::zeros(&[1, 2, 2, 3]).unwrap());
        let alt: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let alt = tape.constant(Tensor::new(&[1, 2, 2, 3], alt).unwrap());
        let l = reconstruction_loss(&mut tape, zero, alt).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.0);
    }

    #[test]
    fn fusion_layer_counts_are_restricted() {
        let cfg = DecoderConfig { fusion_op: FusionOp::Conv, fusion_layers: 3 };
        assert!(cfg.validate().is_err());
    }
}
