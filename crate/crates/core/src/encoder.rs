//! Vision transformer encoder with multi-hierarchy feature taps.

use std::fmt;
use std::str::FromStr;

use repre_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerBlock, INIT_STD};
use crate::params::{module_rng, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Plain ViT: class token, one token grid throughout.
    Vit,
    /// Stages of plain-attention blocks separated by patch merging; no
    /// class token, pooled representation.
    Hierarchical,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vit => "vit",
            Variant::Hierarchical => "hierarchical",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Variant::Vit),
            "hierarchical" => Ok(Variant::Hierarchical),
            other => Err(Error::Config(format!("unknown encoder variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub variant: Variant,
    /// Number of hierarchy taps `K`.
    pub taps: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            depth: 8,
            width: 128,
            heads: 4,
            variant: Variant::Vit,
            taps: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return c(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return c(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        hierarchy_indices(self.depth, self.taps)?;
        if self.variant == Variant::Hierarchical {
            let merges = self.taps - 1;
            if self.grid() % (1 << merges) != 0 {
                return c(format!(
                    "token grid {} cannot be halved {merges} times for {} stages",
                    self.grid(),
                    self.taps
                ));
            }
        }
        Ok(())
    }

    /// Token grid side `H / P`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Grid side of tap `k` (zero-based, shallow to deep).
    pub fn tap_grid(&self, k: usize) -> usize {
        match self.variant {
            Variant::Vit => self.grid(),
            Variant::Hierarchical => self.grid() >> k,
        }
    }

    /// Channel count of tap `k`.
    pub fn tap_width(&self, k: usize) -> usize {
        match self.variant {
            Variant::Vit => self.width,
            Variant::Hierarchical => self.width << k,
        }
    }

    /// Width of the global representation.
    pub fn repr_width(&self) -> usize {
        self.tap_width(self.taps - 1)
    }
}

/// Zero-based block indices whose outputs are tapped:
/// `{⌊L/K⌋·k − 1 : k = 1..K−1} ∪ {L − 1}`.
pub fn hierarchy_indices(depth: usize, taps: usize) -> Result<Vec<usize>> {
    if taps == 0 || taps >= depth {
        return Err(Error::Config(format!(
            "tap count {taps} must satisfy 1 <= K < L = {depth}"
        )));
    }
    let step = depth / taps;
    let mut idx: Vec<usize> = (1..taps).map(|k| step * k - 1).collect();
    idx.push(depth - 1);
    Ok(idx)
}

/// Embedded tokens `[B, T, C]`, class token first when present.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub class_token: bool,
}

/// One tapped patch-token map `[B, grid_h·grid_w, channels]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

/// Tapped features ordered shallow to deep.
#[derive(Clone, Debug)]
pub struct HierarchyFeatures {
    pub features: Vec<FeatureMap>,
}

impl HierarchyFeatures {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Keeps only the first `n` images of every map.
    pub fn leading(&self, tape: &mut Tape, n: usize) -> Result<Self> {
        let features = self
            .features
            .iter()
            .map(|f| {
                Ok(FeatureMap {
                    tokens: tape.slice(f.tokens, 0, 0, n)?,
                    ..*f
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { features })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Global representation `[B, repr_width]`.
    pub repr: Var,
    pub taps: HierarchyFeatures,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    taps: Vec<usize>,
    pub patch_proj: Linear,
    pub class_token: Option<ParamId>,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    /// Linear `4C → 2C` after each patch merge (hierarchical only).
    pub merges: Vec<Linear>,
}

impl Encoder {
    /// Registers the encoder's parameters under `prefix` in `store`.
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, prefix: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = module_rng(seed, "encoder");
        let taps = hierarchy_indices(config.depth, config.taps)?;
        let p = config.patch_size;
        let c = config.width;
        let patch_proj = Linear::new(store, &format!("{prefix}.patch_embed"), p * p * 3, c, &mut rng)?;
        let (class_token, tokens) = match config.variant {
            Variant::Vit => {
                let t = store.add(
                    format!("{prefix}.cls_token"),
                    Tensor::trunc_normal(&[1, c], INIT_STD, &mut rng)?,
                    false,
                )?;
                (Some(t), config.num_patches() + 1)
            }
            Variant::Hierarchical => (None, config.num_patches()),
        };
        let pos_embed = store.add(
            format!("{prefix}.pos_embed"),
            Tensor::trunc_normal(&[tokens, c], INIT_STD, &mut rng)?,
            false,
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut merges = Vec::new();
        let mut stage = 0;
        for i in 0..config.depth {
            let width = config.tap_width(stage);
            blocks.push(TransformerBlock::new(
                store,
                &format!("{prefix}.blocks.{i}"),
                width,
                config.heads,
                &mut rng,
            )?);
            if config.variant == Variant::Hierarchical && taps.contains(&i) && i + 1 < config.depth {
                merges.push(Linear::new(
                    store,
                    &format!("{prefix}.merges.{stage}"),
                    4 * width,
                    2 * width,
                    &mut rng,
                )?);
                stage += 1;
            }
        }
        Ok(Self {
            config: config.clone(),
            taps,
            patch_proj,
            class_token,
            pos_embed,
            blocks,
            merges,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tap_indices(&self) -> &[usize] {
        &self.taps
    }

    /// Splits `[B, H, W, 3]` images into `P×P` patches, projects them,
    /// prepends the class token (ViT) and adds position embeddings.
    pub fn patch_embed(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<TokenSequence> {
        let cfg = &self.config;
        let (h, ps, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
        let b = match *tape.shape(images) {
            [b, hh, ww, 3] if hh == h && ww == h => b,
            ref s => {
                return Err(Error::Invalid(format!(
                    "expected images [batch, {h}, {h}, 3], got {s:?}"
                )))
            }
        };
        let x = tape.reshape(images, &[b, g, ps, g, ps, 3])?;
        let x = tape.transpose(x, &[0, 1, 3, 2, 4, 5])?;
        let x = tape.reshape(x, &[b, g * g, ps * ps * 3])?;
        let mut x = self.patch_proj.forward(tape, p, x)?;
        if let Some(cls) = self.class_token {
            let zeros = tape.constant(Tensor::zeros(&[b, 1, cfg.width])?);
            let cls = tape.add(zeros, p[cls])?;
            x = tape.concat(&[cls, x], 1)?;
        }
        let tokens = tape.add(x, p[self.pos_embed])?;
        Ok(TokenSequence {
            tokens,
            grid_h: g,
            grid_w: g,
            class_token: self.class_token.is_some(),
        })
    }

    /// Runs every block, collecting the patch-token outputs of the tapped
    /// blocks.
    pub fn encode_with_taps(&self, tape: &mut Tape, p: &Bound, seq: TokenSequence) -> Result<EncoderOutput> {
        let cfg = &self.config;
        if seq.class_token != (cfg.variant == Variant::Vit) || seq.grid_h != cfg.grid() || seq.grid_w != cfg.grid() {
            return Err(Error::Invalid("token sequence does not match encoder configuration".into()));
        }
        let offset = usize::from(seq.class_token);
        let mut x = seq.tokens;
        let (mut gh, mut gw) = (seq.grid_h, seq.grid_w);
        let mut stage = 0;
        let mut features = Vec::with_capacity(self.taps.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, p, x)?;
            if !self.taps.contains(&i) {
                continue;
            }
            let tokens = if offset == 1 {
                tape.slice(x, 1, 1, gh * gw)?
            } else {
                x
            };
            let channels = cfg.tap_width(stage);
            features.push(FeatureMap { tokens, grid_h: gh, grid_w: gw, channels });
            if cfg.variant == Variant::Hierarchical && i + 1 < cfg.depth {
                let b = tape.shape(x)[0];
                let grid = tape.reshape(x, &[b, gh, gw, channels])?;
                let merged = tape.patch_merge(grid)?;
                gh /= 2;
                gw /= 2;
                let merged = tape.reshape(merged, &[b, gh * gw, 4 * channels])?;
                x = self.merges[stage].forward(tape, p, merged)?;
                stage += 1;
            }
        }
        let repr = match cfg.variant {
            Variant::Vit => {
                let b = tape.shape(x)[0];
                let cls = tape.slice(x, 1, 0, 1)?;
                tape.reshape(cls, &[b, cfg.width])?
            }
            Variant::Hierarchical => tape.mean(x, Some(1))?,
        };
        Ok(EncoderOutput {
            repr,
            taps: HierarchyFeatures { features },
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<EncoderOutput> {
        let seq = self.patch_embed(tape, p, images)?;
        self.encode_with_taps(tape, p, seq)
    }

    /// Class-token attention over the patch keys at `block`/`head`,
    /// `[B, N]`, each row summing to one.
    pub fn attention_map(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seq: TokenSequence,
        block: usize,
        head: usize,
    ) -> Result<Tensor> {
        if !seq.class_token || self.config.variant != Variant::Vit {
            return Err(Error::Invalid("attention maps need a class token (ViT variant)".into()));
        }
        if block >= self.blocks.len() || head >= self.config.heads {
            return Err(Error::Invalid(format!(
                "block {block} / head {head} out of range ({} blocks, {} heads)",
                self.blocks.len(),
                self.config.heads
            )));
        }
        let mut x = seq.tokens;
        for blk in &self.blocks[..block] {
            x = blk.forward(tape, p, x)?;
        }
        let blk = &self.blocks[block];
        let h = blk.norm1.forward(tape, p, x)?;
        let logits = blk.attn.logits(tape, p, h)?;
        let n = seq.grid_h * seq.grid_w;
        let b = tape.shape(x)[0];
        let row = tape.slice(logits, 1, head, 1)?;
        let row = tape.slice(row, 2, 0, 1)?;
        let row = tape.slice(row, 3, 1, n)?;
        let attn = tape.softmax(row)?;
        Ok(tape.value(attn).clone().reshaped(&[b, n])?)
    }

    /// Every parameter the encoder registered.
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.patch_proj.params();
        v.extend(self.class_token);
        v.push(self.pos_embed);
        for b in &self.blocks {
            v.extend(b.params());
        }
        for m in &self.merges {
            v.extend(m.params());
        }
        v
    }

    /// Forward multiply-accumulates for one image.
    pub fn macs(&self) -> u64 {
        let cfg = &self.config;
        let n = cfg.num_patches();
        let mut total = n as u64 * self.patch_proj.macs();
        let mut tokens = n + usize::from(self.class_token.is_some());
        let mut stage = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            total += b.macs(tokens);
            if cfg.variant == Variant::Hierarchical && self.taps.contains(&i) && i + 1 < cfg.depth {
                tokens /= 4;
                total += tokens as u64 * self.merges[stage].macs();
                stage += 1;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            depth: 4,
            width: 8,
            heads: 2,
            variant,
            taps: 2,
        }
    }

    #[test]
    fn tap_formula_examples() {
        assert_eq!(hierarchy_indices(12, 4).unwrap(), vec![2, 5, 8, 11]);
        assert_eq!(hierarchy_indices(5, 4).unwrap(), vec![0, 1, 2, 4]);
        assert_eq!(hierarchy_indices(10, 4).unwrap(), vec![1, 3, 5, 9]);
        assert_eq!(hierarchy_indices(8, 1).unwrap(), vec![7]);
        assert!(hierarchy_indices(4, 4).is_err());
        assert!(hierarchy_indices(4, 0).is_err());
    }

    #[test]
    fn patch_counts() {
        let mut cfg = EncoderConfig::default();
        assert_eq!(cfg.num_patches(), 64);
        cfg.image_size = 224;
        cfg.patch_size = 16;
        assert_eq!(cfg.num_patches(), 196);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(Variant::Vit);
        cfg.image_size = 18;
        assert!(cfg.validate().is_err());
        let mut cfg = small(Variant::Vit);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small(Variant::Hierarchical);
        cfg.taps = 3;
        cfg.image_size = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_with_zero_projection_gives_position_embeddings() {
        let cfg = small(Variant::Vit);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, "enc", 0).unwrap();
        store.value_mut(enc.patch_proj.weight).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.constant(Tensor::zeros(&[1, 16, 16, 3]).unwrap());
        let seq = enc.patch_embed(&mut tape, &p, img).unwrap();
        let pos = store.value(enc.pos_embed).data();
        let tok = tape.value(seq.tokens).data();
        assert_eq!(tape.shape(seq.tokens), &[1, 17, 8]);
        assert_eq!(&tok[8..], &pos[8..]);
    }

    #[test]
    fn hierarchical_taps_halve_grid_and_double_width() {
        let cfg = small(Variant::Hierarchical);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, "enc", 0).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.constant(Tensor::full(&[2, 16, 16, 3], 0.5).unwrap());
        let out = enc.forward(&mut tape, &p, img).unwrap();
        let shapes: Vec<_> = out.taps.features.iter().map(|f| tape.shape(f.tokens).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 8], vec![2, 4, 16]]);
        assert_eq!(out.taps.features[1].grid_h, 2);
        assert_eq!(tape.shape(out.repr), &[2, 16]);
        let seq = enc.patch_embed(&mut tape, &p, img).unwrap();
        assert!(enc.attention_map(&mut tape, &p, seq, 0, 0).is_err());
    }
}
