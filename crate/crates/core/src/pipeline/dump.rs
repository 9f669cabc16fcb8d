//! Diagnostic exports: attention maps, reconstruction triptychs and
//! embeddings for external visualization.

use std::fs;
use std::path::Path;

use repre_tensor::{Tape, Tensor};

use crate::encoder::Variant;
use crate::error::{io_err, Result};
use crate::pipeline::data::{write_csv, write_ppm};
use crate::pipeline::train::Trainer;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DumpSummary {
    pub attention_maps: usize,
    pub triptychs: usize,
    pub embedding_rows: usize,
}

/// Grayscale pixmap of a `[g, g]` map scaled by its maximum.
fn heatmap(values: &[f64], side: usize) -> Result<Tensor> {
    let max = values.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let data = values.iter().flat_map(|v| [v / max; 3]).collect();
    Ok(Tensor::new(&[side, side, 3], data)?)
}

/// `input | reconstruction | |error|` with one white column between panels.
pub fn triptych(input: &Tensor, recon: &Tensor) -> Result<Tensor> {
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let width = 3 * w + 2;
    let mut data = Vec::with_capacity(h * width * 3);
    for y in 0..h {
        let row = |t: &Tensor| t.data()[y * w * 3..(y + 1) * w * 3].to_vec();
        let (a, b) = (row(input), row(recon));
        let err: Vec<f64> = a.iter().zip(&b).map(|(x, r)| (x - r).abs()).collect();
        data.extend(a);
        data.extend([1.0; 3]);
        data.extend(b.iter().map(|v| v.clamp(0.0, 1.0)));
        data.extend([1.0; 3]);
        data.extend(err);
    }
    Ok(Tensor::new(&[h, width, 3], data)?)
}

/// Writes `attention/`, `reconstruction/` (first `max_images` images) and
/// `embeddings.csv` (every image) under `out_dir`.
pub fn dump_diagnostics(trainer: &Trainer, out_dir: &Path, max_images: usize) -> Result<DumpSummary> {
    let mut summary = DumpSummary::default();
    let ds = trainer.dataset();
    let model = trainer.model();
    let store = trainer.online_params();
    let policy = &trainer.config().augment;
    let enc_cfg = model.encoder.config();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let n = max_images.min(ds.len());

    if enc_cfg.variant == Variant::Vit && n > 0 {
        let dir = out_dir.join("attention");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let last = enc_cfg.depth - 1;
        let g = enc_cfg.grid();
        for i in 0..n {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let img = policy.normalize(&ds.images[i]).reshaped(&[1, enc_cfg.image_size, enc_cfg.image_size, 3])?;
            let x = tape.constant(img);
            let seq = model.encoder.patch_embed(&mut tape, &p, x)?;
            for head in 0..enc_cfg.heads {
                let map = model.encoder.attention_map(&mut tape, &p, seq, last, head)?;
                write_ppm(&dir.join(format!("{}_head{head}.ppm", ds.ids[i])), &heatmap(map.data(), g)?)?;
                summary.attention_maps += 1;
            }
        }
    }

    if let Some(decoder) = &model.decoder {
        let dir = out_dir.join("reconstruction");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for i in 0..n {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let s = enc_cfg.image_size;
            let x = tape.constant(policy.normalize(&ds.images[i]).reshaped(&[1, s, s, 3])?);
            let out = model.encoder.forward(&mut tape, &p, x)?;
            let recon = decoder.reconstruct(&mut tape, &p, &out.taps)?;
            let recon = tape.value(recon).clone().reshaped(&[s, s, 3])?;
            write_ppm(&dir.join(format!("{}.ppm", ds.ids[i])), &triptych(&ds.images[i], &recon)?)?;
            summary.triptychs += 1;
        }
    }

    let emb = trainer.embed(&ds.images)?;
    let d = emb.shape()[1];
    let header = std::iter::once("id,label".to_string())
        .chain((0..d).map(|j| format!("e{j}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows = emb.data().chunks_exact(d).enumerate().map(|(i, row)| {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        format!("{},{},{}", ds.ids[i], ds.labels[i], vals.join(","))
    });
    write_csv(&out_dir.join("embeddings.csv"), &header, rows)?;
    summary.embedding_rows = ds.len();
    Ok(summary)
}
