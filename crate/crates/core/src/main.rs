use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use repre::gradsuite::run_gradient_suite;
use repre::pipeline::ablate::{run_ablation, AblationAxis};
use repre::pipeline::checkpoint::Checkpoint;
use repre::pipeline::config::TrainConfig;
use repre::pipeline::data::{load_dir, synthetic};
use repre::pipeline::dump::dump_diagnostics;
use repre::pipeline::probe::{linear_probe, FrozenEncoder, ProbeConfig};
use repre::pipeline::train::Trainer;

#[derive(Parser)]
#[command(name = "repre", version, about = "Contrastive ViT pre-training with pixel reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train from a config file; writes metrics.jsonl and checkpoint.bin to the output directory.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Resume from this checkpoint (its config must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe of a checkpoint's encoder on DIR/train and DIR/test.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 300)]
        iterations: usize,
    },
    /// Export attention maps, reconstructions and embeddings.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
    /// Finite-difference check of every operator and loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train each configuration along one ablation axis.
    Ablate {
        #[arg(long, value_parser = ["fusion-op", "fusion-layers", "taps"])]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Write the synthetic shapes set as DIR/train and DIR/test class folders.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 512)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
}

fn pretrain(config: PathBuf, resume: Option<PathBuf>) -> Result<()> {
    let cfg = TrainConfig::load(&config)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut trainer = Trainer::new(cfg)?;
    if let Some(path) = resume {
        Checkpoint::load(&path)?.restore_into(&mut trainer)?;
        eprintln!("resumed at step {}", trainer.step());
    }
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let ckpt_path = out.join("checkpoint.bin");
    let (total, every) = (trainer.config().steps, trainer.config().checkpoint_every);
    while trainer.step() < total {
        let r = trainer.step_once()?;
        writeln!(metrics, "{}", r.to_json_line())?;
        if r.step % 10 == 0 || r.step == total {
            eprintln!(
                "step {:>5}  contrast {:.4}  recon {}  psnr {}  {:.2}s",
                r.step,
                r.l_contrast,
                r.l_reconstruct.map_or("-".into(), |v| format!("{v:.4}")),
                r.psnr.map_or("-".into(), |v| format!("{v:.2}")),
                r.step_seconds
            );
        }
        if every > 0 && r.step % every == 0 && r.step < total {
            Checkpoint::capture(&trainer).save(&out.join(format!("checkpoint-{:06}.bin", r.step)))?;
        }
    }
    Checkpoint::capture(&trainer).save(&ckpt_path)?;
    println!("{}", ckpt_path.display());
    Ok(())
}

/// Training allocates and frees the same large activation buffers every
/// step. Keep them in the heap instead of returning them to the kernel, which
/// otherwise costs a page fault per touched page on the next step.
fn retain_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

fn main() -> Result<()> {
    retain_heap();
    match Cli::parse().command {
        Command::Pretrain { config, resume } => pretrain(config, resume)?,
        Command::Probe { checkpoint, data, iterations } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let size = ckpt.config.encoder.image_size;
            let train = load_dir(&data.join("train"), size).context("loading training split")?;
            let test = load_dir(&data.join("test"), size).context("loading test split")?;
            let encoder = FrozenEncoder::from_checkpoint(&ckpt)?;
            let cfg = ProbeConfig { iterations, ..ProbeConfig::default() };
            let report = linear_probe(&train, &test, &encoder, &cfg)?;
            if !report.encoder_unchanged() {
                bail!("encoder parameters changed during probing");
            }
            println!(
                "{}",
                serde_json::json!({
                    "accuracy": report.accuracy,
                    "train_accuracy": report.train_accuracy,
                    "train_images": train.len(),
                    "test_images": test.len(),
                })
            );
        }
        Command::Dump { checkpoint, out, images } => {
            let trainer = Checkpoint::load(&checkpoint)?.into_trainer()?;
            let s = dump_diagnostics(&trainer, &out, images)?;
            println!(
                "{} attention maps, {} reconstructions, {} embedding rows in {}",
                s.attention_maps,
                s.triptychs,
                s.embedding_rows,
                out.display()
            );
        }
        Command::Gradcheck { instances, seed } => {
            let entries = run_gradient_suite(instances, seed)?;
            let mut failed = 0;
            for e in &entries {
                let status = if e.passed() { "ok" } else { "FAIL" };
                println!("{status:<4} {:<28} n={:<3} max_rel_err={:.3e}", e.name, e.instances, e.max_rel_error);
                failed += usize::from(!e.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Ablate { axis, config, steps, out } => {
            let axis: AblationAxis = axis.parse()?;
            let base = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let steps = steps.unwrap_or(base.steps);
            for row in run_ablation(&base, axis, steps, &out)? {
                println!("{}", serde_json::to_string(&row)?);
            }
        }
        Command::Synth { out, seed, train, test, image_size } => {
            // Disjoint generator seeds for the two splits.
            synthetic(seed, train, 4, image_size)?.write_dir(&out.join("train"))?;
            synthetic(seed ^ 0x7e57, test, 4, image_size)?.write_dir(&out.join("test"))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
