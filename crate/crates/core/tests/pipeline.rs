mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::{timeless, tiny};
use repre::contrastive::{symmetrized_contrast, ContrastMode, ViewOutputs};
use repre::pipeline::augment::augment_two_views;
use repre::pipeline::checkpoint::Checkpoint;
use repre::pipeline::config::{DataSource, TrainConfig};
use repre::pipeline::data::{load_dir, synthetic};
use repre::pipeline::dump::dump_diagnostics;
use repre::pipeline::optim::lr_at;
use repre::pipeline::probe::{linear_probe, FrozenEncoder, ProbeConfig};
use repre::pipeline::train::{step_rng, MetricsRecord, Trainer};
use repre::Error;
use repre_tensor::{Tape, Tensor};
use sha2::{Digest, Sha256};

fn run(cfg: &TrainConfig, steps: u64) -> (Trainer, Vec<MetricsRecord>) {
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut records = Vec::new();
    trainer
        .run(steps, |r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
    (trainer, records)
}

#[test]
fn config_text_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [TrainConfig::default(), tiny(dir.path())] {
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
    let mut cfg = tiny(dir.path());
    cfg.data = DataSource::Directory(dir.path().join("images"));
    cfg.contrast.mode = ContrastMode::WithoutNegatives;
    cfg.contrast.queue_capacity = 0;
    cfg.reconstruction = false;
    assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn config_rejects_unknown_and_repeated_keys() {
    assert!(matches!(TrainConfig::from_text("encoder.wdith = 64"), Err(Error::Config(_))));
    assert!(TrainConfig::from_text("train.steps = 3\ntrain.steps = 4").is_err());
    assert!(TrainConfig::from_text("train.steps = three").is_err());
    assert!(TrainConfig::from_text("contrast.mode = without_negatives").is_err());
    let ok = TrainConfig::from_text("# comment\n\ncontrast.mode = without_negatives\ncontrast.queue_capacity = 0\n").unwrap();
    assert_eq!(ok.contrast.mode, ContrastMode::WithoutNegatives);
}

#[test]
fn warmup_then_cosine_schedule() {
    let cfg = TrainConfig::default().optim;
    let total = 500;
    let warm = (0.05f64 * total as f64).ceil() as u64;
    assert!((lr_at(&cfg, 0, total) - cfg.lr / warm as f64).abs() < 1e-18);
    assert!((lr_at(&cfg, warm - 1, total) - cfg.lr).abs() < 1e-18);
    let mut last = cfg.lr;
    for s in warm..total {
        let lr = lr_at(&cfg, s, total);
        assert!(lr <= last && lr >= 0.0);
        last = lr;
    }
    assert!(last < cfg.lr * 1e-3);
}

#[test]
fn same_seed_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (_, a) = run(&cfg, 4);
    let (_, b) = run(&cfg, 4);
    assert_eq!(timeless(&a), timeless(&b));
    let mut other = cfg.clone();
    other.seed += 1;
    let (_, c) = run(&other, 4);
    assert_ne!(timeless(&a), timeless(&c));
}

#[test]
fn resume_reproduces_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (whole, full) = run(&cfg, 6);

    let (first, mut resumed) = run(&cfg, 3);
    let path = dir.path().join("mid.bin");
    Checkpoint::capture(&first).save(&path).unwrap();
    drop(first);
    let mut second = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
    assert_eq!(second.step(), 3);
    second
        .run(3, |r| {
            resumed.push(r.clone());
            Ok(())
        })
        .unwrap();
    assert_eq!(timeless(&full), timeless(&resumed));
    assert_eq!(whole.online_params(), second.online_params());
    assert_eq!(whole.target_params(), second.target_params());
}

#[test]
fn checkpoint_bytes_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (trainer, _) = run(&tiny(dir.path()), 2);
    let bytes = Checkpoint::capture(&trainer).to_bytes();
    assert_eq!(&bytes[..8], b"REPRECKP");
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
    assert_eq!(bytes, again);

    let path = dir.path().join("a.bin");
    Checkpoint::capture(&trainer).save(&path).unwrap();
    let copy = dir.path().join("b.bin");
    Checkpoint::load(&path).unwrap().save(&copy).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&copy).unwrap());
}

#[test]
fn corrupted_or_truncated_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (trainer, _) = run(&tiny(dir.path()), 1);
    let bytes = Checkpoint::capture(&trainer).to_bytes();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
}

#[test]
fn checkpoint_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let (trainer, _) = run(&tiny(dir.path()), 1);
    let ckpt = Checkpoint::capture(&trainer);
    let mut cfg = tiny(dir.path());
    cfg.encoder.width = 16;
    let mut other = Trainer::new(cfg).unwrap();
    assert!(ckpt.restore_into(&mut other).is_err());
}

#[test]
fn target_branch_gets_no_gradient_and_no_optimizer_slot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.contrast.momentum = 1.0;
    let mut trainer = Trainer::new(cfg).unwrap();
    let target_before = trainer.target_params().digest();
    let online_before = trainer.online_params().digest();
    for _ in 0..2 {
        trainer.step_once().unwrap();
        let target = trainer.target_params();
        for id in target.ids() {
            assert!(target.grad(id).iter().all(|g| *g == 0.0), "{}", target.name(id));
        }
    }
    // With m = 1 only the optimizer could move the target; it does not.
    assert_eq!(trainer.target_params().digest(), target_before);
    assert_ne!(trainer.online_params().digest(), online_before);
    let online: Vec<&str> = trainer.online_params().ids().map(|id| trainer.online_params().name(id)).collect();
    assert_eq!(trainer.optimizer().param_names(), online.as_slice());
    assert_eq!(trainer.optimizer().m.len(), trainer.online_params().len());
    // The target has no predictor, decoder or loss weights at all.
    assert!(trainer.target_params().len() < trainer.online_params().len());
}

#[test]
fn zero_learning_rate_leaves_online_weights_and_applies_ema() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.optim.lr = 0.0;
    cfg.contrast.momentum = 0.5;
    let mut trainer = Trainer::new(cfg).unwrap();
    // Perturb the target so the EMA has something to contract.
    let mut target = trainer.target_params().clone();
    for id in target.ids().collect::<Vec<_>>() {
        target.value_mut(id).data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    let ckpt = {
        let mut c = Checkpoint::capture(&trainer);
        c.target = target.ids().map(|id| (target.name(id).to_string(), target.value(id).clone())).collect();
        c
    };
    ckpt.restore_into(&mut trainer).unwrap();
    let online_before = trainer.online_params().clone();
    trainer.step_once().unwrap();
    assert_eq!(trainer.online_params().digest(), online_before.digest());
    let after = trainer.target_params();
    for id in after.ids() {
        let o = online_before.value(online_before.id(after.name(id)).unwrap());
        for ((a, t), ov) in after.value(id).data().iter().zip(target.value(id).data()).zip(o.data()) {
            assert!((a - (0.5 * t + 0.5 * ov)).abs() < 1e-15);
        }
    }
}

#[test]
fn contrastive_only_matches_a_hand_assembled_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.reconstruction = false;
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    assert!(trainer.model().decoder.is_none());
    let batch: Vec<Tensor> = trainer.next_batch().into_iter().cloned().collect();
    let b = batch.len();

    let mut rng = step_rng(cfg.seed, 0, "augment");
    let views: Vec<_> = batch
        .iter()
        .map(|img| augment_two_views(img, &cfg.augment, &mut rng).unwrap())
        .collect();
    let s = cfg.encoder.image_size;
    let mut data = Vec::new();
    for v in &views {
        data.extend_from_slice(v.v1_norm.data());
    }
    for v in &views {
        data.extend_from_slice(v.v2_norm.data());
    }
    let inputs = Tensor::new(&[2 * b, s, s, 3], data).unwrap();

    let keys = {
        let mut tape = Tape::new();
        let p = trainer.target_params().bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let m = trainer.target_model();
        let out = m.encoder.forward(&mut tape, &p, x).unwrap();
        let z = m.heads.project(&mut tape, &p, out.repr).unwrap();
        tape.value(z).clone()
    };
    let expected = {
        let mut tape = Tape::new();
        let p = trainer.online_params().bind(&mut tape, true);
        let x = tape.constant(inputs);
        let m = trainer.model();
        let out = m.encoder.forward(&mut tape, &p, x).unwrap();
        let z = m.heads.project(&mut tape, &p, out.repr).unwrap();
        let q = m.heads.predict(&mut tape, &p, z).unwrap();
        let k = tape.constant(keys);
        let v1 = ViewOutputs { online: tape.slice(q, 0, 0, b).unwrap(), target: tape.slice(k, 0, 0, b).unwrap() };
        let v2 = ViewOutputs { online: tape.slice(q, 0, b, b).unwrap(), target: tape.slice(k, 0, b, b).unwrap() };
        let l = symmetrized_contrast(&mut tape, cfg.contrast.mode, v1, v2, None, cfg.contrast.heads.temperature).unwrap();
        tape.value(l).item().unwrap()
    };

    let rec = trainer.step_once().unwrap();
    assert_eq!(rec.l_contrast.to_bits(), expected.to_bits());
    assert_eq!(rec.combined.to_bits(), rec.l_contrast.to_bits());
    assert_eq!(rec.l_reconstruct, None);
    assert_eq!(rec.psnr, None);
    assert_eq!(rec.lambda_reconstruct, None);
    assert_eq!((rec.param_ratio, rec.flop_ratio), (0.0, 0.0));
}

#[test]
fn cosine_mode_trains() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.contrast.mode = ContrastMode::WithoutNegatives;
    cfg.contrast.queue_capacity = 0;
    let (trainer, records) = run(&cfg, 3);
    assert!(trainer.queue().is_none());
    assert!(trainer.model().heads.predictor.is_some());
    for r in &records {
        assert!((-2.0 - 1e-12..=2.0 + 1e-12).contains(&r.l_contrast));
    }
}

#[test]
fn queue_fills_with_unit_keys_of_both_views() {
    let dir = tempfile::tempdir().unwrap();
    let (trainer, _) = run(&tiny(dir.path()), 3);
    let queue = trainer.queue().unwrap();
    assert_eq!(queue.len(), 16);
    for row in queue.entries() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn metrics_serialize_with_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let (_, records) = run(&tiny(dir.path()), 1);
    let line = records[0].to_json_line();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    for key in [
        "step",
        "l_contrast",
        "l_reconstruct",
        "combined",
        "lambda_contrast",
        "lambda_reconstruct",
        "psnr",
        "param_ratio",
        "flop_ratio",
        "step_seconds",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["step"], 1);
    let back: MetricsRecord = serde_json::from_str(&line).unwrap();
    assert_eq!(back, records[0]);
}

fn hash_tree(dir: &Path) -> BTreeMap<String, [u8; 32]> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.display().to_string(), Sha256::digest(fs::read(&p).unwrap()).into());
            }
        }
    }
    out
}

#[test]
fn dump_and_probe_leave_the_dataset_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    synthetic(11, 20, 4, 8).unwrap().write_dir(&images).unwrap();
    let before = hash_tree(&images);

    let mut cfg = tiny(&dir.path().join("run"));
    cfg.data = DataSource::Directory(images.clone());
    let (trainer, _) = run(&cfg, 2);
    assert_eq!(trainer.dataset().len(), 20);
    assert_eq!(trainer.dataset().num_classes(), 4);

    let out = dir.path().join("dump");
    let summary = dump_diagnostics(&trainer, &out, 3).unwrap();
    assert_eq!(summary.attention_maps, 3 * cfg.encoder.heads);
    assert_eq!(summary.triptychs, 3);
    assert_eq!(summary.embedding_rows, 20);
    let attn: Vec<_> = fs::read_dir(out.join("attention")).unwrap().collect();
    assert_eq!(attn.len(), 3 * cfg.encoder.heads);
    let first = attn[0].as_ref().unwrap().path();
    let map = repre::pipeline::data::read_ppm(&first).unwrap();
    assert_eq!(map.shape(), &[4, 4, 3]);
    let trip = fs::read_dir(out.join("reconstruction")).unwrap().next().unwrap().unwrap().path();
    assert_eq!(repre::pipeline::data::read_ppm(&trip).unwrap().shape(), &[8, 3 * 8 + 2, 3]);
    let csv = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 21);
    assert_eq!(lines[0].split(',').count(), 2 + cfg.encoder.width);

    let data = load_dir(&images, 8).unwrap();
    let encoder = FrozenEncoder::from_trainer(&trainer).unwrap();
    let pcfg = ProbeConfig { iterations: 20, ..ProbeConfig::default() };
    let report = linear_probe(&data, &data, &encoder, &pcfg).unwrap();
    assert!(report.encoder_unchanged());
    assert!((0.0..=1.0).contains(&report.accuracy));

    assert_eq!(hash_tree(&images), before);
}

#[test]
fn dump_without_decoder_skips_triptychs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.reconstruction = false;
    let (trainer, _) = run(&cfg, 1);
    let summary = dump_diagnostics(&trainer, &dir.path().join("d"), 2).unwrap();
    assert_eq!(summary.triptychs, 0);
    assert_eq!(summary.attention_maps, 2 * cfg.encoder.heads);
}

#[test]
fn batch_larger_than_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.batch_size = 100;
    assert!(matches!(Trainer::new(cfg), Err(Error::Config(_))));
}
