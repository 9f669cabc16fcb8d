use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repre::decoder::{decoder_cost_ratio, reconstruction_loss, Decoder, DecoderConfig, FusionOp};
use repre::encoder::{Encoder, EncoderConfig, Variant};
use repre::params::ParamStore;
use repre_tensor::{Tape, Tensor};

fn encoder_cfg(variant: Variant, taps: usize) -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 2,
        depth: 6,
        width: 8,
        heads: 2,
        variant,
        taps,
    }
}

fn images(b: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[b, 16, 16, 3], 0.0, 1.0, &mut rng).unwrap()
}

fn build(enc: &EncoderConfig, dec: &DecoderConfig) -> (ParamStore, Encoder, Decoder) {
    let mut store = ParamStore::new();
    let e = Encoder::new(enc, &mut store, "enc", 11).unwrap();
    let d = Decoder::new(dec, enc, &mut store, "dec", 11).unwrap();
    (store, e, d)
}

#[test]
fn reconstruction_has_image_shape_for_every_configuration() {
    for variant in [Variant::Vit, Variant::Hierarchical] {
        for taps in 1..=3 {
            for op in [FusionOp::Conv, FusionOp::Transformer] {
                for layers in [1, 2, 4] {
                    let enc = encoder_cfg(variant, taps);
                    let dec = DecoderConfig { fusion_op: op, fusion_layers: layers };
                    let (store, e, d) = build(&enc, &dec);
                    let mut tape = Tape::new();
                    let p = store.bind(&mut tape, false);
                    let x = tape.constant(images(2, 0));
                    let out = e.forward(&mut tape, &p, x).unwrap();
                    let r = d.reconstruct(&mut tape, &p, &out.taps).unwrap();
                    assert_eq!(tape.shape(r), &[2, 16, 16, 3], "{variant} K={taps} {op}-{layers}");
                    assert_eq!(d.blocks.len(), taps - 1);
                }
            }
        }
    }
}

#[test]
fn invalid_fusion_depth_is_rejected() {
    let enc = encoder_cfg(Variant::Vit, 3);
    let mut store = ParamStore::new();
    let dec = DecoderConfig { fusion_op: FusionOp::Conv, fusion_layers: 3 };
    assert!(Decoder::new(&dec, &enc, &mut store, "dec", 0).is_err());
}

#[test]
fn zeroed_decoder_reconstructs_zeros() {
    let enc = encoder_cfg(Variant::Vit, 3);
    let (mut store, e, d) = build(&enc, &DecoderConfig::default());
    for id in d.params() {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(images(2, 1));
    let out = e.forward(&mut tape, &p, x).unwrap();
    let r = d.reconstruct(&mut tape, &p, &out.taps).unwrap();
    assert!(tape.value(r).data().iter().all(|v| *v == 0.0));
}

#[test]
fn every_tap_and_decoder_parameter_gets_gradient() {
    for variant in [Variant::Vit, Variant::Hierarchical] {
        for op in [FusionOp::Conv, FusionOp::Transformer] {
            let enc = encoder_cfg(variant, 3);
            let (mut store, e, d) = build(&enc, &DecoderConfig { fusion_op: op, fusion_layers: 2 });
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let img = tape.constant(images(2, 2));
            let out = e.forward(&mut tape, &p, img).unwrap();
            for f in &out.taps.features {
                tape.retain_grad(f.tokens);
            }
            let r = d.reconstruct(&mut tape, &p, &out.taps).unwrap();
            let loss = reconstruction_loss(&mut tape, img, r).unwrap();
            tape.backward(loss).unwrap();
            for (k, f) in out.taps.features.iter().enumerate() {
                let g = tape.grad(f.tokens).expect("tap gradient");
                assert!(g.data().iter().any(|v| *v != 0.0), "{variant} {op}: tap {k} has zero gradient");
            }
            store.accumulate_grads(&tape, &p);
            for id in d.params() {
                assert!(store.grad(id).iter().any(|v| *v != 0.0), "{}", store.name(id));
            }
        }
    }
}

#[test]
fn reconstruction_loss_identity_and_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng).unwrap();
    let b = Tensor::uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let same = tape.constant(a.clone());
    let l = reconstruction_loss(&mut tape, x, same).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);

    let expect: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64;
    let y = tape.constant(b.clone());
    let l = reconstruction_loss(&mut tape, x, y).unwrap();
    assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-14);

    let xs = tape.constant(a.map(|v| v + 0.75));
    let ys = tape.constant(b.map(|v| v + 0.75));
    let ls = reconstruction_loss(&mut tape, xs, ys).unwrap();
    assert!((tape.value(ls).item().unwrap() - expect).abs() < 1e-12);

    let wrong = tape.constant(Tensor::zeros(&[2, 4, 4, 1]).unwrap());
    assert!(reconstruction_loss(&mut tape, x, wrong).is_err());
}

#[test]
fn transformer_fusion_outweighs_single_conv() {
    let enc = encoder_cfg(Variant::Vit, 3);
    let count = |op, layers| {
        let (store, _, d) = build(&enc, &DecoderConfig { fusion_op: op, fusion_layers: layers });
        store.count(d.params())
    };
    let conv1 = count(FusionOp::Conv, 1);
    assert!(count(FusionOp::Conv, 2) > conv1);
    assert!(count(FusionOp::Conv, 4) > count(FusionOp::Conv, 2));
    for layers in [1, 2, 4] {
        assert!(count(FusionOp::Transformer, layers) > conv1);
    }
}

#[test]
fn cost_ratio_counts_layers_analytically() {
    let enc = EncoderConfig::default();
    let (store, e, d) = build(&enc, &DecoderConfig::default());
    let c = enc.width;
    let p3 = enc.patch_size * enc.patch_size * 3;
    let per_block = 9 * 2 * c * c + c + 9 * c * c + c;
    let dec_params = (enc.taps - 1) * per_block + c * p3 + p3;
    assert_eq!(store.count(d.params()), dec_params);
    let ratio = decoder_cost_ratio(&e, Some(&d), &store);
    assert!((ratio.param_ratio - dec_params as f64 / store.count(e.params()) as f64).abs() < 1e-15);
    assert_eq!(decoder_cost_ratio(&e, None, &store).param_ratio, 0.0);
    assert_eq!(decoder_cost_ratio(&e, None, &store).flop_ratio, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reconstruction_loss_is_nonnegative_and_symmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(a);
        let y = tape.constant(b);
        let l1 = reconstruction_loss(&mut tape, x, y).unwrap();
        let l2 = reconstruction_loss(&mut tape, y, x).unwrap();
        let (v1, v2) = (tape.value(l1).item().unwrap(), tape.value(l2).item().unwrap());
        prop_assert!(v1 > 0.0);
        prop_assert!((v1 - v2).abs() < 1e-15);
    }
}
