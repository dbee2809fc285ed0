use std::collections::BTreeSet;

use cife_core::backbone::tokenizer::{LEXICON, PAD, START};
use cife_core::backbone::vae::{kl_divergence, vae_loss};
use cife_core::backbone::*;
use cife_core::dataset::{render_sprite, Identity, SpriteSpec, Variation};
use cife_core::{CifeError, ImageRGB};
use cife_tensor::{NoiseRng, Tensor};

fn sprite(id: usize) -> ImageRGB {
    render_sprite(&SpriteSpec {
        identity: Identity::from_id(id).unwrap(),
        variation: Variation::canonical(1),
    })
}

/// A backbone whose zero-initialized output projection is replaced by noise.
fn live_backbone(seed: u64) -> Backbone {
    let mut bb = Backbone::with_defaults(seed);
    for name in ["unet.out.conv.weight", "unet.out.conv.bias"] {
        let t = bb.unet.get_mut(name).unwrap();
        *t = NoiseRng::new(seed, name).normal_tensor(t.shape().to_vec()).map(|v: f32| v * 0.1);
    }
    bb
}

#[test]
fn tokenizer_examples() {
    let empty = tokenize("");
    assert_eq!(empty.len(), TEXT_LEN);
    assert_eq!(empty[0], START);
    assert!(empty[1..].iter().all(|&i| i == PAD));
    assert_eq!(tokenize("a red circle"), tokenize("a red circle"));
    let ids: BTreeSet<usize> = LEXICON.iter().map(|w| tokenize(w)[1]).collect();
    let words: BTreeSet<&str> = LEXICON.iter().copied().collect();
    assert_eq!(ids.len(), words.len());
    assert!(ids.iter().all(|&i| i < vocab_size() && i > START));
    let long = tokenize(&"word ".repeat(40));
    assert_eq!(long.len(), TEXT_LEN);
}

#[test]
fn text_encoder_shapes_and_determinism() {
    let bb = Backbone::with_defaults(1);
    let h = bb.text_encode(&["a small sprite", "a large sprite on mint background"]).unwrap();
    assert_eq!(h.shape(), &[2, TEXT_LEN, 64]);
    assert!(h.outer(0).max_abs_diff(&h.outer(1)) > 1e-3);
    assert_eq!(h, bb.text_encode(&["a small sprite", "a large sprite on mint background"]).unwrap());
    let mut ids = tokenize("a sprite");
    ids[3] = vocab_size();
    assert!(matches!(bb.text_encode_ids(&ids), Err(CifeError::UnknownToken { .. })));
}

#[test]
fn vae_shapes_and_modes() {
    let bb = Backbone::with_defaults(2);
    let imgs = [sprite(3), sprite(200)];
    let a = bb.vae_encode(&imgs, Some(5)).unwrap();
    let b = bb.vae_encode(&imgs, Some(5)).unwrap();
    assert_eq!(a.latent, b.latent);
    assert_eq!(a.mu.shape(), &[2, 4, 8, 8]);
    assert_eq!(a.logvar.shape(), &[2, 4, 8, 8]);
    let det = bb.vae_encode(&imgs, None).unwrap();
    assert_eq!(det.latent, det.mu);
    assert_ne!(a.latent, a.mu);
    let decoded = bb.vae_decode(&a.latent).unwrap();
    assert_eq!(decoded.len(), 2);
    assert_eq!(decoded[0].to_tensor().shape(), &[3, 32, 32]);
}

#[test]
fn vae_loss_examples() {
    let img = sprite(10).to_tensor();
    let zero = Tensor::zeros([4, 8, 8]);
    assert_eq!(vae_loss(&img, &img, &zero, &zero, 1.0).unwrap(), 0.0);
    assert_eq!(kl_divergence(&zero, &zero).unwrap(), 0.0);
    let one = Tensor::ones([1]);
    assert!((kl_divergence(&one, &Tensor::zeros([1])).unwrap() - 0.5).abs() < 1e-12);
    // Oracle: closed-form Gaussian KL per element.
    let mu: Tensor<f32> = NoiseRng::new(1, "mu").normal_tensor(vec![32]);
    let lv: Tensor<f32> = NoiseRng::new(1, "lv").normal_tensor(vec![32]);
    let oracle: f64 = mu
        .data()
        .iter()
        .zip(lv.data())
        .map(|(&m, &l)| {
            let (m, var) = (m as f64, (l as f64).exp());
            0.5 * (var + m * m - 1.0 - var.ln())
        })
        .sum::<f64>()
        / 32.0;
    assert!((kl_divergence(&mu, &lv).unwrap() - oracle).abs() < 1e-9);
}

#[test]
fn unet_accepts_variable_condition_lengths() {
    let bb = live_backbone(4);
    let x: Tensor<f32> = NoiseRng::new(1, "x").normal_tensor(vec![1, 4, 8, 8]);
    let text = bb.text_encode(&["a sprite"]).unwrap();
    let base = bb.unet_forward(&x, &[50], &text).unwrap();
    assert_eq!(base.shape(), &[1, 4, 8, 8]);
    for len in [16, 17, 20, 48] {
        let extra: Tensor<f32> = NoiseRng::indexed(2, "rows", len as u64).normal_tensor(vec![len - 16, 64]);
        let mut data = text.data().to_vec();
        data.extend_from_slice(extra.data());
        let cond = Tensor::new([1, len, 64], data).unwrap();
        let out = bb.unet_forward(&x, &[50], &cond).unwrap();
        assert_eq!(out.shape(), &[1, 4, 8, 8]);
        assert_eq!(out, bb.unet_forward(&x, &[50], &cond).unwrap());
        if len > 16 {
            let l2 = out.zip_map(&base, |a, b| a - b).unwrap().l2_norm();
            assert!(l2 > 1e-6, "len {len}: {l2}");
        }
    }
}

#[test]
fn unet_rejects_wrong_width() {
    let bb = Backbone::with_defaults(1);
    let x = Tensor::zeros([1, 4, 8, 8]);
    let cond = Tensor::zeros([1, 16, 32]);
    assert!(matches!(bb.unet_forward(&x, &[0], &cond), Err(CifeError::CondWidth { .. })));
}

#[test]
fn zero_output_layer_gives_zero_prediction() {
    let bb = Backbone::with_defaults(5);
    let x: Tensor<f32> = NoiseRng::new(1, "x").normal_tensor(vec![2, 4, 8, 8]);
    let cond = bb.text_encode(&["a", "b"]).unwrap();
    let out = bb.unet_forward(&x, &[3, 190], &cond).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn timestep_embedding_layout() {
    let e: Tensor<f64> = unet::timestep_embedding(&[0, 7], 8);
    assert_eq!(e.shape(), &[2, 8]);
    assert_eq!(&e.data()[..4], &[0.0; 4]);
    assert_eq!(&e.data()[4..8], &[1.0; 4]);
    assert!((e.data()[8] - 7f64.sin()).abs() < 1e-12);
}
