use cife_core::backbone::Backbone;
use cife_core::character_encoder::*;
use cife_core::dataset::{appearance_sample, Identity};
use cife_core::gradcheck::EndToEndCheck;
use cife_core::{CifeError, ImageRGB};
use cife_tensor::{NoiseRng, Tensor};
use proptest::prelude::*;

fn reference(id: usize) -> ImageRGB {
    appearance_sample(Identity::from_id(id).unwrap(), 0).image
}

fn clip(n: usize, len: usize, seed: u64) -> Tensor<f32> {
    NoiseRng::new(seed, "clip").normal_tensor(vec![n, len, 64])
}

#[test]
fn variant_names_round_trip() {
    for v in VariantKind::ALL {
        assert_eq!(v.as_str().parse::<VariantKind>().unwrap(), v);
        assert_eq!(v.to_string(), v.as_str());
    }
    assert!("vgg".parse::<VariantKind>().is_err());
}

#[test]
fn feature_and_encoding_shapes() {
    let enc = CharacterEncoder::init(VariantKind::SamePlace, EncoderConfig::default(), 1);
    let imgs = [reference(0), reference(100), reference(287)];
    let f = enc.extract_features(&imgs).unwrap();
    assert_eq!(f.shape(), &[3, 256]);
    assert_eq!(f, enc.extract_features(&imgs).unwrap());
    let e = enc.encode(&imgs).unwrap();
    assert_eq!(e.shape(), &[3, 4, 64]);
    // Zero-initialized final layer gives all-zero rows.
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn same_place_preserves_text_rows() {
    let c = clip(1, 16, 1);
    let k: Tensor<f32> = NoiseRng::new(2, "k").normal_tensor(vec![1, 4, 64]);
    let out = compose_conditions(&c, Some(&k), VariantKind::SamePlace, None, &EncoderConfig::default()).unwrap();
    assert_eq!(out.shape(), &[1, 20, 64]);
    assert_eq!(&out.data()[..16 * 64], c.data());
    assert_eq!(&out.data()[16 * 64..], k.data());

    let zeros = Tensor::zeros([1, 4, 64]);
    let out = compose_conditions(&c, Some(&zeros), VariantKind::Autoencoder, None, &EncoderConfig::default()).unwrap();
    assert_eq!(&out.data()[..16 * 64], c.data());
    assert!(out.data()[16 * 64..].iter().all(|&v| v == 0.0));

    let off = compose_conditions(&c, None, VariantKind::SamePlace, None, &EncoderConfig::default()).unwrap();
    assert_eq!(off, c);
}

#[test]
fn compose_rejects_bad_inputs() {
    let cfg = EncoderConfig::default();
    let c = clip(1, 16, 1);
    let narrow = Tensor::zeros([1, 4, 32]);
    assert!(matches!(
        compose_conditions(&c, Some(&narrow), VariantKind::SamePlace, None, &cfg),
        Err(CifeError::Compose(_))
    ));
    let k = Tensor::zeros([1, 4, 64]);
    assert!(compose_conditions(&c, Some(&k), VariantKind::MixEncoder, None, &cfg).is_err());
    let no_mixer = CharacterEncoder::init(VariantKind::SamePlace, cfg, 1);
    assert!(compose_conditions(&c, Some(&k), VariantKind::MixEncoder, Some(&no_mixer.params), &cfg).is_err());
}

#[test]
fn identity_mixer_equals_concatenation() {
    let cfg = EncoderConfig::default();
    let enc = CharacterEncoder::init(VariantKind::MixEncoder, cfg, 3);
    let c = clip(2, 16, 4);
    let k: Tensor<f32> = NoiseRng::new(5, "k").normal_tensor(vec![2, 4, 64]);
    let plain = compose_conditions(&c, Some(&k), VariantKind::SamePlace, None, &cfg).unwrap();
    let mixed = compose_conditions(&c, Some(&k), VariantKind::MixEncoder, Some(&enc.params), &cfg).unwrap();
    assert_eq!(mixed.shape(), &[2, 20, 64]);
    assert!(mixed.max_abs_diff(&plain) <= 1e-6);
}

#[test]
fn perturbed_mixer_transforms_every_row() {
    let cfg = EncoderConfig::default();
    let mut enc = CharacterEncoder::init(VariantKind::MixEncoder, cfg, 3);
    let names: Vec<String> = enc.params.names().filter(|n| n.starts_with(MIXER_PREFIX)).map(str::to_string).collect();
    for (i, n) in names.iter().enumerate() {
        let t = enc.params.get_mut(n).unwrap();
        let noise: Tensor<f32> = NoiseRng::indexed(1, "p", i as u64).normal_tensor(t.shape().to_vec());
        *t = t.zip_map(&noise, |a, b| a + 0.1 * b).unwrap();
    }
    let c = clip(1, 16, 4);
    let k: Tensor<f32> = NoiseRng::new(5, "k").normal_tensor(vec![1, 4, 64]);
    let plain = compose_conditions(&c, Some(&k), VariantKind::SamePlace, None, &cfg).unwrap();
    let mixed = compose_conditions(&c, Some(&k), VariantKind::MixEncoder, Some(&enc.params), &cfg).unwrap();
    for r in 0..20 {
        let a = &mixed.data()[r * 64..(r + 1) * 64];
        let b = &plain.data()[r * 64..(r + 1) * 64];
        assert!(a.iter().zip(b).any(|(x, y)| x != y), "row {r}");
    }
}

#[test]
fn autoencoder_decoder_shapes() {
    let enc = CharacterEncoder::init(VariantKind::Autoencoder, EncoderConfig::default(), 6);
    let chars: Tensor<f32> = NoiseRng::new(1, "k").normal_tensor(vec![2, 4, 64]);
    let out = enc.ae_decode(&chars, &clip(2, 16, 2)).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].to_tensor().shape(), &[3, 32, 32]);
    assert_eq!(out, enc.ae_decode(&chars, &clip(2, 16, 2)).unwrap());
    let sp = CharacterEncoder::init(VariantKind::SamePlace, EncoderConfig::default(), 6);
    assert!(sp.ae_decode(&chars, &clip(2, 16, 2)).is_err());
}

#[test]
fn unet_consumes_every_row_count() {
    let bb = Backbone::with_defaults(2);
    let x = Tensor::zeros([1, 4, 8, 8]);
    for k in [0usize, 1, 4, 32] {
        let c = clip(1, 16, 3);
        let rows = Tensor::zeros([1, k, 64]);
        let cond = if k == 0 {
            c
        } else {
            compose_conditions(&c, Some(&rows), VariantKind::SamePlace, None, &EncoderConfig::default()).unwrap()
        };
        assert_eq!(cond.shape()[1], 16 + k);
        assert!(bb.unet_forward(&x, &[10], &cond).is_ok());
    }
}

#[test]
fn gradients_reach_every_encoder_stage() {
    let norms = EndToEndCheck::small(VariantKind::SamePlace).gradient_norms().unwrap();
    for prefix in [FEATURES_PREFIX, DEEP_PREFIX] {
        let total: f64 = norms.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v).sum();
        assert!(total > 0.0, "{prefix}");
    }
    let mix = EndToEndCheck::small(VariantKind::MixEncoder).gradient_norms().unwrap();
    let total: f64 = mix.iter().filter(|(k, _)| k.starts_with(MIXER_PREFIX)).map(|(_, v)| v).sum();
    assert!(total > 0.0);
}

#[test]
fn cosine_oracle() {
    assert!((cosine(&[1.0, 0.0], &[0.0, 1.0])).abs() < 1e-12);
    assert!((cosine(&[2.0, 2.0], &[1.0, 1.0]) - 1.0).abs() < 1e-12);
    assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn concatenation_keeps_prefix(len in 1usize..40, k in 1usize..8, seed in 0u64..100) {
        let c: Tensor<f32> = NoiseRng::new(seed, "c").normal_tensor(vec![1, len, 64]);
        let rows: Tensor<f32> = NoiseRng::new(seed, "r").normal_tensor(vec![1, k, 64]);
        let out = compose_conditions(&c, Some(&rows), VariantKind::SamePlace, None, &EncoderConfig::default()).unwrap();
        prop_assert_eq!(out.shape(), &[1, len + k, 64]);
        prop_assert_eq!(&out.data()[..len * 64], c.data());
    }
}
