use cife_core::backbone::Backbone;
use cife_core::character_encoder::{CharacterEncoder, EncoderConfig, VariantKind};
use cife_core::checkpoint::*;
use cife_core::{CifeError, ParamStore};
use cife_tensor::{NoiseRng, Tensor};
use proptest::prelude::*;

fn small_bundle() -> CheckpointBundle {
    let mut params = ParamStore::new();
    params.insert("b.weight", NoiseRng::new(1, "w").normal_tensor(vec![3, 2]));
    params.insert("a.bias", Tensor::new([2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
    CheckpointBundle {
        tag: ComponentTag::Unet,
        metadata: [("note".to_string(), "x=y".to_string())].into(),
        params,
    }
}

fn ckpt_err(e: CifeError) -> CheckpointError {
    match e {
        CifeError::Checkpoint(c) => c,
        other => panic!("expected a checkpoint error, got {other}"),
    }
}

#[test]
fn bundle_round_trip_is_lossless() {
    let b = small_bundle();
    let bytes = b.to_bytes();
    let back = CheckpointBundle::from_bytes(&bytes).unwrap();
    assert_eq!(back, b);
    assert!(back.params.bitwise_eq(&b.params));
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(&bytes[..4], MAGIC);
}

#[test]
fn header_errors() {
    let bytes = small_bundle().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(CheckpointBundle::from_bytes(&bad), Err(CheckpointError::BadMagic));
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(CheckpointBundle::from_bytes(&v), Err(CheckpointError::UnsupportedVersion(9))));
    assert!(matches!(
        CheckpointBundle::from_bytes(&bytes[..bytes.len() - 40]),
        Err(CheckpointError::HashMismatch { .. }) | Err(CheckpointError::Truncated(_))
    ));
    assert!(CheckpointBundle::from_bytes(&[]).is_err());
}

#[test]
fn backbone_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut bb = Backbone::with_defaults(3);
    bb.provenance.unet.insert("train.seed".into(), "3".into());
    let hashes = bb.save(dir.path()).unwrap();
    assert_eq!(hashes, bb.hashes());
    let back = Backbone::load(dir.path()).unwrap();
    assert_eq!(back, bb);
    assert_eq!(back.hashes(), hashes);
    let again = tempfile::tempdir().unwrap();
    back.save(again.path()).unwrap();
    for f in [VAE_FILE, TEXT_FILE, UNET_FILE] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
    }
}

#[test]
fn components_swap_in_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let donor = Backbone::with_defaults(3);
    donor.save(dir.path()).unwrap();
    let mixed = Backbone::with_defaults(4)
        .with_vae_from(&dir.path().join(VAE_FILE))
        .unwrap()
        .with_text_from(&dir.path().join(TEXT_FILE))
        .unwrap();
    let (d, m) = (donor.hashes(), mixed.hashes());
    assert_eq!(d.vae, m.vae);
    assert_eq!(d.text, m.text);
    assert_ne!(d.unet, m.unet);
    assert!(Backbone::with_defaults(4).with_text_from(&dir.path().join(UNET_FILE)).is_err());
}

#[test]
fn component_mixups_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bb = Backbone::with_defaults(3);
    bb.save(dir.path()).unwrap();
    std::fs::copy(dir.path().join(VAE_FILE), dir.path().join(TEXT_FILE)).unwrap();
    let err = ckpt_err(Backbone::load(dir.path()).unwrap_err());
    assert!(matches!(err, CheckpointError::TagMismatch { .. }));

    let enc_path = dir.path().join("enc.ckpt");
    CharacterEncoder::init(VariantKind::SamePlace, EncoderConfig::default(), 1).save(&enc_path).unwrap();
    assert!(CharacterEncoder::load(&enc_path, Some(VariantKind::SamePlace)).is_ok());
    assert!(CharacterEncoder::load(&enc_path, Some(VariantKind::MixEncoder)).is_err());
    assert!(CharacterEncoder::load(&dir.path().join(UNET_FILE), None).is_err());
}

#[test]
fn layout_is_enforced() {
    let enc = CharacterEncoder::init(VariantKind::MixEncoder, EncoderConfig::default(), 1);
    let mut b = enc.bundle();
    let name = b.params.names().next().unwrap().to_string();
    let mut trimmed = ParamStore::new();
    for (k, v) in b.params.iter().filter(|(k, _)| **k != name) {
        trimmed.insert(k.clone(), v.clone());
    }
    b.params = trimmed;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("enc.ckpt");
    b.save(&p).unwrap();
    let err = ckpt_err(CharacterEncoder::load(&p, None).unwrap_err());
    assert!(matches!(err, CheckpointError::NameSet { .. }));
}

#[test]
fn encoder_round_trip_keeps_provenance() {
    let mut enc = CharacterEncoder::init(VariantKind::Autoencoder, EncoderConfig::default(), 2);
    enc.provenance.insert("dataset.identities".into(), "1,2,3".into());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.ckpt");
    let h = enc.save(&p).unwrap();
    assert_eq!(h, enc.sha256());
    let back = CharacterEncoder::load(&p, None).unwrap();
    assert_eq!(back, enc);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_flipped_byte_is_detected(pos in 0usize..10_000, bit in 0u8..8) {
        let bytes = small_bundle().to_bytes();
        let mut corrupt = bytes.clone();
        let i = pos % bytes.len();
        corrupt[i] ^= 1 << bit;
        prop_assert!(CheckpointBundle::from_bytes(&corrupt).is_err());
    }

    #[test]
    fn any_truncation_is_detected(cut in 1usize..10_000) {
        let bytes = small_bundle().to_bytes();
        let keep = bytes.len().saturating_sub(cut % bytes.len()).min(bytes.len() - 1);
        prop_assert!(CheckpointBundle::from_bytes(&bytes[..keep]).is_err());
    }
}
