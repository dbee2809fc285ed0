use std::collections::BTreeSet;

use cife_core::backbone::tokenizer::LEXICON;
use cife_core::dataset::*;
use cife_core::evaluation::IdentityProbe;
use cife_tensor::NoiseRng;
use proptest::prelude::*;

fn random_spec(rng: &mut NoiseRng) -> SpriteSpec {
    SpriteSpec {
        identity: Identity::from_id(rng.below(IDENTITY_SPACE)).unwrap(),
        variation: Variation {
            dx: rng.below(7) as i32 - 3,
            dy: rng.below(7) as i32 - 3,
            scale: 0.7 + rng.below(31) as f32 / 100.0,
            rotation: rng.below(4) as u16 * 90,
            background: rng.below(BACKGROUNDS) as u8,
        },
    }
}

#[test]
fn rendering_is_deterministic() {
    let mut rng = NoiseRng::new(5, "specs");
    for _ in 0..10 {
        let spec = random_spec(&mut rng);
        assert_eq!(render_sprite(&spec), render_sprite(&spec));
    }
}

#[test]
fn probe_recovers_hue_on_clean_renders() {
    let probe = IdentityProbe::default();
    let mut rng = NoiseRng::new(7, "specs");
    let mut shape_hits = 0;
    let total = 256;
    for _ in 0..total {
        let spec = random_spec(&mut rng);
        let r = probe.classify(&render_sprite(&spec));
        assert_eq!(r.hue_bin, Some(spec.identity.body_hue), "{spec:?}");
        if r.shape == Some(spec.identity.body_shape) {
            shape_hits += 1;
        }
    }
    assert!(shape_hits as f64 / total as f64 > 0.9, "shape accuracy {shape_hits}/{total}");
}

#[test]
fn every_identity_and_background_is_gradeable() {
    let probe = IdentityProbe::default();
    for id in 0..IDENTITY_SPACE {
        for bg in 0..BACKGROUNDS as u8 {
            let identity = Identity::from_id(id).unwrap();
            let spec = SpriteSpec {
                identity,
                variation: Variation {
                    dx: 3,
                    dy: -3,
                    scale: 0.7,
                    rotation: 270,
                    background: bg,
                },
            };
            assert_eq!(probe.classify(&render_sprite(&spec)).hue_bin, Some(identity.body_hue));
        }
    }
}

#[test]
fn scale_changes_area_not_hue() {
    let probe = IdentityProbe::default();
    let identity = Identity::from_id(100).unwrap();
    let big = SpriteSpec {
        identity,
        variation: Variation::canonical(0),
    };
    let mut small = big;
    small.variation.scale = 0.7;
    let (a, b) = (probe.classify(&render_sprite(&big)), probe.classify(&render_sprite(&small)));
    assert_eq!(a.hue_bin, b.hue_bin);
    assert!(a.foreground_pixels > b.foreground_pixels);
}

#[test]
fn toy_dataset_has_256_pairs() {
    let ds = build_dataset(DatasetParams::default()).unwrap();
    assert_eq!(ds.records.len(), 8);
    assert_eq!(ds.pair_count(), 256);
    let hues: BTreeSet<u8> = ds.records.iter().map(|r| r.identity.body_hue).collect();
    assert_eq!(hues.len(), 8);
    let ids: BTreeSet<usize> = ds.records.iter().map(|r| r.id).collect();
    assert_eq!(ids.len(), 8);
}

#[test]
fn paper_scale_pair_counts() {
    for (c, f) in [(2, 50), (4, 70), (3, 60)] {
        let ds = build_dataset(DatasetParams {
            characters: 18,
            c_per: c,
            f_per: f,
            seed: 2,
        })
        .unwrap();
        let pairs = ds.pair_count();
        assert_eq!(pairs, 18 * c * f);
        assert!((1800..=5040).contains(&pairs));
    }
}

#[test]
fn identity_space_limit() {
    let p = |n| DatasetParams {
        characters: n,
        c_per: 1,
        f_per: 1,
        seed: 0,
    };
    assert!(build_dataset(p(289)).is_err());
    let full = build_dataset(p(288)).unwrap();
    let ids: BTreeSet<usize> = full.records.iter().map(|r| r.id).collect();
    assert_eq!(ids.len(), 288);
}

#[test]
fn same_seed_same_dataset() {
    let a = build_dataset(DatasetParams::default()).unwrap();
    let b = build_dataset(DatasetParams::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.manifest_hash(), b.manifest_hash());
    let c = build_dataset(DatasetParams {
        seed: 2,
        ..DatasetParams::default()
    })
    .unwrap();
    assert_ne!(a.manifest_hash(), c.manifest_hash());
}

#[test]
fn captions_never_name_identity() {
    let mut identity_words: BTreeSet<&str> = HUE_NAMES.iter().copied().collect();
    identity_words.extend(["circle", "square", "triangle", "hat", "badge", "plain", "black", "navy", "brown", "plum"]);
    let lexicon: BTreeSet<&str> = LEXICON.iter().copied().collect();
    let ds = build_dataset(DatasetParams::default()).unwrap();
    for s in ds.all_samples() {
        for w in s.caption.split(' ') {
            assert!(!identity_words.contains(w), "{}", s.caption);
            assert!(lexicon.contains(w));
        }
        assert_eq!(s.caption, s.spec.variation.caption());
    }
}

#[test]
fn pair_stream_covers_cross_product() {
    let ds = build_dataset(DatasetParams::default()).unwrap();
    let a = pair_stream(&ds.records, 1);
    let b = pair_stream(&ds.records, 2);
    assert_eq!(a.len(), 256);
    assert_ne!(a, b);
    let sa: BTreeSet<_> = a.iter().copied().collect();
    let sb: BTreeSet<_> = b.iter().copied().collect();
    assert_eq!(sa.len(), 256);
    assert_eq!(sa, sb);
    for p in &a {
        assert_eq!(ds.reference(p).spec.identity, ds.target(p).spec.identity);
    }
}

#[test]
fn disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data");
    let ds = build_dataset(DatasetParams {
        characters: 3,
        c_per: 2,
        f_per: 3,
        seed: 9,
    })
    .unwrap();
    let hash = ds.save(&path, false).unwrap();
    assert_eq!(hash, ds.manifest_hash());
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert!(ds.save(&path, false).is_err());
    assert_eq!(ds.save(&path, true).unwrap(), hash);
    let rec = &ds.records[0];
    assert!(path.join(format!("{:03}/appearance/1.png", rec.id)).exists());
    assert!(path.join(format!("{:03}/variation/2.png", rec.id)).exists());
    let tsv = std::fs::read_to_string(path.join(format!("{:03}/captions.tsv", rec.id))).unwrap();
    assert_eq!(tsv.lines().count(), 5);
}

#[test]
fn held_out_identities_are_disjoint() {
    let ds = build_dataset(DatasetParams::default()).unwrap();
    let held = sample_identities(16, 77, "held-out", &ds.identities()).unwrap();
    for h in &held {
        assert!(!ds.identities().contains(h));
    }
    let hues: BTreeSet<u8> = held.iter().map(|h| h.body_hue).collect();
    assert_eq!(hues.len(), 8);
}

proptest! {
    #[test]
    fn dataset_generation_is_pure(seed in 0u64..1000, n in 1usize..6) {
        let p = DatasetParams { characters: n, c_per: 1, f_per: 2, seed };
        prop_assert_eq!(build_dataset(p).unwrap(), build_dataset(p).unwrap());
    }
}
