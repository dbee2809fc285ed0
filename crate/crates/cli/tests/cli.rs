use std::path::Path;

use clap::Parser;

use cife_cli::{main_with, run, Cli, CliError, RunConfig};
use cife_core::backbone::Backbone;
use cife_core::character_encoder::{CharacterEncoder, EncoderConfig, VariantKind};
use cife_core::training::TRAINING_IDENTITIES_KEY;

fn run_args(args: &[&str]) -> Result<(), CliError> {
    let mut full = vec!["cife"];
    full.extend_from_slice(args);
    run(Cli::try_parse_from(full).expect("arguments parse").command)
}

fn code(args: &[&str]) -> i32 {
    let mut full = vec!["cife"];
    full.extend_from_slice(args);
    main_with(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn usage_message(r: Result<(), CliError>) -> String {
    match r {
        Err(CliError::Usage(m)) => m,
        other => panic!("expected a usage error, got {other:?}"),
    }
}

#[test]
fn bad_arguments_exit_with_two() {
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["train-encoder", "--variant", "sideways", "--data", "d", "--backbone", "b"]), 2);
    assert_eq!(code(&["sample", "--backbone", "b", "--encoder", "e.ckpt"]), 2);
    assert_eq!(code(&["sample", "--backbone", "b", "--ref", "r.png"]), 2);
    assert_eq!(code(&["gen-data", "--characters", "289", "--out", "/nonexistent/never"]), 2);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_prerequisites_name_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let m = usage_message(run_args(&["train-vae", "--data", s(&missing), "--out", s(dir.path())]));
    assert!(m.contains("cife gen-data"), "{m}");
    let m = usage_message(run_args(&[
        "sample",
        "--backbone",
        s(&missing),
        "--out",
        s(dir.path()),
    ]));
    assert!(m.contains("cife train-backbone"), "{m}");
}

#[test]
fn config_files_are_strict() {
    assert!(RunConfig::parse("dataset.characters = 4\n# comment\n\ntrain.seed = 3 # trailing").is_ok());
    assert!(matches!(RunConfig::parse("dataset.charactrs = 4"), Err(CliError::Usage(_))));
    assert!(matches!(RunConfig::parse("train.seed = 1\ntrain.seed = 2"), Err(CliError::Usage(_))));
    assert!(matches!(RunConfig::parse("no equals sign"), Err(CliError::Usage(_))));
    let bad = RunConfig::parse("dataset.characters = many").unwrap();
    assert!(bad.dataset().is_err());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "bogus.key = 1\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]), 2);
}

#[test]
fn seed_precedence() {
    let mut cfg = RunConfig::parse("").unwrap();
    let default = cfg.dataset().unwrap().seed;
    std::env::set_var(cife_cli::SEED_ENV, "77");
    let env = RunConfig::load(None).unwrap();
    std::env::remove_var(cife_cli::SEED_ENV);
    assert_ne!(default, 77);
    assert_eq!(env.dataset().unwrap().seed, 77);
    assert_eq!(env.sampler().unwrap().seed, 77);
    let mut file = RunConfig::parse("dataset.seed = 5").unwrap();
    assert_eq!(file.dataset().unwrap().seed, 5);
    file.set("dataset.seed", Some(9));
    assert_eq!(file.dataset().unwrap().seed, 9);
    cfg.set("sampler.seed", Some(7313187166u64));
    assert_eq!(cfg.sampler().unwrap().seed, 7313187166);
}

#[test]
fn gen_data_writes_dataset_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let args = ["gen-data", "--out", s(&out), "--characters", "2", "--c-per", "1", "--f-per", "2", "--seed", "4"];
    assert_eq!(code(&args), 0);
    assert!(out.join("manifest.json").exists());
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("dataset.characters = 2"));
    assert!(config.contains("dataset.seed = 4"));
    let again = run_args(&args);
    assert!(again.is_err(), "a non-empty output directory needs --force");
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&forced), 0);
}

#[test]
fn sample_writes_images_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let bb = dir.path().join("bb");
    Backbone::with_defaults(1).save(&bb).unwrap();
    let out = dir.path().join("out");
    let args = [
        "sample", "--backbone", s(&bb), "--prompt", "a small sprite", "--seed", "7313187166", "--steps", "30",
        "--count", "2", "--out", s(&out),
    ];
    assert_eq!(code(&args), 0);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("samples.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7313187166u64);
    assert_eq!(meta["steps"], 30);
    assert_eq!(meta["images"].as_array().unwrap().len(), 2);
    assert!(out.join("sample_001.png").exists());
    let first = std::fs::read(out.join("sample_000.png")).unwrap();
    assert_eq!(code(&args), 0);
    assert_eq!(first, std::fs::read(out.join("sample_000.png")).unwrap());
    assert_eq!(code(&["sample", "--backbone", s(&bb), "--steps", "201", "--out", s(&out)]), 2);
}

#[test]
fn eval_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let bb = dir.path().join("bb");
    Backbone::with_defaults(1).save(&bb).unwrap();
    let mut enc = CharacterEncoder::init(VariantKind::SamePlace, EncoderConfig::default(), 1);
    enc.provenance.insert(TRAINING_IDENTITIES_KEY.into(), "5,6".into());
    let ckpt = dir.path().join("enc.ckpt");
    enc.save(&ckpt).unwrap();
    let out = dir.path().join("eval");
    let m = usage_message(run_args(&[
        "eval", "identity", "--encoder", s(&ckpt), "--backbone", s(&bb), "--characters", "5", "--out", s(&out),
    ]));
    assert!(m.contains('5'), "{m}");
    let m = usage_message(run_args(&[
        "eval", "transfer", "--encoder", s(&ckpt), "--backbone-a", s(&bb), "--backbone-b", s(&bb), "--characters",
        "7", "--out", s(&out),
    ]));
    assert!(!m.is_empty());
    assert_eq!(
        code(&["eval", "control", "--backbone", s(&bb), "--characters", "7", "--n", "8", "--out", s(&out)]),
        2,
        "fewer than 32 samples per character is refused"
    );
}

#[test]
fn train_encoder_refuses_unfrozen_backbone_and_bare_autoencoder() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&["gen-data", "--out", s(&data), "--characters", "1", "--c-per", "1", "--f-per", "1"]),
        0
    );
    let bb = dir.path().join("bb");
    Backbone::with_defaults(1).save(&bb).unwrap();
    let cfg = dir.path().join("unfreeze.cfg");
    std::fs::write(&cfg, "freeze.unet = false\n").unwrap();
    let out = dir.path().join("e");
    let base = ["train-encoder", "--data", s(&data), "--backbone", s(&bb), "--out", s(&out)];
    let mut args = base.to_vec();
    args.extend(["--variant", "same-place", "--config", s(&cfg)]);
    assert_eq!(code(&args), 2);
    let mut args = base.to_vec();
    args.extend(["--variant", "autoencoder"]);
    let m = usage_message(run_args(&args));
    assert!(m.contains("cife pretrain-ae"), "{m}");
}

#[test]
fn train_encoder_fails_without_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&["gen-data", "--out", s(&data), "--characters", "1", "--c-per", "1", "--f-per", "2"]),
        0
    );
    let bb = dir.path().join("bb");
    Backbone::with_defaults(1).save(&bb).unwrap();
    let out = dir.path().join("e");
    let args = [
        "train-encoder", "--variant", "same-place", "--data", s(&data), "--backbone", s(&bb), "--steps", "1",
        "--batch-size", "2", "--out", s(&out),
    ];
    match run_args(&args) {
        Err(CliError::Failure(m)) => assert!(m.contains("no gradient"), "{m}"),
        other => panic!("expected a failure, got {other:?}"),
    }
    assert_eq!(code(&args), 1);
}

#[test]
fn train_backbone_can_share_a_text_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&["gen-data", "--out", s(&data), "--characters", "1", "--c-per", "1", "--f-per", "2"]),
        0
    );
    let donor = dir.path().join("donor");
    Backbone::with_defaults(1).save(&donor).unwrap();
    let out = dir.path().join("b");
    let (vae, text) = (donor.join("vae.ckpt"), donor.join("text.ckpt"));
    let args = [
        "train-backbone", "--data", s(&data), "--vae", s(&vae), "--text", s(&text), "--seed", "2", "--steps", "2",
        "--batch-size", "2", "--out", s(&out),
    ];
    assert_eq!(code(&args), 0);
    assert_eq!(std::fs::read(&text).unwrap(), std::fs::read(out.join("text.ckpt")).unwrap());
    assert_ne!(std::fs::read(donor.join("unet.ckpt")).unwrap(), std::fs::read(out.join("unet.ckpt")).unwrap());
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("freeze.text_encoder = true"), "{config}");
    let missing = dir.path().join("nope.ckpt");
    let mut bad = args.to_vec();
    bad[6] = s(&missing);
    assert_eq!(code(&bad), 2);
}
