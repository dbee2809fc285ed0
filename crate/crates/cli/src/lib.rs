//! The `cife` command line: dataset generation, training, sampling, evaluation and gradient checks.

mod config;
mod error;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use cife_core::backbone::Backbone;
use cife_core::character_encoder::{CharacterEncoder, EncoderConfig, VariantKind};
use cife_core::checkpoint::{BackboneHashes, UNET_FILE, VAE_FILE};
use cife_core::dataset::{build_dataset, neutral_caption, Dataset, Identity, MANIFEST_FILE};
use cife_core::diffusion::{ddim_sample, NoiseSchedule};
use cife_core::evaluation::{eval_control, eval_identity, eval_transfer, held_out_characters, EvalReport};
use cife_core::gradcheck::EndToEndCheck;
use cife_core::training::{self, training_identities, write_loss_log, TrainConfig};
use cife_core::ImageRGB;
use cife_tensor::{op_suite, GradCheck, Tensor};

pub use config::{Resolved, RunConfig, KEYS, SEED_ENV};
pub use error::CliError;

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cife", version, about = "Character image feature encoder for a toy latent diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural sprite dataset.
    GenData(GenDataArgs),
    /// Train the VAE on every dataset image.
    TrainVae(TrainVaeArgs),
    /// Train the text encoder and UNet with the VAE frozen.
    TrainBackbone(TrainBackboneArgs),
    /// Train a character encoder against a frozen backbone.
    TrainEncoder(TrainEncoderArgs),
    /// Autoencoder stage one: reconstruction pretraining.
    PretrainAe(PretrainAeArgs),
    /// Autoencoder stage two: diffusion fine-tuning from a stage-one checkpoint.
    FinetuneAe(FinetuneAeArgs),
    /// Generate images with DDIM, optionally conditioned on a reference image.
    Sample(SampleArgs),
    /// Identity, control and transfer experiments.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Finite-difference check of every op and of the full encoder + UNet loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.set("train.seed", self.seed);
        cfg.set("train.total_steps", self.steps);
        cfg.set("train.learning_rate", self.learning_rate);
        cfg.set("train.batch_size", self.batch_size);
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub characters: Option<usize>,
    #[arg(long)]
    pub c_per: Option<usize>,
    #[arg(long)]
    pub f_per: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainVaeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainBackboneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: PathBuf,
    /// VAE checkpoint written by `train-vae`.
    #[arg(long)]
    pub vae: PathBuf,
    /// Continue from an existing backbone directory instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Take the text encoder from this checkpoint and keep it frozen; only the UNet trains.
    #[arg(long)]
    pub text: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_parser = parse_variant)]
    pub variant: VariantKind,
    #[arg(long)]
    pub data: PathBuf,
    /// Backbone directory written by `train-backbone`.
    #[arg(long)]
    pub backbone: PathBuf,
    /// Starting encoder checkpoint; required for the autoencoder variant.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainAeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: PathBuf,
    /// Backbone directory; only its text encoder is used.
    #[arg(long)]
    pub backbone: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneAeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    /// Stage-one checkpoint written by `pretrain-ae`.
    #[arg(long)]
    pub init: PathBuf,
    /// Also train the UNet; the tuned backbone is written next to the encoder.
    #[arg(long)]
    pub unfreeze_unet: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Reference character image (PNG, 32x32 RGB).
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated identity ids to evaluate.
    #[arg(long, value_delimiter = ',')]
    pub characters: Vec<usize>,
    /// Number of held-out identities to draw when `--characters` is absent.
    #[arg(long)]
    pub held_out: Option<usize>,
    /// Samples per character.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Encoder on held-out identities; passes when pooled p < --alpha.
    Identity {
        #[command(flatten)]
        flags: EvalFlags,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
    },
    /// Sampling without the encoder; passes when pooled p > --alpha.
    Control {
        #[command(flatten)]
        flags: EvalFlags,
        #[arg(long)]
        backbone: PathBuf,
        /// Encoder whose training identities define the held-out set.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// The same encoder on two backbones.
    Transfer {
        #[command(flatten)]
        flags: EvalFlags,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        backbone_a: PathBuf,
        #[arg(long)]
        backbone_b: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        alpha_a: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha_b: f64,
    },
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

fn parse_variant(s: &str) -> Result<VariantKind, String> {
    s.parse().map_err(|e: cife_core::CifeError| e.to_string())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> CliResult {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainVae(a) => train_vae(a),
        Command::TrainBackbone(a) => train_backbone(a),
        Command::TrainEncoder(a) => train_encoder(a),
        Command::PretrainAe(a) => pretrain_ae(a),
        Command::FinetuneAe(a) => finetune_ae(a),
        Command::Sample(a) => sample(a),
        Command::Eval(e) => eval(e),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| CliError::failure(format!("cannot create {}: {e}", d.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::failure(e.to_string()))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn out_dir(common: &Common, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| Path::new("runs").join(name))
}

fn require(path: &Path, what: &str, command: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "{what} not found at {}; run `cife {command}` first",
            path.display()
        )))
    }
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    require(&dir.join(MANIFEST_FILE), "dataset", &format!("gen-data --out {}", dir.display()))?;
    Ok(Dataset::load(dir)?)
}

fn load_backbone(dir: &Path) -> CliResult<Backbone> {
    require(&dir.join(UNET_FILE), "backbone", "train-backbone")?;
    Ok(Backbone::load(dir)?)
}

fn load_encoder(path: &Path, variant: Option<VariantKind>, command: &str) -> CliResult<CharacterEncoder> {
    require(path, "encoder checkpoint", command)?;
    Ok(CharacterEncoder::load(path, variant)?)
}

fn print_hashes(label: &str, h: &BackboneHashes) {
    println!("{label} vae  {}", h.vae);
    println!("{label} text {}", h.text);
    println!("{label} unet {}", h.unet);
}

fn hashes_json(h: &BackboneHashes) -> serde_json::Value {
    json!({ "vae": h.vae, "text": h.text, "unet": h.unet, "combined": h.combined() })
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.set("dataset.characters", a.characters);
    cfg.set("dataset.c_per", a.c_per);
    cfg.set("dataset.f_per", a.f_per);
    cfg.set("dataset.seed", a.seed);
    let params = cfg.dataset()?;
    let dir = a.common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let dataset = build_dataset(params)?;
    let hash = dataset.save(&dir, a.force)?;
    Resolved::default().dataset(&params).write(&dir)?;
    println!("pairs {}", dataset.pair_count());
    println!("manifest {hash}");
    Ok(())
}

fn finish_training(dir: &Path, losses: &[f64], resolved: Resolved) -> CliResult {
    write_loss_log(&dir.join("loss.tsv"), losses)?;
    resolved.write(dir)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        let (a, b) = training::loss_ends(losses, 50);
        println!("loss {first:.6} -> {last:.6} (smoothed {a:.6} -> {b:.6})");
    }
    Ok(())
}

fn train_vae(a: TrainVaeArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    a.train.apply(&mut cfg);
    let tc = cfg.train(TrainConfig::vae())?;
    let dataset = load_dataset(&a.data)?;
    let dir = out_dir(&a.common, "train-vae");
    let init = Backbone::with_defaults(tc.seed);
    let out = training::train_vae(&dataset, &init, &tc)?;
    let hash = out.result.vae_bundle().save(&dir.join(VAE_FILE))?;
    finish_training(&dir, &out.losses, Resolved::default().train(&tc))?;
    println!("latent scale {}", out.result.latent_scale());
    println!("vae {hash}");
    Ok(())
}

fn train_backbone(a: TrainBackboneArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    a.train.apply(&mut cfg);
    if a.text.is_some() {
        cfg.set("freeze.text_encoder", Some(true));
    }
    let tc = cfg.train(TrainConfig::backbone())?;
    let dataset = load_dataset(&a.data)?;
    require(&a.vae, "VAE checkpoint", "train-vae")?;
    let start = match &a.init {
        Some(d) => load_backbone(d)?,
        None => Backbone::with_defaults(tc.seed),
    };
    let mut start = start.with_vae_from(&a.vae)?;
    if let Some(t) = &a.text {
        require(t, "text encoder checkpoint", "train-backbone")?;
        start = start.with_text_from(t)?;
    }
    let dir = out_dir(&a.common, "train-backbone");
    let out = training::train_backbone_diffusion(&dataset, &start, &tc)?;
    let hashes = out.result.save(&dir)?;
    finish_training(&dir, &out.losses, Resolved::default().train(&tc))?;
    print_hashes("backbone", &hashes);
    Ok(())
}

fn encoder_outcome(dir: &Path, out: &training::EncoderOutcome, tc: &TrainConfig) -> CliResult {
    let hash = out.encoder.save(&dir.join("encoder.ckpt"))?;
    if let Some(b) = &out.backbone {
        b.save(dir)?;
    }
    write_json(
        &dir.join("hashes.json"),
        &json!({
            "encoder": hash,
            "backbone_before": hashes_json(&out.backbone_before),
            "backbone_after": hashes_json(&out.backbone_after),
        }),
    )?;
    finish_training(dir, &out.losses, Resolved::default().train(tc))?;
    print_hashes("before", &out.backbone_before);
    print_hashes("after ", &out.backbone_after);
    println!("encoder {hash}");
    Ok(())
}

fn train_encoder(a: TrainEncoderArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    a.train.apply(&mut cfg);
    let tc = cfg.train(TrainConfig::encoder(a.variant))?;
    if !tc.freeze.backbone_frozen() {
        return Err(CliError::usage(
            "train-encoder keeps the backbone frozen; set freeze.vae, freeze.text_encoder and freeze.unet to true \
             (use finetune-ae to train the UNet)",
        ));
    }
    let dataset = load_dataset(&a.data)?;
    let backbone = load_backbone(&a.backbone)?;
    let dir = out_dir(&a.common, "train-encoder");
    let out = match a.variant {
        VariantKind::Autoencoder => {
            let init = a
                .init
                .as_ref()
                .ok_or_else(|| CliError::usage("the autoencoder variant starts from a stage-one checkpoint; run `cife pretrain-ae` and pass it with --init"))?;
            let stage1 = load_encoder(init, Some(VariantKind::Autoencoder), "pretrain-ae")?;
            training::finetune_autoencoder_stage2(&dataset, &backbone, &stage1, &tc)?
        }
        v => {
            let enc = match &a.init {
                Some(p) => load_encoder(p, Some(v), "train-encoder")?,
                None => CharacterEncoder::init(v, EncoderConfig::default(), tc.seed),
            };
            training::train_character_encoder(&dataset, &backbone, &enc, &tc)?
        }
    };
    encoder_outcome(&dir, &out, &tc)?;
    if out.backbone_before != out.backbone_after {
        return Err(CliError::failure("backbone hashes changed during encoder training"));
    }
    if out.first_grad_norm == 0.0 {
        return Err(CliError::failure(
            "the encoder received no gradient on the first batch; is the backbone trained? \
             (run `cife train-backbone` first)",
        ));
    }
    Ok(())
}

fn pretrain_ae(a: PretrainAeArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    a.train.apply(&mut cfg);
    let tc = cfg.train(TrainConfig::autoencoder_pretrain())?;
    let dataset = load_dataset(&a.data)?;
    let backbone = load_backbone(&a.backbone)?;
    let dir = out_dir(&a.common, "pretrain-ae");
    let enc = CharacterEncoder::init(VariantKind::Autoencoder, EncoderConfig::default(), tc.seed);
    let out = training::pretrain_autoencoder(&dataset, &backbone, &enc, &tc)?;
    let hash = out.result.save(&dir.join("encoder.ckpt"))?;
    finish_training(&dir, &out.losses, Resolved::default().train(&tc))?;
    println!("encoder {hash}");
    Ok(())
}

fn finetune_ae(a: FinetuneAeArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    a.train.apply(&mut cfg);
    if a.unfreeze_unet {
        cfg.set("freeze.unet", Some(false));
    }
    let tc = cfg.train(TrainConfig::encoder(VariantKind::Autoencoder))?;
    let dataset = load_dataset(&a.data)?;
    let backbone = load_backbone(&a.backbone)?;
    let stage1 = load_encoder(&a.init, Some(VariantKind::Autoencoder), "pretrain-ae")?;
    let dir = out_dir(&a.common, "finetune-ae");
    let out = training::finetune_autoencoder_stage2(&dataset, &backbone, &stage1, &tc)?;
    encoder_outcome(&dir, &out, &tc)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sample(a: SampleArgs) -> CliResult {
    if a.encoder.is_some() != a.reference.is_some() {
        return Err(CliError::usage("--encoder and --ref must be given together"));
    }
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    cfg.set("sampler.seed", a.seed);
    cfg.set("sampler.steps", a.steps);
    cfg.set("sampler.eta", a.eta);
    let sc = cfg.sampler()?;
    let sched = NoiseSchedule::default();
    sc.validate(&sched)?;
    let backbone = load_backbone(&a.backbone)?;
    let prompt = a.prompt.clone().unwrap_or_else(neutral_caption);
    let clip = backbone.text_encode(&[prompt.as_str()])?;
    let (cond, encoder_hash, ref_hash) = match (&a.encoder, &a.reference) {
        (Some(e), Some(r)) => {
            let enc = load_encoder(e, None, "train-encoder")?;
            require(r, "reference image", "gen-data")?;
            let bytes = std::fs::read(r).map_err(|e| CliError::failure(format!("cannot read {}: {e}", r.display())))?;
            let img = ImageRGB::decode_png(&bytes)?;
            (enc.condition(&clip, &[img])?, Some(enc.sha256()), Some(sha_hex(&bytes)))
        }
        _ => (clip, None, None),
    };
    let rows = vec![cond.outer(0); a.count];
    let cond = Tensor::stack(&rows).map_err(cife_core::CifeError::from)?;
    let latents = ddim_sample(&backbone, &cond, &sc, &sched, 0)?;
    let images = backbone.decode_diffusion_latents(&latents)?;
    let dir = out_dir(&a.common, "sample");
    let mut files = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let name = format!("sample_{i:03}.png");
        let bytes = img.encode_png();
        write_file(&dir.join(&name), &bytes)?;
        files.push(json!({ "file": name, "sha256": sha_hex(&bytes) }));
    }
    write_json(
        &dir.join("samples.json"),
        &json!({
            "prompt": prompt,
            "seed": sc.seed,
            "steps": sc.steps,
            "eta": sc.eta,
            "count": a.count,
            "sampler": "ddim",
            "backbone": hashes_json(&backbone.hashes()),
            "encoder_sha256": encoder_hash,
            "reference_sha256": ref_hash,
            "images": files,
        }),
    )?;
    Resolved::default().sampler(&sc).write(&dir)?;
    println!("wrote {} images to {}", images.len(), dir.display());
    Ok(())
}

fn eval_settings(flags: &EvalFlags) -> CliResult<(cife_core::evaluation::EvalSettings, usize, Resolved)> {
    let mut cfg = RunConfig::load(flags.common.config.as_deref())?;
    cfg.set("eval.n_samples", flags.n);
    cfg.set("eval.seed", flags.seed);
    cfg.set("eval.steps", flags.steps);
    cfg.set("eval.held_out", flags.held_out);
    let (settings, held) = cfg.eval()?;
    let resolved = Resolved::default().eval(&settings, held);
    Ok((settings, held, resolved))
}

fn characters(flags: &EvalFlags, held: usize, seed: u64, exclude: &[usize]) -> CliResult<Vec<Identity>> {
    if flags.characters.is_empty() {
        let ex: Vec<Identity> = exclude.iter().map(|&i| Identity::from_id(i)).collect::<Result<_, _>>()?;
        return Ok(held_out_characters(held, seed, &ex)?);
    }
    Ok(flags.characters.iter().map(|&i| Identity::from_id(i)).collect::<Result<_, _>>()?)
}

fn print_report(label: &str, r: &EvalReport) {
    for c in &r.conditions {
        println!(
            "{label} character {:3} hue {} : {}/{} accuracy {:.3} p {:.3e}",
            c.character_id, c.target_hue, c.hits, c.count, c.accuracy, c.p_value
        );
    }
    println!(
        "{label} pooled {}/{} accuracy {:.3} p {:.3e} (chance {:.3})",
        r.pooled.hits, r.pooled.count, r.pooled.accuracy, r.pooled.p_value, r.chance
    );
}

fn eval(cmd: EvalCommand) -> CliResult {
    match cmd {
        EvalCommand::Identity { flags, encoder, backbone, alpha } => {
            let (settings, held, resolved) = eval_settings(&flags)?;
            let enc = load_encoder(&encoder, None, "train-encoder")?;
            let bb = load_backbone(&backbone)?;
            let trained = training_identities(&enc.provenance)?;
            let chars = characters(&flags, held, settings.seed, &trained)?;
            let run = eval_identity(&enc, &bb, &chars, &settings)?;
            let dir = out_dir(&flags.common, "eval-identity");
            run.write(&dir)?;
            resolved.write(&dir)?;
            print_report("identity", &run.report);
            gate(run.report.pooled.p_value < alpha, "identity accuracy is not significant", alpha)
        }
        EvalCommand::Control { flags, backbone, encoder, alpha } => {
            let (settings, held, resolved) = eval_settings(&flags)?;
            let bb = load_backbone(&backbone)?;
            let trained = match &encoder {
                Some(p) => training_identities(&load_encoder(p, None, "train-encoder")?.provenance)?,
                None => Vec::new(),
            };
            let chars = characters(&flags, held, settings.seed, &trained)?;
            let run = eval_control(&bb, &chars, &settings)?;
            let dir = out_dir(&flags.common, "eval-control");
            run.write(&dir)?;
            resolved.write(&dir)?;
            print_report("control", &run.report);
            gate(run.report.pooled.p_value > alpha, "control accuracy is significant", alpha)
        }
        EvalCommand::Transfer { flags, encoder, backbone_a, backbone_b, alpha_a, alpha_b } => {
            let (settings, held, resolved) = eval_settings(&flags)?;
            let enc = load_encoder(&encoder, None, "train-encoder")?;
            let a = load_backbone(&backbone_a)?;
            let b = load_backbone(&backbone_b)?;
            let trained = training_identities(&enc.provenance)?;
            let chars = characters(&flags, held, settings.seed, &trained)?;
            let run = eval_transfer(&enc, &a, &b, &chars, &settings)?;
            let dir = out_dir(&flags.common, "eval-transfer");
            run.write(&dir)?;
            resolved.write(&dir)?;
            print_report("backbone-a", &run.report.backbone_a);
            print_report("backbone-b", &run.report.backbone_b);
            gate(run.report.backbone_a.pooled.p_value < alpha_a, "backbone A accuracy is not significant", alpha_a)?;
            gate(run.report.backbone_b.pooled.p_value < alpha_b, "backbone B accuracy is not significant", alpha_b)
        }
    }
}

fn gate(passed: bool, what: &str, alpha: f64) -> CliResult {
    if passed {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::failure(format!("{what} at alpha {alpha}")))
    }
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let check = GradCheck { tol_rel: a.tol, ..GradCheck::default() };
    let mut all = true;
    println!("{:<28} {:>12} {:>8}", "op", "max rel err", "coords");
    for (name, r) in op_suite(&check).map_err(cife_core::CifeError::from)? {
        all &= r.passed();
        println!("{name:<28} {:>12.3e} {:>8}", r.max_rel_err, r.coords);
    }
    for v in [VariantKind::SamePlace, VariantKind::MixEncoder] {
        let mut e2e = EndToEndCheck::small(v);
        e2e.check.tol_rel = a.tol;
        let r = e2e.run()?;
        all &= r.passed();
        println!("{:<28} {:>12.3e} {:>8}", format!("encoder+unet ({v})"), r.max_rel_err, r.coords);
    }
    gate(all, "a gradient check exceeded the tolerance", a.tol)
}
