//! Training entry points for the backbone, the character encoders and the autoencoder stages.

mod config;
mod optimizer;

use std::collections::BTreeMap;
use std::path::Path;

use cife_tensor::{NoiseRng, Tape, Tensor, TensorError, Var};
use rayon::prelude::*;

pub use config::{FreezeFlags, TrainConfig};
pub use optimizer::{apply_gradients, AdamConfig, OptimizerState};

use crate::backbone::{tokenize, vae, Backbone, Meta, LATENT_SHAPE};
use crate::character_encoder::{self as ce, CharacterEncoder, VariantKind};
use crate::checkpoint::BackboneHashes;
use crate::dataset::{pair_stream, Dataset};
use crate::diffusion::{diffusion_loss_on_tape, NoiseSchedule};
use crate::error::{CifeError, Result};
use crate::image::write_bytes;
use crate::nn::Net;
use crate::params::{Bound, ParamStore};

/// Samples per tape. Fixed so that results never depend on thread count.
pub const CHUNK: usize = 4;

/// Final parameters plus the per-step loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub result: P,
    pub losses: Vec<f64>,
}

/// Result of training an encoder against a backbone.
#[derive(Debug, Clone)]
pub struct EncoderOutcome {
    pub encoder: CharacterEncoder,
    /// Present when the UNet was unfrozen.
    pub backbone: Option<Backbone>,
    pub losses: Vec<f64>,
    pub backbone_before: BackboneHashes,
    pub backbone_after: BackboneHashes,
    /// Squared L2 norm of the encoder gradient on the first batch.
    pub first_grad_norm: f64,
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    fn provenance(&self, dataset: &Dataset, entry: &str) -> Meta {
        Meta::from([
            ("train.entry".into(), entry.into()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.steps".into(), self.total_steps.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.learning_rate".into(), self.learning_rate.to_string()),
            ("dataset.manifest_sha256".into(), dataset.manifest_hash()),
            (TRAINING_IDENTITIES_KEY.into(), identity_list(dataset)),
        ])
    }
}

/// Provenance key listing the identity ids a checkpoint was trained on.
pub const TRAINING_IDENTITIES_KEY: &str = "dataset.identities";

fn identity_list(dataset: &Dataset) -> String {
    let ids: Vec<String> = dataset.identities().iter().map(|i| i.id().to_string()).collect();
    ids.join(",")
}

/// Identity ids recorded in checkpoint provenance, if any.
pub fn training_identities(meta: &Meta) -> Result<Vec<usize>> {
    match meta.get(TRAINING_IDENTITIES_KEY) {
        None => Ok(Vec::new()),
        Some(s) if s.is_empty() => Ok(Vec::new()),
        Some(s) => s
            .split(',')
            .map(|v| v.parse().map_err(|_| CifeError::Config(format!("bad identity list `{s}`"))))
            .collect(),
    }
}

/// Writes `step<TAB>loss` lines with a header.
pub fn write_loss_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i}\t{l}\n"));
    }
    write_bytes(path, s.as_bytes())
}

/// Mean of the first and last `window` entries.
pub fn loss_ends(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}

/// Deterministic epoch-shuffled index stream.
struct EpochSampler {
    n: usize,
    seed: u64,
    label: &'static str,
    order: Vec<usize>,
    epoch: u64,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64, label: &'static str) -> Self {
        EpochSampler {
            n,
            seed,
            label,
            order: Vec::new(),
            epoch: 0,
            pos: 0,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            NoiseRng::indexed(self.seed, self.label, self.epoch).shuffle(&mut self.order);
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Timestep and noise for item `index` of a run.
fn item_noise(seed: u64, index: u64, sched: &NoiseSchedule) -> (usize, Tensor<f32>) {
    let mut rng = NoiseRng::indexed(seed, "train.diffusion", index);
    let t = rng.below(sched.len());
    (t, rng.normal_tensor(LATENT_SHAPE.to_vec()))
}

fn stack(items: impl Iterator<Item = Tensor<f32>>) -> Result<Tensor<f32>> {
    let v: Vec<Tensor<f32>> = items.collect();
    Ok(Tensor::stack(&v)?)
}

type ChunkGrads = (f64, BTreeMap<String, Tensor<f32>>);

/// Loss and trainable gradients for one chunk on its own tape.
fn chunk_gradients<B, F>(trainable: &ParamStore, frozen: &ParamStore, items: &[B], loss_fn: &F) -> Result<ChunkGrads>
where
    F: Fn(&mut Net<'_, f32>, &[B]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut bound = Bound::bind(&mut tape, trainable, true)?;
    let train_vars: Vec<(String, Var)> = bound.iter().map(|(k, v)| (k.clone(), *v)).collect();
    bound.merge(Bound::bind(&mut tape, frozen, false)?);
    let mut net = Net::new(&mut tape, &bound);
    let loss = loss_fn(&mut net, items)?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, var) in train_vars {
        let g = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(tape.shape(var).to_vec()));
        out.insert(name, g);
    }
    Ok((value, out))
}

/// Batch loss and gradients, reduced over chunks in a fixed order.
fn batch_gradients<B, F>(trainable: &ParamStore, frozen: &ParamStore, items: &[B], loss_fn: &F) -> Result<ChunkGrads>
where
    B: Sync,
    F: Fn(&mut Net<'_, f32>, &[B]) -> Result<Var> + Sync,
{
    let parts: Vec<Result<ChunkGrads>> = items
        .par_chunks(CHUNK)
        .map(|c| chunk_gradients(trainable, frozen, c, loss_fn))
        .collect();
    let total = items.len() as f32;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (part, chunk) in parts.into_iter().zip(items.chunks(CHUNK)) {
        let (l, grads) = part?;
        let w = chunk.len() as f32 / total;
        loss += l * w as f64;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += w * b),
                None => {
                    acc.insert(name, g.map(|v| v * w));
                }
            }
        }
    }
    Ok((loss, acc))
}

fn diverged(step: usize) -> impl Fn(CifeError) -> CifeError {
    move |e| match e {
        CifeError::Tensor(TensorError::NonFinite { .. }) => CifeError::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// Runs `steps` optimizer updates over batches produced by `batch_fn`.
fn train_loop<B, G, F>(
    trainable: &mut ParamStore,
    frozen: &ParamStore,
    cfg: &TrainConfig,
    mut batch_fn: G,
    loss_fn: F,
) -> Result<(Vec<f64>, f64)>
where
    B: Sync,
    G: FnMut(usize) -> Result<Vec<B>>,
    F: Fn(&mut Net<'_, f32>, &[B]) -> Result<Var> + Sync,
{
    let mut state = OptimizerState::new(trainable);
    let adam = cfg.adam();
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let mut first_norm = 0.0;
    for step in 0..cfg.total_steps {
        let items = batch_fn(step)?;
        let (loss, grads) = batch_gradients(trainable, frozen, &items, &loss_fn).map_err(diverged(step))?;
        if !loss.is_finite() {
            return Err(CifeError::Diverged { step, loss });
        }
        if step == 0 {
            first_norm = grads.values().map(|g| g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum();
        }
        losses.push(loss);
        apply_gradients(trainable, &grads, &mut state, &adam)?;
    }
    Ok((losses, first_norm))
}

struct VaeItem {
    image: Tensor<f32>,
    eps: Tensor<f32>,
}

/// Fits the VAE to every dataset image, then sets the latent scale to `1 / std(mu)`.
pub fn train_vae(dataset: &Dataset, backbone: &Backbone, cfg: &TrainConfig) -> Result<TrainOutcome<Backbone>> {
    cfg.validate()?;
    if cfg.freeze.vae {
        return Err(CifeError::Freeze("VAE training requires the VAE to be unfrozen".into()));
    }
    let samples = dataset.all_samples();
    if samples.is_empty() {
        return Err(CifeError::Dataset("no images to train on".into()));
    }
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.to_tensor()).collect();
    let mut trainable = backbone.vae.clone();
    let mut frozen = ParamStore::new();
    if let Some(s) = trainable.remove(vae::SCALE_PARAM) {
        frozen.insert(vae::SCALE_PARAM, s);
    }
    let mut sampler = EpochSampler::new(images.len(), cfg.seed, "train.vae.order");
    let mut counter = 0u64;
    let batch_fn = |_step: usize| {
        Ok((0..cfg.batch_size)
            .map(|_| {
                counter += 1;
                VaeItem {
                    image: images[sampler.next()].clone(),
                    eps: NoiseRng::indexed(cfg.seed, "train.vae.eps", counter).normal_tensor(LATENT_SHAPE.to_vec()),
                }
            })
            .collect())
    };
    let kl = cfg.kl_weight;
    let loss_fn = |net: &mut Net<'_, f32>, items: &[VaeItem]| {
        let x = net.tape.constant(stack(items.iter().map(|i| i.image.clone()))?)?;
        let eps = stack(items.iter().map(|i| i.eps.clone()))?;
        let (mu, logvar) = vae::encode(net, x)?;
        let z = vae::sample_latent(net.tape, mu, logvar, Some(eps))?;
        let recon = vae::decode(net, z)?;
        vae::loss(net.tape, x, recon, mu, logvar, kl)
    };
    let (losses, _) = train_loop(&mut trainable, &frozen, cfg, batch_fn, loss_fn)?;
    let mut out = backbone.clone();
    trainable.extend(frozen);
    out.vae = trainable;
    out.vae.insert(vae::SCALE_PARAM, Tensor::ones([1]));
    let mu = out.vae_encode(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>(), None)?.mu;
    let n = mu.numel() as f64;
    let mean = mu.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = mu.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    out.vae.insert(vae::SCALE_PARAM, Tensor::full([1], scale as f32));
    out.provenance.vae = cfg.provenance(dataset, "train-vae");
    out.provenance.vae.insert("train.kl_weight".into(), cfg.kl_weight.to_string());
    Ok(TrainOutcome { result: out, losses })
}

struct DiffusionItem {
    latent: Tensor<f32>,
    ids: Vec<usize>,
    t: usize,
    eps: Tensor<f32>,
}

/// Probability that a backbone pretraining caption names the body hue and shape.
pub const DESCRIBED_CAPTION_RATE: f64 = 0.5;

/// Trains the text encoder and UNet on `(caption, image)` pairs with the VAE frozen.
///
/// This stands in for general pretraining of the master model: each draw
/// uses the identity-free dataset caption or, with probability
/// [`DESCRIBED_CAPTION_RATE`], a caption that also names the body hue and shape,
/// so the text pathway learns the colour vocabulary.
pub fn train_backbone_diffusion(
    dataset: &Dataset,
    backbone: &Backbone,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<Backbone>> {
    cfg.validate()?;
    if !cfg.freeze.vae {
        return Err(CifeError::Freeze("the VAE stays frozen during diffusion training".into()));
    }
    if cfg.freeze.text_encoder && cfg.freeze.unet {
        return Err(CifeError::Freeze("both the text encoder and the UNet are frozen".into()));
    }
    let samples = dataset.all_samples();
    if samples.is_empty() {
        return Err(CifeError::Dataset("no images to train on".into()));
    }
    let latents = backbone.diffusion_latents(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let ids: Vec<[Vec<usize>; 2]> = samples
        .iter()
        .map(|s| [tokenize(&s.caption), tokenize(&s.spec.variation.described_caption(&s.spec.identity))])
        .collect();
    let sched = NoiseSchedule::default();
    let mut trainable = ParamStore::new();
    let mut frozen = ParamStore::new();
    for (store, is_frozen) in [(&backbone.text, cfg.freeze.text_encoder), (&backbone.unet, cfg.freeze.unet)] {
        if is_frozen {
            frozen.extend(store.clone());
        } else {
            trainable.extend(store.clone());
        }
    }
    let mut sampler = EpochSampler::new(samples.len(), cfg.seed, "train.backbone.order");
    let mut counter = 0u64;
    let batch_fn = |_step: usize| {
        Ok((0..cfg.batch_size)
            .map(|_| {
                let k = sampler.next();
                counter += 1;
                let (t, eps) = item_noise(cfg.seed, counter, &sched);
                let described = NoiseRng::indexed(cfg.seed, "train.backbone.caption", counter).uniform() < DESCRIBED_CAPTION_RATE;
                DiffusionItem {
                    latent: latents.outer(k),
                    ids: ids[k][described as usize].clone(),
                    t,
                    eps,
                }
            })
            .collect())
    };
    let (tcfg, ucfg) = (backbone.text_config, backbone.unet_config);
    let loss_fn = |net: &mut Net<'_, f32>, items: &[DiffusionItem]| {
        let all_ids: Vec<usize> = items.iter().flat_map(|i| i.ids.iter().copied()).collect();
        let cond = crate::backbone::text::encode(net, &tcfg, &all_ids)?;
        let x0 = stack(items.iter().map(|i| i.latent.clone()))?;
        let eps = stack(items.iter().map(|i| i.eps.clone()))?;
        let ts: Vec<usize> = items.iter().map(|i| i.t).collect();
        diffusion_loss_on_tape(net, &ucfg, &x0, &eps, &ts, cond, &sched)
    };
    let (losses, _) = train_loop(&mut trainable, &frozen, cfg, batch_fn, loss_fn)?;
    let mut out = backbone.clone();
    let prov = cfg.provenance(dataset, "train-backbone");
    if !cfg.freeze.text_encoder {
        out.text = trainable.filter_prefix("text.");
        out.provenance.text = prov.clone();
    }
    if !cfg.freeze.unet {
        out.unet = trainable.filter_prefix("unet.");
        out.provenance.unet = prov;
    }
    Ok(TrainOutcome { result: out, losses })
}

struct EncoderItem {
    reference: Tensor<f32>,
    latent: Tensor<f32>,
    hidden: Tensor<f32>,
    t: usize,
    eps: Tensor<f32>,
}

/// Text hidden states `[16, D]` for each distinct caption.
fn caption_states(backbone: &Backbone, captions: &[&str]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut unique: Vec<&str> = captions.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let states = backbone.text_encode(&unique)?;
    Ok(unique.iter().enumerate().map(|(i, c)| (c.to_string(), states.outer(i))).collect())
}

/// Deterministic batches of (reference, target latent, caption states, t, ε).
struct EncoderBatches<'a> {
    dataset: &'a Dataset,
    latents: BTreeMap<(usize, usize), Tensor<f32>>,
    states: BTreeMap<String, Tensor<f32>>,
    seed: u64,
    epoch: u64,
    pairs: Vec<crate::dataset::TrainingPair>,
    pos: usize,
    counter: u64,
    sched: NoiseSchedule,
}

impl<'a> EncoderBatches<'a> {
    fn new(dataset: &'a Dataset, backbone: &Backbone, seed: u64) -> Result<Self> {
        let mut keys = Vec::new();
        let mut images = Vec::new();
        for (r, rec) in dataset.records.iter().enumerate() {
            for (f, s) in rec.variation.iter().enumerate() {
                keys.push((r, f));
                images.push(s.image.clone());
            }
        }
        if images.is_empty() {
            return Err(CifeError::Dataset("no variation images to train on".into()));
        }
        let lat = backbone.diffusion_latents(&images)?;
        let latents = keys.iter().enumerate().map(|(i, k)| (*k, lat.outer(i))).collect();
        let captions: Vec<&str> = dataset.records.iter().flat_map(|r| r.variation.iter().map(|s| s.caption.as_str())).collect();
        Ok(EncoderBatches {
            dataset,
            latents,
            states: caption_states(backbone, &captions)?,
            seed,
            epoch: 0,
            pairs: Vec::new(),
            pos: 0,
            counter: 0,
            sched: NoiseSchedule::default(),
        })
    }

    fn next_batch(&mut self, size: usize) -> Vec<EncoderItem> {
        (0..size)
            .map(|_| {
                if self.pos == self.pairs.len() {
                    self.pairs = pair_stream(&self.dataset.records, self.seed.wrapping_add(self.epoch));
                    self.epoch += 1;
                    self.pos = 0;
                }
                let p = self.pairs[self.pos];
                self.pos += 1;
                self.counter += 1;
                let (t, eps) = item_noise(self.seed, self.counter, &self.sched);
                let target = self.dataset.target(&p);
                EncoderItem {
                    reference: self.dataset.reference(&p).image.to_tensor(),
                    latent: self.latents[&(p.record, p.target)].clone(),
                    hidden: self.states[&target.caption].clone(),
                    t,
                    eps,
                }
            })
            .collect()
    }
}

fn encoder_diffusion_loss(
    net: &mut Net<'_, f32>,
    enc: &ce::EncoderConfig,
    variant: VariantKind,
    ucfg: &crate::backbone::UNetConfig,
    items: &[EncoderItem],
    sched: &NoiseSchedule,
) -> Result<Var> {
    let refs = net.tape.constant(stack(items.iter().map(|i| i.reference.clone()))?)?;
    let clip = net.tape.constant(stack(items.iter().map(|i| i.hidden.clone()))?)?;
    let feats = ce::extract_features(net, enc, refs)?;
    let chars = ce::encode_character(net, enc, feats)?;
    let cond = ce::compose_on_tape(net, enc, variant, clip, Some(chars))?;
    let x0 = stack(items.iter().map(|i| i.latent.clone()))?;
    let eps = stack(items.iter().map(|i| i.eps.clone()))?;
    let ts: Vec<usize> = items.iter().map(|i| i.t).collect();
    diffusion_loss_on_tape(net, ucfg, &x0, &eps, &ts, cond, sched)
}

fn split_encoder_params(encoder: &CharacterEncoder, freeze: &FreezeFlags) -> (ParamStore, ParamStore) {
    let mut trainable = ParamStore::new();
    let mut frozen = ParamStore::new();
    for (prefix, is_frozen) in [
        ("encoder.", freeze.character_encoder),
        (ce::MIXER_PREFIX, freeze.mixer),
        (ce::AE_DECODER_PREFIX, freeze.ae_decoder),
    ] {
        let part = encoder.params.filter_prefix(prefix);
        if is_frozen {
            frozen.extend(part);
        } else {
            trainable.extend(part);
        }
    }
    (trainable, frozen)
}

fn encoder_training(
    dataset: &Dataset,
    backbone: &Backbone,
    encoder: &CharacterEncoder,
    cfg: &TrainConfig,
    entry: &str,
) -> Result<EncoderOutcome> {
    cfg.validate()?;
    if encoder.variant != cfg.variant {
        return Err(CifeError::Config(format!(
            "config variant {} does not match encoder variant {}",
            cfg.variant, encoder.variant
        )));
    }
    if encoder.config.width != backbone.unet_config.cond_width {
        return Err(CifeError::CondWidth {
            expected: backbone.unet_config.cond_width,
            found: encoder.config.width,
        });
    }
    let before = backbone.hashes();
    let mut fe = cfg.freeze;
    // The decoder takes no part in the diffusion objective.
    fe.ae_decoder = true;
    let (mut trainable, mut frozen) = split_encoder_params(encoder, &fe);
    if cfg.freeze.unet {
        frozen.extend(backbone.unet.clone());
    } else {
        trainable.extend(backbone.unet.clone());
    }
    if trainable.is_empty() {
        return Err(CifeError::Freeze("no trainable parameters".into()));
    }
    let mut batches = EncoderBatches::new(dataset, backbone, cfg.seed)?;
    let sched = NoiseSchedule::default();
    let (enc_cfg, variant, ucfg) = (encoder.config, encoder.variant, backbone.unet_config);
    let (losses, first_grad_norm) = train_loop(
        &mut trainable,
        &frozen,
        cfg,
        |_| Ok(batches.next_batch(cfg.batch_size)),
        |net, items| encoder_diffusion_loss(net, &enc_cfg, variant, &ucfg, items, &sched),
    )?;
    let mut out = encoder.clone();
    for (name, t) in trainable.iter().filter(|(k, _)| !k.starts_with("unet.")) {
        out.params.insert(name.clone(), t.clone());
    }
    out.provenance = cfg.provenance(dataset, entry);
    out.provenance.insert("backbone.sha256".into(), before.combined());
    let new_backbone = (!cfg.freeze.unet).then(|| {
        let mut b = backbone.clone();
        b.unet = trainable.filter_prefix("unet.");
        b.provenance.unet = cfg.provenance(dataset, entry);
        b
    });
    let after = new_backbone.as_ref().unwrap_or(backbone).hashes();
    Ok(EncoderOutcome {
        encoder: out,
        backbone: new_backbone,
        losses,
        backbone_before: before,
        backbone_after: after,
        first_grad_norm,
    })
}

/// Trains a same-place or mix encoder against a fully frozen backbone.
pub fn train_character_encoder(
    dataset: &Dataset,
    backbone: &Backbone,
    encoder: &CharacterEncoder,
    cfg: &TrainConfig,
) -> Result<EncoderOutcome> {
    if cfg.variant == VariantKind::Autoencoder {
        return Err(CifeError::Config(
            "autoencoder encoders are trained with pretrain-ae followed by finetune-ae".into(),
        ));
    }
    if !cfg.freeze.backbone_frozen() {
        return Err(CifeError::Freeze(
            "encoder training requires the VAE, text encoder and UNet to be frozen".into(),
        ));
    }
    encoder_training(dataset, backbone, encoder, cfg, "train-encoder")
}

/// Stage two of the autoencoder variant: diffusion training from stage-one weights.
///
/// The UNet may be unfrozen through `cfg.freeze.unet`; the VAE and text encoder stay frozen.
pub fn finetune_autoencoder_stage2(
    dataset: &Dataset,
    backbone: &Backbone,
    stage1: &CharacterEncoder,
    cfg: &TrainConfig,
) -> Result<EncoderOutcome> {
    if stage1.variant != VariantKind::Autoencoder || cfg.variant != VariantKind::Autoencoder {
        return Err(CifeError::Config("stage two needs an autoencoder encoder and config".into()));
    }
    if !cfg.freeze.vae || !cfg.freeze.text_encoder {
        return Err(CifeError::Freeze("stage two keeps the VAE and text encoder frozen".into()));
    }
    encoder_training(dataset, backbone, stage1, cfg, "finetune-ae")
}

/// Mean diffusion loss of `encoder` over the first `batches` batches of a run, without updates.
pub fn initial_encoder_loss(
    dataset: &Dataset,
    backbone: &Backbone,
    encoder: &CharacterEncoder,
    cfg: &TrainConfig,
    batches: usize,
) -> Result<f64> {
    let mut stream = EncoderBatches::new(dataset, backbone, cfg.seed)?;
    let sched = NoiseSchedule::default();
    let mut frozen = encoder.conditioning_params();
    frozen.extend(backbone.unet.clone());
    let empty = ParamStore::new();
    let mut total = 0.0;
    for _ in 0..batches {
        let items = stream.next_batch(cfg.batch_size);
        let (l, _) = batch_gradients(&empty, &frozen, &items, &|net, it| {
            encoder_diffusion_loss(net, &encoder.config, encoder.variant, &backbone.unet_config, it, &sched)
        })?;
        total += l;
    }
    Ok(total / batches.max(1) as f64)
}

struct AeItem {
    reference: Tensor<f32>,
    target: Tensor<f32>,
    hidden: Tensor<f32>,
}

/// Stage one of the autoencoder variant: reconstruct the target image from the
/// reference encoding and the target caption's text states.
pub fn pretrain_autoencoder(
    dataset: &Dataset,
    backbone: &Backbone,
    encoder: &CharacterEncoder,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<CharacterEncoder>> {
    cfg.validate()?;
    if encoder.variant != VariantKind::Autoencoder {
        return Err(CifeError::Config(format!("pretraining needs an autoencoder encoder, got {}", encoder.variant)));
    }
    if !cfg.freeze.text_encoder {
        return Err(CifeError::Freeze("the text encoder stays frozen during autoencoder pretraining".into()));
    }
    let (mut trainable, frozen) = split_encoder_params(encoder, &cfg.freeze);
    if trainable.is_empty() {
        return Err(CifeError::Freeze("no trainable parameters".into()));
    }
    let captions: Vec<&str> = dataset.records.iter().flat_map(|r| r.variation.iter().map(|s| s.caption.as_str())).collect();
    let states = caption_states(backbone, &captions)?;
    let pairs_len = dataset.pair_count();
    if pairs_len == 0 {
        return Err(CifeError::Dataset("no training pairs".into()));
    }
    let mut epoch = 0u64;
    let mut pairs = Vec::new();
    let mut pos = 0;
    let batch_fn = |_step: usize| {
        Ok((0..cfg.batch_size)
            .map(|_| {
                if pos == pairs.len() {
                    pairs = pair_stream(&dataset.records, cfg.seed.wrapping_add(epoch));
                    epoch += 1;
                    pos = 0;
                }
                let p = pairs[pos];
                pos += 1;
                let target = dataset.target(&p);
                AeItem {
                    reference: dataset.reference(&p).image.to_tensor(),
                    target: target.image.to_tensor(),
                    hidden: states[&target.caption].clone(),
                }
            })
            .collect())
    };
    let enc_cfg = encoder.config;
    let loss_fn = |net: &mut Net<'_, f32>, items: &[AeItem]| {
        let refs = net.tape.constant(stack(items.iter().map(|i| i.reference.clone()))?)?;
        let clip = net.tape.constant(stack(items.iter().map(|i| i.hidden.clone()))?)?;
        let target = net.tape.constant(stack(items.iter().map(|i| i.target.clone()))?)?;
        let feats = ce::extract_features(net, &enc_cfg, refs)?;
        let chars = ce::encode_character(net, &enc_cfg, feats)?;
        let recon = ce::ae_decode(net, &enc_cfg, chars, clip)?;
        Ok(net.tape.mse(recon, target)?)
    };
    let (losses, _) = train_loop(&mut trainable, &frozen, cfg, batch_fn, loss_fn)?;
    let mut out = encoder.clone();
    out.params.extend(trainable);
    out.provenance = cfg.provenance(dataset, "pretrain-ae");
    Ok(TrainOutcome { result: out, losses })
}
