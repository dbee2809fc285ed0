//! The frozen-or-trainable diffusion backbone: VAE, text encoder and UNet.

pub mod config;
pub mod text;
pub mod tokenizer;
pub mod unet;
pub mod vae;

use cife_tensor::{Tape, Tensor, Var};

pub use config::{Meta, TextConfig, UNetConfig, VaeConfig};
pub use tokenizer::{tokenize, vocab_size, TEXT_LEN};
pub use vae::{LATENT_CHANNELS, LATENT_SHAPE, LATENT_SIZE};

use crate::error::Result;
use crate::image::ImageRGB;
use crate::nn::Net;
use crate::params::{Bound, ParamStore};

/// Result of encoding a batch of images, each tensor `[N, 4, 8, 8]`.
#[derive(Debug, Clone)]
pub struct VaeEncoding {
    pub latent: Tensor<f32>,
    pub mu: Tensor<f32>,
    pub logvar: Tensor<f32>,
}

/// Free-form checkpoint metadata per component (seeds, step counts, input hashes).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub vae: Meta,
    pub text: Meta,
    pub unet: Meta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub vae_config: VaeConfig,
    pub text_config: TextConfig,
    pub unet_config: UNetConfig,
    pub vae: ParamStore,
    pub text: ParamStore,
    pub unet: ParamStore,
    pub provenance: Provenance,
}

/// Runs `f` on a fresh f32 tape with `stores` bound as constants and returns the output value.
pub(crate) fn infer<F>(stores: &[&ParamStore], f: F) -> Result<Tensor<f32>>
where
    F: FnOnce(&mut Net<'_, f32>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut bound = Bound::default();
    for s in stores {
        bound.merge(Bound::bind(&mut tape, s, false)?);
    }
    let mut net = Net::new(&mut tape, &bound);
    let out = f(&mut net)?;
    Ok(tape.value(out).clone())
}

pub(crate) fn image_batch(images: &[ImageRGB]) -> Result<Tensor<f32>> {
    let ts: Vec<Tensor<f32>> = images.iter().map(ImageRGB::to_tensor).collect();
    Ok(Tensor::stack(&ts)?)
}

impl Backbone {
    pub fn init(vae_config: VaeConfig, text_config: TextConfig, unet_config: UNetConfig, seed: u64) -> Self {
        Backbone {
            vae: vae::init(&vae_config, seed),
            text: text::init(&text_config, seed),
            unet: unet::init(&unet_config, seed),
            vae_config,
            text_config,
            unet_config,
            provenance: Provenance::default(),
        }
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::init(VaeConfig::default(), TextConfig::default(), UNetConfig::default(), seed)
    }

    /// Multiplier applied to VAE means before diffusion sees them.
    pub fn latent_scale(&self) -> f32 {
        self.vae.get(vae::SCALE_PARAM).map_or(1.0, |t| t.data()[0])
    }

    /// Encodes images; `noise_seed = None` selects the deterministic mode (latent = mu).
    pub fn vae_encode(&self, images: &[ImageRGB], noise_seed: Option<u64>) -> Result<VaeEncoding> {
        let x = image_batch(images)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.vae, false)?;
        let xv = tape.constant(x)?;
        let mut net = Net::new(&mut tape, &bound);
        let (mu, logvar) = vae::encode(&mut net, xv)?;
        let eps = match noise_seed {
            Some(seed) => {
                let per: Vec<Tensor<f32>> = (0..images.len()).map(|i| vae::latent_noise(seed, i as u64)).collect();
                Some(Tensor::stack(&per)?)
            }
            None => None,
        };
        let latent = vae::sample_latent(&mut tape, mu, logvar, eps)?;
        Ok(VaeEncoding {
            latent: tape.value(latent).clone(),
            mu: tape.value(mu).clone(),
            logvar: tape.value(logvar).clone(),
        })
    }

    pub fn vae_decode(&self, latents: &Tensor<f32>) -> Result<Vec<ImageRGB>> {
        let z = latents.clone();
        let out = infer(&[&self.vae], |net| {
            let zv = net.tape.constant(z)?;
            vae::decode(net, zv)
        })?;
        (0..out.shape()[0]).map(|i| ImageRGB::from_tensor(&out.outer(i))).collect()
    }

    /// Deterministic latents scaled for diffusion.
    pub fn diffusion_latents(&self, images: &[ImageRGB]) -> Result<Tensor<f32>> {
        let s = self.latent_scale();
        Ok(self.vae_encode(images, None)?.mu.map(|v| v * s))
    }

    /// Decodes diffusion-scale latents back to images.
    pub fn decode_diffusion_latents(&self, latents: &Tensor<f32>) -> Result<Vec<ImageRGB>> {
        let s = self.latent_scale();
        self.vae_decode(&latents.map(|v| v / s))
    }

    pub fn text_encode_ids(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let cfg = self.text_config;
        infer(&[&self.text], |net| text::encode(net, &cfg, ids))
    }

    /// Hidden states `[N, 16, width]` for each prompt.
    pub fn text_encode(&self, prompts: &[&str]) -> Result<Tensor<f32>> {
        let ids: Vec<usize> = prompts.iter().flat_map(|p| tokenize(p)).collect();
        self.text_encode_ids(&ids)
    }

    /// Noise prediction `[N, 4, 8, 8]`.
    pub fn unet_forward(&self, x_t: &Tensor<f32>, ts: &[usize], cond: &Tensor<f32>) -> Result<Tensor<f32>> {
        let cfg = self.unet_config;
        let (x, c) = (x_t.clone(), cond.clone());
        infer(&[&self.unet], |net| {
            let xv = net.tape.constant(x)?;
            let cv = net.tape.constant(c)?;
            unet::forward(net, &cfg, xv, ts, cv)
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.text_config.width
    }
}
