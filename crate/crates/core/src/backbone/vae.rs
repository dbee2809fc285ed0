//! Convolutional VAE mapping 3×32×32 images to 4×8×8 latents.

use cife_tensor::{NoiseRng, Scalar, Tape, Tensor, Var};

use super::config::VaeConfig;
use crate::error::Result;
use crate::nn::Net;
use crate::params::{Init, ParamStore};

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 8;
pub const LATENT_SHAPE: [usize; 3] = [LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE];
pub const SCALE_PARAM: &str = "vae.latent_scale";

pub fn init(cfg: &VaeConfig, seed: u64) -> ParamStore {
    let [c0, c1, c2] = cfg.channels;
    let mut store = ParamStore::new();
    let mut i = Init::new(&mut store, seed, "init.vae");
    i.conv("vae.enc.conv_in", c0, 3, 3);
    i.conv("vae.enc.down0", c1, c0, 2);
    i.conv("vae.enc.conv1", c1, c1, 3);
    i.conv("vae.enc.down1", c2, c1, 2);
    i.conv("vae.enc.conv2", c2, c2, 3);
    i.conv("vae.enc.out", 2 * LATENT_CHANNELS, c2, 3);
    i.conv("vae.dec.conv_in", c2, LATENT_CHANNELS, 3);
    i.conv("vae.dec.conv0", c2, c2, 3);
    i.conv("vae.dec.conv1", c1, c2, 3);
    i.conv("vae.dec.conv2", c0, c1, 3);
    i.conv("vae.dec.out", 3, c0, 3);
    store.insert(SCALE_PARAM, Tensor::ones([1]));
    store
}

/// Encoder head: `[N, 3, 32, 32]` images to `(mu, logvar)`, each `[N, 4, 8, 8]`.
pub(crate) fn encode<T: Scalar>(net: &mut Net<'_, T>, x: Var) -> Result<(Var, Var)> {
    let h = net.conv("vae.enc.conv_in", x, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.conv("vae.enc.down0", h, 2, 0)?;
    let h = net.silu(h)?;
    let h = net.conv("vae.enc.conv1", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.conv("vae.enc.down1", h, 2, 0)?;
    let h = net.silu(h)?;
    let h = net.conv("vae.enc.conv2", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.conv("vae.enc.out", h, 1, 1)?;
    let mu = net.tape.narrow(h, 1, 0, LATENT_CHANNELS)?;
    let logvar = net.tape.narrow(h, 1, LATENT_CHANNELS, LATENT_CHANNELS)?;
    Ok((mu, logvar))
}

/// Decoder: `[N, 4, 8, 8]` latents to `[N, 3, 32, 32]` images in `(0, 1)`.
pub(crate) fn decode<T: Scalar>(net: &mut Net<'_, T>, z: Var) -> Result<Var> {
    let h = net.conv("vae.dec.conv_in", z, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.conv("vae.dec.conv0", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.tape.upsample2(h)?;
    let h = net.conv("vae.dec.conv1", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.tape.upsample2(h)?;
    let h = net.conv("vae.dec.conv2", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.conv("vae.dec.out", h, 1, 1)?;
    Ok(net.tape.sigmoid(h)?)
}

/// Reparameterized sample `mu + exp(logvar / 2) · ε`, or `mu` when `deterministic`.
pub(crate) fn sample_latent<T: Scalar>(
    tape: &mut Tape<T>,
    mu: Var,
    logvar: Var,
    eps: Option<Tensor<T>>,
) -> Result<Var> {
    let Some(eps) = eps else { return Ok(mu) };
    let half = tape.scale(logvar, T::lit(0.5))?;
    let std = tape.exp(half)?;
    let e = tape.constant(eps)?;
    let noise = tape.mul(std, e)?;
    Ok(tape.add(mu, noise)?)
}

/// Reconstruction MSE plus `kl_weight` times the mean KL divergence to `N(0, 1)`.
pub(crate) fn loss<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    recon: Var,
    mu: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<Var> {
    let rec = tape.mse(recon, image)?;
    let kl = kl_term(tape, mu, logvar)?;
    let kl = tape.scale(kl, T::lit(kl_weight))?;
    Ok(tape.add(rec, kl)?)
}

/// `-½ · mean(1 + logvar − mu² − exp(logvar))`.
pub(crate) fn kl_term<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(logvar)?;
    let a = tape.add_scalar(logvar, T::one())?;
    let a = tape.sub(a, mu2)?;
    let a = tape.sub(a, ev)?;
    let m = tape.mean(a)?;
    Ok(tape.scale(m, T::lit(-0.5))?)
}

pub(crate) fn latent_noise<T: Scalar>(seed: u64, index: u64) -> Tensor<T> {
    NoiseRng::indexed(seed, "vae.encode", index).normal_tensor(LATENT_SHAPE.to_vec())
}

/// Value of the training objective for concrete tensors.
pub fn vae_loss(
    image: &Tensor<f32>,
    recon: &Tensor<f32>,
    mu: &Tensor<f32>,
    logvar: &Tensor<f32>,
    kl_weight: f64,
) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let (i, r) = (tape.constant(image.cast())?, tape.constant(recon.cast())?);
    let (m, l) = (tape.constant(mu.cast())?, tape.constant(logvar.cast())?);
    let out = loss(&mut tape, i, r, m, l, kl_weight)?;
    Ok(tape.value(out).item())
}

/// Mean KL divergence of `N(mu, exp(logvar))` from `N(0, 1)`.
pub fn kl_divergence(mu: &Tensor<f32>, logvar: &Tensor<f32>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let (m, l) = (tape.constant(mu.cast())?, tape.constant(logvar.cast())?);
    let out = kl_term(&mut tape, m, l)?;
    Ok(tape.value(out).item())
}
