//! Two-level cross-attention UNet predicting noise on 4×8×8 latents.

use cife_tensor::{Scalar, Tensor, Var};

use super::config::UNetConfig;
use super::vae::LATENT_CHANNELS;
use crate::error::{CifeError, Result};
use crate::nn::Net;
use crate::params::{Init, ParamStore};

pub fn init(cfg: &UNetConfig, seed: u64) -> ParamStore {
    let [c0, c1] = cfg.channels;
    let th = cfg.time_hidden;
    let d = cfg.cond_width;
    let mut store = ParamStore::new();
    let mut i = Init::new(&mut store, seed, "init.unet");
    i.linear("unet.time.fc1", th, cfg.time_width);
    i.linear("unet.time.fc2", th, th);
    i.conv("unet.conv_in", c0, LATENT_CHANNELS, 3);
    i.res_block("unet.down0.res", c0, c0, Some(th));
    i.cross_attention("unet.down0.attn", c0, d);
    i.conv("unet.down0.downsample", c0, c0, 2);
    i.res_block("unet.down1.res", c0, c1, Some(th));
    i.cross_attention("unet.down1.attn", c1, d);
    i.res_block("unet.mid.res", c1, c1, Some(th));
    i.res_block("unet.up1.res", 2 * c1, c1, Some(th));
    i.cross_attention("unet.up1.attn", c1, d);
    i.res_block("unet.up0.res", c1 + c0, c0, Some(th));
    i.cross_attention("unet.up0.attn", c0, d);
    i.norm("unet.out.norm", c0);
    i.zero_conv("unet.out.conv", LATENT_CHANNELS, c0, 3);
    store
}

/// Sinusoidal timestep features, `[N, width]`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], width: usize) -> Tensor<T> {
    let half = width / 2;
    let mut data = Vec::with_capacity(ts.len() * width);
    for &t in ts {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            data.push(T::lit((t as f64 * freq).sin()));
        }
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            data.push(T::lit((t as f64 * freq).cos()));
        }
        data.resize(data.len() + (width - 2 * half), T::zero());
    }
    Tensor::new([ts.len(), width], data).expect("embedding length")
}

/// Predicts noise for `x_t: [N, 4, 8, 8]` at timesteps `ts` given `cond: [N, L, D]`.
pub(crate) fn forward<T: Scalar>(
    net: &mut Net<'_, T>,
    cfg: &UNetConfig,
    x: Var,
    ts: &[usize],
    cond: Var,
) -> Result<Var> {
    let cs = net.tape.shape(cond).to_vec();
    if cs.len() != 3 || cs[2] != cfg.cond_width {
        return Err(CifeError::CondWidth {
            expected: cfg.cond_width,
            found: cs.last().copied().unwrap_or(0),
        });
    }
    let g = cfg.groups;
    let temb = net.tape.constant(timestep_embedding(ts, cfg.time_width))?;
    let temb = net.linear("unet.time.fc1", temb)?;
    let temb = net.silu(temb)?;
    let temb = net.linear("unet.time.fc2", temb)?;
    let temb = net.silu(temb)?;

    let h = net.conv("unet.conv_in", x, 1, 1)?;
    let h = net.res_block("unet.down0.res", h, Some(temb), g)?;
    let skip0 = net.cross_attention("unet.down0.attn", h, cond, g)?;
    let h = net.conv("unet.down0.downsample", skip0, 2, 0)?;
    let h = net.res_block("unet.down1.res", h, Some(temb), g)?;
    let skip1 = net.cross_attention("unet.down1.attn", h, cond, g)?;

    let h = net.res_block("unet.mid.res", skip1, Some(temb), g)?;

    let h = net.tape.concat(&[h, skip1], 1)?;
    let h = net.res_block("unet.up1.res", h, Some(temb), g)?;
    let h = net.cross_attention("unet.up1.attn", h, cond, g)?;
    let h = net.tape.upsample2(h)?;
    let h = net.tape.concat(&[h, skip0], 1)?;
    let h = net.res_block("unet.up0.res", h, Some(temb), g)?;
    let h = net.cross_attention("unet.up0.attn", h, cond, g)?;

    let h = net.group_norm("unet.out.norm", h, g)?;
    let h = net.silu(h)?;
    net.conv("unet.out.conv", h, 1, 1)
}
