//! Forward noising, the noise-prediction objective and the DDIM sampler.

use cife_tensor::{NoiseRng, Scalar, Tensor, Var};

use crate::backbone::{unet, Backbone, UNetConfig, LATENT_SHAPE};
use crate::error::{CifeError, Result};
use crate::nn::Net;

pub const DEFAULT_TIMESTEPS: usize = 200;
/// β range of the 1000-step reference schedule; shorter schedules scale it by `1000 / T`.
pub const REFERENCE_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear β table and its cumulative products ᾱ_t = Π_{s ≤ t} (1 − β_s).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(CifeError::Schedule("at least one timestep is required".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(CifeError::Schedule(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (timesteps - 1) as f64)
                .collect()
        };
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Linear schedule whose endpoints are the reference range scaled by
    /// `1000 / timesteps`, so ᾱ at the last step stays near zero for any `T`.
    pub fn scaled_linear(timesteps: usize) -> Result<Self> {
        let k = REFERENCE_TIMESTEPS as f64 / timesteps.max(1) as f64;
        Self::new(timesteps, DEFAULT_BETA_START * k, DEFAULT_BETA_END * k)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(CifeError::Timestep { t, total: self.len() })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(DEFAULT_TIMESTEPS).expect("valid default schedule")
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps` for a single latent or a batch sharing `t`.
pub fn add_noise<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// Noises each sample of a `[N, ...]` batch at its own timestep.
pub fn add_noise_batch<T: Scalar>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&ts.len()) {
        return Err(CifeError::Config(format!(
            "noise batch shapes {:?} / {:?} with {} timesteps",
            x0.shape(),
            eps.shape(),
            ts.len()
        )));
    }
    let per = x0.numel() / ts.len().max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Ok(Tensor::new(x0.shape().to_vec(), out)?)
}

/// Tape form of the objective: MSE between the UNet prediction and `eps`.
pub(crate) fn diffusion_loss_on_tape<T: Scalar>(
    net: &mut Net<'_, T>,
    cfg: &UNetConfig,
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    ts: &[usize],
    cond: Var,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let xt = add_noise_batch(x0, eps, ts, sched)?;
    let xv = net.tape.constant(xt)?;
    let pred = unet::forward(net, cfg, xv, ts, cond)?;
    let target = net.tape.constant(eps.clone())?;
    Ok(net.tape.mse(pred, target)?)
}

/// Single-sample objective with ε drawn from the seeded generator.
pub fn diffusion_loss(
    backbone: &Backbone,
    x0: &Tensor<f32>,
    cond: &Tensor<f32>,
    t: usize,
    eps_seed: u64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let eps: Tensor<f32> = NoiseRng::new(eps_seed, "diffusion.eps").normal_tensor(x0.shape().to_vec());
    let xt = add_noise(x0, &eps, t, sched)?;
    let batch = |v: &Tensor<f32>| {
        let mut s = vec![1];
        s.extend_from_slice(v.shape());
        v.clone().reshape(s)
    };
    let pred = backbone.unet_forward(&batch(&xt)?, &[t], &batch(cond)?)?;
    let n = eps.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| ((p - e) as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Anything that predicts the noise in `x_t` given timesteps and a condition batch.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor<f32>, ts: &[usize], cond: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl NoisePredictor for Backbone {
    fn predict(&self, x_t: &Tensor<f32>, ts: &[usize], cond: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.unet_forward(x_t, ts, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 20,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            return Err(CifeError::Sampler(format!(
                "steps must lie in [1, {}], got {}",
                sched.len(),
                self.steps
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(CifeError::Sampler(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// `steps` evenly spaced timesteps from `T − 1` down to `0`.
pub fn timestep_subsequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(CifeError::Sampler(format!("steps must lie in [1, {total}], got {steps}")));
    }
    if steps == 1 {
        return Ok(vec![total - 1]);
    }
    Ok((0..steps).rev().map(|j| (total - 1) * j / (steps - 1)).collect())
}

/// One DDIM update from timestep `t` towards `t_prev` (`None` means the clean end point).
///
/// Returns the new latent; `z` supplies fresh noise when `eta > 0`.
pub fn ddim_step(
    x_t: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    z: Option<&Tensor<f32>>,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let ab = sched.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(p) => sched.alpha_bar(p)?,
        None => 1.0,
    };
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, s1a, sap) = (ab.sqrt(), (1.0 - ab).sqrt(), ab_prev.sqrt());
    let mut out = Vec::with_capacity(x_t.numel());
    for (i, (&x, &e)) in x_t.data().iter().zip(eps_hat.data()).enumerate() {
        let (x, e) = (x as f64, e as f64);
        let x0 = (x - s1a * e) / sa;
        let mut next = sap * x0 + dir * e;
        if sigma > 0.0 {
            let noise = z.ok_or_else(|| CifeError::Sampler("eta > 0 requires step noise".into()))?;
            next += sigma * noise.data()[i] as f64;
        }
        out.push(next as f32);
    }
    Ok(Tensor::new(x_t.shape().to_vec(), out)?)
}

/// Deterministic initial latent for sample `index` under `seed`.
pub fn initial_noise(seed: u64, index: u64) -> Tensor<f32> {
    NoiseRng::indexed(seed, "ddim.init", index).normal_tensor(LATENT_SHAPE.to_vec())
}

/// Samples one latent per condition row-set in `cond: [N, L, D]`.
///
/// Sample `i` starts from [`initial_noise`]`(seed, first_index + i)`, so a batch
/// can be split without changing any individual result.
pub fn ddim_sample(
    predictor: &dyn NoisePredictor,
    cond: &Tensor<f32>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    first_index: u64,
) -> Result<Tensor<f32>> {
    cfg.validate(sched)?;
    let n = cond.shape()[0];
    let init: Vec<Tensor<f32>> = (0..n as u64).map(|i| initial_noise(cfg.seed, first_index + i)).collect();
    let mut x = Tensor::stack(&init)?;
    let seq = timestep_subsequence(sched.len(), cfg.steps)?;
    for (k, &t) in seq.iter().enumerate() {
        let eps = predictor.predict(&x, &vec![t; n], cond)?;
        let z = (cfg.eta > 0.0).then(|| {
            let per: Vec<Tensor<f32>> = (0..n as u64)
                .map(|i| {
                    NoiseRng::indexed(cfg.seed, "ddim.step", (first_index + i) * seq.len() as u64 + k as u64)
                        .normal_tensor(LATENT_SHAPE.to_vec())
                })
                .collect();
            Tensor::stack(&per)
        });
        let z = z.transpose()?;
        x = ddim_step(&x, &eps, t, seq.get(k + 1).copied(), cfg.eta, z.as_ref(), sched)?;
    }
    Ok(x)
}
