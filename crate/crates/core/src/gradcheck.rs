//! Finite-difference check of the full encoder + UNet diffusion objective.

use std::collections::BTreeMap;

use cife_tensor::{GradCheck, GradCheckReport, NoiseRng, Tape, Tensor, Var};

use crate::backbone::{unet, UNetConfig, LATENT_SHAPE};
use crate::character_encoder::{self as ce, EncoderConfig, VariantKind};
use crate::diffusion::{diffusion_loss_on_tape, NoiseSchedule};
use crate::error::{CifeError, Result};
use crate::image::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::nn::Net;
use crate::params::{Bound, ParamStore};

/// Reduced-width networks and inputs for an f64 check of the composed loss.
#[derive(Debug, Clone)]
pub struct EndToEndCheck {
    pub variant: VariantKind,
    pub encoder: EncoderConfig,
    pub unet: UNetConfig,
    pub batch: usize,
    pub text_rows: usize,
    pub timesteps: Vec<usize>,
    pub seed: u64,
    /// Standard deviation of the noise added to every initial parameter so
    /// that zero-initialized projections carry gradient.
    pub perturb: f64,
    pub check: GradCheck,
}

impl EndToEndCheck {
    pub fn small(variant: VariantKind) -> Self {
        EndToEndCheck {
            variant,
            encoder: EncoderConfig {
                channels: [4, 4, 4, 4],
                groups: 2,
                hidden: 8,
                rows: 2,
                width: 8,
                mixer_layers: 1,
                mixer_heads: 2,
                mixer_mlp: 8,
                decoder_channels: [4, 4, 4],
            },
            unet: UNetConfig {
                channels: [4, 8],
                cond_width: 8,
                time_width: 8,
                time_hidden: 8,
                groups: 2,
            },
            batch: 2,
            text_rows: 3,
            timesteps: vec![17, 160],
            seed: 5,
            perturb: 0.05,
            // Round-off dominates the central difference below this step
            // once the objective passes through the whole encoder and UNet.
            check: GradCheck {
                h: 1e-4,
                max_coords_per_param: Some(3),
                ..GradCheck::default()
            },
        }
    }

    /// Parameters in name order, as checked.
    pub fn parameters(&self) -> ParamStore {
        let mut store = ce::init(self.variant, &self.encoder, self.seed);
        store = {
            let mut p = store.filter_prefix("encoder.");
            p.extend(store.filter_prefix(ce::MIXER_PREFIX));
            p
        };
        store.extend(unet::init(&self.unet, self.seed + 1));
        let mut out = ParamStore::new();
        for (i, (name, t)) in store.iter().enumerate() {
            let noise: Tensor<f32> = NoiseRng::indexed(self.seed, "gradcheck.perturb", i as u64).normal_tensor(t.shape().to_vec());
            let p = t.zip_map(&noise, |a, b| a + self.perturb as f32 * b).expect("same shape");
            out.insert(name.clone(), p);
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.encoder.width != self.unet.cond_width {
            return Err(CifeError::CondWidth {
                expected: self.unet.cond_width,
                found: self.encoder.width,
            });
        }
        if self.timesteps.len() != self.batch {
            return Err(CifeError::Config("one timestep per batch item is required".into()));
        }
        Ok(())
    }

    /// The objective as a function of the parameters in [`Self::parameters`] order.
    fn objective(&self, names: Vec<String>) -> impl Fn(&mut Tape<f64>, &[Var]) -> cife_tensor::Result<Var> + '_ {
        let n = self.batch;
        let mut rng = NoiseRng::new(self.seed, "gradcheck.inputs");
        let refs: Tensor<f64> = rng.uniform_tensor(vec![n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0);
        let clip: Tensor<f64> = rng.normal_tensor(vec![n, self.text_rows, self.unet.cond_width]);
        let mut lat = vec![n];
        lat.extend(LATENT_SHAPE);
        let x0: Tensor<f64> = rng.normal_tensor(lat.clone());
        let eps: Tensor<f64> = rng.normal_tensor(lat);
        let sched = NoiseSchedule::default();
        move |tape: &mut Tape<f64>, vars: &[Var]| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let r = tape.constant(refs.clone())?;
            let c = tape.constant(clip.clone())?;
            let mut net = Net::new(tape, &bound);
            encoder_unet_loss(&mut net, &self.encoder, self.variant, &self.unet, r, c, &x0, &eps, &self.timesteps, &sched)
                .map_err(|e| match e {
                    CifeError::Tensor(t) => t,
                    other => cife_tensor::TensorError::Shape {
                        op: "end_to_end",
                        detail: other.to_string(),
                    },
                })
        }
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        self.validate()?;
        let store = self.parameters();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.cast()).collect();
        Ok(self.check.run(self.objective(names), &params)?)
    }

    /// L2 norm of the analytic gradient of every parameter.
    pub fn gradient_norms(&self) -> Result<BTreeMap<String, f64>> {
        self.validate()?;
        let store = self.parameters();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let f = self.objective(names.clone());
        let mut tape = Tape::new();
        let vars = store
            .iter()
            .map(|(_, t)| tape.leaf(t.cast::<f64>(), true))
            .collect::<cife_tensor::Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        Ok(names
            .into_iter()
            .zip(vars)
            .map(|(n, v)| (n, grads.get(v).map_or(0.0, |g| g.l2_norm())))
            .collect())
    }
}

#[allow(clippy::too_many_arguments)]
fn encoder_unet_loss(
    net: &mut Net<'_, f64>,
    enc: &EncoderConfig,
    variant: VariantKind,
    ucfg: &UNetConfig,
    refs: Var,
    clip: Var,
    x0: &Tensor<f64>,
    eps: &Tensor<f64>,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Var> {
    let f = ce::extract_features(net, enc, refs)?;
    let chars = ce::encode_character(net, enc, f)?;
    let cond = ce::compose_on_tape(net, enc, variant, clip, Some(chars))?;
    diffusion_loss_on_tape(net, ucfg, x0, eps, ts, cond, sched)
}
