use crate::character_encoder::VariantKind;
use crate::error::{CifeError, Result};

/// `true` means the component's parameters are not updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeFlags {
    pub vae: bool,
    pub text_encoder: bool,
    pub unet: bool,
    pub character_encoder: bool,
    pub mixer: bool,
    pub ae_decoder: bool,
}

impl FreezeFlags {
    pub const ALL: FreezeFlags = FreezeFlags {
        vae: true,
        text_encoder: true,
        unet: true,
        character_encoder: true,
        mixer: true,
        ae_decoder: true,
    };

    pub fn backbone_frozen(&self) -> bool {
        self.vae && self.text_encoder && self.unet
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub freeze: FreezeFlags,
    pub variant: VariantKind,
    pub seed: u64,
    /// Weight of the KL term in the VAE objective.
    pub kl_weight: f64,
}

impl TrainConfig {
    fn base(learning_rate: f64, total_steps: usize, freeze: FreezeFlags) -> Self {
        TrainConfig {
            learning_rate,
            batch_size: 16,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            freeze,
            variant: VariantKind::SamePlace,
            seed: 1,
            kl_weight: 1e-4,
        }
    }

    pub fn vae() -> Self {
        Self::base(2e-3, 2000, FreezeFlags { vae: false, ..FreezeFlags::ALL })
    }

    pub fn backbone() -> Self {
        Self::base(
            1e-3,
            4000,
            FreezeFlags {
                text_encoder: false,
                unet: false,
                ..FreezeFlags::ALL
            },
        )
    }

    pub fn encoder(variant: VariantKind) -> Self {
        TrainConfig {
            variant,
            ..Self::base(
                1e-3,
                3000,
                FreezeFlags {
                    character_encoder: false,
                    mixer: variant != VariantKind::MixEncoder,
                    ..FreezeFlags::ALL
                },
            )
        }
    }

    pub fn autoencoder_pretrain() -> Self {
        TrainConfig {
            variant: VariantKind::Autoencoder,
            ..Self::base(
                1e-3,
                1500,
                FreezeFlags {
                    character_encoder: false,
                    ae_decoder: false,
                    ..FreezeFlags::ALL
                },
            )
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CifeError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad(format!("moment decays must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.epsilon <= 0.0 || self.kl_weight < 0.0 {
            return bad("epsilon must be positive and kl_weight non-negative".into());
        }
        if self.freeze == FreezeFlags::ALL {
            return bad("every component is frozen; nothing to train".into());
        }
        Ok(())
    }
}
