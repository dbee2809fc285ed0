//! Reference-image feature extraction and the extra condition rows it produces.

use std::fmt;
use std::str::FromStr;

use cife_tensor::{Scalar, Tape, Tensor, Var};

use crate::backbone::config::{put, put_list, take, take_list, Meta};
use crate::backbone::{image_batch, infer};
use crate::error::{CifeError, Result};
use crate::image::ImageRGB;
use crate::nn::{Net, NORM_EPS};
use crate::params::{Bound, Init, ParamStore};

pub const FEATURES_PREFIX: &str = "encoder.features.";
pub const DEEP_PREFIX: &str = "encoder.deep.";
pub const MIXER_PREFIX: &str = "mixer.";
pub const AE_DECODER_PREFIX: &str = "ae_decoder.";

/// How character rows are combined with the text hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantKind {
    SamePlace,
    MixEncoder,
    Autoencoder,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [VariantKind::SamePlace, VariantKind::MixEncoder, VariantKind::Autoencoder];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::SamePlace => "same-place",
            VariantKind::MixEncoder => "mix",
            VariantKind::Autoencoder => "autoencoder",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = CifeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-place" | "sameplace" => Ok(VariantKind::SamePlace),
            "mix" | "mix-encoder" => Ok(VariantKind::MixEncoder),
            "autoencoder" | "ae" => Ok(VariantKind::Autoencoder),
            _ => Err(CifeError::Config(format!(
                "unknown variant `{s}` (expected same-place, mix or autoencoder)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub groups: usize,
    pub hidden: usize,
    /// Number of condition rows `K`.
    pub rows: usize,
    /// Row width `D`; must equal the backbone hidden width.
    pub width: usize,
    pub mixer_layers: usize,
    pub mixer_heads: usize,
    pub mixer_mlp: usize,
    /// Decoder widths at 2×2 through 8×8 and at 16×16 through 32×32.
    pub decoder_channels: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [16, 32, 64, 64],
            groups: 4,
            hidden: 128,
            rows: 4,
            width: 64,
            mixer_layers: 2,
            mixer_heads: 4,
            mixer_mlp: 128,
            decoder_channels: [64, 32, 16],
        }
    }
}

impl EncoderConfig {
    /// Length of the flattened final feature map (`C · 2 · 2`).
    pub fn feature_len(&self) -> usize {
        self.channels[3] * 4
    }

    pub fn write(&self, meta: &mut Meta) {
        put_list(meta, "encoder.channels", &self.channels);
        put(meta, "encoder.groups", self.groups);
        put(meta, "encoder.hidden", self.hidden);
        put(meta, "encoder.rows", self.rows);
        put(meta, "encoder.width", self.width);
        put(meta, "encoder.mixer_layers", self.mixer_layers);
        put(meta, "encoder.mixer_heads", self.mixer_heads);
        put(meta, "encoder.mixer_mlp", self.mixer_mlp);
        put_list(meta, "encoder.decoder_channels", &self.decoder_channels);
    }

    pub fn read(meta: &Meta) -> Result<Self> {
        Ok(EncoderConfig {
            channels: take_list(meta, "encoder.channels")?,
            groups: take(meta, "encoder.groups")?,
            hidden: take(meta, "encoder.hidden")?,
            rows: take(meta, "encoder.rows")?,
            width: take(meta, "encoder.width")?,
            mixer_layers: take(meta, "encoder.mixer_layers")?,
            mixer_heads: take(meta, "encoder.mixer_heads")?,
            mixer_mlp: take(meta, "encoder.mixer_mlp")?,
            decoder_channels: take_list(meta, "encoder.decoder_channels")?,
        })
    }
}

/// A trained or freshly initialized encoder of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterEncoder {
    pub variant: VariantKind,
    pub config: EncoderConfig,
    pub params: ParamStore,
    /// Free-form checkpoint metadata.
    pub provenance: Meta,
}

impl CharacterEncoder {
    pub fn init(variant: VariantKind, config: EncoderConfig, seed: u64) -> Self {
        CharacterEncoder {
            variant,
            config,
            params: init(variant, &config, seed),
            provenance: Meta::new(),
        }
    }

    /// Feature vectors `[N, 256]` for a batch of reference images.
    pub fn extract_features(&self, images: &[ImageRGB]) -> Result<Tensor<f32>> {
        let x = image_batch(images)?;
        let cfg = self.config;
        infer(&[&self.params], |net| {
            let xv = net.tape.constant(x)?;
            extract_features(net, &cfg, xv)
        })
    }

    /// Character encodings `[N, K, D]`.
    pub fn encode(&self, images: &[ImageRGB]) -> Result<Tensor<f32>> {
        let x = image_batch(images)?;
        let cfg = self.config;
        infer(&[&self.params], |net| {
            let xv = net.tape.constant(x)?;
            let f = extract_features(net, &cfg, xv)?;
            encode_character(net, &cfg, f)
        })
    }

    /// Full condition sequence for a batch: text rows `[N, L, D]` plus the encoding of `images`.
    pub fn condition(&self, clip: &Tensor<f32>, images: &[ImageRGB]) -> Result<Tensor<f32>> {
        let chars = self.encode(images)?;
        compose_conditions(clip, Some(&chars), self.variant, Some(&self.params), &self.config)
    }

    /// Reconstruction from the autoencoder decoder.
    pub fn ae_decode(&self, chars: &Tensor<f32>, clip: &Tensor<f32>) -> Result<Vec<ImageRGB>> {
        if self.variant != VariantKind::Autoencoder {
            return Err(CifeError::Compose(format!("{} encoders have no decoder", self.variant)));
        }
        let cfg = self.config;
        let (c, t) = (chars.clone(), clip.clone());
        let out = infer(&[&self.params], |net| {
            let cv = net.tape.constant(c)?;
            let tv = net.tape.constant(t)?;
            ae_decode(net, &cfg, cv, tv)
        })?;
        (0..out.shape()[0]).map(|i| ImageRGB::from_tensor(&out.outer(i))).collect()
    }

    /// Parameters used when composing conditions (features, deep encoder, mixer).
    pub fn conditioning_params(&self) -> ParamStore {
        let mut p = self.params.filter_prefix("encoder.");
        p.extend(self.params.filter_prefix(MIXER_PREFIX));
        p
    }
}

pub fn init(variant: VariantKind, cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut i = Init::new(&mut store, seed, "init.encoder");
    let mut cin = 3;
    for (b, &c) in cfg.channels.iter().enumerate() {
        i.conv(&format!("encoder.features.block{b}.conv"), c, cin, 3);
        i.norm(&format!("encoder.features.block{b}.norm"), c);
        cin = c;
    }
    i.linear("encoder.deep.fc1", cfg.hidden, cfg.feature_len());
    i.linear("encoder.deep.fc2", cfg.hidden, cfg.hidden);
    i.zero_linear("encoder.deep.fc3", cfg.rows * cfg.width, cfg.hidden);
    match variant {
        VariantKind::SamePlace => {}
        VariantKind::MixEncoder => {
            for b in 0..cfg.mixer_layers {
                i.transformer_block(&format!("mixer.blocks.{b}"), cfg.width, cfg.mixer_mlp, true);
            }
        }
        VariantKind::Autoencoder => {
            let [c0, c1, c2] = cfg.decoder_channels;
            i.table("ae_decoder.seed", vec![4, 2, 2], 1.0);
            i.conv("ae_decoder.conv_in", c0, 4, 1);
            i.cross_attention("ae_decoder.attn0", c0, cfg.width);
            i.conv("ae_decoder.conv1", c1, c0, 3);
            i.conv("ae_decoder.conv2", c1, c1, 3);
            i.cross_attention("ae_decoder.attn1", c1, cfg.width);
            i.conv("ae_decoder.conv3", c2, c1, 3);
            i.conv("ae_decoder.conv4", c2, c2, 3);
            i.conv("ae_decoder.out", 3, c2, 3);
        }
    }
    store
}

/// `[N, 3, 32, 32]` to `[N, C·2·2]`.
pub(crate) fn extract_features<T: Scalar>(net: &mut Net<'_, T>, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let mut h = x;
    for b in 0..cfg.channels.len() {
        h = net.conv(&format!("encoder.features.block{b}.conv"), h, 1, 1)?;
        let g = net.p(&format!("encoder.features.block{b}.norm.gamma"))?;
        let be = net.p(&format!("encoder.features.block{b}.norm.beta"))?;
        h = net.tape.group_norm(h, cfg.groups, g, be, NORM_EPS)?;
        h = net.silu(h)?;
        h = net.tape.avg_pool2(h)?;
    }
    let n = net.tape.shape(h)[0];
    Ok(net.tape.reshape(h, &[n, cfg.feature_len()])?)
}

/// `[N, 256]` features to `[N, K, D]` rows.
pub(crate) fn encode_character<T: Scalar>(net: &mut Net<'_, T>, cfg: &EncoderConfig, f: Var) -> Result<Var> {
    let n = net.tape.shape(f)[0];
    let h = net.linear("encoder.deep.fc1", f)?;
    let h = net.silu(h)?;
    let h = net.linear("encoder.deep.fc2", h)?;
    let h = net.silu(h)?;
    let h = net.linear("encoder.deep.fc3", h)?;
    Ok(net.tape.reshape(h, &[n, cfg.rows, cfg.width])?)
}

/// Tape form of [`compose_conditions`]; `chars = None` disables the encoder.
pub(crate) fn compose_on_tape<T: Scalar>(
    net: &mut Net<'_, T>,
    cfg: &EncoderConfig,
    variant: VariantKind,
    clip: Var,
    chars: Option<Var>,
) -> Result<Var> {
    let Some(chars) = chars else { return Ok(clip) };
    let (cs, ks) = (net.tape.shape(clip).to_vec(), net.tape.shape(chars).to_vec());
    if cs.len() != 3 || ks.len() != 3 || cs[0] != ks[0] || cs[2] != ks[2] {
        return Err(CifeError::Compose(format!(
            "cannot join text rows {cs:?} with character rows {ks:?}"
        )));
    }
    let joined = net.tape.concat(&[clip, chars], 1)?;
    match variant {
        VariantKind::SamePlace | VariantKind::Autoencoder => Ok(joined),
        VariantKind::MixEncoder => {
            if net.params.get("mixer.blocks.0.ln1.gamma").is_err() {
                return Err(CifeError::Compose("mix variant requires mixer parameters".into()));
            }
            let mut h = joined;
            for b in 0..cfg.mixer_layers {
                h = net.transformer_block(&format!("mixer.blocks.{b}"), h, cfg.mixer_heads, false)?;
            }
            Ok(h)
        }
    }
}

/// Joins text hidden states `[N, L, D]` with character rows `[N, K, D]`.
///
/// Same-place and autoencoder variants append the rows and leave the text rows
/// untouched; the mix variant passes the joined sequence through the mixer.
pub fn compose_conditions(
    clip: &Tensor<f32>,
    chars: Option<&Tensor<f32>>,
    variant: VariantKind,
    mixer: Option<&ParamStore>,
    cfg: &EncoderConfig,
) -> Result<Tensor<f32>> {
    let empty = ParamStore::new();
    let mut tape = Tape::new();
    let bound = match (variant, mixer) {
        (VariantKind::MixEncoder, None) => {
            return Err(CifeError::Compose("mix variant requires mixer parameters".into()))
        }
        (VariantKind::MixEncoder, Some(m)) => Bound::bind(&mut tape, &m.filter_prefix(MIXER_PREFIX), false)?,
        _ => Bound::bind(&mut tape, &empty, false)?,
    };
    let cv = tape.constant(clip.clone())?;
    let kv = chars.map(|c| tape.constant(c.clone())).transpose()?;
    let mut net = Net::new(&mut tape, &bound);
    let out = compose_on_tape(&mut net, cfg, variant, cv, kv)?;
    Ok(tape.value(out).clone())
}

/// Cross-attention decoder from `[N, K, D]` rows and `[N, L, D]` text rows to `[N, 3, 32, 32]`.
pub(crate) fn ae_decode<T: Scalar>(net: &mut Net<'_, T>, cfg: &EncoderConfig, chars: Var, clip: Var) -> Result<Var> {
    let n = net.tape.shape(chars)[0];
    let cond = net.tape.concat(&[chars, clip], 1)?;
    let zeros = net.tape.constant(Tensor::zeros([n, 4, 2, 2]))?;
    let seed = net.p("ae_decoder.seed")?;
    let h = net.tape.add_bias(zeros, seed)?;
    let g = cfg.groups;
    let h = net.conv("ae_decoder.conv_in", h, 1, 0)?;
    let h = net.cross_attention("ae_decoder.attn0", h, cond, g)?;
    let h = net.tape.upsample2(h)?;
    let h = net.conv("ae_decoder.conv1", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.tape.upsample2(h)?;
    let h = net.conv("ae_decoder.conv2", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.cross_attention("ae_decoder.attn1", h, cond, g)?;
    let h = net.tape.upsample2(h)?;
    let h = net.conv("ae_decoder.conv3", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.tape.upsample2(h)?;
    let h = net.conv("ae_decoder.conv4", h, 1, 1)?;
    let h = net.silu(h)?;
    let h = net.conv("ae_decoder.out", h, 1, 1)?;
    Ok(net.tape.sigmoid(h)?)
}

/// Cosine similarity between two flattened encodings.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
