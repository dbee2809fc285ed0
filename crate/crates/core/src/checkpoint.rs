//! The `CIFE` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CIFE" | u16 version | u16 len + tag | u32 len + metadata lines | u32 count
//! | count × (u16 len + name | u8 dtype | u8 ndim | ndim × u32 dim | raw values)
//! | 32-byte SHA-256 of everything before it
//! ```
//!
//! Metadata is `key=value\n` lines sorted by key; entries are sorted by name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use cife_tensor::{DType, Tensor};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{text, unet, vae, Backbone, Meta, Provenance, TextConfig, UNetConfig, VaeConfig};
use crate::character_encoder::{self, CharacterEncoder, EncoderConfig, VariantKind};
use crate::error::{io_err, CifeError, Result};
use crate::image::write_bytes;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"CIFE";
pub const FORMAT_VERSION: u16 = 1;
const HASH_LEN: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u16),
    #[error("checkpoint integrity hash mismatch: stored {stored}, computed {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("component tag mismatch: expected `{expected}`, found `{found}`")]
    TagMismatch { expected: String, found: String },
    #[error("parameter names differ from the architecture: missing {missing:?}, unexpected {unexpected:?}")]
    NameSet {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("parameter `{name}` has shape {found:?}, architecture expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Which network a bundle holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentTag {
    Vae,
    Text,
    Unet,
    Encoder(VariantKind),
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentTag::Vae => f.write_str("vae"),
            ComponentTag::Text => f.write_str("text"),
            ComponentTag::Unet => f.write_str("unet"),
            ComponentTag::Encoder(v) => write!(f, "encoder:{v}"),
        }
    }
}

impl FromStr for ComponentTag {
    type Err = CheckpointError;

    fn from_str(s: &str) -> std::result::Result<Self, CheckpointError> {
        match s {
            "vae" => Ok(ComponentTag::Vae),
            "text" => Ok(ComponentTag::Text),
            "unet" => Ok(ComponentTag::Unet),
            _ => s
                .strip_prefix("encoder:")
                .and_then(|v| v.parse().ok())
                .map(ComponentTag::Encoder)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown component tag `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub tag: ComponentTag,
    pub metadata: Meta,
    pub params: ParamStore,
}

fn sanitize(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

impl CheckpointBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let tag = self.tag.to_string();
        out.extend_from_slice(&(tag.len() as u16).to_le_bytes());
        out.extend_from_slice(tag.as_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(&format!("{}={}\n", sanitize(&k.replace('=', "_")), sanitize(v)));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DType::F32.code());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = u16::from_le_bytes(r.take::<2>("version")?);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        if bytes.len() < 6 + HASH_LEN {
            return Err(CheckpointError::Truncated("hash"));
        }
        let body = &bytes[..bytes.len() - HASH_LEN];
        let stored = &bytes[bytes.len() - HASH_LEN..];
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(CheckpointError::HashMismatch {
                stored: hex::encode(stored),
                computed: hex::encode(computed),
            });
        }
        let mut r = Reader { bytes: body, pos: 6 };
        let tag_len = u16::from_le_bytes(r.take::<2>("tag length")?) as usize;
        let tag: ComponentTag = r.utf8(tag_len, "tag")?.parse()?;
        let meta_len = u32::from_le_bytes(r.take::<4>("metadata length")?) as usize;
        let mut metadata = Meta::new();
        for line in r.utf8(meta_len, "metadata")?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = u32::from_le_bytes(r.take::<4>("parameter count")?) as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take::<2>("name length")?) as usize;
            let name = r.utf8(name_len, "name")?;
            let [dtype, ndim] = r.take::<2>("dtype")?;
            if DType::from_code(dtype) != Some(DType::F32) {
                return Err(CheckpointError::Malformed(format!("`{name}` has unsupported dtype code {dtype}")));
            }
            let shape: Vec<usize> = (0..ndim)
                .map(|_| r.take::<4>("shape").map(|b| u32::from_le_bytes(b) as usize))
                .collect::<std::result::Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.slice(n * 4, "values")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if params.contains(&name) {
                return Err(CheckpointError::Malformed(format!("duplicate parameter `{name}`")));
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            params.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(CheckpointBundle { tag, metadata, params })
    }

    /// Hex SHA-256 of the serialized bundle.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn expect_tag(&self, expected: ComponentTag) -> std::result::Result<(), CheckpointError> {
        if self.tag != expected {
            return Err(CheckpointError::TagMismatch {
                expected: expected.to_string(),
                found: self.tag.to_string(),
            });
        }
        Ok(())
    }

    /// Requires the exact name set and shapes of `reference`.
    pub fn expect_layout(&self, reference: &ParamStore) -> std::result::Result<(), CheckpointError> {
        let missing: Vec<String> = reference.names().filter(|n| !self.params.contains(n)).map(String::from).collect();
        let unexpected: Vec<String> = self.params.names().filter(|n| !reference.contains(n)).map(String::from).collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(CheckpointError::NameSet { missing, unexpected });
        }
        for (name, t) in reference.iter() {
            let found = self.params.get(name).expect("name checked");
            if found.shape() != t.shape() {
                return Err(CheckpointError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Writes the bundle and returns its hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        write_bytes(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn slice(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self, what: &'static str) -> std::result::Result<[u8; N], CheckpointError> {
        Ok(self.slice(N, what)?.try_into().expect("slice length"))
    }

    fn utf8(&mut self, n: usize, what: &'static str) -> std::result::Result<String, CheckpointError> {
        String::from_utf8(self.slice(n, what)?.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

fn strip_arch(meta: &Meta) -> Meta {
    meta.iter()
        .filter(|(k, _)| !k.starts_with("arch."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn with_arch(provenance: &Meta, write: impl FnOnce(&mut Meta)) -> Meta {
    let mut meta = strip_arch(provenance);
    write(&mut meta);
    meta
}

pub const VAE_FILE: &str = "vae.ckpt";
pub const TEXT_FILE: &str = "text.ckpt";
pub const UNET_FILE: &str = "unet.ckpt";

/// SHA-256 of each serialized backbone component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneHashes {
    pub vae: String,
    pub text: String,
    pub unet: String,
}

impl BackboneHashes {
    /// A single digest over the three component hashes.
    pub fn combined(&self) -> String {
        hex::encode(Sha256::digest(format!("{}\n{}\n{}\n", self.vae, self.text, self.unet)))
    }
}

impl Backbone {
    pub fn vae_bundle(&self) -> CheckpointBundle {
        CheckpointBundle {
            tag: ComponentTag::Vae,
            metadata: with_arch(&self.provenance.vae, |m| self.vae_config.write(m)),
            params: self.vae.clone(),
        }
    }

    pub fn text_bundle(&self) -> CheckpointBundle {
        CheckpointBundle {
            tag: ComponentTag::Text,
            metadata: with_arch(&self.provenance.text, |m| self.text_config.write(m)),
            params: self.text.clone(),
        }
    }

    pub fn unet_bundle(&self) -> CheckpointBundle {
        CheckpointBundle {
            tag: ComponentTag::Unet,
            metadata: with_arch(&self.provenance.unet, |m| self.unet_config.write(m)),
            params: self.unet.clone(),
        }
    }

    pub fn hashes(&self) -> BackboneHashes {
        BackboneHashes {
            vae: self.vae_bundle().sha256(),
            text: self.text_bundle().sha256(),
            unet: self.unet_bundle().sha256(),
        }
    }

    /// Writes `vae.ckpt`, `text.ckpt` and `unet.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<BackboneHashes> {
        Ok(BackboneHashes {
            vae: self.vae_bundle().save(&dir.join(VAE_FILE))?,
            text: self.text_bundle().save(&dir.join(TEXT_FILE))?,
            unet: self.unet_bundle().save(&dir.join(UNET_FILE))?,
        })
    }

    pub fn load(dir: &Path) -> Result<Backbone> {
        let vae_b = load_vae(&dir.join(VAE_FILE))?;
        let (text_config, text_p, text_meta) = load_text(&dir.join(TEXT_FILE))?;
        let (unet_config, unet_p, unet_meta) = load_component(&dir.join(UNET_FILE), ComponentTag::Unet, |m| {
            let c = UNetConfig::read(m)?;
            Ok((c, unet::init(&c, 0)))
        })?;
        if unet_config.cond_width != text_config.width {
            return Err(CifeError::CondWidth {
                expected: unet_config.cond_width,
                found: text_config.width,
            });
        }
        Ok(Backbone {
            vae_config: vae_b.0,
            text_config,
            unet_config,
            vae: vae_b.1,
            text: text_p,
            unet: unet_p,
            provenance: Provenance {
                vae: vae_b.2,
                text: text_meta,
                unet: unet_meta,
            },
        })
    }

    /// Replaces the VAE with one loaded from a standalone checkpoint.
    pub fn with_vae_from(mut self, path: &Path) -> Result<Backbone> {
        let (cfg, params, meta) = load_vae(path)?;
        self.vae_config = cfg;
        self.vae = params;
        self.provenance.vae = meta;
        Ok(self)
    }

    /// Replaces the text encoder with one loaded from a checkpoint.
    pub fn with_text_from(mut self, path: &Path) -> Result<Backbone> {
        let (cfg, params, meta) = load_text(path)?;
        if cfg.width != self.unet_config.cond_width {
            return Err(CifeError::CondWidth {
                expected: self.unet_config.cond_width,
                found: cfg.width,
            });
        }
        self.text_config = cfg;
        self.text = params;
        self.provenance.text = meta;
        Ok(self)
    }
}

/// Loads a text encoder checkpoint.
pub fn load_text(path: &Path) -> Result<(TextConfig, ParamStore, Meta)> {
    load_component(path, ComponentTag::Text, |m| {
        let c = TextConfig::read(m)?;
        Ok((c, text::init(&c, 0)))
    })
}

/// Loads a standalone VAE checkpoint.
pub fn load_vae(path: &Path) -> Result<(VaeConfig, ParamStore, Meta)> {
    load_component(path, ComponentTag::Vae, |m| {
        let c = VaeConfig::read(m)?;
        Ok((c, vae::init(&c, 0)))
    })
}

fn load_component<C>(
    path: &Path,
    tag: ComponentTag,
    arch: impl FnOnce(&Meta) -> Result<(C, ParamStore)>,
) -> Result<(C, ParamStore, Meta)> {
    let bundle = CheckpointBundle::load(path)?;
    bundle.expect_tag(tag)?;
    let (cfg, reference) = arch(&bundle.metadata)?;
    bundle.expect_layout(&reference)?;
    Ok((cfg, bundle.params, strip_arch(&bundle.metadata)))
}

impl CharacterEncoder {
    pub fn bundle(&self) -> CheckpointBundle {
        CheckpointBundle {
            tag: ComponentTag::Encoder(self.variant),
            metadata: with_arch(&self.provenance, |m| self.config.write(m)),
            params: self.params.clone(),
        }
    }

    pub fn sha256(&self) -> String {
        self.bundle().sha256()
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.bundle().save(path)
    }

    /// Loads an encoder checkpoint, optionally requiring a specific variant.
    pub fn load(path: &Path, variant: Option<VariantKind>) -> Result<CharacterEncoder> {
        let bundle = CheckpointBundle::load(path)?;
        let found = match bundle.tag {
            ComponentTag::Encoder(v) => v,
            other => {
                return Err(CheckpointError::TagMismatch {
                    expected: format!("encoder:{}", variant.map_or("<variant>", VariantKind::as_str)),
                    found: other.to_string(),
                }
                .into())
            }
        };
        if let Some(v) = variant {
            bundle.expect_tag(ComponentTag::Encoder(v))?;
        }
        let config = EncoderConfig::read(&bundle.metadata)?;
        bundle.expect_layout(&character_encoder::init(found, &config, 0))?;
        Ok(CharacterEncoder {
            variant: found,
            config,
            provenance: strip_arch(&bundle.metadata),
            params: bundle.params,
        })
    }
}
