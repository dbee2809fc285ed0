//! Architecture hyperparameters, serialized into checkpoint metadata.

use std::collections::BTreeMap;

use crate::error::{CifeError, Result};

pub type Meta = BTreeMap<String, String>;

pub(crate) fn put(meta: &mut Meta, key: &str, value: impl ToString) {
    meta.insert(format!("arch.{key}"), value.to_string());
}

pub(crate) fn take<T: std::str::FromStr>(meta: &Meta, key: &str) -> Result<T> {
    let full = format!("arch.{key}");
    let raw = meta
        .get(&full)
        .ok_or_else(|| CifeError::Config(format!("checkpoint metadata lacks `{full}`")))?;
    raw.parse()
        .map_err(|_| CifeError::Config(format!("bad value `{raw}` for `{full}`")))
}

pub(crate) fn put_list(meta: &mut Meta, key: &str, values: &[usize]) {
    let s: Vec<String> = values.iter().map(usize::to_string).collect();
    put(meta, key, s.join(","));
}

pub(crate) fn take_list<const N: usize>(meta: &Meta, key: &str) -> Result<[usize; N]> {
    let raw: String = take(meta, key)?;
    let parsed: std::result::Result<Vec<usize>, _> = raw.split(',').map(str::parse).collect();
    parsed
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| CifeError::Config(format!("bad list `{raw}` for `arch.{key}`")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaeConfig {
    /// Channel widths at 32×32, 16×16 and 8×8.
    pub channels: [usize; 3],
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { channels: [16, 32, 64] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            width: 64,
            layers: 2,
            heads: 4,
            mlp: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Channel widths at 8×8 and 4×4.
    pub channels: [usize; 2],
    pub cond_width: usize,
    pub time_width: usize,
    pub time_hidden: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            channels: [32, 64],
            cond_width: 64,
            time_width: 64,
            time_hidden: 128,
            groups: 8,
        }
    }
}

impl VaeConfig {
    pub fn write(&self, meta: &mut Meta) {
        put_list(meta, "vae.channels", &self.channels);
    }

    pub fn read(meta: &Meta) -> Result<Self> {
        Ok(VaeConfig {
            channels: take_list(meta, "vae.channels")?,
        })
    }
}

impl TextConfig {
    pub fn write(&self, meta: &mut Meta) {
        put(meta, "text.width", self.width);
        put(meta, "text.layers", self.layers);
        put(meta, "text.heads", self.heads);
        put(meta, "text.mlp", self.mlp);
    }

    pub fn read(meta: &Meta) -> Result<Self> {
        Ok(TextConfig {
            width: take(meta, "text.width")?,
            layers: take(meta, "text.layers")?,
            heads: take(meta, "text.heads")?,
            mlp: take(meta, "text.mlp")?,
        })
    }
}

impl UNetConfig {
    pub fn write(&self, meta: &mut Meta) {
        put_list(meta, "unet.channels", &self.channels);
        put(meta, "unet.cond_width", self.cond_width);
        put(meta, "unet.time_width", self.time_width);
        put(meta, "unet.time_hidden", self.time_hidden);
        put(meta, "unet.groups", self.groups);
    }

    pub fn read(meta: &Meta) -> Result<Self> {
        Ok(UNetConfig {
            channels: take_list(meta, "unet.channels")?,
            cond_width: take(meta, "unet.cond_width")?,
            time_width: take(meta, "unet.time_width")?,
            time_hidden: take(meta, "unet.time_hidden")?,
            groups: take(meta, "unet.groups")?,
        })
    }
}
