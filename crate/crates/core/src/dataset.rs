//! Procedural sprite characters, their appearance/variation split and training pairs.

use std::collections::BTreeMap;
use std::path::Path;

use cife_tensor::NoiseRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CifeError, Result};
use crate::image::{hsv_to_rgb, write_bytes, ImageRGB, IMAGE_SIZE};

pub const HUE_BINS: usize = 8;
pub const SHAPES: usize = 3;
pub const ACCESSORIES: usize = 3;
pub const EYE_COLORS: usize = 4;
pub const BACKGROUNDS: usize = 8;
pub const IDENTITY_SPACE: usize = HUE_BINS * SHAPES * ACCESSORIES * EYE_COLORS;

pub const HUE_NAMES: [&str; HUE_BINS] = ["red", "orange", "lime", "green", "cyan", "blue", "violet", "magenta"];
pub const BACKGROUND_NAMES: [&str; BACKGROUNDS] =
    ["white", "silver", "gray", "charcoal", "cream", "sand", "mint", "lavender"];
const BACKGROUND_RGB: [[f32; 3]; BACKGROUNDS] = [
    [0.94, 0.94, 0.94],
    [0.75, 0.75, 0.75],
    [0.50, 0.50, 0.50],
    [0.22, 0.22, 0.22],
    [0.95, 0.92, 0.80],
    [0.80, 0.75, 0.62],
    [0.80, 0.92, 0.85],
    [0.85, 0.82, 0.93],
];
/// Backgrounds used for appearance images, cycled by image index.
const NEUTRAL_BACKGROUNDS: [u8; 4] = [0, 1, 4, 6];
const EYE_RGB: [[f32; 3]; EYE_COLORS] = [
    [0.05, 0.05, 0.05],
    [0.10, 0.12, 0.35],
    [0.35, 0.20, 0.10],
    [0.33, 0.10, 0.30],
];
const HAT_RGB: [f32; 3] = [0.18, 0.18, 0.20];
const BADGE_RGB: [f32; 3] = [0.97, 0.97, 0.97];
pub const BODY_SATURATION: f32 = 0.85;
pub const BODY_VALUE: f32 = 0.9;
/// Body half-extent in pixels at scale 1.
const BODY_RADIUS: f32 = 9.0;
pub const MAX_OFFSET: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyShape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accessory {
    None,
    Hat,
    Badge,
}

impl BodyShape {
    pub const ALL: [BodyShape; SHAPES] = [BodyShape::Circle, BodyShape::Square, BodyShape::Triangle];
}

impl Accessory {
    pub const ALL: [Accessory; ACCESSORIES] = [Accessory::None, Accessory::Hat, Accessory::Badge];
}

/// The attributes that define who a character is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Identity {
    pub body_hue: u8,
    pub body_shape: BodyShape,
    pub accessory: Accessory,
    pub eye_color: u8,
}

impl Identity {
    /// Dense index in `0..288`.
    pub fn id(&self) -> usize {
        let shape = BodyShape::ALL.iter().position(|s| *s == self.body_shape).unwrap_or(0);
        let acc = Accessory::ALL.iter().position(|a| *a == self.accessory).unwrap_or(0);
        ((self.body_hue as usize * SHAPES + shape) * ACCESSORIES + acc) * EYE_COLORS + self.eye_color as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id >= IDENTITY_SPACE {
            return Err(CifeError::Dataset(format!("identity id {id} outside 0..{IDENTITY_SPACE}")));
        }
        Ok(Identity {
            eye_color: (id % EYE_COLORS) as u8,
            accessory: Accessory::ALL[id / EYE_COLORS % ACCESSORIES],
            body_shape: BodyShape::ALL[id / (EYE_COLORS * ACCESSORIES) % SHAPES],
            body_hue: (id / (EYE_COLORS * ACCESSORIES * SHAPES)) as u8,
        })
    }

    pub fn body_rgb(&self) -> [f32; 3] {
        hsv_to_rgb(self.body_hue as f32 * (360.0 / HUE_BINS as f32), BODY_SATURATION, BODY_VALUE)
    }
}

/// Pose and context; never changes identity pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variation {
    pub dx: i32,
    pub dy: i32,
    pub scale: f32,
    /// Degrees, one of 0, 90, 180, 270.
    pub rotation: u16,
    pub background: u8,
}

impl Variation {
    pub fn canonical(background: u8) -> Self {
        Variation {
            dx: 0,
            dy: 0,
            scale: 1.0,
            rotation: 0,
            background,
        }
    }

    /// Template caption naming only variation fields.
    pub fn caption(&self) -> String {
        self.caption_with("")
    }

    /// Caption that also names the body hue and shape. Only backbone
    /// pretraining uses it; dataset captions never describe identity.
    pub fn described_caption(&self, identity: &Identity) -> String {
        let shape = match identity.body_shape {
            BodyShape::Circle => "circle",
            BodyShape::Square => "square",
            BodyShape::Triangle => "triangle",
        };
        self.caption_with(&format!("{} {shape} ", HUE_NAMES[identity.body_hue as usize % HUE_BINS]))
    }

    fn caption_with(&self, subject: &str) -> String {
        let size = if self.scale < 0.8 {
            "small"
        } else if self.scale < 0.9 {
            "medium"
        } else {
            "large"
        };
        let h = match self.dx {
            d if d < -1 => "left",
            d if d > 1 => "right",
            _ => "center",
        };
        let v = match self.dy {
            d if d < -1 => "top",
            d if d > 1 => "bottom",
            _ => "middle",
        };
        let facing = match self.rotation {
            90 => "right",
            180 => "down",
            270 => "left",
            _ => "up",
        };
        let bg = BACKGROUND_NAMES[self.background as usize % BACKGROUNDS];
        format!("a {size} {subject}sprite at {h} {v} facing {facing} on {bg} background")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub identity: Identity,
    pub variation: Variation,
}

/// Rasterizes a sprite with point sampling at pixel centres.
pub fn render_sprite(spec: &SpriteSpec) -> ImageRGB {
    let id = spec.identity;
    let var = spec.variation;
    let mut img = ImageRGB::filled(BACKGROUND_RGB[var.background as usize % BACKGROUNDS]);
    let r = BODY_RADIUS * var.scale;
    let (cx, cy) = (IMAGE_SIZE as f32 / 2.0 + var.dx as f32, IMAGE_SIZE as f32 / 2.0 + var.dy as f32);
    let turns = (var.rotation / 90) % 4;
    let body = id.body_rgb();
    let in_box = |ux: f32, uy: f32, x0: f32, x1: f32, y0: f32, y1: f32| ux >= x0 && ux <= x1 && uy >= y0 && uy <= y1;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (mut lx, mut ly) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            for _ in 0..turns {
                (lx, ly) = (ly, -lx);
            }
            let (ux, uy) = (lx / r, ly / r);
            let inside = match id.body_shape {
                BodyShape::Circle => ux * ux + uy * uy <= 1.0,
                BodyShape::Square => ux.abs() <= 0.85 && uy.abs() <= 0.85,
                BodyShape::Triangle => (-0.9..=0.8).contains(&uy) && ux.abs() <= 0.95 * (uy + 0.9) / 1.7,
            };
            let mut colour = None;
            if inside {
                colour = Some(body);
            }
            if id.accessory == Accessory::Hat && in_box(ux, uy, -0.55, 0.55, -1.3, -0.92) {
                colour = Some(HAT_RGB);
            }
            if id.accessory == Accessory::Badge && in_box(ux, uy, -0.17, 0.17, 0.38, 0.72) {
                colour = Some(BADGE_RGB);
            }
            for ex in [-0.35, 0.35] {
                if in_box(ux, uy, ex - 0.13, ex + 0.13, 0.02, 0.28) {
                    colour = Some(EYE_RGB[id.eye_color as usize % EYE_COLORS]);
                }
            }
            if let Some(c) = colour {
                img.set_pixel(y, x, c);
            }
        }
    }
    img.quantized()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spec: SpriteSpec,
    pub image: ImageRGB,
    pub caption: String,
}

impl Sample {
    pub fn from_spec(spec: SpriteSpec) -> Self {
        Sample {
            image: render_sprite(&spec),
            caption: spec.variation.caption(),
            spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterRecord {
    pub id: usize,
    pub identity: Identity,
    pub appearance: Vec<Sample>,
    pub variation: Vec<Sample>,
}

/// Canonical appearance sample `n` of an identity.
pub fn appearance_sample(identity: Identity, n: usize) -> Sample {
    Sample::from_spec(SpriteSpec {
        identity,
        variation: Variation::canonical(NEUTRAL_BACKGROUNDS[n % NEUTRAL_BACKGROUNDS.len()]),
    })
}

/// The caption used when sampling with a neutral prompt.
pub fn neutral_caption() -> String {
    Variation::canonical(0).caption()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub characters: usize,
    pub c_per: usize,
    pub f_per: usize,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            characters: 8,
            c_per: 2,
            f_per: 16,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: DatasetParams,
    pub records: Vec<CharacterRecord>,
}

/// A (reference, target) pair addressed by indices into a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingPair {
    pub record: usize,
    pub reference: usize,
    pub target: usize,
}

fn random_variation(rng: &mut NoiseRng) -> Variation {
    let span = (2 * MAX_OFFSET + 1) as usize;
    let dx = rng.below(span) as i32 - MAX_OFFSET;
    let dy = rng.below(span) as i32 - MAX_OFFSET;
    let scale = 0.7 + rng.below(31) as f32 / 100.0;
    let rotation = rng.below(4) as u16 * 90;
    let background = rng.below(BACKGROUNDS) as u8;
    Variation {
        dx,
        dy,
        scale,
        rotation,
        background,
    }
}

/// Draws `count` identities without replacement, excluding `exclude`, so that
/// hue bins are covered as evenly as possible.
pub fn sample_identities(count: usize, seed: u64, label: &str, exclude: &[Identity]) -> Result<Vec<Identity>> {
    let mut pools: Vec<Vec<usize>> = (0..HUE_BINS)
        .map(|h| {
            let per = IDENTITY_SPACE / HUE_BINS;
            (h * per..(h + 1) * per)
                .filter(|id| !exclude.iter().any(|e| e.id() == *id))
                .collect()
        })
        .collect();
    let available: usize = pools.iter().map(Vec::len).sum();
    if count > available {
        return Err(CifeError::Dataset(format!(
            "requested {count} identities but only {available} of {IDENTITY_SPACE} are available"
        )));
    }
    let mut rng = NoiseRng::new(seed, label);
    let mut order: Vec<usize> = (0..HUE_BINS).collect();
    rng.shuffle(&mut order);
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0;
    while out.len() < count {
        let hue = order[cursor % HUE_BINS];
        cursor += 1;
        let pool = &mut pools[hue];
        if pool.is_empty() {
            continue;
        }
        let id = pool.remove(rng.below(pool.len()));
        out.push(Identity::from_id(id)?);
    }
    Ok(out)
}

pub fn build_dataset(params: DatasetParams) -> Result<Dataset> {
    if params.characters == 0 || params.c_per == 0 || params.f_per == 0 {
        return Err(CifeError::Dataset("characters, c_per and f_per must all be positive".into()));
    }
    if params.characters > IDENTITY_SPACE {
        return Err(CifeError::Dataset(format!(
            "{} characters exceed the {IDENTITY_SPACE} distinct identities",
            params.characters
        )));
    }
    let identities = sample_identities(params.characters, params.seed, "dataset.identities", &[])?;
    let records = identities
        .into_iter()
        .enumerate()
        .map(|(i, identity)| {
            let mut rng = NoiseRng::indexed(params.seed, "dataset.variation", i as u64);
            let appearance = (0..params.c_per).map(|n| appearance_sample(identity, n)).collect();
            let variation = (0..params.f_per)
                .map(|_| {
                    Sample::from_spec(SpriteSpec {
                        identity,
                        variation: random_variation(&mut rng),
                    })
                })
                .collect();
            CharacterRecord {
                id: identity.id(),
                identity,
                appearance,
                variation,
            }
        })
        .collect();
    Ok(Dataset { params, records })
}

/// Every appearance × variation pair of every record, shuffled by `epoch_seed`.
pub fn pair_stream(records: &[CharacterRecord], epoch_seed: u64) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        for c in 0..rec.appearance.len() {
            for f in 0..rec.variation.len() {
                pairs.push(TrainingPair {
                    record: r,
                    reference: c,
                    target: f,
                });
            }
        }
    }
    NoiseRng::new(epoch_seed, "dataset.pairs").shuffle(&mut pairs);
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestImage {
    file: String,
    sha256: String,
    spec: SpriteSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRecord {
    id: usize,
    identity: Identity,
    images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    params: DatasetParams,
    pair_count: usize,
    content_sha256: String,
    records: Vec<ManifestRecord>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn pair_count(&self) -> usize {
        self.records.iter().map(|r| r.appearance.len() * r.variation.len()).sum()
    }

    pub fn identities(&self) -> Vec<Identity> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn reference(&self, pair: &TrainingPair) -> &Sample {
        &self.records[pair.record].appearance[pair.reference]
    }

    pub fn target(&self, pair: &TrainingPair) -> &Sample {
        &self.records[pair.record].variation[pair.target]
    }

    /// Every image with its caption: appearance images first, then variations, record by record.
    pub fn all_samples(&self) -> Vec<&Sample> {
        self.records
            .iter()
            .flat_map(|r| r.appearance.iter().chain(&r.variation))
            .collect()
    }

    fn manifest(&self) -> (Manifest, Vec<(String, Vec<u8>)>) {
        let mut files = Vec::new();
        let mut content = Sha256::new();
        let records = self
            .records
            .iter()
            .map(|rec| {
                let mut images = Vec::new();
                for (kind, list) in [("appearance", &rec.appearance), ("variation", &rec.variation)] {
                    for (n, s) in list.iter().enumerate() {
                        let file = format!("{kind}/{n}.png");
                        let bytes = s.image.encode_png();
                        let sha = sha_hex(&bytes);
                        content.update(format!("{:03}/{file} {sha}\n", rec.id).as_bytes());
                        files.push((format!("{:03}/{file}", rec.id), bytes));
                        images.push(ManifestImage {
                            file,
                            sha256: sha,
                            spec: s.spec,
                        });
                    }
                }
                ManifestRecord {
                    id: rec.id,
                    identity: rec.identity,
                    images,
                }
            })
            .collect();
        let manifest = Manifest {
            format: 1,
            params: self.params,
            pair_count: self.pair_count(),
            content_sha256: hex::encode(content.finalize()),
            records,
        };
        (manifest, files)
    }

    fn manifest_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest().0).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    /// SHA-256 of the serialized manifest, which covers every image hash.
    pub fn manifest_hash(&self) -> String {
        sha_hex(&self.manifest_bytes())
    }

    /// Writes the on-disk layout; refuses a non-empty directory unless `force`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<String> {
        if dir.exists() {
            let non_empty = std::fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
            if non_empty {
                if !force {
                    return Err(CifeError::Dataset(format!(
                        "{} exists and is not empty (pass --force to overwrite)",
                        dir.display()
                    )));
                }
                std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
            }
        }
        let (_, files) = self.manifest();
        for (rel, bytes) in files {
            write_bytes(&dir.join(rel), &bytes)?;
        }
        for rec in &self.records {
            let mut tsv = String::new();
            for (kind, list) in [("appearance", &rec.appearance), ("variation", &rec.variation)] {
                for (n, s) in list.iter().enumerate() {
                    tsv.push_str(&format!("{kind}/{n}.png\t{}\n", s.caption));
                }
            }
            write_bytes(&dir.join(format!("{:03}", rec.id)).join("captions.tsv"), tsv.as_bytes())?;
        }
        let manifest = self.manifest_bytes();
        write_bytes(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(sha_hex(&manifest))
    }

    /// Reads a dataset directory, verifying every image against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let raw = std::fs::read(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_slice(&raw)?;
        let mut records = Vec::new();
        for mrec in &manifest.records {
            let cdir = dir.join(format!("{:03}", mrec.id));
            let tsv_path = cdir.join("captions.tsv");
            let tsv = std::fs::read_to_string(&tsv_path).map_err(io_err(&tsv_path))?;
            let captions: BTreeMap<&str, &str> = tsv.lines().filter_map(|l| l.split_once('\t')).collect();
            let mut appearance = Vec::new();
            let mut variation = Vec::new();
            for mi in &mrec.images {
                let path = cdir.join(&mi.file);
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                if sha_hex(&bytes) != mi.sha256 {
                    return Err(CifeError::Dataset(format!("{} does not match its manifest hash", path.display())));
                }
                let caption = captions
                    .get(mi.file.as_str())
                    .ok_or_else(|| CifeError::Dataset(format!("no caption for {}", path.display())))?;
                let sample = Sample {
                    spec: mi.spec,
                    image: ImageRGB::decode_png(&bytes)?,
                    caption: caption.to_string(),
                };
                if mi.file.starts_with("appearance/") {
                    appearance.push(sample);
                } else {
                    variation.push(sample);
                }
            }
            if appearance.is_empty() {
                return Err(CifeError::Dataset(format!("character {} has no appearance images", mrec.id)));
            }
            records.push(CharacterRecord {
                id: mrec.id,
                identity: mrec.identity,
                appearance,
                variation,
            });
        }
        Ok(Dataset {
            params: manifest.params,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_ids_round_trip() {
        for id in 0..IDENTITY_SPACE {
            assert_eq!(Identity::from_id(id).unwrap().id(), id);
        }
        assert!(Identity::from_id(IDENTITY_SPACE).is_err());
    }

    #[test]
    fn captions_use_lexicon_words() {
        let words: std::collections::BTreeSet<_> = crate::backbone::tokenizer::LEXICON.iter().copied().collect();
        let mut rng = NoiseRng::new(3, "t");
        for _ in 0..200 {
            let cap = random_variation(&mut rng).caption();
            assert!(cap.split(' ').all(|w| words.contains(w)), "{cap}");
            assert!(cap.split(' ').count() < crate::backbone::TEXT_LEN);
        }
    }
}
