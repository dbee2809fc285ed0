use std::collections::BTreeMap;
use std::path::Path;

use cife_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::IdentityProbe;
use super::stats::{binomial_pvalue, mean_pairwise_diversity};
use crate::backbone::Backbone;
use crate::character_encoder::CharacterEncoder;
use crate::dataset::{appearance_sample, neutral_caption, sample_identities, Identity, HUE_BINS};
use crate::diffusion::{ddim_sample, NoiseSchedule, SamplerConfig};
use crate::error::{CifeError, Result};
use crate::image::{contact_sheet, write_bytes, ImageRGB};
use crate::training::training_identities;

/// Fewest samples a condition may be graded on.
pub const MIN_SAMPLES: usize = 32;
pub const CHANCE: f64 = 1.0 / HUE_BINS as f64;
/// Samples denoised together on one tape.
const SAMPLE_CHUNK: usize = 8;

/// Sampling parameters shared by every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub n_samples: usize,
    pub seed: u64,
    pub steps: usize,
    pub caption: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_samples: 64,
            seed: 1,
            steps: 20,
            caption: neutral_caption(),
        }
    }
}

impl EvalSettings {
    fn validate(&self) -> Result<()> {
        if self.n_samples < MIN_SAMPLES {
            return Err(CifeError::Eval(format!(
                "{} samples per condition requested; at least {MIN_SAMPLES} are required",
                self.n_samples
            )));
        }
        Ok(())
    }

    fn echo(&self, characters: &[Identity]) -> BTreeMap<String, String> {
        let ids: Vec<String> = characters.iter().map(|c| c.id().to_string()).collect();
        BTreeMap::from([
            ("n_samples".into(), self.n_samples.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("caption".into(), self.caption.clone()),
            ("characters".into(), ids.join(",")),
        ])
    }
}

/// Identities outside `exclude`, spread over distinct hue bins where possible.
pub fn held_out_characters(count: usize, seed: u64, exclude: &[Identity]) -> Result<Vec<Identity>> {
    sample_identities(count, seed, "eval.held_out", exclude)
}

/// Grading of one (character, condition) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub character_id: usize,
    pub target_hue: u8,
    pub encoder: bool,
    pub backbone_sha256: String,
    pub count: usize,
    pub hits: usize,
    /// Samples with too few coloured pixels to grade; counted as misses.
    pub ungraded: usize,
    pub accuracy: f64,
    pub p_value: f64,
    pub diversity: f64,
    pub hue_histogram: [usize; HUE_BINS],
}

/// Totals over all conditions of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub count: usize,
    pub hits: usize,
    pub accuracy: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub chance: f64,
    pub conditions: Vec<ConditionReport>,
    pub pooled: Pooled,
    pub encoder_sha256: Option<String>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    fn new(kind: &str, conditions: Vec<ConditionReport>, encoder_sha256: Option<String>, config: BTreeMap<String, String>) -> Self {
        let count = conditions.iter().map(|c| c.count).sum();
        let hits = conditions.iter().map(|c| c.hits).sum();
        EvalReport {
            kind: kind.into(),
            chance: CHANCE,
            pooled: Pooled {
                count,
                hits,
                accuracy: ratio(hits, count),
                p_value: binomial_pvalue(hits, count, CHANCE),
            },
            conditions,
            encoder_sha256,
            config,
        }
    }
}

/// A report plus the graded images, one group per condition.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub samples: Vec<(String, Vec<ImageRGB>)>,
}

impl EvalRun {
    /// Writes `eval.json` and one contact sheet per condition into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_report(dir, &self.report)?;
        write_sheets(dir, &self.samples)
    }
}

/// The same encoder graded against two backbones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub backbone_a_sha256: String,
    pub backbone_b_sha256: String,
    pub backbone_a: EvalReport,
    pub backbone_b: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TransferRun {
    pub report: TransferReport,
    pub samples: Vec<(String, Vec<ImageRGB>)>,
}

impl TransferRun {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_report(dir, &self.report)?;
        write_sheets(dir, &self.samples)
    }
}

fn write_report<R: Serialize>(dir: &Path, report: &R) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_bytes(&dir.join("eval.json"), json.as_bytes())
}

fn write_sheets(dir: &Path, samples: &[(String, Vec<ImageRGB>)]) -> Result<()> {
    for (label, images) in samples {
        write_bytes(&dir.join(format!("{label}.png")), &contact_sheet(images, 8))?;
    }
    Ok(())
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn repeat_rows(t: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    let row = t.outer(0);
    Ok(Tensor::stack(&vec![row; n])?)
}

/// Samples `n` images for one caption, optionally conditioned on a reference image.
///
/// Image `j` starts from initial noise index `first_index + j`, so the same
/// indices with and without an encoder share their starting latents.
pub fn generate(
    backbone: &Backbone,
    encoder: Option<(&CharacterEncoder, &ImageRGB)>,
    caption: &str,
    n: usize,
    first_index: u64,
    seed: u64,
    steps: usize,
) -> Result<Vec<ImageRGB>> {
    let clip = backbone.text_encode(&[caption])?;
    let cond = match encoder {
        Some((enc, reference)) => enc.condition(&clip, std::slice::from_ref(reference))?,
        None => clip,
    };
    let sched = NoiseSchedule::default();
    let cfg = SamplerConfig { steps, eta: 0.0, seed };
    let starts: Vec<usize> = (0..n).step_by(SAMPLE_CHUNK).collect();
    let parts: Vec<Result<Vec<ImageRGB>>> = starts
        .par_iter()
        .map(|&s| {
            let len = SAMPLE_CHUNK.min(n - s);
            let latents = ddim_sample(backbone, &repeat_rows(&cond, len)?, &cfg, &sched, first_index + s as u64)?;
            backbone.decode_diffusion_latents(&latents)
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn grade(images: &[ImageRGB], character: &Identity, encoder: bool, backbone_sha256: String) -> ConditionReport {
    let probe = IdentityProbe::default();
    let mut hist = [0usize; HUE_BINS];
    let mut ungraded = 0;
    for img in images {
        match probe.classify(img).hue_bin {
            Some(h) => hist[h as usize] += 1,
            None => ungraded += 1,
        }
    }
    let hits = hist[character.body_hue as usize];
    ConditionReport {
        character_id: character.id(),
        target_hue: character.body_hue,
        encoder,
        backbone_sha256,
        count: images.len(),
        hits,
        ungraded,
        accuracy: ratio(hits, images.len()),
        p_value: binomial_pvalue(hits, images.len(), CHANCE),
        diversity: mean_pairwise_diversity(images),
        hue_histogram: hist,
    }
}

fn check_held_out(encoder: &CharacterEncoder, characters: &[Identity]) -> Result<()> {
    let trained = training_identities(&encoder.provenance)?;
    let overlap: Vec<usize> = characters.iter().map(Identity::id).filter(|id| trained.contains(id)).collect();
    if !overlap.is_empty() {
        return Err(CifeError::Eval(format!(
            "characters {overlap:?} were in the encoder's training set; identity evaluation needs held-out characters"
        )));
    }
    if characters.is_empty() {
        return Err(CifeError::Eval("no characters to evaluate".into()));
    }
    Ok(())
}

fn identity_conditions(
    encoder: &CharacterEncoder,
    backbone: &Backbone,
    characters: &[Identity],
    settings: &EvalSettings,
    tag: &str,
) -> Result<(Vec<ConditionReport>, Vec<(String, Vec<ImageRGB>)>)> {
    let hash = backbone.hashes().combined();
    let mut reports = Vec::new();
    let mut samples = Vec::new();
    for (ci, ch) in characters.iter().enumerate() {
        let reference = appearance_sample(*ch, 0).image;
        let first = (ci * settings.n_samples) as u64;
        let images = generate(
            backbone,
            Some((encoder, &reference)),
            &settings.caption,
            settings.n_samples,
            first,
            settings.seed,
            settings.steps,
        )?;
        reports.push(grade(&images, ch, true, hash.clone()));
        samples.push((format!("{tag}character_{:03}", ch.id()), images));
    }
    Ok((reports, samples))
}

/// Samples each held-out character through the encoder and grades body hue.
pub fn eval_identity(
    encoder: &CharacterEncoder,
    backbone: &Backbone,
    characters: &[Identity],
    settings: &EvalSettings,
) -> Result<EvalRun> {
    settings.validate()?;
    check_held_out(encoder, characters)?;
    let (conditions, samples) = identity_conditions(encoder, backbone, characters, settings, "")?;
    let report = EvalReport::new("identity", conditions, Some(encoder.sha256()), settings.echo(characters));
    Ok(EvalRun { report, samples })
}

/// Samples without character rows, reusing the identity run's noise indices,
/// and grades the result against each target character.
pub fn eval_control(backbone: &Backbone, characters: &[Identity], settings: &EvalSettings) -> Result<EvalRun> {
    settings.validate()?;
    if characters.is_empty() {
        return Err(CifeError::Eval("no target characters for the control".into()));
    }
    let hash = backbone.hashes().combined();
    let mut conditions = Vec::new();
    let mut samples = Vec::new();
    for (ci, ch) in characters.iter().enumerate() {
        let first = (ci * settings.n_samples) as u64;
        let images = generate(backbone, None, &settings.caption, settings.n_samples, first, settings.seed, settings.steps)?;
        conditions.push(grade(&images, ch, false, hash.clone()));
        samples.push((format!("control_{:03}", ch.id()), images));
    }
    let report = EvalReport::new("control", conditions, None, settings.echo(characters));
    Ok(EvalRun { report, samples })
}

/// Grades one encoder against two different backbones.
pub fn eval_transfer(
    encoder: &CharacterEncoder,
    backbone_a: &Backbone,
    backbone_b: &Backbone,
    characters: &[Identity],
    settings: &EvalSettings,
) -> Result<TransferRun> {
    settings.validate()?;
    let (ha, hb) = (backbone_a.hashes().combined(), backbone_b.hashes().combined());
    if ha == hb {
        return Err(CifeError::Eval(
            "both backbones have the same hash; a transfer test needs two different backbones".into(),
        ));
    }
    check_held_out(encoder, characters)?;
    let echo = settings.echo(characters);
    let (ca, mut samples) = identity_conditions(encoder, backbone_a, characters, settings, "a_")?;
    let (cb, sb) = identity_conditions(encoder, backbone_b, characters, settings, "b_")?;
    samples.extend(sb);
    let sha = Some(encoder.sha256());
    Ok(TransferRun {
        report: TransferReport {
            backbone_a_sha256: ha,
            backbone_b_sha256: hb,
            backbone_a: EvalReport::new("identity", ca, sha.clone(), echo.clone()),
            backbone_b: EvalReport::new("identity", cb, sha, echo),
        },
        samples,
    })
}

/// Mean over paired images of the per-pixel mean RGB distance.
pub fn mean_paired_distance(a: &[ImageRGB], b: &[ImageRGB]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CifeError::Eval(format!("cannot pair {} images with {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.mean_pixel_distance(y)).sum::<f64>() / a.len() as f64)
}
