//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cife_core::dataset::DatasetParams;
use cife_core::diffusion::SamplerConfig;
use cife_core::evaluation::EvalSettings;
use cife_core::training::TrainConfig;

use crate::error::CliError;

/// Environment variable that replaces every built-in default seed.
pub const SEED_ENV: &str = "CIFE_SEED";

pub const KEYS: &[&str] = &[
    "dataset.characters",
    "dataset.c_per",
    "dataset.f_per",
    "dataset.seed",
    "train.learning_rate",
    "train.batch_size",
    "train.total_steps",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.kl_weight",
    "train.seed",
    "freeze.vae",
    "freeze.text_encoder",
    "freeze.unet",
    "freeze.character_encoder",
    "freeze.mixer",
    "freeze.ae_decoder",
    "sampler.steps",
    "sampler.eta",
    "sampler.seed",
    "eval.n_samples",
    "eval.held_out",
    "eval.seed",
    "eval.steps",
];

/// Overrides read from a config file, the environment and flags.
///
/// Precedence, highest first: flags, config file, `CIFE_SEED` (seed keys only), built-in defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    env_seed: Option<u64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(CliError::usage(format!("config line {}: unknown key `{k}`", n + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::usage(format!("config line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(RunConfig { values, env_seed: None })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        Ok(cfg)
    }

    /// Applies a flag value; flags always win.
    pub fn set(&mut self, key: &str, value: Option<impl ToString>) {
        debug_assert!(KEYS.contains(&key), "{key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.values.get(key) {
            Some(v) => v
                .parse()
                .map_err(|_| CliError::usage(format!("config key `{key}`: cannot parse `{v}`"))),
            None => Ok(default),
        }
    }

    fn seed(&self, key: &str, default: u64) -> Result<u64, CliError> {
        self.get(key, self.env_seed.unwrap_or(default))
    }

    pub fn dataset(&self) -> Result<DatasetParams, CliError> {
        let d = DatasetParams::default();
        Ok(DatasetParams {
            characters: self.get("dataset.characters", d.characters)?,
            c_per: self.get("dataset.c_per", d.c_per)?,
            f_per: self.get("dataset.f_per", d.f_per)?,
            seed: self.seed("dataset.seed", d.seed)?,
        })
    }

    /// Resolves training settings on top of a command's defaults.
    pub fn train(&self, base: TrainConfig) -> Result<TrainConfig, CliError> {
        let f = base.freeze;
        let mut c = TrainConfig {
            learning_rate: self.get("train.learning_rate", base.learning_rate)?,
            batch_size: self.get("train.batch_size", base.batch_size)?,
            total_steps: self.get("train.total_steps", base.total_steps)?,
            beta1: self.get("train.beta1", base.beta1)?,
            beta2: self.get("train.beta2", base.beta2)?,
            epsilon: self.get("train.epsilon", base.epsilon)?,
            kl_weight: self.get("train.kl_weight", base.kl_weight)?,
            seed: self.seed("train.seed", base.seed)?,
            ..base
        };
        c.freeze.vae = self.get("freeze.vae", f.vae)?;
        c.freeze.text_encoder = self.get("freeze.text_encoder", f.text_encoder)?;
        c.freeze.unet = self.get("freeze.unet", f.unet)?;
        c.freeze.character_encoder = self.get("freeze.character_encoder", f.character_encoder)?;
        c.freeze.mixer = self.get("freeze.mixer", f.mixer)?;
        c.freeze.ae_decoder = self.get("freeze.ae_decoder", f.ae_decoder)?;
        c.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(c)
    }

    pub fn sampler(&self) -> Result<SamplerConfig, CliError> {
        let d = SamplerConfig::default();
        Ok(SamplerConfig {
            steps: self.get("sampler.steps", d.steps)?,
            eta: self.get("sampler.eta", d.eta)?,
            seed: self.seed("sampler.seed", d.seed)?,
        })
    }

    pub fn eval(&self) -> Result<(EvalSettings, usize), CliError> {
        let d = EvalSettings::default();
        let settings = EvalSettings {
            n_samples: self.get("eval.n_samples", d.n_samples)?,
            seed: self.seed("eval.seed", d.seed)?,
            steps: self.get("eval.steps", d.steps)?,
            caption: d.caption,
        };
        Ok((settings, self.get("eval.held_out", 2)?))
    }
}

/// Renders resolved settings as a config file that parses back to the same values.
#[derive(Debug, Default)]
pub struct Resolved {
    lines: BTreeMap<String, String>,
}

impl Resolved {
    pub fn dataset(mut self, d: &DatasetParams) -> Self {
        self.put("dataset.characters", d.characters);
        self.put("dataset.c_per", d.c_per);
        self.put("dataset.f_per", d.f_per);
        self.put("dataset.seed", d.seed);
        self
    }

    pub fn train(mut self, c: &TrainConfig) -> Self {
        self.put("train.learning_rate", c.learning_rate);
        self.put("train.batch_size", c.batch_size);
        self.put("train.total_steps", c.total_steps);
        self.put("train.beta1", c.beta1);
        self.put("train.beta2", c.beta2);
        self.put("train.epsilon", c.epsilon);
        self.put("train.kl_weight", c.kl_weight);
        self.put("train.seed", c.seed);
        self.put("freeze.vae", c.freeze.vae);
        self.put("freeze.text_encoder", c.freeze.text_encoder);
        self.put("freeze.unet", c.freeze.unet);
        self.put("freeze.character_encoder", c.freeze.character_encoder);
        self.put("freeze.mixer", c.freeze.mixer);
        self.put("freeze.ae_decoder", c.freeze.ae_decoder);
        self
    }

    pub fn sampler(mut self, s: &SamplerConfig) -> Self {
        self.put("sampler.steps", s.steps);
        self.put("sampler.eta", s.eta);
        self.put("sampler.seed", s.seed);
        self
    }

    pub fn eval(mut self, s: &EvalSettings, held_out: usize) -> Self {
        self.put("eval.n_samples", s.n_samples);
        self.put("eval.held_out", held_out);
        self.put("eval.seed", s.seed);
        self.put("eval.steps", s.steps);
        self
    }

    fn put(&mut self, key: &str, v: impl ToString) {
        self.lines.insert(key.to_string(), v.to_string());
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        crate::write_file(&dir.join("config.txt"), self.render().as_bytes())
    }
}
