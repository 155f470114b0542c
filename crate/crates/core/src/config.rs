//! Flat `key = value` experiment configuration.
//!
//! Every [`SimConfig`] and [`TrainConfig`] field is a key of the same name,
//! plus `seeds` (number of paired seeds). Blank lines and `#` comments are
//! ignored, missing keys keep their defaults, unknown or repeated keys are
//! errors. [`ExperimentConfig::render`] writes every key, and parsing the
//! rendered text gives back an identical config.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sim::SimConfig;
use crate::train::{TrainConfig, VarianceTarget};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            seeds: 10,
        }
    }
}

pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.txt";

fn value<T: FromStr>(raw: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| format!("bad value `{raw}`: {e}"))
}

macro_rules! keys {
    ($($section:ident . $field:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($field)),*];

        fn set(cfg: &mut ExperimentConfig, key: &str, raw: &str) -> std::result::Result<(), String> {
            match key {
                "seeds" => cfg.seeds = value(raw)?,
                $(stringify!($field) => cfg.$section.$field = value(raw)?,)*
                _ => return Err(format!("unknown key `{key}`")),
            }
            Ok(())
        }

        fn render_fields(cfg: &ExperimentConfig, out: &mut String) {
            $(writeln!(out, "{} = {}", stringify!($field), Field(&cfg.$section.$field)).unwrap();)*
        }
    };
}

keys!(
    sim.height,
    sim.width,
    sim.channels,
    sim.objects_min,
    sim.objects_max,
    sim.object_size_min,
    sim.object_size_max,
    sim.amplitude,
    sim.spread,
    sim.noise,
    sim.anchor_base,
    sim.fg_iou,
    sim.bg_iou,
    sim.hard_bg_iou,
    sim.hard_fg_iou,
    train.learning_rate,
    train.momentum,
    train.weight_decay,
    train.lr_decay_every,
    train.lr_decay_factor,
    train.epochs,
    train.steps_per_epoch,
    train.alpha,
    train.epsilon,
    train.th,
    train.r,
    train.variance_target,
    train.probanet_enabled,
    train.seed,
    train.scenes_per_batch,
    train.batch_size,
    train.max_fg,
    train.eval_scenes,
);

/// Display adapter so every field type renders in its parseable form.
struct Field<'a, T>(&'a T);

impl std::fmt::Display for Field<'_, VarianceTarget> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.as_str())
    }
}

macro_rules! display_field {
    ($($t:ty),*) => {$(
        impl std::fmt::Display for Field<'_, $t> {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    )*};
}

display_field!(usize, u64, f64, bool);

impl ExperimentConfig {
    /// All accepted keys, in render order.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        std::iter::once("seeds").chain(KEYS.iter().copied())
    }

    /// Parses and validates `text`; `origin` labels error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let err = |message: String| Error::ConfigParse {
                path: origin.to_string(),
                line: n + 1,
                message,
            };
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            set(&mut cfg, key, raw).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train.validate()?;
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn render(&self) -> String {
        let mut out = format!("seeds = {}\n", self.seeds);
        render_fields(self, &mut out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
