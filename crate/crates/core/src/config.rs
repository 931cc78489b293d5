//! Run configuration: per-dataset presets, a flat `key = value` file format and
//! flag overrides, applied in that order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Activation;
use crate::objectives::{HyperParams, Similarity};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: invalid value `{value}` for `{key}`: {reason}")]
    BadValue {
        origin: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{origin}: expected `key = value`")]
    Syntax { origin: String },
    #[error("cannot read config {0}: {1}")]
    Read(PathBuf, String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Book,
    Movie,
    Music,
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Book => "book",
            Preset::Movie => "movie",
            Preset::Music => "music",
            Preset::Custom => "custom",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Preset::Book, Preset::Movie, Preset::Music, Preset::Custom]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Preset,
    pub interactions: Option<PathBuf>,
    pub kg: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    /// Ratings at or above this are positives; `None` treats every row as positive.
    pub rating_threshold: Option<f64>,
    pub split: (f64, f64, f64),
    pub out_dir: PathBuf,
    pub hp: HyperParams,
    pub max_epochs: usize,
    pub patience: usize,
    pub lazy_adam: bool,
    /// Resample every graph each epoch; otherwise build them once.
    pub resample_graphs: bool,
}

impl RunConfig {
    /// Defaults of a dataset preset. The named presets point at
    /// `<name>/ratings_final.txt` and `<name>/kg_final.txt`, whose third
    /// column is a 0/1 label.
    pub fn preset(p: Preset) -> Self {
        let hp = match p {
            Preset::Book => HyperParams::book(),
            Preset::Movie => HyperParams::movie(),
            Preset::Music | Preset::Custom => HyperParams::music(),
        };
        let (interactions, kg, threshold) = match p {
            Preset::Custom => (None, None, None),
            _ => (
                Some(PathBuf::from(format!("{}/ratings_final.txt", p.name()))),
                Some(PathBuf::from(format!("{}/kg_final.txt", p.name()))),
                Some(1.0),
            ),
        };
        RunConfig {
            dataset: p,
            interactions,
            kg,
            alignment: None,
            rating_threshold: threshold,
            split: (0.6, 0.2, 0.2),
            out_dir: PathBuf::from(format!("runs/{}", p.name())),
            hp,
            max_epochs: 100,
            patience: 5,
            lazy_adam: true,
            resample_graphs: true,
        }
    }

    /// Builds a configuration from ordered `(origin, key, value)` settings:
    /// the preset named by the last `dataset` entry, then every entry in order.
    pub fn from_settings(settings: &[(String, String, String)]) -> Result<Self, ConfigError> {
        let mut preset = Preset::Music;
        for (origin, key, value) in settings {
            if key == "dataset" {
                preset = Preset::parse(value).ok_or_else(|| bad(origin, key, value, "expected book, movie, music or custom"))?;
            }
        }
        let mut cfg = RunConfig::preset(preset);
        for (origin, key, value) in settings {
            cfg.set(origin, key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, origin: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let hp = &mut self.hp;
        match key {
            "dataset" => {}
            "interactions" => self.interactions = opt_path(value),
            "kg" => self.kg = opt_path(value),
            "alignment" => self.alignment = opt_path(value),
            "rating_threshold" => {
                self.rating_threshold = match value {
                    "none" => None,
                    v => Some(num(origin, key, v)?),
                }
            }
            "split" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(bad(origin, key, value, "expected three comma-separated ratios"));
                }
                self.split = (num(origin, key, parts[0])?, num(origin, key, parts[1])?, num(origin, key, parts[2])?);
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "L" => hp.depth = positive(origin, key, value)?,
            "J" => hp.negative_layers = positive(origin, key, value)?,
            "tau" => {
                hp.tau = num(origin, key, value)?;
                if hp.tau.is_nan() || hp.tau <= 0.0 {
                    return Err(bad(origin, key, value, "must be positive"));
                }
            }
            "alpha" => hp.alpha = num(origin, key, value)?,
            "lambda1" => hp.lambda1 = num(origin, key, value)?,
            "lambda2" => hp.lambda2 = num(origin, key, value)?,
            "eta" => hp.eta = num(origin, key, value)?,
            "dim" => hp.dim = positive(origin, key, value)?,
            "batch_size" => hp.batch_size = positive(origin, key, value)?,
            "local_size" => hp.local_size = positive(origin, key, value)?,
            "nonlocal_size" => hp.nonlocal_size = positive(origin, key, value)?,
            "seed" => hp.seed = num(origin, key, value)?,
            "activation" => {
                hp.activation = match value {
                    "relu" => Activation::Relu,
                    "leaky_relu" => Activation::LeakyRelu,
                    _ => return Err(bad(origin, key, value, "expected relu or leaky_relu")),
                }
            }
            "similarity" => {
                hp.similarity = match value {
                    "dot" => Similarity::Dot,
                    "cosine" => Similarity::Cosine,
                    _ => return Err(bad(origin, key, value, "expected dot or cosine")),
                }
            }
            "symmetric_inter" => hp.symmetric_inter = boolean(origin, key, value)?,
            "l2_full" => hp.l2_full = boolean(origin, key, value)?,
            "disable_intra" => hp.ablation.disable_intra = boolean(origin, key, value)?,
            "disable_inter" => hp.ablation.disable_inter = boolean(origin, key, value)?,
            "disable_nonlocal" => hp.ablation.disable_nonlocal = boolean(origin, key, value)?,
            "max_epochs" => self.max_epochs = num(origin, key, value)?,
            "patience" => self.patience = positive(origin, key, value)?,
            "adam" => {
                self.lazy_adam = match value {
                    "lazy" => true,
                    "dense" => false,
                    _ => return Err(bad(origin, key, value, "expected lazy or dense")),
                }
            }
            "graphs" => {
                self.resample_graphs = match value {
                    "resample" => true,
                    "frozen" => false,
                    _ => return Err(bad(origin, key, value, "expected resample or frozen")),
                }
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    origin: origin.to_string(),
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every setting in config-file syntax. Parsing the output reproduces `self`.
    pub fn to_cfg(&self) -> String {
        let hp = &self.hp;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", self.dataset.name().into());
        kv("interactions", path(&self.interactions));
        kv("kg", path(&self.kg));
        kv("alignment", path(&self.alignment));
        kv("rating_threshold", self.rating_threshold.map_or("none".into(), |t| t.to_string()));
        kv("split", format!("{},{},{}", self.split.0, self.split.1, self.split.2));
        kv("out_dir", self.out_dir.display().to_string());
        kv("L", hp.depth.to_string());
        kv("J", hp.negative_layers.to_string());
        kv("tau", hp.tau.to_string());
        kv("alpha", hp.alpha.to_string());
        kv("lambda1", hp.lambda1.to_string());
        kv("lambda2", hp.lambda2.to_string());
        kv("eta", hp.eta.to_string());
        kv("dim", hp.dim.to_string());
        kv("batch_size", hp.batch_size.to_string());
        kv("local_size", hp.local_size.to_string());
        kv("nonlocal_size", hp.nonlocal_size.to_string());
        kv("seed", hp.seed.to_string());
        kv(
            "activation",
            match hp.activation {
                Activation::Relu => "relu",
                Activation::LeakyRelu => "leaky_relu",
            }
            .into(),
        );
        kv(
            "similarity",
            match hp.similarity {
                Similarity::Dot => "dot",
                Similarity::Cosine => "cosine",
            }
            .into(),
        );
        kv("symmetric_inter", hp.symmetric_inter.to_string());
        kv("l2_full", hp.l2_full.to_string());
        kv("disable_intra", hp.ablation.disable_intra.to_string());
        kv("disable_inter", hp.ablation.disable_inter.to_string());
        kv("disable_nonlocal", hp.ablation.disable_nonlocal.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("adam", if self.lazy_adam { "lazy" } else { "dense" }.into());
        kv("graphs", if self.resample_graphs { "resample" } else { "frozen" }.into());
        s
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (v != "none").then(|| PathBuf::from(v))
}

fn bad(origin: &str, key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        origin: origin.to_string(),
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn num<T: std::str::FromStr>(origin: &str, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| bad(origin, key, v, "not a number"))
}

fn positive(origin: &str, key: &str, v: &str) -> Result<usize, ConfigError> {
    match num::<usize>(origin, key, v)? {
        0 => Err(bad(origin, key, v, "must be at least 1")),
        n => Ok(n),
    }
}

fn boolean(origin: &str, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(origin, key, v, "expected true or false")),
    }
}

/// Parses config text into `(origin, key, value)` settings. `#` starts a comment.
pub fn parse_cfg(text: &str, source: &Path) -> Result<Vec<(String, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = format!("{}:{}", source.display(), i + 1);
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { origin: origin.clone() })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { origin });
        }
        out.push((origin, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_cfg(path: &Path) -> Result<Vec<(String, String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e.to_string()))?;
    parse_cfg(&text, path)
}
