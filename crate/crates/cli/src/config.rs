//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use hyfuse_core::data::ImageSpec;
use hyfuse_core::encoders::{Ablation, ModelConfig};
use hyfuse_core::training_eval::{TrainConfig, TrainTask};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, CliResult};

/// Keys only meaningful inside a manifest; accepted and ignored when a
/// manifest is read back as a config file.
pub const MANIFEST_KEYS: [&str; 4] = ["command", "timestamp", "config_hash", "inputs"];

/// Every effective setting of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Runs averaged in low-resource mode; seeds are `seed, seed+1, ...`.
    pub seeds: usize,
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// `test`, `valid` or `train`; unset picks the first split present in that order.
    pub eval_split: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: 1,
            data_dir: None,
            output_dir: None,
            eval_split: None,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str, path: &Path) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Core(hyfuse_core::Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            }));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{key}`")))
}

fn flag(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        for (k, v) in parse_pairs(&text, path)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "task" => t.task = TrainTask::parse(v).map_err(|e| CliError::Usage(e.to_string()))?,
            "seed" => t.seed = num(key, v)?,
            "seeds" => self.seeds = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "entity_epochs" => t.entity_epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "entity_phase" => t.entity_phase = flag(key, v)?,
            "triple_phase" => t.triple_phase = flag(key, v)?,
            "freeze" => {
                t.freeze = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "k_shot" => t.k_shot = if v.is_empty() || v == "none" { None } else { Some(num(key, v)?) },
            "ablation" => {
                let a = Ablation::parse(v).map_err(|e| CliError::Usage(e.to_string()))?;
                t.ablation = a;
                m.ablation = a;
            }
            "d" => m.d = num(key, v)?,
            "heads" => m.heads = num(key, v)?,
            "d_m" => m.d_m = num(key, v)?,
            "text_layers" => m.text_layers = num(key, v)?,
            "vision_layers" => m.vision_layers = num(key, v)?,
            "lm_layers" => m.fusion_layers = num(key, v)?,
            "image_height" => m.image_h = num(key, v)?,
            "image_width" => m.image_w = num(key, v)?,
            "image_channels" => m.image_c = num(key, v)?,
            "patch" => m.patch = num(key, v)?,
            "images" => m.images = num(key, v)?,
            "max_len" => m.max_len = num(key, v)?,
            "ln_eps" => m.ln_eps = num(key, v)?,
            "init_std" => m.init_std = num(key, v)?,
            "data_dir" => self.data_dir = opt_path(v),
            "output_dir" => self.output_dir = opt_path(v),
            "eval_split" => {
                self.eval_split = match v {
                    "" => None,
                    "train" | "valid" | "test" => Some(v.to_string()),
                    _ => return Err(CliError::Usage(format!("eval_split must be train, valid or test, not `{v}`"))),
                }
            }
            k if MANIFEST_KEYS.contains(&k) => {}
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every setting with defaults materialised, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let (m, t) = (&self.model, &self.train);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("task", t.task.as_str().to_string()),
            ("seed", t.seed.to_string()),
            ("seeds", self.seeds.to_string()),
            ("epochs", t.epochs.to_string()),
            ("entity_epochs", t.entity_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("entity_phase", t.entity_phase.to_string()),
            ("triple_phase", t.triple_phase.to_string()),
            ("freeze", t.freeze.join(",")),
            ("k_shot", t.k_shot.map(|k| k.to_string()).unwrap_or_else(|| "none".into())),
            ("ablation", m.ablation.as_str().to_string()),
            ("d", m.d.to_string()),
            ("heads", m.heads.to_string()),
            ("d_m", m.d_m.to_string()),
            ("text_layers", m.text_layers.to_string()),
            ("vision_layers", m.vision_layers.to_string()),
            ("lm_layers", m.fusion_layers.to_string()),
            ("image_height", m.image_h.to_string()),
            ("image_width", m.image_w.to_string()),
            ("image_channels", m.image_c.to_string()),
            ("patch", m.patch.to_string()),
            ("images", m.images.to_string()),
            ("max_len", m.max_len.to_string()),
            ("ln_eps", m.ln_eps.to_string()),
            ("init_std", m.init_std.to_string()),
            ("data_dir", path(&self.data_dir)),
            ("output_dir", path(&self.output_dir)),
            ("eval_split", self.eval_split.clone().unwrap_or_default()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn image_spec(&self) -> ImageSpec {
        ImageSpec {
            height: self.model.image_h,
            width: self.model.image_w,
            channels: self.model.image_c,
            count: self.model.images,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds == 0 {
            return Err(CliError::Usage("seeds must be at least 1".into()));
        }
        Ok(())
    }
}
