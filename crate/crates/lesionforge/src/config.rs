//! Declarative run configuration: `[section]` headers with `key = value`
//! lines and `#` comments. Defaults live in one schema table that also feeds
//! the CLI help text, so documentation cannot drift from validation.
//!
//! Precedence: built-in defaults, then the config file, then flag overrides.
//! The resolved configuration is serialized verbatim into each run directory.

use std::path::Path;

use indexmap::IndexMap;

use crate::data::AugmentSpec;
use crate::error::{Error, Result};
use crate::models::{DaeConfig, ResNetConfig};
use crate::trainer::{OptimizerKind, TrainConfig};

pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// Every recognized config key with its default. Unknown keys are rejected.
pub const CONFIG_SCHEMA: &[KeySpec] = &[
    KeySpec { section: "run", key: "seed", default: "42", help: "global RNG seed (fixed default keeps runs reproducible)" },
    KeySpec { section: "data", key: "source", default: "synth", help: "'synth' or a directory containing manifest.csv" },
    KeySpec { section: "data", key: "n_per_class", default: "100", help: "synthetic images per class when source = synth" },
    KeySpec { section: "data", key: "image_size", default: "32", help: "square image side for synthesis or resizing" },
    KeySpec { section: "data", key: "resize", default: "false", help: "bilinear-resize loaded images to image_size" },
    KeySpec { section: "data", key: "test_fraction", default: "0.2", help: "stratified test split fraction" },
    KeySpec { section: "data", key: "balance", default: "true", help: "oversample minority classes in the training split" },
    KeySpec { section: "data", key: "hflip", default: "0.5", help: "augmentation horizontal-flip probability" },
    KeySpec { section: "data", key: "vflip", default: "0.5", help: "augmentation vertical-flip probability" },
    KeySpec { section: "data", key: "rotate_deg", default: "20", help: "augmentation max rotation in degrees" },
    KeySpec { section: "data", key: "translate", default: "0.1", help: "augmentation max translation as a fraction of size" },
    KeySpec { section: "data", key: "normalize", default: "true", help: "standardize channels by training-split statistics" },
    KeySpec { section: "model", key: "preset", default: "tiny", help: "classifier preset: tiny or resnet101" },
    KeySpec { section: "model", key: "base_width", default: "0", help: "override stem width (0 = preset default)" },
    KeySpec { section: "model", key: "zero_init_residual", default: "false", help: "zero the last BN gamma of each bottleneck" },
    KeySpec { section: "dae", key: "channels", default: "16,8", help: "autoencoder encoder channel ladder" },
    KeySpec { section: "dae", key: "epochs", default: "20", help: "autoencoder training epochs" },
    KeySpec { section: "dae", key: "batch_size", default: "16", help: "autoencoder batch size" },
    KeySpec { section: "dae", key: "learning_rate", default: "0.001", help: "autoencoder Adam learning rate" },
    KeySpec { section: "train", key: "epochs", default: "100", help: "classifier training epochs" },
    KeySpec { section: "train", key: "batch_size", default: "16", help: "classifier batch size (>= 2)" },
    KeySpec { section: "train", key: "optimizer", default: "adam", help: "adam or sgd_momentum" },
    KeySpec { section: "train", key: "learning_rate", default: "0.001", help: "classifier learning rate" },
    KeySpec { section: "train", key: "momentum", default: "0.9", help: "sgd momentum coefficient" },
    KeySpec { section: "train", key: "beta1", default: "0.9", help: "adam beta1" },
    KeySpec { section: "train", key: "beta2", default: "0.999", help: "adam beta2" },
    KeySpec { section: "train", key: "weight_decay", default: "0", help: "L2 weight decay" },
    KeySpec { section: "train", key: "checkpoint_every", default: "0", help: "extra checkpoint cadence in epochs (0 = off)" },
    KeySpec { section: "eval", key: "gallery_n", default: "12", help: "cells in the prediction gallery" },
    KeySpec { section: "eval", key: "batch_size", default: "64", help: "evaluation batch size" },
    KeySpec { section: "eval", key: "phase_c_on_original", default: "false", help: "evaluate the retrained model on original (not reconstructed) test images" },
    KeySpec { section: "eval", key: "hybrid_union", default: "false", help: "retrain on original+reconstructed union instead of replacing" },
];

/// Help text generated from the schema (consumed by the CLI's --help).
pub fn schema_help() -> String {
    let mut out = String::from("Config keys (section.key = default):\n");
    let mut section = "";
    for k in CONFIG_SCHEMA {
        if k.section != section {
            section = k.section;
            out.push_str(&format!("  [{section}]\n"));
        }
        out.push_str(&format!(
            "    {}.{} = {}  ({})\n",
            k.section, k.key, k.default, k.help
        ));
    }
    out
}

/// A fully resolved configuration (raw strings, validated on typed access).
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: IndexMap<(String, String), String>,
}

fn parse_config_text(text: &str) -> Result<IndexMap<(String, String), String>> {
    let mut out = IndexMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        if section.is_empty() {
            return Err(Error::Config(format!(
                "line {}: key outside any [section]",
                lineno + 1
            )));
        }
        out.insert(
            (section.clone(), k.trim().to_string()),
            v.trim().to_string(),
        );
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, overlaid by an optional file, overlaid by `section.key=value`
    /// override strings. Unknown keys anywhere are rejected.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut values: IndexMap<(String, String), String> = CONFIG_SCHEMA
            .iter()
            .map(|k| ((k.section.to_string(), k.key.to_string()), k.default.to_string()))
            .collect();
        let known = |section: &str, key: &str| {
            CONFIG_SCHEMA
                .iter()
                .any(|k| k.section == section && k.key == key)
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
            for ((section, key), value) in parse_config_text(&text)? {
                if !known(&section, &key) {
                    return Err(Error::Config(format!(
                        "unknown config key '{section}.{key}'"
                    )));
                }
                values.insert((section, key), value);
            }
        }
        for ov in overrides {
            let (path, value) = ov.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{ov}' must look like section.key=value"))
            })?;
            let (section, key) = path.trim().split_once('.').ok_or_else(|| {
                Error::Config(format!("override key '{path}' must look like section.key"))
            })?;
            if !known(section, key) {
                return Err(Error::Config(format!("unknown config key '{section}.{key}'")));
            }
            values.insert(
                (section.to_string(), key.to_string()),
                value.trim().to_string(),
            );
        }
        let cfg = RunConfig { values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn default_config() -> RunConfig {
        Self::resolve(None, &[]).expect("defaults are valid")
    }

    fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(|s| s.as_str())
            .expect("schema keys are always present")
    }

    pub fn get_string(&self, section: &str, key: &str) -> String {
        self.raw(section, key).to_string()
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<usize> {
        self.raw(section, key)
            .parse()
            .map_err(|_| Error::Config(format!("{section}.{key} must be a non-negative integer")))
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<u64> {
        self.raw(section, key)
            .parse()
            .map_err(|_| Error::Config(format!("{section}.{key} must be a non-negative integer")))
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<f64> {
        self.raw(section, key)
            .parse()
            .map_err(|_| Error::Config(format!("{section}.{key} must be a number")))
    }

    pub fn get_bool(&self, section: &str, key: &str) -> Result<bool> {
        match self.raw(section, key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!(
                "{section}.{key} must be true or false, got '{other}'"
            ))),
        }
    }

    pub fn get_usize_list(&self, section: &str, key: &str) -> Result<Vec<usize>> {
        self.raw(section, key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{section}.{key} must be a comma list of integers")))
            })
            .collect()
    }

    /// Override one key in place (used by the CLI for --seed).
    pub fn set(&mut self, section: &str, key: &str, value: String) {
        self.values
            .insert((section.to_string(), key.to_string()), value);
    }

    fn validate(&self) -> Result<()> {
        // eager typed parses so config errors surface before any work starts
        self.seed()?;
        self.get_usize("data", "n_per_class")?;
        let sz = self.get_usize("data", "image_size")?;
        if sz < 8 {
            return Err(Error::Config("data.image_size must be at least 8".into()));
        }
        self.get_bool("data", "resize")?;
        let tf = self.get_f64("data", "test_fraction")?;
        if !(tf > 0.0 && tf < 1.0) {
            return Err(Error::Config("data.test_fraction must be in (0,1)".into()));
        }
        self.get_bool("data", "balance")?;
        self.get_bool("data", "normalize")?;
        self.augment_spec(0)?.validate()?;
        let preset = self.get_string("model", "preset");
        ResNetConfig::preset(&preset)?;
        self.get_usize("model", "base_width")?;
        self.get_bool("model", "zero_init_residual")?;
        self.get_usize_list("dae", "channels")?;
        for section in ["dae", "train"] {
            if self.get_usize(section, "epochs")? == 0 {
                return Err(Error::Config(format!("{section}.epochs must be >= 1")));
            }
        }
        self.train_config(0)?.validate()?;
        self.dae_train_config(0)?.validate()?;
        self.get_usize("eval", "gallery_n")?;
        if self.get_usize("eval", "batch_size")? == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        self.get_bool("eval", "phase_c_on_original")?;
        self.get_bool("eval", "hybrid_union")?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_u64("run", "seed")
    }

    pub fn augment_spec(&self, seed: u64) -> Result<AugmentSpec> {
        Ok(AugmentSpec {
            hflip_p: self.get_f64("data", "hflip")?,
            vflip_p: self.get_f64("data", "vflip")?,
            max_rotate_deg: self.get_f64("data", "rotate_deg")?,
            max_translate_frac: self.get_f64("data", "translate")?,
            seed,
        })
    }

    pub fn resnet_config(&self, input: (usize, usize, usize)) -> Result<ResNetConfig> {
        let mut cfg = ResNetConfig::preset(&self.get_string("model", "preset"))?;
        cfg.input = input;
        let width = self.get_usize("model", "base_width")?;
        if width > 0 {
            cfg.base_width = width;
        }
        cfg.zero_init_residual = self.get_bool("model", "zero_init_residual")?;
        Ok(cfg)
    }

    pub fn dae_config(&self, input: (usize, usize, usize)) -> Result<DaeConfig> {
        Ok(DaeConfig {
            input,
            encoder_channels: self.get_usize_list("dae", "channels")?,
        })
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get_usize("train", "epochs")?,
            batch_size: self.get_usize("train", "batch_size")?,
            optimizer: OptimizerKind::parse(&self.get_string("train", "optimizer"))?,
            learning_rate: self.get_f64("train", "learning_rate")?,
            momentum: self.get_f64("train", "momentum")?,
            beta1: self.get_f64("train", "beta1")?,
            beta2: self.get_f64("train", "beta2")?,
            weight_decay: self.get_f64("train", "weight_decay")?,
            seed,
            checkpoint_every: self.get_usize("train", "checkpoint_every")?,
        })
    }

    /// Autoencoder training config ([dae] keys; Adam, no weight decay).
    pub fn dae_train_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(seed);
        cfg.epochs = self.get_usize("dae", "epochs")?;
        cfg.batch_size = self.get_usize("dae", "batch_size")?;
        cfg.learning_rate = self.get_f64("dae", "learning_rate")?;
        Ok(cfg)
    }

    /// Serialized form, schema order, written to each run directory.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in CONFIG_SCHEMA {
            if k.section != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = k.section;
                out.push_str(&format!("[{section}]\n"));
            }
            out.push_str(&format!("{} = {}\n", k.key, self.raw(k.section, k.key)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DEFAULT_SEED;

    #[test]
    fn defaults_resolve_and_serialize() {
        let cfg = RunConfig::default_config();
        assert_eq!(cfg.seed().unwrap(), DEFAULT_SEED);
        let text = cfg.to_text();
        assert!(text.starts_with("[run]\nseed = 42\n"));
        assert!(text.contains("[train]\nepochs = 100\n"));
    }

    #[test]
    fn file_and_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(
            &p,
            "# comment\n[train]\nepochs = 7 # trailing comment\n[data]\nsource = /tmp/x\n",
        )
        .unwrap();
        let cfg = RunConfig::resolve(Some(&p), &["train.epochs=9".to_string()]).unwrap();
        assert_eq!(cfg.get_usize("train", "epochs").unwrap(), 9);
        assert_eq!(cfg.get_string("data", "source"), "/tmp/x");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "[train]\nepochz = 7\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(Some(&p), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, &["nope.key=1".to_string()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_values_fail_eagerly() {
        assert!(RunConfig::resolve(None, &["data.test_fraction=1.5".to_string()]).is_err());
        assert!(RunConfig::resolve(None, &["train.batch_size=1".to_string()]).is_err());
        assert!(RunConfig::resolve(None, &["model.preset=vgg".to_string()]).is_err());
    }

    #[test]
    fn help_text_covers_every_schema_key() {
        let help = schema_help();
        for k in CONFIG_SCHEMA {
            assert!(
                help.contains(&format!("{}.{} = {}", k.section, k.key, k.default)),
                "help must document {}.{}",
                k.section,
                k.key
            );
        }
    }
}
