//! The resolved configuration of a run, persisted into every run directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sr::{SrModelConfig, SrOptions};
use crate::training::TrainConfig;
use crate::vdvae::{DecodeMode, ModelConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub temperature: f64,
    /// Border shave; the scale factor when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shave: Option<usize>,
    pub seed: u64,
    /// LR patch size for patchwise inference; the model's LR size when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    pub overlap: usize,
    pub decode: DecodeMode,
    pub temps: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            shave: None,
            seed: 0,
            patch_size: None,
            overlap: 0,
            decode: DecodeMode::Mean,
            temps: vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sr: SrOptions,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_toml(&text)
    }

    /// Write `run_config.toml` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_CONFIG_FILE), self.to_toml()?)?;
        Ok(())
    }

    /// Apply `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to bare strings; unknown keys are rejected.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form section.key=value")))?;
            let value = parse_value(raw.trim());
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().expect("split yields one item");
            let mut table = &mut root;
            for k in parents {
                table = table
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{path}: {k} is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        *self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn sr_config(&self) -> SrModelConfig {
        SrModelConfig::new(self.model.clone(), self.sr)
    }

    pub fn shave(&self) -> usize {
        self.eval.shave.unwrap_or(self.sr.scale_factor)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sr_config().validate()?;
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.temperature) {
            return Err(Error::Config(format!("eval.temperature {} outside [0, 1]", e.temperature)));
        }
        if let Some(p) = e.patch_size {
            if e.overlap >= p {
                return Err(Error::Config(format!("eval.overlap {} must be below patch_size {p}", e.overlap)));
            }
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sr::ConditionMode;

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.sr.condition_mode = ConditionMode::PosteriorOnly;
        cfg.train.ema_decay = Some(0.999);
        cfg.eval.shave = Some(2);
        cfg.eval.patch_size = Some(8);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(RunConfig::from_toml("[model]\nwidht = 3\n").is_err());
        assert!(RunConfig::from_toml("[extra]\n").is_err());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = RunConfig::from_toml("[train]\nmax_steps = 7\n[sr]\ncondition_mode = \"posterior_only\"\n").unwrap();
        assert_eq!(cfg.train.max_steps, 7);
        assert_eq!(cfg.sr.scale_factor, 4);
        assert_eq!(cfg.sr.condition_mode, ConditionMode::PosteriorOnly);
        assert_eq!(cfg.model, ModelConfig::toy32());
        assert_eq!(cfg.shave(), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_reach_every_section() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "train.learning_rate=0.001",
            "train.ema_decay = 0.99",
            "sr.condition_mode=posterior_only",
            "model.resolutions=[4, 8, 16, 32]",
            "model.z_channels=[2,2,2,2]",
            "eval.temps=[0.5]",
        ])
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.ema_decay, Some(0.99));
        assert_eq!(cfg.sr.condition_mode, ConditionMode::PosteriorOnly);
        assert_eq!(cfg.model.resolutions, vec![4, 8, 16, 32]);
        assert_eq!(cfg.eval.temps, vec![0.5]);
        let before = cfg.clone();
        assert!(cfg.apply_overrides(&["train.nope=1"]).is_err());
        assert!(cfg.apply_overrides(&["train.max_steps"]).is_err());
        assert!(cfg.apply_overrides(&["train.max_steps=many"]).is_err());
        assert_eq!(cfg, before);
    }

    #[test]
    fn save_and_load() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        cfg.save(tmp.path()).unwrap();
        assert_eq!(RunConfig::load(tmp.path().join(RUN_CONFIG_FILE)).unwrap(), cfg);
        assert!(matches!(RunConfig::load(tmp.path().join("nope.toml")), Err(Error::NotFound(_))));
    }
}
