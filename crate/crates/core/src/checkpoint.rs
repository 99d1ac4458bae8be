//! On-disk model format.
//!
//! A checkpoint is a directory holding `manifest.toml` and one raw
//! little-endian `f32` blob per tensor under `tensors/`. The manifest records
//! the format version, the model kind and configuration, and a
//! name/shape/dtype/file index of the blobs. Nothing time-dependent is
//! written, so saving the same parameters twice yields identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sr::{SrModel, SrModelConfig, SrOptions};
use crate::tensor::Tensor;
use crate::vdvae::{ModelConfig, Vdvae};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";
const DTYPE: &str = "f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Unconditional model.
    Base,
    /// Low-resolution-conditioned model.
    Sr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    kind: ModelKind,
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sr: Option<SrManifest>,
    #[serde(default)]
    tensor: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SrManifest {
    scale_factor: usize,
    condition_mode: crate::sr::ConditionMode,
    /// Informational; recomputed from the resolutions on load.
    lr_depth: usize,
}

/// Architecture plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub sr: Option<SrOptions>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn base(model: ModelConfig, params: ParamStore<f32>) -> Self {
        Self {
            kind: ModelKind::Base,
            model,
            sr: None,
            params,
        }
    }

    pub fn sr(config: &SrModelConfig, params: ParamStore<f32>) -> Self {
        Self {
            kind: ModelKind::Sr,
            model: config.base.clone(),
            sr: Some(config.options()),
            params,
        }
    }

    pub fn sr_config(&self) -> Option<SrModelConfig> {
        self.sr.map(|o| SrModelConfig::new(self.model.clone(), o))
    }

    /// Tensor names and shapes the recorded architecture expects.
    fn expected(&self) -> Result<ParamStore<f32>> {
        Ok(match self.kind {
            ModelKind::Base => Vdvae::new(self.model.clone())?.init_params(0),
            ModelKind::Sr => {
                let cfg = self
                    .sr_config()
                    .ok_or_else(|| Error::Checkpoint("sr checkpoint without [sr] block".into()))?;
                SrModel::new(cfg)?.init_params(0)
            }
        })
    }

    /// Names whose presence or shape disagrees with the architecture.
    pub fn structure_mismatches(&self) -> Result<Vec<String>> {
        let expected = self.expected()?;
        let mut bad: Vec<String> = expected
            .iter()
            .filter(|(n, t)| self.params.get(n).map(|p| p.shape() != t.shape()).unwrap_or(true))
            .map(|(n, _)| n.to_string())
            .collect();
        bad.extend(self.params.names().filter(|n| !expected.contains(n)).map(str::to_string));
        bad.sort();
        Ok(bad)
    }
}

fn blob_file(name: &str) -> String {
    format!("{name}.f32")
}

/// Write every tensor of `params` as a blob under `dir/subdir`.
pub fn write_tensors(dir: &Path, subdir: &str, params: &ParamStore<f32>) -> Result<Vec<TensorEntry>> {
    let root = dir.join(subdir);
    fs::create_dir_all(&root)?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("{subdir}/{}", blob_file(name));
        fs::write(dir.join(&file), bytes)?;
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            file,
        });
    }
    Ok(entries)
}

pub fn read_tensors(dir: &Path, entries: &[TensorEntry]) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for e in entries {
        if e.dtype != DTYPE {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        if store.contains(&e.name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| match err.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.clone()),
            _ => Error::Io(err),
        })?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: blob has {} bytes, shape {:?} needs {}",
                e.name,
                bytes.len(),
                e.shape,
                n * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data));
    }
    Ok(store)
}

pub fn save(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let tensor = write_tensors(dir, "tensors", &ckpt.params)?;
    let sr = match (ckpt.kind, ckpt.sr_config()) {
        (ModelKind::Sr, Some(cfg)) => Some(SrManifest {
            scale_factor: cfg.scale_factor,
            condition_mode: cfg.condition_mode,
            lr_depth: cfg.lr_depth(),
        }),
        (ModelKind::Sr, None) => return Err(Error::Checkpoint("sr checkpoint without sr options".into())),
        (ModelKind::Base, _) => None,
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ckpt.kind,
        model: ckpt.model.clone(),
        sr,
        tensor,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST)
}

/// Load and validate a checkpoint against the architecture it records.
pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|err| match err.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.clone()),
        _ => Error::Io(err),
    })?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let params = read_tensors(dir, &manifest.tensor)?;
    let ckpt = Checkpoint {
        kind: manifest.kind,
        model: manifest.model,
        sr: manifest.sr.map(|s| SrOptions {
            scale_factor: s.scale_factor,
            condition_mode: s.condition_mode,
        }),
        params,
    };
    let bad = ckpt.structure_mismatches()?;
    if !bad.is_empty() {
        return Err(Error::Checkpoint(format!(
            "tensors do not match the recorded architecture: {}",
            bad.join(", ")
        )));
    }
    Ok(ckpt)
}
