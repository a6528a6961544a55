//! Checkpoint manifests: weight blobs with content digests, the fingerprint
//! they were trained against and the configuration that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nnqc_core::fingerprint::DatasetFingerprint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vae,
    Ldm,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Ldm => "ldm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub file: String,
    /// sha256 of the file bytes.
    pub sha256: String,
    /// sha256 over parameter names, shapes and values.
    pub params: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub fingerprint_sha256: String,
    pub config_sha256: String,
    pub config: RunConfig,
    pub weights: BTreeMap<String, WeightEntry>,
    /// Content digest of the stage-1 manifest this stage builds on.
    pub parent: Option<String>,
    /// Stage-specific scalars and logs.
    pub extra: serde_json::Value,
    /// Excluded from the content digest.
    pub created: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn fingerprint_sha256(fp: &DatasetFingerprint) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(fp)?.as_bytes()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

impl Manifest {
    pub fn new(stage: Stage, config: &RunConfig, fp: &DatasetFingerprint, parent: Option<String>) -> Result<Self> {
        Ok(Self {
            version: MANIFEST_VERSION,
            stage,
            seed: config.seed,
            fingerprint_sha256: fingerprint_sha256(fp)?,
            config_sha256: config.digest()?,
            config: config.clone(),
            weights: BTreeMap::new(),
            parent,
            extra: serde_json::Value::Null,
            created: chrono::Utc::now().to_rfc3339(),
        })
    }

    /// sha256 of the manifest with the timestamp blanked.
    pub fn content_digest(&self) -> Result<String> {
        let mut m = self.clone();
        m.created = String::new();
        Ok(sha256_hex(serde_json::to_string(&m)?.as_bytes()))
    }

    /// Saves `params` as `<name>.safetensors` next to the manifest.
    pub fn add_weights(&mut self, dir: &Path, name: &str, params: &ParamStore) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = format!("{name}.safetensors");
        params.save(&dir.join(&file))?;
        self.record(dir, name, file, params.digest()?)
    }

    /// Records a blob written by someone else.
    pub fn record(&mut self, dir: &Path, name: &str, file: String, params: String) -> Result<()> {
        let sha256 = file_sha256(&dir.join(&file))?;
        self.weights.insert(name.to_string(), WeightEntry { file, sha256, params });
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Reads `dir/manifest.json` and checks every weight file digest.
    pub fn load(dir: &Path, stage: Stage) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "no {} checkpoint at {}",
                stage.dir_name(),
                dir.display()
            )));
        }
        let m: Manifest = read_json(&path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("{}: manifest version {}", path.display(), m.version)));
        }
        if m.stage != stage {
            return Err(Error::Format(format!("{}: stage {:?}, expected {stage:?}", path.display(), m.stage)));
        }
        for (name, w) in &m.weights {
            let found = file_sha256(&dir.join(&w.file))?;
            if found != w.sha256 {
                return Err(Error::Digest(format!("{name}: {} has sha256 {found}, manifest says {}", w.file, w.sha256)));
            }
        }
        Ok(m)
    }

    pub fn weight_path(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        self.weights
            .get(name)
            .map(|w| dir.join(&w.file))
            .ok_or_else(|| Error::Format(format!("manifest lacks weights {name:?}")))
    }

    /// Loads a blob into `params` and checks the parameter digest.
    pub fn load_weights(&self, dir: &Path, name: &str, params: &mut ParamStore) -> Result<()> {
        params.load(&self.weight_path(dir, name)?)?;
        let found = params.digest()?;
        if found != self.weights[name].params {
            return Err(Error::Digest(format!("{name}: parameter digest {found} differs from manifest")));
        }
        Ok(())
    }

    /// Unless `force`, the checkpoint must come from the same fingerprint.
    pub fn check_fingerprint(&self, fp: &DatasetFingerprint, force: bool) -> Result<()> {
        let found = fingerprint_sha256(fp)?;
        if found == self.fingerprint_sha256 {
            return Ok(());
        }
        if force {
            log::warn!("fingerprint differs from the {:?} checkpoint; continuing (--force)", self.stage);
            return Ok(());
        }
        Err(Error::FingerprintMismatch {
            expected: self.fingerprint_sha256.clone(),
            found,
        })
    }
}
