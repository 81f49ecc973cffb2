//! JSON artifacts written between pipeline stages.
//!
//! Each file carries a format version, the configuration that produced it,
//! and one CRC-32 per parameter set computed over the little-endian bytes of
//! every tensor in path order. Floats are written with round-trip precision,
//! so loading reproduces parameters bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::forecaster::ForecasterSpec;
use crate::numerics::ParameterSet;

pub const ARTIFACT_VERSION: u32 = 1;

/// CRC-32 over paths, shapes, and values of `params`.
pub fn fingerprint(params: &ParameterSet) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (path, t) in params.iter() {
        h.update(path.as_bytes());
        for &d in t.shape() {
            h.update(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterBlock {
    pub checksum: u32,
    pub parameters: ParameterSet,
}

impl ParameterBlock {
    pub fn new(parameters: ParameterSet) -> Self {
        Self {
            checksum: fingerprint(&parameters),
            parameters,
        }
    }

    fn verify(&self, what: &str, path: &Path) -> Result<()> {
        let actual = fingerprint(&self.parameters);
        if actual != self.checksum {
            return Err(Error::Integrity(format!(
                "{}: {what} checksum {:08x} does not match stored {:08x}",
                path.display(),
                actual,
                self.checksum
            )));
        }
        Ok(())
    }
}

/// Normalization statistics of one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesStats {
    pub series_id: String,
    pub stats: NormStats,
}

/// Output of `pretrain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderFile {
    pub format_version: u32,
    pub config: RunConfig,
    pub normalization: Vec<SeriesStats>,
    pub encoder: ParameterBlock,
}

/// Output of `train`: everything `forecast` and `evaluate` need besides the
/// store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: RunConfig,
    pub normalization: Vec<SeriesStats>,
    pub encoder: ParameterBlock,
    pub forecaster_spec: ForecasterSpec,
    pub forecaster: ParameterBlock,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: hint.into(),
        });
    }
    let text = std::fs::read_to_string(path)?;
    let version: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: not valid JSON: {e}", path.display())))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == ARTIFACT_VERSION as u64 => {}
        other => {
            return Err(Error::Schema(format!(
                "{}: format version {other:?}, expected {ARTIFACT_VERSION}",
                path.display()
            )))
        }
    }
    serde_json::from_value(version).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

impl EncoderFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: Self = read_json(path, "run `pretrain` to produce the encoder weights")?;
        f.encoder.verify("encoder", path)?;
        Ok(f)
    }
}

impl ModelFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: Self = read_json(path, "run `train` to produce the model file")?;
        f.encoder.verify("encoder", path)?;
        f.forecaster.verify("forecaster", path)?;
        Ok(f)
    }
}
