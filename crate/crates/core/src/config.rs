//! Run configuration: a JSON document whose omitted fields take defaults.
//!
//! Precedence, lowest first: built-in defaults, the config file, command-line
//! flags. The effective configuration is snapshotted into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::PretrainConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::forecaster::{Ablation, ForecasterConfig, TrainConfig};
use crate::store::ScaleSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Forecast lengths scored by `evaluate`.
    pub horizons: Vec<usize>,
    /// Rows between evaluation origins; 0 uses the anchor cadence.
    pub stride: usize,
    /// Trajectories drawn per forecast.
    pub n_samples: usize,
    /// Season of the seasonal-naive baseline in rows; 0 uses the daily length.
    pub seasonal_period: usize,
    /// Score on the original scale instead of the normalized one.
    pub denormalized: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![96, 192, 336, 720],
            stride: 0,
            n_samples: 100,
            seasonal_period: 0,
            denormalized: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub horizon: usize,
    /// Timestamp of the last observed row; `None` uses each series' end.
    pub origin: Option<i64>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            horizon: 96,
            origin: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Input CSV.
    pub dataset: PathBuf,
    /// Directory every artifact is written to.
    pub output_dir: PathBuf,
    pub seed: u64,
    pub split: SplitConfig,
    /// Scale table; `None` derives it from the sampling stride, keeping the
    /// calendar scales that fit within the training split.
    pub scales: Option<Vec<ScaleSpec>>,
    /// Rows between stored anchors; 0 uses the shortest scale length.
    pub anchor_cadence: usize,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub forecaster: ForecasterConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
    pub forecast: ForecastConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data.csv"),
            output_dir: PathBuf::from("out"),
            seed: 0,
            split: SplitConfig::default(),
            scales: None,
            anchor_cadence: 0,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            forecaster: ForecasterConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            eval: EvalConfig::default(),
            forecast: ForecastConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file; unknown or mistyped fields are reported with
    /// their location.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            Error::Config(format!("field `{at}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Field-level checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("field `{field}`: {msg}")));
        if !(self.split.train > 0.0 && self.split.val >= 0.0 && self.split.train + self.split.val < 1.0) {
            return bad("split", format!("need train > 0, val ≥ 0, train + val < 1; got {:?}", self.split));
        }
        self.encoder.validate()?;
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            return bad("eval.horizons", "must list positive horizons".into());
        }
        if self.eval.n_samples == 0 {
            return bad("eval.n_samples", "must be ≥ 1".into());
        }
        if self.forecast.horizon == 0 {
            return bad("forecast.horizon", "must be ≥ 1".into());
        }
        if self.forecaster.backcast == 0 {
            return bad("forecaster.backcast", "must be ≥ 1".into());
        }
        if self.train.horizon == 0 || self.train.stride == 0 || self.train.batch_size == 0 {
            return bad("train", "horizon, stride, and batch_size must be ≥ 1".into());
        }
        if self.forecaster.context_dim % self.forecaster.heads.max(1) != 0 || self.forecaster.heads == 0 {
            return bad(
                "forecaster.heads",
                format!("must divide context_dim {}", self.forecaster.context_dim),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json_str("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.ablation.no_flow = true;
        c.scales = Some(crate::store::scales_for_stride(3600).unwrap());
        assert_eq!(RunConfig::from_json_str(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_json_str(r#"{"train": {"epoch": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("train.epoch"), "{err}");
    }

    #[test]
    fn wrong_type_is_named() {
        let err = RunConfig::from_json_str(r#"{"eval": {"n_samples": "many"}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("eval.n_samples"), "{err}");
    }

    #[test]
    fn invalid_split_rejected() {
        let err = RunConfig::from_json_str(r#"{"split": {"train": 0.9, "val": 0.2}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
