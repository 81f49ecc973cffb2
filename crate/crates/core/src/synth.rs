//! Seeded synthetic workloads: sums of sinusoids plus a linear trend and
//! Gaussian noise.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeries;
use crate::error::{Error, Result};
use crate::numerics::RandomStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    /// Period in rows.
    pub period: f64,
    pub amplitude: f64,
    /// Phase offset in radians.
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Rows per series.
    pub length: usize,
    /// Seconds between rows.
    pub stride: i64,
    /// Timestamp of the first row, epoch seconds.
    #[serde(default = "default_start")]
    pub start: i64,
    /// Number of series, named `synth_0`, `synth_1`, …
    #[serde(default = "default_series")]
    pub series: usize,
    pub sinusoids: Vec<Sinusoid>,
    /// Added trend per row.
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub level: f64,
    /// Standard deviation of the additive Gaussian noise.
    #[serde(default)]
    pub noise: f64,
}

/// 2024-01-01 00:00 UTC, a Monday.
fn default_start() -> i64 {
    1_704_067_200
}

fn default_series() -> usize {
    1
}

impl SynthSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: format!("synthetic spec could not be read: {e}"),
        })?;
        let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.series == 0 {
            return Err(Error::Config("synth length and series count must be ≥ 1".into()));
        }
        if self.stride <= 0 {
            return Err(Error::Config(format!("synth stride must be positive, got {}", self.stride)));
        }
        if let Some(s) = self.sinusoids.iter().find(|s| !(s.period > 0.0 && s.period.is_finite())) {
            return Err(Error::Config(format!("sinusoid period must be positive, got {}", s.period)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("synth noise must be ≥ 0, got {}", self.noise)));
        }
        Ok(())
    }

    /// The noiseless signal at row `t`.
    pub fn deterministic(&self, t: usize) -> f64 {
        let x = t as f64;
        self.level
            + self.slope * x
            + self
                .sinusoids
                .iter()
                .map(|s| s.amplitude * (2.0 * PI * x / s.period + s.phase).sin())
                .sum::<f64>()
    }
}

/// One series per `spec.series`, each with noise from its own substream.
pub fn generate(spec: &SynthSpec, stream: &RandomStream) -> Result<Vec<TimeSeries>> {
    spec.validate()?;
    (0..spec.series)
        .map(|i| {
            let mut s = stream.substream(i as u64);
            let values = (0..spec.length)
                .map(|t| spec.deterministic(t) + spec.noise * s.normal())
                .collect();
            let ts = (0..spec.length as i64).map(|t| spec.start + t * spec.stride).collect();
            TimeSeries::univariate(format!("synth_{i}"), ts, values)
        })
        .collect()
}
