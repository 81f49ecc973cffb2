use std::ops::Range;

use chrono::{DateTime, Datelike, Timelike};

use crate::error::{Error, Result};

/// Number of calendar features produced by [`time_features`].
pub const TIME_FEATURES: usize = 4;

/// Regularly sampled multichannel series with optional user covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub series_id: String,
    /// Epoch seconds, strictly increasing with a constant stride.
    pub timestamps: Vec<i64>,
    /// Row-major `T × channels`.
    pub values: Vec<f64>,
    pub channels: usize,
    /// Names of the user covariate columns (`cov_*`), possibly empty.
    pub covariate_names: Vec<String>,
    /// Row-major `T × covariate_names.len()`.
    pub covariates: Vec<f64>,
}

impl TimeSeries {
    /// Univariate series without user covariates.
    pub fn univariate(series_id: impl Into<String>, timestamps: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        let ts = Self {
            series_id: series_id.into(),
            timestamps,
            values,
            channels: 1,
            covariate_names: vec![],
            covariates: vec![],
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Sampling stride in seconds; `None` for fewer than two points.
    pub fn stride(&self) -> Option<i64> {
        (self.timestamps.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels + channel]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn channel(&self, channel: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.value(t, channel)).collect()
    }

    pub fn covariate_row(&self, t: usize) -> &[f64] {
        let c = self.covariate_names.len();
        &self.covariates[t * c..(t + 1) * c]
    }

    /// Calendar features followed by user covariates at row `t`.
    pub fn covariate_vector(&self, t: usize) -> Vec<f64> {
        let mut v = time_features(self.timestamps[t]).to_vec();
        v.extend_from_slice(self.covariate_row(t));
        v
    }

    pub fn covariate_dim(&self) -> usize {
        TIME_FEATURES + self.covariate_names.len()
    }

    /// Index of the row stamped `ts`.
    pub fn index_of(&self, ts: i64) -> Option<usize> {
        self.timestamps.binary_search(&ts).ok()
    }

    pub fn slice(&self, range: Range<usize>) -> TimeSeries {
        let c = self.covariate_names.len();
        TimeSeries {
            series_id: self.series_id.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values[range.start * self.channels..range.end * self.channels].to_vec(),
            channels: self.channels,
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates[range.start * c..range.end * c].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.timestamps.len();
        let bad = |m: String| Err(Error::Ingestion(format!("series `{}`: {m}", self.series_id)));
        if self.channels == 0 {
            return bad("no value channels".into());
        }
        if self.values.len() != t * self.channels {
            return bad(format!("{} values for {t} timestamps × {} channels", self.values.len(), self.channels));
        }
        if self.covariates.len() != t * self.covariate_names.len() {
            return bad("covariates not aligned with timestamps".into());
        }
        if let Some(pos) = self.values.iter().chain(&self.covariates).position(|v| !v.is_finite()) {
            return bad(format!("non-finite entry at flat position {pos}"));
        }
        if let Some(stride) = self.stride() {
            if stride <= 0 {
                return bad("timestamps not strictly increasing".into());
            }
            for w in self.timestamps.windows(2) {
                if w[1] - w[0] != stride {
                    return bad(format!(
                        "non-constant stride: {} → {} breaks stride {stride}",
                        w[0], w[1]
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Hour-of-day, day-of-week, day-of-month, day-of-year, each scaled to
/// `[−0.5, 0.5]` (UTC).
pub fn time_features(epoch_seconds: i64) -> [f64; TIME_FEATURES] {
    let dt = DateTime::from_timestamp(epoch_seconds, 0).unwrap_or_default();
    [
        dt.hour() as f64 / 23.0 - 0.5,
        dt.weekday().num_days_from_monday() as f64 / 6.0 - 0.5,
        (dt.day() as f64 - 1.0) / 30.0 - 0.5,
        (dt.ordinal() as f64 - 1.0) / 365.0 - 0.5,
    ]
}
