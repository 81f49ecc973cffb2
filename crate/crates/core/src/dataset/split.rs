use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::series::TimeSeries;
use crate::error::{Error, Result};

/// Standard deviations below this are floored (flat channels).
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics fit on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(series: &TimeSeries) -> Result<Self> {
        let t = series.len();
        if t == 0 {
            return Err(Error::Contract("cannot fit normalization on an empty split".into()));
        }
        let mut mean = vec![0.0; series.channels];
        let mut std = vec![0.0; series.channels];
        for c in 0..series.channels {
            let m = (0..t).map(|i| series.value(i, c)).sum::<f64>() / t as f64;
            let var = (0..t).map(|i| (series.value(i, c) - m).powi(2)).sum::<f64>() / t as f64;
            let mut s = var.sqrt();
            if s < STD_FLOOR {
                log::warn!(
                    "series `{}` channel {c} is constant on the training split; std floored to {STD_FLOOR}",
                    series.series_id
                );
                s = STD_FLOOR;
            }
            mean[c] = m;
            std[c] = s;
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn normalize_value(&self, v: f64, channel: usize) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize_value(&self, v: f64, channel: usize) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }

    pub fn normalize(&self, series: &TimeSeries) -> TimeSeries {
        self.map(series, |v, c| self.normalize_value(v, c))
    }

    pub fn denormalize(&self, series: &TimeSeries) -> TimeSeries {
        self.map(series, |v, c| self.denormalize_value(v, c))
    }

    fn map(&self, series: &TimeSeries, f: impl Fn(f64, usize) -> f64) -> TimeSeries {
        let mut out = series.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = f(*v, i % series.channels);
        }
        out
    }
}

/// A series cut into contiguous train/val/test spans, normalized with
/// statistics fit on the training span.
#[derive(Clone, Debug)]
pub struct Split {
    /// The whole normalized series; the ranges below index into it.
    pub series: TimeSeries,
    pub stats: NormStats,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn train_series(&self) -> TimeSeries {
        self.series.slice(self.train.clone())
    }

    pub fn val_series(&self) -> TimeSeries {
        self.series.slice(self.val.clone())
    }

    pub fn test_series(&self) -> TimeSeries {
        self.series.slice(self.test.clone())
    }
}

/// `(train, val, test)` lengths; the first two are floors of `T·frac`.
pub fn split_lengths(t: usize, train_frac: f64, val_frac: f64) -> Result<(usize, usize, usize)> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions ({train_frac}, {val_frac}) must satisfy train > 0, val ≥ 0, train + val < 1"
        )));
    }
    // The epsilon keeps exact products such as 100·0.7 from flooring to 69.
    let train = (t as f64 * train_frac + 1e-9).floor() as usize;
    let val = (t as f64 * val_frac + 1e-9).floor() as usize;
    Ok((train, val, t.saturating_sub(train + val)))
}

/// Splits chronologically and z-scores with train statistics.
///
/// `min_len` is the shortest span that still yields one window
/// (backcast + horizon); every nonempty split must reach it.
pub fn chronological_split(
    series: &TimeSeries,
    train_frac: f64,
    val_frac: f64,
    min_len: usize,
) -> Result<Split> {
    let t = series.len();
    let (tr, va, te) = split_lengths(t, train_frac, val_frac)?;
    let too_small = |n: usize, expected_nonempty: bool| n < min_len && (expected_nonempty || n > 0);
    if too_small(tr, true) || too_small(va, val_frac > 0.0) || too_small(te, true) {
        let need = (min_len..)
            .take(10_000_000)
            .find(|&cand| {
                split_lengths(cand, train_frac, val_frac).is_ok_and(|(a, b, c)| {
                    a >= min_len && (val_frac == 0.0 || b >= min_len) && c >= min_len
                })
            })
            .unwrap_or(usize::MAX);
        return Err(Error::Config(format!(
            "series `{}` has T={t}, giving splits {tr}/{va}/{te}; each split needs at least {min_len} points (minimum T = {need})",
            series.series_id
        )));
    }
    let stats = NormStats::fit(&series.slice(0..tr))?;
    Ok(Split {
        series: stats.normalize(series),
        stats,
        train: 0..tr,
        val: tr..tr + va,
        test: tr + va..t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize) -> TimeSeries {
        TimeSeries::univariate("r", (0..t as i64).map(|i| i * 60).collect(), (0..t).map(|i| (i * i) as f64).collect())
            .unwrap()
    }

    #[test]
    fn seventy_ten_twenty() {
        assert_eq!(split_lengths(100, 0.7, 0.1).unwrap(), (70, 10, 20));
        let s = chronological_split(&ramp(100), 0.7, 0.1, 5).unwrap();
        assert_eq!((s.train.clone(), s.val.clone(), s.test.clone()), (0..70, 70..80, 80..100));
    }

    #[test]
    fn train_split_is_standardized() {
        let s = chronological_split(&ramp(100), 0.7, 0.1, 5).unwrap();
        let v = s.train_series().values;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!(m.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_short_reports_minimum() {
        let err = chronological_split(&ramp(40), 0.7, 0.1, 10).unwrap_err().to_string();
        assert!(err.contains("minimum T = 100"), "{err}");
    }

    #[test]
    fn flat_channel_is_floored() {
        let s = TimeSeries::univariate("f", vec![0, 1, 2, 3], vec![2.0; 4]).unwrap();
        let st = NormStats::fit(&s).unwrap();
        assert_eq!(st.std[0], STD_FLOOR);
    }
}
