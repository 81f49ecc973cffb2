use std::ops::Range;

use super::series::TimeSeries;
use crate::error::{Error, Result};

/// A backcast of `L` rows ending at the anchor and the `N` rows after it.
///
/// Ranges index rows of the series the pair was sampled from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPair {
    pub anchor_index: usize,
    pub anchor: i64,
    pub backcast: Range<usize>,
    pub forecast: Range<usize>,
}

impl WindowPair {
    pub fn backcast_values(&self, series: &TimeSeries) -> Vec<f64> {
        series.values[self.backcast.start * series.channels..self.backcast.end * series.channels].to_vec()
    }

    pub fn forecast_values(&self, series: &TimeSeries) -> Vec<f64> {
        series.values[self.forecast.start * series.channels..self.forecast.end * series.channels].to_vec()
    }
}

/// `⌊(T − L − N)/stride⌋ + 1`, or 0 when the series is too short.
pub fn window_count(t: usize, backcast: usize, horizon: usize, stride: usize) -> usize {
    if t < backcast + horizon || stride == 0 {
        0
    } else {
        (t - backcast - horizon) / stride + 1
    }
}

pub fn sample_windows(series: &TimeSeries, backcast: usize, horizon: usize, stride: usize) -> Result<Vec<WindowPair>> {
    if backcast == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window lengths and stride must be ≥ 1 (L={backcast}, N={horizon}, stride={stride})"
        )));
    }
    let t = series.len();
    if t < backcast + horizon {
        return Err(Error::Config(format!(
            "series `{}` has {t} rows; windows need at least L+N = {}",
            series.series_id,
            backcast + horizon
        )));
    }
    Ok((0..window_count(t, backcast, horizon, stride))
        .map(|k| {
            let a = backcast - 1 + k * stride;
            WindowPair {
                anchor_index: a,
                anchor: series.timestamps[a],
                backcast: a + 1 - backcast..a + 1,
                forecast: a + 1..a + 1 + horizon,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(t: usize) -> TimeSeries {
        TimeSeries::univariate("s", (0..t as i64).collect(), vec![0.0; t]).unwrap()
    }

    #[test]
    fn count_formula_small_cases() {
        assert_eq!(sample_windows(&flat(10), 3, 2, 1).unwrap().len(), 6);
        assert_eq!(sample_windows(&flat(10), 3, 2, 10).unwrap().len(), 1);
    }

    #[test]
    fn pairs_are_adjacent_and_in_bounds() {
        for w in sample_windows(&flat(30), 5, 4, 3).unwrap() {
            assert_eq!(w.backcast.len(), 5);
            assert_eq!(w.forecast.len(), 4);
            assert_eq!(w.backcast.end, w.forecast.start);
            assert!(w.forecast.end <= 30);
        }
    }

    #[test]
    fn short_series_is_config_error() {
        assert!(matches!(sample_windows(&flat(4), 3, 2, 1), Err(Error::Config(_))));
    }
}
