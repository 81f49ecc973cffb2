//! Autoregressive sampling, empirical quantiles, and point forecasters.

use super::{Forecaster, ScaleVectors};
use crate::dataset::TimeSeries;
use crate::error::{Error, Result};
use crate::numerics::{Distribution, Graph, ParameterSet, RandomStream, Tensor};

/// Reported quantile levels.
pub const QUANTILES: [f64; 3] = [0.1, 0.5, 0.9];

/// Sample trajectories and their per-step summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastDistribution {
    pub series_id: String,
    /// Timestamp of the last observed row.
    pub origin: i64,
    pub horizon: usize,
    pub channels: usize,
    pub n_samples: usize,
    /// `n_samples × horizon × channels`, row-major.
    pub samples: Vec<f64>,
    /// Per-step median, `horizon × channels`.
    pub point: Vec<f64>,
    /// One `horizon × channels` block per entry of [`QUANTILES`].
    pub quantiles: Vec<Vec<f64>>,
}

impl ForecastDistribution {
    pub fn sample(&self, i: usize, step: usize, channel: usize) -> f64 {
        self.samples[(i * self.horizon + step) * self.channels + channel]
    }
}

/// Linear interpolation between order statistics at `q·(n−1)`.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of no samples");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws `n_samples` trajectories of `horizon` steps after the last row of
/// `history` (normalized values). Each step samples from the head conditioned
/// on the fused state, then feeds the draw back into the recurrence.
pub fn forecast(
    model: &Forecaster,
    params: &ParameterSet,
    history: &TimeSeries,
    reps: &ScaleVectors,
    horizon: usize,
    n_samples: usize,
    stream: &mut RandomStream,
) -> Result<ForecastDistribution> {
    let l = model.backcast();
    let d = model.spec.channels;
    let stride = model.spec.stride_seconds;
    if horizon == 0 || n_samples == 0 {
        return Err(Error::Contract("forecast needs horizon ≥ 1 and n_samples ≥ 1".into()));
    }
    if history.len() < l {
        return Err(Error::Contract(format!(
            "series `{}` has {} rows; the forecaster needs {l}",
            history.series_id,
            history.len()
        )));
    }
    if history.channels != d {
        return Err(Error::Contract(format!("expected {d} channels, history has {}", history.channels)));
    }
    if model.uses_representations() {
        let usable = reps
            .iter()
            .enumerate()
            .any(|(s, v)| v.is_some() && model.spec.active_scales.get(s).copied().unwrap_or(false));
        if !usable {
            return Err(Error::Contract(format!(
                "no usable representation for series `{}` at {}",
                history.series_id,
                history.timestamps[history.len() - 1]
            )));
        }
    }
    let id = model.series_index(&history.series_id)?;
    let t = history.len();
    let origin = history.timestamps[t - 1];
    let window = history.slice(t - l..t);
    let next_ts: Vec<i64> = (0..l)
        .map(|i| window.timestamps.get(i + 1).copied().unwrap_or(origin + stride))
        .collect();
    let warm = model.context_encode(params, id, &Tensor::matrix(l, d, window.values.clone())?, &next_ts)?;
    let mut context = Tensor::matrix(n_samples, model.context_dim(), warm.data().repeat(n_samples))?;
    let reps_one = [reps];
    let rows = vec![0usize; n_samples];
    let ids = vec![id; n_samples];
    let mut samples = vec![0.0; n_samples * horizon * d];
    for step in 0..horizon {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let c = g.constant(context);
        let h = model.condition(&mut g, &p, c, &reps_one, &rows)?;
        let noise = g.constant(stream.draw(Distribution::StandardNormal, &[n_samples, d])?);
        let y = model.transform_noise(&mut g, &p, noise, h)?;
        g.check_finite()?;
        let drawn = g.value(y).clone();
        for i in 0..n_samples {
            let dst = (i * horizon + step) * d;
            samples[dst..dst + d].copy_from_slice(drawn.row_slice(i));
        }
        if step + 1 == horizon {
            break;
        }
        let ts = origin + (step as i64 + 2) * stride;
        let x = model.cell_inputs(&mut g, &p, &drawn, &vec![ts; n_samples], &ids)?;
        let next = model.gru.step(&mut g, &p, x, c);
        g.check_finite()?;
        context = g.value(next).clone();
    }
    let mut point = vec![0.0; horizon * d];
    let mut quantiles = vec![vec![0.0; horizon * d]; QUANTILES.len()];
    let mut column = vec![0.0; n_samples];
    for step in 0..horizon {
        for ch in 0..d {
            for (i, v) in column.iter_mut().enumerate() {
                *v = samples[(i * horizon + step) * d + ch];
            }
            column.sort_by(f64::total_cmp);
            let at = step * d + ch;
            point[at] = empirical_quantile(&column, 0.5);
            for (q, out) in QUANTILES.iter().zip(quantiles.iter_mut()) {
                out[at] = empirical_quantile(&column, *q);
            }
        }
    }
    Ok(ForecastDistribution {
        series_id: history.series_id.clone(),
        origin,
        horizon,
        channels: d,
        n_samples,
        samples,
        point,
        quantiles,
    })
}

/// `ŷ_{t+s} = y_{t+s−P·⌈s/P⌉}`: repeats the last observed season.
pub fn seasonal_naive(history: &TimeSeries, horizon: usize, period: usize) -> Result<Vec<f64>> {
    let t = history.len();
    if period == 0 || t < period {
        return Err(Error::Contract(format!(
            "seasonal naive needs {period} ≥ 1 rows of history, series `{}` has {t}",
            history.series_id
        )));
    }
    let mut out = Vec::with_capacity(horizon * history.channels);
    for s in 1..=horizon {
        let back = period * s.div_ceil(period);
        out.extend_from_slice(history.row(t - 1 + s - back));
    }
    Ok(out)
}

/// Anything that turns a history into a `horizon × channels` point forecast.
pub trait PointForecaster {
    fn point_forecast(&self, history: &TimeSeries, horizon: usize) -> Result<Vec<f64>>;
}

/// Copies the value one `period` earlier.
#[derive(Clone, Copy, Debug)]
pub struct SeasonalNaive {
    pub period: usize,
}

impl PointForecaster for SeasonalNaive {
    fn point_forecast(&self, history: &TimeSeries, horizon: usize) -> Result<Vec<f64>> {
        seasonal_naive(history, horizon, self.period)
    }
}
