//! Probabilistic forecaster: a gated recurrent context `c_t` over the recent
//! window, fused by attention with the stored multiscale representations into
//! `h_t`, which conditions a density over the next observation.
//!
//! Training maximizes the exact teacher-forced likelihood. Forecasting samples
//! trajectories step by step, feeding each draw back into the recurrence while
//! the representations stay fixed at the forecast origin.

mod fusion;
mod sample;
mod train;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use fusion::{FusionAttention, FusionOutput};
pub use sample::{
    empirical_quantile, forecast, seasonal_naive, ForecastDistribution, PointForecaster, SeasonalNaive, QUANTILES,
};
pub use train::{batch_nll, collect_windows, mean_nll, train, StepLoss, TrainConfig, TrainReport, TrainingWindow, WindowSet};

use crate::dataset::{time_features, TIME_FEATURES};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowStack};
use crate::nn::{glorot, GruCell, Linear};
use crate::numerics::{Bound, Graph, ParameterSet, RandomStream, Tensor, Var};
use crate::store::ScaleSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecasterConfig {
    /// Recent-window length `L` scanned by the recurrent cell.
    pub backcast: usize,
    /// Width `d_c` of the context and fused state.
    pub context_dim: usize,
    /// Width of the learned per-series identifier embedding.
    pub id_dim: usize,
    pub heads: usize,
    /// Hidden width of the representation projection MLPs.
    pub proj_hidden: usize,
    pub flow: FlowConfig,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            backcast: 96,
            context_dim: 64,
            id_dim: 8,
            heads: 4,
            proj_hidden: 64,
            flow: FlowConfig::default(),
        }
    }
}

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Drop every representation token; no store is consulted.
    pub no_repr: bool,
    /// Replace attention with a linear map of `[c, mean of representations]`.
    pub no_fusion: bool,
    /// Replace the flow with a Gaussian of learned mean and scale.
    pub no_flow: bool,
}

/// Everything needed to rebuild a forecaster's architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterSpec {
    pub config: ForecasterConfig,
    pub ablation: Ablation,
    /// Target channels `D`.
    pub channels: usize,
    /// Width `K` of a stored representation.
    pub repr_dim: usize,
    /// Scale slots, in store order.
    pub scales: Vec<ScaleSpec>,
    /// Slots that had data during training; the rest are ignored.
    pub active_scales: Vec<bool>,
    pub series_ids: Vec<String>,
    pub stride_seconds: i64,
}

/// Density of the next observation given `h_t`.
#[derive(Clone, Debug)]
pub enum DensityHead {
    Flow(FlowStack),
    /// Mean and log-scale from one affine map; the log-scale is bounded by
    /// `clamp · tanh`.
    Gaussian { layer: Linear, clamp: f64 },
}

/// Representation vectors for one window, aligned with the scale slots.
pub type ScaleVectors = [Option<Vec<f64>>];

#[derive(Clone, Debug)]
pub struct Forecaster {
    pub spec: ForecasterSpec,
    pub gru: GruCell,
    pub fusion: Option<FusionAttention>,
    merge: Option<Linear>,
    pub head: DensityHead,
}

const ID_PATH: &str = "forecaster.id_emb";

impl Forecaster {
    pub fn new(spec: ForecasterSpec) -> Result<Self> {
        let c = &spec.config;
        if c.backcast == 0 || c.context_dim == 0 || c.proj_hidden == 0 {
            return Err(Error::Config("forecaster backcast, context_dim, and proj_hidden must be ≥ 1".into()));
        }
        if spec.channels == 0 || spec.series_ids.is_empty() || spec.stride_seconds <= 0 {
            return Err(Error::Config("forecaster needs ≥ 1 channel, ≥ 1 series, and a positive stride".into()));
        }
        if spec.active_scales.len() != spec.scales.len() {
            return Err(Error::Config("active scale mask must match the scale table".into()));
        }
        let d = c.context_dim;
        let input = spec.channels + TIME_FEATURES + c.id_dim;
        let gru = GruCell::new("forecaster.gru", input, d);
        let (fusion, merge) = if spec.ablation.no_fusion {
            (None, Some(Linear::new("forecaster.merge", d + spec.repr_dim, d)))
        } else {
            let f = FusionAttention::new("forecaster.fusion", d, c.heads, spec.repr_dim, spec.scales.len(), c.proj_hidden)?;
            (Some(f), None)
        };
        let head = if spec.ablation.no_flow {
            DensityHead::Gaussian {
                layer: Linear::new("forecaster.gauss", d, 2 * spec.channels),
                clamp: c.flow.scale_clamp,
            }
        } else {
            DensityHead::Flow(FlowStack::new("forecaster.flow", spec.channels, d, &c.flow)?)
        };
        Ok(Self {
            spec,
            gru,
            fusion,
            merge,
            head,
        })
    }

    pub fn init(&self, stream: &mut RandomStream) -> Result<ParameterSet> {
        let mut p = ParameterSet::new();
        let c = &self.spec.config;
        p.insert(ID_PATH, glorot(self.spec.series_ids.len(), c.id_dim, stream))?;
        self.gru.init(&mut p, stream)?;
        if let Some(f) = &self.fusion {
            f.init(&mut p, stream)?;
        }
        if let Some(m) = &self.merge {
            m.init(&mut p, stream)?;
        }
        match &self.head {
            DensityHead::Flow(flow) => flow.init(&mut p, stream)?,
            DensityHead::Gaussian { layer, .. } => layer.init(&mut p, stream)?,
        }
        Ok(p)
    }

    pub fn backcast(&self) -> usize {
        self.spec.config.backcast
    }

    pub fn context_dim(&self) -> usize {
        self.spec.config.context_dim
    }

    pub fn series_index(&self, series_id: &str) -> Result<usize> {
        self.spec
            .series_ids
            .iter()
            .position(|s| s == series_id)
            .ok_or_else(|| Error::Contract(format!("series `{series_id}` was not part of training")))
    }

    /// Whether forecasts need stored representations.
    pub fn uses_representations(&self) -> bool {
        !self.spec.ablation.no_repr
    }

    /// Recurrent-cell inputs `[y_τ, calendar(ts_{τ+1}), id]`, one row per
    /// entry of `next_ts`.
    pub fn cell_inputs(&self, g: &mut Graph, p: &Bound, y: &Tensor, next_ts: &[i64], series: &[usize]) -> Result<Var> {
        let n = next_ts.len();
        if y.rows() != n || y.cols() != self.spec.channels || series.len() != n {
            return Err(Error::Contract(format!(
                "cell inputs: {} value rows of width {}, {} timestamps, {} ids (width {} expected)",
                y.rows(),
                y.cols(),
                n,
                series.len(),
                self.spec.channels
            )));
        }
        let cal: Vec<f64> = next_ts.iter().flat_map(|&t| time_features(t)).collect();
        let yv = g.constant(y.clone().reshaped(vec![n, self.spec.channels])?);
        let cv = g.constant(Tensor::matrix(n, TIME_FEATURES, cal)?);
        let ids = g.gather_rows(p.var(ID_PATH), series);
        let x = g.concat_cols(&[yv, cv, ids]);
        Ok(self.gru.project_inputs(g, p, x))
    }

    /// Scans projected inputs laid out step-major (`steps × batch` rows) from
    /// a zero state and returns the hidden state after every step.
    pub fn scan(&self, g: &mut Graph, p: &Bound, projected: Var, batch: usize) -> Vec<Var> {
        let (rows, _) = g.shape(projected);
        assert!(batch > 0 && rows % batch == 0, "scan: {rows} rows are not a multiple of batch {batch}");
        let mut h = g.constant(Tensor::zeros(&[batch, self.context_dim()]));
        let mut out = Vec::with_capacity(rows / batch);
        for s in 0..rows / batch {
            let x = g.slice_rows(projected, s * batch, (s + 1) * batch);
            h = self.gru.step(g, p, x, h);
            out.push(h);
        }
        out
    }

    /// Context `c_t` after scanning a window: `values` is `L × D`, `next_ts`
    /// holds the timestamp following each row.
    pub fn context_encode(&self, params: &ParameterSet, series: usize, values: &Tensor, next_ts: &[i64]) -> Result<Tensor> {
        if values.rows() == 0 {
            return Err(Error::Contract("context window is empty".into()));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = self.cell_inputs(&mut g, &p, values, next_ts, &vec![series; next_ts.len()])?;
        let states = self.scan(&mut g, &p, x, 1);
        g.check_finite()?;
        Ok(g.value(*states.last().expect("non-empty window")).clone())
    }

    fn active(&self, slot: usize) -> bool {
        !self.spec.ablation.no_repr && self.spec.active_scales[slot]
    }

    fn check_reps(&self, reps: &[&ScaleVectors]) -> Result<()> {
        if !self.uses_representations() {
            return Ok(());
        }
        for r in reps {
            if r.len() != self.spec.scales.len() {
                return Err(Error::Contract(format!(
                    "expected {} scale slots, got {}",
                    self.spec.scales.len(),
                    r.len()
                )));
            }
            if let Some(v) = r.iter().flatten().find(|v| v.len() != self.spec.repr_dim) {
                return Err(Error::Contract(format!(
                    "representation width {} does not match {}",
                    v.len(),
                    self.spec.repr_dim
                )));
            }
        }
        Ok(())
    }

    /// Fused state `h` for `n` context rows; row `i` uses the representations
    /// of window `row_window[i]`.
    pub fn condition(
        &self,
        g: &mut Graph,
        p: &Bound,
        context: Var,
        reps: &[&ScaleVectors],
        row_window: &[usize],
    ) -> Result<Var> {
        Ok(self.condition_with_weights(g, p, context, reps, row_window)?.0)
    }

    /// As [`Self::condition`], also returning attention weights when fusion is
    /// enabled.
    pub fn condition_with_weights(
        &self,
        g: &mut Graph,
        p: &Bound,
        context: Var,
        reps: &[&ScaleVectors],
        row_window: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        self.check_reps(reps)?;
        let k = self.spec.repr_dim;
        let b = reps.len();
        if let Some(merge) = &self.merge {
            let mut mean = vec![0.0; b * k];
            for (w, r) in reps.iter().enumerate() {
                let present: Vec<&Vec<f64>> = (0..self.spec.scales.len())
                    .filter(|&s| self.active(s))
                    .filter_map(|s| r[s].as_ref())
                    .collect();
                for v in &present {
                    for (m, x) in mean[w * k..(w + 1) * k].iter_mut().zip(v.iter()) {
                        *m += x / present.len() as f64;
                    }
                }
            }
            let mv = g.constant(Tensor::matrix(b.max(1), k, if b == 0 { vec![0.0; k] } else { mean })?);
            let rows = g.gather_rows(mv, row_window);
            let joined = g.concat_cols(&[context, rows]);
            return Ok((merge.forward(g, p, joined), vec![]));
        }
        let fusion = self.fusion.as_ref().expect("fusion present when merge is absent");
        let n = row_window.len();
        let mut tokens = Vec::new();
        let mut absent_cols: Vec<Vec<f64>> = Vec::new();
        for s in 0..self.spec.scales.len() {
            if !self.active(s) || reps.iter().all(|r| r[s].is_none()) {
                continue;
            }
            let mut raw = Vec::with_capacity(b * k);
            for r in reps {
                match &r[s] {
                    Some(v) => raw.extend_from_slice(v),
                    None => raw.extend(std::iter::repeat(0.0).take(k)),
                }
            }
            let rv = g.constant(Tensor::matrix(b, k, raw)?);
            let projected = fusion.project(g, p, s, rv);
            tokens.push(g.gather_rows(projected, row_window));
            absent_cols.push(row_window.iter().map(|&w| f64::from(reps[w][s].is_none() as u8)).collect());
        }
        let absent = if absent_cols.iter().flatten().any(|&a| a != 0.0) {
            let m = tokens.len();
            let data = (0..n).flat_map(|i| absent_cols.iter().map(move |c| c[i])).collect();
            Some(Tensor::matrix(n, m, data)?)
        } else {
            None
        };
        let out = fusion.forward(g, p, context, &tokens, absent.as_ref());
        Ok((out.fused, out.weights))
    }

    /// Per-row `log p(y | h)` (`n × 1`).
    pub fn log_density(&self, g: &mut Graph, p: &Bound, y: Var, h: Var) -> Result<Var> {
        match &self.head {
            DensityHead::Flow(flow) => flow.log_density(g, p, y, Some(h)),
            DensityHead::Gaussian { layer, clamp } => {
                let (mu, log_scale) = self.gaussian_params(g, p, layer, *clamp, h);
                let diff = g.sub(y, mu);
                let inv = g.neg(log_scale);
                let inv = g.exp(inv);
                let z = g.mul(diff, inv);
                let zz = g.square(z);
                let quad = g.scale(zz, -0.5);
                let per = g.sub(quad, log_scale);
                let per = g.offset(per, -0.5 * (2.0 * PI).ln());
                Ok(g.sum_cols(per))
            }
        }
    }

    /// Maps standard normal `noise` (`n × D`) to draws from `p(· | h)`.
    pub fn transform_noise(&self, g: &mut Graph, p: &Bound, noise: Var, h: Var) -> Result<Var> {
        match &self.head {
            DensityHead::Flow(flow) => Ok(flow.forward(g, p, noise, Some(h))?.0),
            DensityHead::Gaussian { layer, clamp } => {
                let (mu, log_scale) = self.gaussian_params(g, p, layer, *clamp, h);
                let sd = g.exp(log_scale);
                let spread = g.mul(noise, sd);
                Ok(g.add(mu, spread))
            }
        }
    }

    fn gaussian_params(&self, g: &mut Graph, p: &Bound, layer: &Linear, clamp: f64, h: Var) -> (Var, Var) {
        let d = self.spec.channels;
        let out = layer.forward(g, p, h);
        let mu = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, 2 * d);
        let t = g.tanh(raw);
        (mu, g.scale(t, clamp))
    }
}
