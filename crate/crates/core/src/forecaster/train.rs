//! Teacher-forced maximum-likelihood training.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Forecaster, ScaleVectors};
use crate::dataset::{sample_windows, TimeSeries};
use crate::error::{Error, Result};
use crate::numerics::{evaluate_with_gradients, Graph, Bound, OptimizerConfig, ParameterSet, RandomStream, Tensor, Var};
use crate::store::Store;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Forecast rows per training window.
    pub horizon: usize,
    /// Rows between consecutive training anchors.
    pub stride: usize,
    /// Optimizer steps per epoch; 0 means one pass over all windows.
    pub steps_per_epoch: usize,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Optimizer steps between validation passes; 0 disables them. When
    /// enabled, the parameters with the lowest validation NLL are returned.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            horizon: 96,
            stride: 24,
            steps_per_epoch: 0,
            optimizer: OptimizerConfig::adam(1e-3),
            clip_norm: 5.0,
            validate_every: 0,
        }
    }
}

/// A training anchor with the representations looked up for it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    /// Index into the series slice given to [`collect_windows`].
    pub series: usize,
    /// Row of the last observed value; forecast rows follow it.
    pub anchor_index: usize,
    /// Empty when the model ignores representations.
    pub reps: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<TrainingWindow>,
    /// Windows dropped because no representation was stored at or before
    /// their anchor.
    pub skipped: usize,
}

impl WindowSet {
    /// Per scale slot, whether any window carries a vector for it.
    pub fn scale_coverage(&self, slots: usize) -> Vec<bool> {
        (0..slots)
            .map(|s| self.windows.iter().any(|w| w.reps.get(s).is_some_and(|v| v.is_some())))
            .collect()
    }
}

/// Anchors every `stride` rows inside each `ranges[i]` of `series[i]`, with
/// `L` backcast and `horizon` forecast rows fully inside the range.
pub fn collect_windows(
    model: &Forecaster,
    series: &[TimeSeries],
    ranges: &[Range<usize>],
    horizon: usize,
    stride: usize,
    store: Option<&Store>,
) -> Result<WindowSet> {
    if series.len() != ranges.len() {
        return Err(Error::Contract("one range per series is required".into()));
    }
    let need_store = model.uses_representations();
    let store = match (need_store, store) {
        (true, None) => return Err(Error::Contract("representations are enabled but no store was given".into())),
        (true, Some(s)) => {
            if s.scales() != model.spec.scales.as_slice() || s.repr_dim() != model.spec.repr_dim {
                return Err(Error::Schema(format!(
                    "store holds width {} over {:?}; model expects width {} over {:?}",
                    s.repr_dim(),
                    s.scales(),
                    model.spec.repr_dim,
                    model.spec.scales
                )));
            }
            Some(s)
        }
        (false, _) => None,
    };
    let mut out = WindowSet::default();
    for (i, (s, r)) in series.iter().zip(ranges).enumerate() {
        model.series_index(&s.series_id)?;
        let span = s.slice(r.clone());
        for w in sample_windows(&span, model.backcast(), horizon, stride)? {
            let anchor_index = r.start + w.anchor_index;
            let reps = match store {
                None => vec![],
                Some(st) => {
                    let found = st
                        .nearest_anchor(&s.series_id, s.timestamps[anchor_index])
                        .map(|a| st.get(&s.series_id, a))
                        .transpose()?
                        .flatten();
                    match found {
                        Some(m) if m.present() > 0 => m.vectors,
                        _ => {
                            out.skipped += 1;
                            continue;
                        }
                    }
                }
            };
            out.windows.push(TrainingWindow {
                series: i,
                anchor_index,
                reps,
            });
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} training windows without a stored representation", out.skipped);
    }
    Ok(out)
}

/// Mean negative log-likelihood of the forecast rows of `windows` under
/// teacher forcing: the cell reads observed values throughout.
pub fn batch_nll(
    model: &Forecaster,
    g: &mut Graph,
    p: &Bound,
    series: &[TimeSeries],
    windows: &[&TrainingWindow],
    horizon: usize,
) -> Result<Var> {
    let b = windows.len();
    let l = model.backcast();
    let d = model.spec.channels;
    if b == 0 || horizon == 0 {
        return Err(Error::Contract("training batch needs windows and a positive horizon".into()));
    }
    let steps = l + horizon - 1;
    let mut y = Vec::with_capacity(steps * b * d);
    let mut next_ts = Vec::with_capacity(steps * b);
    let mut ids = Vec::with_capacity(steps * b);
    let mut target = Vec::with_capacity(horizon * b * d);
    let sid: Vec<usize> = windows
        .iter()
        .map(|w| model.series_index(&series[w.series].series_id))
        .collect::<Result<_>>()?;
    for k in 0..steps {
        for (w, &id) in windows.iter().zip(&sid) {
            let s = &series[w.series];
            let row = w.anchor_index + 1 + k - l;
            if row + 1 >= s.len() {
                return Err(Error::Contract(format!("window at row {} overruns series `{}`", w.anchor_index, s.series_id)));
            }
            y.extend_from_slice(s.row(row));
            next_ts.push(s.timestamps[row + 1]);
            ids.push(id);
        }
    }
    for k in 0..horizon {
        for w in windows {
            target.extend_from_slice(series[w.series].row(w.anchor_index + 1 + k));
        }
    }
    let x = model.cell_inputs(g, p, &Tensor::matrix(steps * b, d, y)?, &next_ts, &ids)?;
    let states = model.scan(g, p, x, b);
    let context = g.concat_rows(&states[l - 1..]);
    let row_window: Vec<usize> = (0..horizon).flat_map(|_| 0..b).collect();
    let reps: Vec<&ScaleVectors> = windows.iter().map(|w| w.reps.as_slice()).collect();
    let h = model.condition(g, p, context, &reps, &row_window)?;
    let yv = g.constant(Tensor::matrix(horizon * b, d, target)?);
    let lp = model.log_density(g, p, yv, h)?;
    let m = g.mean(lp);
    Ok(g.neg(m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<StepLoss>,
    /// `(optimizer steps taken, mean validation NLL)` per validation pass.
    pub validation: Vec<(usize, f64)>,
    /// Steps taken by the returned parameters.
    pub selected_step: usize,
    pub windows: usize,
    pub skipped: usize,
}

/// Minimizes [`batch_nll`] over shuffled minibatches.
pub fn train(
    model: &Forecaster,
    mut params: ParameterSet,
    series: &[TimeSeries],
    windows: &WindowSet,
    validation: Option<&WindowSet>,
    cfg: &TrainConfig,
    stream: &RandomStream,
) -> Result<(ParameterSet, TrainReport)> {
    let mut report = TrainReport {
        windows: windows.windows.len(),
        skipped: windows.skipped,
        ..TrainReport::default()
    };
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    if windows.windows.is_empty() {
        return Err(Error::Config(format!(
            "no training windows ({} skipped for missing representations)",
            windows.skipped
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("train.batch_size must be ≥ 1".into()));
    }
    let mut opt = cfg.optimizer.build();
    let per_epoch = windows.windows.len().div_ceil(cfg.batch_size);
    let steps = if cfg.steps_per_epoch == 0 { per_epoch } else { cfg.steps_per_epoch };
    let validation = validation.filter(|v| cfg.validate_every > 0 && !v.windows.is_empty());
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.windows.len()).collect();
        let mut rng = stream.substream(epoch as u64);
        rng.shuffle(&mut order);
        for step in 0..steps {
            let start = (step % per_epoch) * cfg.batch_size;
            let batch: Vec<&TrainingWindow> = order[start..(start + cfg.batch_size).min(order.len())]
                .iter()
                .map(|&i| &windows.windows[i])
                .collect();
            let (loss, mut grads) =
                evaluate_with_gradients(&params, |g, p| batch_nll(model, g, p, series, &batch, cfg.horizon))
                    .map_err(|e| at_batch(e, global))?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    primitive: "forecaster likelihood".into(),
                    detail: format!("non-finite loss at batch {global}"),
                });
            }
            if cfg.clip_norm > 0.0 {
                grads.clip_global_norm(cfg.clip_norm);
            }
            opt.step(&mut params, &grads);
            report.losses.push(StepLoss { epoch, step, nll: loss });
            global += 1;
            let last = epoch + 1 == cfg.epochs && step + 1 == steps;
            if let Some(val) = validation.filter(|_| global % cfg.validate_every == 0 || last) {
                let nll = mean_nll(model, &params, series, val, cfg)?;
                report.validation.push((global, nll));
                if best.as_ref().is_none_or(|(b, _)| nll < *b) {
                    best = Some((nll, params.clone()));
                    report.selected_step = global;
                }
            }
        }
        log::info!(
            "forecaster epoch {epoch}: mean nll {:.5}",
            report.losses[report.losses.len() - steps..].iter().map(|s| s.nll).sum::<f64>() / steps as f64
        );
    }
    match best {
        Some((_, chosen)) => Ok((chosen, report)),
        None => {
            report.selected_step = global;
            Ok((params, report))
        }
    }
}

/// Mean teacher-forced NLL of `windows` in batches of `cfg.batch_size`.
pub fn mean_nll(
    model: &Forecaster,
    params: &ParameterSet,
    series: &[TimeSeries],
    windows: &WindowSet,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in windows.windows.chunks(cfg.batch_size.max(1)) {
        let batch: Vec<&TrainingWindow> = chunk.iter().collect();
        let nll = crate::numerics::evaluate(params, |g, p| batch_nll(model, g, p, series, &batch, cfg.horizon))?;
        total += nll * chunk.len() as f64;
    }
    Ok(total / windows.windows.len().max(1) as f64)
}

fn at_batch(e: Error, batch: usize) -> Error {
    match e {
        Error::Numeric { primitive, detail } => Error::Numeric {
            primitive,
            detail: format!("{detail} (batch {batch})"),
        },
        other => other,
    }
}
