//! Time- and frequency-domain contrastive losses and the encoder
//! pretraining loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::{draw_mask, random_crop, CropPair};
use crate::dataset::TimeSeries;
use crate::encoder::{Encoder, MASKED_LOGIT};
use crate::error::{Error, Result};
use crate::numerics::{
    evaluate_with_gradients, Bound, Gradients, Graph, OptimizerConfig, ParameterSet, RandomStream, Tensor, Var,
};

/// `−mean log p(positive)` for rows of `anchor` against `[positive;
/// negatives]`, where `positive` row `i` pairs with `anchor` row `i`, every
/// other row of `positive` is a negative, and every other row of `anchor`
/// itself is a negative.
///
/// Returns the *sum* over rows; callers divide by the total term count.
fn infonce_sum(g: &mut Graph, anchor: Var, positive: Var) -> Var {
    let (m, _) = g.shape(anchor);
    let cross = g.matmul(anchor, positive, true);
    let selfsim = g.matmul(anchor, anchor, true);
    let mut diag_mask = Tensor::zeros(&[m, m]);
    let mut pick = Tensor::zeros(&[m, 2 * m]);
    for i in 0..m {
        diag_mask.data_mut()[i * m + i] = MASKED_LOGIT;
        pick.data_mut()[i * 2 * m + i] = 1.0;
    }
    let diag_mask = g.constant(diag_mask);
    let selfsim = g.add(selfsim, diag_mask);
    let logits = g.concat_cols(&[cross, selfsim]);
    let logp = g.log_softmax_rows(logits);
    let pick = g.constant(pick);
    let picked = g.mul(logp, pick);
    let s = g.sum(picked);
    g.neg(s)
}

/// Time-domain loss. `view_a[i]` and `view_b[i]` hold window `i`'s
/// representations over its overlap (`m_i × K_T`, aligned by row).
pub fn time_contrastive_loss(g: &mut Graph, view_a: &[Var], view_b: &[Var]) -> Result<Var> {
    if view_a.is_empty() || view_a.len() != view_b.len() {
        return Err(Error::Contract(format!(
            "time loss needs matching nonempty view lists, got {} and {}",
            view_a.len(),
            view_b.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut terms = 0;
    for (&a, &b) in view_a.iter().zip(view_b) {
        let (m, k) = g.shape(a);
        if m == 0 {
            return Err(Error::Contract("time loss over an empty overlap".into()));
        }
        if g.shape(b) != (m, k) {
            return Err(Error::Contract("time loss views are not aligned".into()));
        }
        let s = infonce_sum(g, a, b);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
        terms += m;
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / terms as f64))
}

/// Frequency-domain loss: at each overlap position, the same position in
/// the other batch members supplies the negatives. All windows must share
/// the overlap length.
pub fn freq_contrastive_loss(g: &mut Graph, view_a: &[Var], view_b: &[Var]) -> Result<Var> {
    if view_a.is_empty() || view_a.len() != view_b.len() {
        return Err(Error::Contract(format!(
            "frequency loss needs matching nonempty view lists, got {} and {}",
            view_a.len(),
            view_b.len()
        )));
    }
    let (m, k) = g.shape(view_a[0]);
    if m == 0 {
        return Err(Error::Contract("frequency loss over an empty overlap".into()));
    }
    if view_a.iter().chain(view_b).any(|&v| g.shape(v) != (m, k)) {
        return Err(Error::Contract(
            "frequency loss needs equal overlap lengths across the batch".into(),
        ));
    }
    let batch = view_a.len();
    // Stack position-major so that rows t·B .. (t+1)·B are position t.
    let stack = |g: &mut Graph, views: &[Var]| {
        let all = g.concat_rows(views);
        let order: Vec<usize> = (0..m).flat_map(|t| (0..batch).map(move |i| i * m + t)).collect();
        g.gather_rows(all, &order)
    };
    let a = stack(g, view_a);
    let b = stack(g, view_b);
    let mut total: Option<Var> = None;
    for t in 0..m {
        let at = g.slice_rows(a, t * batch, (t + 1) * batch);
        let bt = g.slice_rows(b, t * batch, (t + 1) * batch);
        let s = infonce_sum(g, at, bt);
        total = Some(match total {
            Some(x) => g.add(x, s),
            None => s,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / (m * batch) as f64))
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub time: f64,
    pub freq: f64,
    pub total: f64,
}

/// Windows with their crop and per-view keep-masks.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    /// `W×F` windows of equal length.
    pub windows: Vec<Tensor>,
    pub crop: CropPair,
    pub masks_a: Vec<Tensor>,
    pub masks_b: Vec<Tensor>,
}

impl PretrainBatch {
    pub fn sample(windows: Vec<Tensor>, mask_p: f64, stream: &mut RandomStream) -> Result<Self> {
        let w = windows.first().map_or(0, Tensor::rows);
        if windows.iter().any(|x| x.rows() != w) {
            return Err(Error::Contract("pretrain windows differ in length".into()));
        }
        let crop = random_crop(w, stream)?;
        let len_a = crop.view_a().len();
        let len_b = crop.overlap_len();
        let mut masks_a = Vec::with_capacity(windows.len());
        let mut masks_b = Vec::with_capacity(windows.len());
        for _ in &windows {
            masks_a.push(draw_mask(len_a, mask_p, stream)?);
            masks_b.push(draw_mask(len_b, mask_p, stream)?);
        }
        Ok(Self {
            windows,
            crop,
            masks_a,
            masks_b,
        })
    }
}

/// Builds both losses for a batch; returns `(time, freq, total)` handles.
///
/// View B is truncated at the overlap end: its overlap rows are causal, so
/// the rows after the overlap cannot influence them.
pub fn batch_losses(
    enc: &Encoder,
    g: &mut Graph,
    p: &Bound,
    batch: &PretrainBatch,
) -> Result<(Var, Var, Var)> {
    let c = batch.crop;
    let (offset_a, _) = c.overlap_offsets();
    let mut ta = Vec::new();
    let mut tb = Vec::new();
    let mut fa = Vec::new();
    let mut fb = Vec::new();
    for (i, w) in batch.windows.iter().enumerate() {
        let cols = w.cols();
        let rows = |r: std::ops::Range<usize>| {
            Tensor::matrix(r.len(), cols, w.data()[r.start * cols..r.end * cols].to_vec())
        };
        let xa = g.constant(rows(c.view_a())?);
        let xb = g.constant(rows(c.overlap())?);
        let ma = g.constant(batch.masks_a[i].clone());
        let mb = g.constant(batch.masks_b[i].clone());
        let oa = enc.forward_tail(g, p, xa, Some(ma), offset_a)?;
        let ob = enc.forward(g, p, xb, Some(mb), 0)?;
        ta.push(oa.time);
        tb.push(ob.time);
        fa.push(oa.freq);
        fb.push(ob.freq);
    }
    let lt = time_contrastive_loss(g, &ta, &tb)?;
    let lf = freq_contrastive_loss(g, &fa, &fb)?;
    let total = g.add(lt, lf);
    Ok((lt, lf, total))
}

/// Loss parts and encoder gradients of the total loss on one batch.
pub fn batch_gradients(enc: &Encoder, params: &ParameterSet, batch: &PretrainBatch) -> Result<(LossParts, Gradients)> {
    let mut values = (0.0, 0.0);
    let (total, grads) = evaluate_with_gradients(params, |g, p| {
        let (lt, lf, total) = batch_losses(enc, g, p, batch)?;
        values = (g.value(lt).item(), g.value(lf).item());
        Ok(total)
    })?;
    Ok((
        LossParts {
            time: values.0,
            freq: values.1,
            total,
        },
        grads,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Length of the windows cropped within.
    pub window: usize,
    /// Steps per epoch; `0` means one pass worth of disjoint windows.
    pub steps_per_epoch: usize,
    pub mask_p: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            window: 200,
            steps_per_epoch: 0,
            mask_p: 0.5,
            optimizer: OptimizerConfig::Sgd { lr: 1e-3 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossParts,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub steps: Vec<StepRecord>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f64>,
}

impl PretrainReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["epoch", "step", "loss_time", "loss_freq", "loss_total"])?;
        for r in &self.steps {
            w.write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                format!("{:.10}", r.loss.time),
                format!("{:.10}", r.loss.freq),
                format!("{:.10}", r.loss.total),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Random `window`-row slices of the series, as `window × channels`
/// tensors, together with how many disjoint windows the data holds.
fn window_sampler(series: &[TimeSeries], window: usize) -> Result<(Vec<usize>, usize)> {
    let eligible: Vec<usize> = (0..series.len()).filter(|&i| series[i].len() >= window).collect();
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "pretraining needs a series with at least pretrain.window = {window} rows"
        )));
    }
    let disjoint = eligible.iter().map(|&i| series[i].len() / window).sum();
    Ok((eligible, disjoint))
}

fn draw_window(series: &[TimeSeries], eligible: &[usize], window: usize, stream: &mut RandomStream) -> Result<Tensor> {
    let s = &series[eligible[stream.below(eligible.len())]];
    let start = stream.below(s.len() - window + 1);
    Tensor::matrix(
        window,
        s.channels,
        s.values[start * s.channels..(start + window) * s.channels].to_vec(),
    )
}

/// Fits the encoder by gradient descent on the total contrastive loss.
///
/// Each step draws `batch_size` random windows, one shared crop, and
/// independent masks per view.
pub fn pretrain(
    enc: &Encoder,
    mut params: ParameterSet,
    series: &[TimeSeries],
    cfg: &PretrainConfig,
    stream: &RandomStream,
) -> Result<(ParameterSet, PretrainReport)> {
    let mut report = PretrainReport::default();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    if cfg.batch_size == 0 || cfg.window < 4 {
        return Err(Error::Config("pretrain.batch_size must be ≥ 1 and pretrain.window ≥ 4".into()));
    }
    let (eligible, disjoint) = window_sampler(series, cfg.window)?;
    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        disjoint.div_ceil(cfg.batch_size).max(1)
    };
    let mut opt = cfg.optimizer.build();
    let mut global = 0u64;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for step in 0..steps {
            let mut s = stream.substream(global);
            global += 1;
            let windows = (0..cfg.batch_size)
                .map(|_| draw_window(series, &eligible, cfg.window, &mut s))
                .collect::<Result<Vec<_>>>()?;
            let batch = PretrainBatch::sample(windows, cfg.mask_p, &mut s)?;
            let (loss, grads) = batch_gradients(enc, &params, &batch).map_err(|e| match e {
                Error::Numeric { primitive, detail } => Error::Numeric {
                    primitive,
                    detail: format!("{detail} (pretraining batch {step} of epoch {epoch})"),
                },
                other => other,
            })?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric {
                    primitive: "contrastive loss".into(),
                    detail: format!("non-finite loss at pretraining batch {step} of epoch {epoch}"),
                });
            }
            opt.step(&mut params, &grads);
            sum += loss.total;
            log::debug!("pretrain epoch {epoch} step {step}: {:.6}", loss.total);
            report.steps.push(StepRecord { epoch, step, loss });
        }
        let mean = sum / steps as f64;
        log::info!("pretrain epoch {epoch}: mean loss {mean:.6}");
        report.epoch_means.push(mean);
    }
    Ok((params, report))
}
