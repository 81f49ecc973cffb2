//! The staged workflow behind the command-line tool: pretrain the encoder,
//! encode anchors into the store, train the forecaster, then forecast or
//! evaluate. Every stage reads its predecessors' artifacts from the output
//! directory and writes only inside it.

use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::artifact::{fingerprint, EncoderFile, ModelFile, ParameterBlock, SeriesStats, ARTIFACT_VERSION};
use crate::config::RunConfig;
use crate::contrastive::pretrain;
use crate::dataset::{load_csv, split_lengths, write_metrics_csv, write_metrics_json, MetricRow, NormStats, TimeSeries};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::forecaster::{
    collect_windows, forecast, train, ForecastDistribution, Forecaster, ForecasterSpec, PointForecaster, SeasonalNaive,
    TrainReport, QUANTILES,
};
use crate::numerics::{ParameterSet, RandomStream};
use crate::store::{encode_available, validate_scales, ScaleName, ScaleSpec, Store};

/// Substream keys of the run seed, one per randomized stage.
mod streams {
    pub const ENCODER_INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const FORECASTER_INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const FORECAST: u64 = 5;
}

/// Artifact locations inside the output directory.
#[derive(Clone, Debug)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn encoder(&self) -> PathBuf {
        self.dir.join("encoder.json")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.dir.join("pretrain_loss.csv")
    }

    pub fn store(&self) -> PathBuf {
        self.dir.join("representations.store")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_loss.csv")
    }

    pub fn validation_log(&self) -> PathBuf {
        self.dir.join("validation_loss.csv")
    }

    pub fn forecast(&self) -> PathBuf {
        self.dir.join("forecast.csv")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }

    pub fn baseline_csv(&self) -> PathBuf {
        self.dir.join("baseline_metrics.csv")
    }
}

fn paths(cfg: &RunConfig) -> Result<ArtifactPaths> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(ArtifactPaths::new(&cfg.output_dir))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<TimeSeries>> {
    if !cfg.dataset.exists() {
        return Err(Error::MissingArtifact {
            path: cfg.dataset.clone(),
            hint: "set `dataset` in the config or generate one with `synth`".into(),
        });
    }
    load_csv(&cfg.dataset)
}

/// Name used in metric rows: the dataset file stem.
pub fn dataset_name(cfg: &RunConfig) -> String {
    cfg.dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Normalized series with their chronological split ranges.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub series: Vec<TimeSeries>,
    pub stats: Vec<SeriesStats>,
    pub train: Vec<Range<usize>>,
    pub val: Vec<Range<usize>>,
    pub test: Vec<Range<usize>>,
    pub stride: i64,
}

impl Prepared {
    pub fn train_series(&self) -> Vec<TimeSeries> {
        self.series.iter().zip(&self.train).map(|(s, r)| s.slice(r.clone())).collect()
    }

    pub fn shortest_train(&self) -> usize {
        self.train.iter().map(|r| r.len()).min().unwrap_or(0)
    }
}

/// Splits every series and z-scores it with train statistics, or with
/// `stats` from an earlier stage when given.
pub fn prepare(cfg: &RunConfig, raw: &[TimeSeries], stats: Option<&[SeriesStats]>) -> Result<Prepared> {
    if raw.is_empty() {
        return Err(Error::Ingestion("dataset holds no series".into()));
    }
    let stride = raw[0].stride().ok_or_else(|| Error::Ingestion("series need at least two rows".into()))?;
    if let Some(s) = raw.iter().find(|s| s.stride() != Some(stride)) {
        return Err(Error::Ingestion(format!(
            "series `{}` has stride {:?}s; all series must share {stride}s",
            s.series_id,
            s.stride()
        )));
    }
    let min_len = cfg.forecaster.backcast + cfg.train.horizon;
    let mut out = Prepared {
        series: vec![],
        stats: vec![],
        train: vec![],
        val: vec![],
        test: vec![],
        stride,
    };
    for s in raw {
        let (tr, va, _) = split_lengths(s.len(), cfg.split.train, cfg.split.val)?;
        if tr < min_len {
            return Err(Error::Config(format!(
                "series `{}` has a training split of {tr} rows; backcast + train.horizon needs {min_len}",
                s.series_id
            )));
        }
        let st = match stats {
            Some(list) => list
                .iter()
                .find(|x| x.series_id == s.series_id)
                .map(|x| x.stats.clone())
                .ok_or_else(|| Error::Schema(format!("series `{}` is unknown to the saved artifacts", s.series_id)))?,
            None => NormStats::fit(&s.slice(0..tr))?,
        };
        if st.mean.len() != s.channels {
            return Err(Error::Schema(format!("series `{}` channel count changed", s.series_id)));
        }
        out.series.push(st.normalize(s));
        out.stats.push(SeriesStats {
            series_id: s.series_id.clone(),
            stats: st,
        });
        out.train.push(0..tr);
        out.val.push(tr..tr + va);
        out.test.push(tr + va..s.len());
    }
    Ok(out)
}

/// The configured scale table, or the calendar scales whose windows span 4
/// to `train_len` rows at this stride.
pub fn resolve_scales(cfg: &RunConfig, stride: i64, train_len: usize) -> Result<Vec<ScaleSpec>> {
    if let Some(s) = &cfg.scales {
        validate_scales(s)?;
        return Ok(s.clone());
    }
    let table: Vec<ScaleSpec> = ScaleName::ALL
        .iter()
        .filter_map(|&name| {
            let length = (name.seconds() / stride) as usize;
            (length >= 4 && length <= train_len).then_some(ScaleSpec { name, length })
        })
        .collect();
    if table.is_empty() {
        return Err(Error::Config(format!(
            "no calendar scale fits a {train_len}-row training split at stride {stride}s; set `scales` explicitly"
        )));
    }
    Ok(table)
}

pub fn anchor_cadence(cfg: &RunConfig, scales: &[ScaleSpec]) -> usize {
    if cfg.anchor_cadence > 0 {
        cfg.anchor_cadence
    } else {
        scales.iter().map(|s| s.length).min().unwrap_or(1)
    }
}

fn seasonal_period(cfg: &RunConfig, stride: i64) -> usize {
    if cfg.eval.seasonal_period > 0 {
        cfg.eval.seasonal_period
    } else {
        ((ScaleName::Daily.seconds() / stride) as usize).max(1)
    }
}

/// Fits the encoder on the training splits; writes `encoder.json` and the
/// loss log.
pub fn run_pretrain(cfg: &RunConfig, raw: &[TimeSeries]) -> Result<EncoderFile> {
    let out = paths(cfg)?;
    let prep = prepare(cfg, raw, None)?;
    let enc_cfg = cfg.encoder.clone();
    if enc_cfg.input_channels != raw[0].channels {
        return Err(Error::Config(format!(
            "field `encoder.input_channels` is {}, the dataset has {} channels",
            enc_cfg.input_channels, raw[0].channels
        )));
    }
    enc_cfg.validate()?;
    let enc = Encoder::new(enc_cfg.clone())?;
    let master = RandomStream::new(cfg.seed);
    let init = enc.init(&mut master.substream(streams::ENCODER_INIT))?;
    let (params, report) = pretrain(&enc, init, &prep.train_series(), &cfg.pretrain, &master.substream(streams::PRETRAIN))?;
    report.write_csv(out.pretrain_log())?;
    let file = EncoderFile {
        format_version: ARTIFACT_VERSION,
        config: cfg.clone(),
        normalization: prep.stats,
        encoder: ParameterBlock::new(params),
    };
    file.save(out.encoder())?;
    Ok(file)
}

fn check_encoder_config(cfg: &RunConfig, file: &EncoderFile) -> Result<()> {
    if cfg.encoder != file.config.encoder {
        return Err(Error::Schema(
            "encoder settings differ from those the saved encoder was trained with; rerun `pretrain`".into(),
        ));
    }
    Ok(())
}

/// Encodes every series at anchors `cadence − 1, 2·cadence − 1, …` and
/// writes the store. Returns the number of records.
pub fn run_encode(cfg: &RunConfig, raw: &[TimeSeries]) -> Result<usize> {
    let out = paths(cfg)?;
    let file = EncoderFile::load(out.encoder())?;
    check_encoder_config(cfg, &file)?;
    let prep = prepare(cfg, raw, Some(&file.normalization))?;
    let scales = resolve_scales(cfg, prep.stride, prep.shortest_train())?;
    let cadence = anchor_cadence(cfg, &scales);
    let enc = Encoder::new(file.config.encoder.clone())?;
    let params = &file.encoder.parameters;
    let shortest = scales[0].length;
    let jobs: Vec<(usize, usize)> = prep
        .series
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            (shortest.max(cadence) - 1..s.len())
                .filter(move |r| (r + 1) % cadence == 0)
                .map(move |r| (i, r))
        })
        .collect();
    let reps = parallel_map(&jobs, |&(i, r)| encode_available(&enc, params, &prep.series[i], r, &scales))?;
    let mut store = Store::create_with_fingerprint(out.store(), enc.config.repr_dim(), &scales, file.encoder.checksum)?;
    for r in &reps {
        store.put(r)?;
    }
    store.sync()?;
    log::info!("encoded {} anchors every {cadence} rows over {} scales", reps.len(), scales.len());
    Ok(reps.len())
}

/// Runs `f` over `items` on all available cores, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("worker thread panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn open_store_for(encoder: &ParameterBlock, path: &Path) -> Result<Store> {
    let store = Store::open(path)?;
    if store.fingerprint() != encoder.checksum {
        return Err(Error::Schema(format!(
            "{} was built by a different encoder (fingerprint {:08x}, expected {:08x}); rerun `encode`",
            path.display(),
            store.fingerprint(),
            encoder.checksum
        )));
    }
    Ok(store)
}

/// Trains the forecaster on the training splits and writes `model.json`.
pub fn run_train(cfg: &RunConfig, raw: &[TimeSeries]) -> Result<(ModelFile, TrainReport)> {
    let out = paths(cfg)?;
    let file = EncoderFile::load(out.encoder())?;
    check_encoder_config(cfg, &file)?;
    let prep = prepare(cfg, raw, Some(&file.normalization))?;
    let store = if cfg.ablation.no_repr {
        None
    } else {
        Some(open_store_for(&file.encoder, &out.store())?)
    };
    let scales = match &store {
        Some(s) => s.scales().to_vec(),
        None => resolve_scales(cfg, prep.stride, prep.shortest_train())?,
    };
    let mut spec = ForecasterSpec {
        config: cfg.forecaster.clone(),
        ablation: cfg.ablation,
        channels: raw[0].channels,
        repr_dim: file.config.encoder.repr_dim(),
        active_scales: vec![true; scales.len()],
        scales,
        series_ids: raw.iter().map(|s| s.series_id.clone()).collect(),
        stride_seconds: prep.stride,
    };
    let probe = Forecaster::new(spec.clone())?;
    let windows = collect_windows(&probe, &prep.series, &prep.train, cfg.train.horizon, cfg.train.stride, store.as_ref())?;
    spec.active_scales = if cfg.ablation.no_repr {
        vec![false; spec.scales.len()]
    } else {
        windows.scale_coverage(spec.scales.len())
    };
    let model = Forecaster::new(spec.clone())?;
    let validation = if cfg.train.validate_every > 0 {
        // Backcasts of the first validation windows reach into the training split.
        let l = model.backcast();
        let ranges: Vec<Range<usize>> = prep.val.iter().map(|r| r.start.saturating_sub(l)..r.end).collect();
        Some(collect_windows(&model, &prep.series, &ranges, cfg.train.horizon, cfg.train.stride, store.as_ref())?)
    } else {
        None
    };
    let master = RandomStream::new(cfg.seed);
    let init = model.init(&mut master.substream(streams::FORECASTER_INIT))?;
    let (params, report) = train(
        &model,
        init,
        &prep.series,
        &windows,
        validation.as_ref(),
        &cfg.train,
        &master.substream(streams::TRAIN),
    )?;
    write_train_log(&report, &out.train_log())?;
    if !report.validation.is_empty() {
        write_validation_log(&report, &out.validation_log())?;
        log::info!("kept parameters after {} steps (lowest validation NLL)", report.selected_step);
    }
    let model_file = ModelFile {
        format_version: ARTIFACT_VERSION,
        config: cfg.clone(),
        normalization: file.normalization.clone(),
        encoder: file.encoder.clone(),
        forecaster_spec: spec,
        forecaster: ParameterBlock::new(params),
    };
    model_file.save(out.model())?;
    Ok((model_file, report))
}

fn write_validation_log(report: &TrainReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "nll"])?;
    for (step, nll) in &report.validation {
        w.write_record([step.to_string(), format!("{nll:.10}")])?;
    }
    w.flush()?;
    Ok(())
}

fn write_train_log(report: &TrainReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "nll"])?;
    for s in &report.losses {
        w.write_record([s.epoch.to_string(), s.step.to_string(), format!("{:.10}", s.nll)])?;
    }
    w.flush()?;
    Ok(())
}

/// A trained model with its store, ready to forecast.
pub struct LoadedModel {
    pub file: ModelFile,
    pub model: Forecaster,
    pub store: Option<Store>,
    pub store_path: PathBuf,
}

impl LoadedModel {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let out = paths(cfg)?;
        let file = ModelFile::load(out.model())?;
        if file.config.ablation != cfg.ablation {
            return Err(Error::Config(format!(
                "the model was trained with ablation {:?} but {:?} was requested",
                file.config.ablation, cfg.ablation
            )));
        }
        let model = Forecaster::new(file.forecaster_spec.clone())?;
        let store = if model.uses_representations() {
            Some(open_store_for(&file.encoder, &out.store())?)
        } else {
            None
        };
        Ok(Self {
            file,
            model,
            store,
            store_path: out.store(),
        })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.file.forecaster.parameters
    }

    /// Representations stored at or before the last row of `history`.
    pub fn representations(&self, history: &TimeSeries) -> Result<Vec<Option<Vec<f64>>>> {
        let Some(store) = &self.store else { return Ok(vec![]) };
        let t = history.timestamps[history.len() - 1];
        let found = store
            .nearest_anchor(&history.series_id, t)
            .map(|a| store.get(&history.series_id, a))
            .transpose()?
            .flatten();
        match found {
            Some(m) => Ok(m.vectors),
            None => Err(Error::MissingArtifact {
                path: self.store_path.clone(),
                hint: format!(
                    "no representation for series `{}` at or before {t}; rerun `encode` or choose a later origin",
                    history.series_id
                ),
            }),
        }
    }

    /// Forecast distribution after the last row of the normalized `history`.
    pub fn forecast(&self, history: &TimeSeries, horizon: usize, n_samples: usize, seed: u64) -> Result<ForecastDistribution> {
        let reps = self.representations(history)?;
        let mut stream = origin_stream(seed, &history.series_id, history.timestamps[history.len() - 1]);
        forecast(&self.model, self.params(), history, &reps, horizon, n_samples, &mut stream)
    }
}

/// Stream for one forecast, independent of evaluation order.
fn origin_stream(seed: u64, series_id: &str, origin: i64) -> RandomStream {
    let key = (u64::from(crc32fast::hash(series_id.as_bytes())) << 32) ^ origin as u64;
    RandomStream::new(seed).substream(streams::FORECAST).substream(key)
}

/// Point forecasts from a loaded model: the per-step median of samples.
pub struct ModelPoint<'a> {
    pub loaded: &'a LoadedModel,
    pub n_samples: usize,
    pub seed: u64,
}

impl PointForecaster for ModelPoint<'_> {
    fn point_forecast(&self, history: &TimeSeries, horizon: usize) -> Result<Vec<f64>> {
        Ok(self.loaded.forecast(history, horizon, self.n_samples, self.seed)?.point)
    }
}

/// Origins of one series: rows `a` in `[test.start − 1, test.end − 1)` with
/// `(a + 1) % stride == 0`, enough history for `min_history`, and room for
/// at least the shortest horizon.
pub fn evaluation_origins(test: &Range<usize>, stride: usize, min_history: usize, shortest: usize) -> Vec<usize> {
    let first = test.start.saturating_sub(1).max(min_history.saturating_sub(1));
    (first..test.end)
        .filter(|a| (a + 1) % stride == 0 && a + shortest < test.end)
        .collect()
}

/// Per-horizon `(mse, mae)` of `fc` over the test splits.
///
/// Each origin is forecast once for the longest horizon that fits, and every
/// horizon scores its prefix.
pub fn score_point_forecasts(
    fc: &(dyn PointForecaster + Sync),
    prep: &Prepared,
    horizons: &[usize],
    stride: usize,
    min_history: usize,
    denormalized: bool,
) -> Result<Vec<(usize, f64, f64)>> {
    if stride == 0 {
        return Err(Error::Config("evaluation stride must be ≥ 1".into()));
    }
    let shortest = *horizons.iter().min().ok_or_else(|| Error::Config("no horizons to evaluate".into()))?;
    let jobs: Vec<(usize, usize)> = prep
        .series
        .iter()
        .enumerate()
        .flat_map(|(i, _)| {
            evaluation_origins(&prep.test[i], stride, min_history, shortest)
                .into_iter()
                .map(move |a| (i, a))
        })
        .collect();
    if jobs.is_empty() {
        return Err(Error::Config(format!(
            "test splits hold no evaluation origin for horizon {shortest} at stride {stride}"
        )));
    }
    let results = parallel_map(&jobs, |&(i, a)| {
        let s = &prep.series[i];
        let longest = horizons
            .iter()
            .copied()
            .filter(|h| a + h < prep.test[i].end)
            .max()
            .expect("origin admits the shortest horizon");
        let pred = fc.point_forecast(&s.slice(0..a + 1), longest)?;
        let c = s.channels;
        if pred.len() != longest * c {
            return Err(Error::Contract(format!("forecaster returned {} values for {longest}×{c}", pred.len())));
        }
        let stats = &prep.stats[i].stats;
        let errors: Vec<(f64, f64)> = (0..longest * c)
            .map(|k| {
                let (step, ch) = (k / c, k % c);
                let (mut p, mut t) = (pred[k], s.value(a + 1 + step, ch));
                if denormalized {
                    p = stats.denormalize_value(p, ch);
                    t = stats.denormalize_value(t, ch);
                }
                let e = p - t;
                (e * e, e.abs())
            })
            .collect();
        Ok((i, a, errors))
    })?;
    Ok(horizons
        .iter()
        .map(|&h| {
            let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
            for (i, a, errors) in &results {
                if a + h >= prep.test[*i].end {
                    continue;
                }
                let c = prep.series[*i].channels;
                for &(s2, a2) in &errors[..h * c] {
                    se += s2;
                    ae += a2;
                    n += 1;
                }
            }
            let n = n.max(1) as f64;
            (h, se / n, ae / n)
        })
        .collect())
}

fn metric_rows(name: &str, seed: u64, scores: &[(usize, f64, f64)]) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = scores
        .iter()
        .map(|&(h, mse, mae)| MetricRow {
            dataset: name.into(),
            horizon: Some(h),
            mse,
            mae,
            seed,
        })
        .collect();
    let n = scores.len() as f64;
    rows.push(MetricRow {
        dataset: name.into(),
        horizon: None,
        mse: scores.iter().map(|s| s.1).sum::<f64>() / n,
        mae: scores.iter().map(|s| s.2).sum::<f64>() / n,
        seed,
    });
    rows
}

/// Outcome of `evaluate`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub model: Vec<MetricRow>,
    pub baseline: Vec<MetricRow>,
}

/// Scores the trained model and the seasonal-naive baseline on the test
/// splits; writes `metrics.csv`, `metrics.json`, and `baseline_metrics.csv`.
pub fn run_evaluate(cfg: &RunConfig, raw: &[TimeSeries]) -> Result<Evaluation> {
    let out = paths(cfg)?;
    let loaded = LoadedModel::load(cfg)?;
    let train_cfg = &loaded.file.config;
    let prep = prepare(train_cfg, raw, Some(&loaded.file.normalization))?;
    let stride = if cfg.eval.stride > 0 {
        cfg.eval.stride
    } else {
        anchor_cadence(train_cfg, &loaded.model.spec.scales)
    };
    let period = seasonal_period(cfg, prep.stride);
    let min_history = loaded.model.backcast().max(period);
    let name = dataset_name(cfg);
    let point = ModelPoint {
        loaded: &loaded,
        n_samples: cfg.eval.n_samples,
        seed: cfg.seed,
    };
    let scores = score_point_forecasts(&point, &prep, &cfg.eval.horizons, stride, min_history, cfg.eval.denormalized)?;
    let naive = SeasonalNaive { period };
    let base = score_point_forecasts(&naive, &prep, &cfg.eval.horizons, stride, min_history, cfg.eval.denormalized)?;
    let eval = Evaluation {
        model: metric_rows(&name, cfg.seed, &scores),
        baseline: metric_rows(&name, cfg.seed, &base),
    };
    write_metrics_csv(&eval.model, out.metrics_csv())?;
    write_metrics_json(&eval.model, out.metrics_json())?;
    write_metrics_csv(&eval.baseline, out.baseline_csv())?;
    Ok(eval)
}

/// Forecasts every series from `forecast.origin` (or its last row) and writes
/// `forecast.csv` on the original scale.
pub fn run_forecast(cfg: &RunConfig, raw: &[TimeSeries]) -> Result<Vec<ForecastDistribution>> {
    let out = paths(cfg)?;
    let loaded = LoadedModel::load(cfg)?;
    let prep = prepare(&loaded.file.config, raw, Some(&loaded.file.normalization))?;
    let mut dists = Vec::with_capacity(prep.series.len());
    for s in &prep.series {
        let end = match cfg.forecast.origin {
            Some(ts) => s.index_of(ts).ok_or_else(|| {
                Error::Config(format!("field `forecast.origin`: {ts} is not a timestamp of series `{}`", s.series_id))
            })?,
            None => s.len() - 1,
        };
        dists.push(loaded.forecast(&s.slice(0..end + 1), cfg.forecast.horizon, cfg.eval.n_samples, cfg.seed)?);
    }
    write_forecast_csv(&dists, &prep, &out.forecast())?;
    Ok(dists)
}

fn write_forecast_csv(dists: &[ForecastDistribution], prep: &Prepared, path: &Path) -> Result<()> {
    let multichannel = dists.iter().any(|d| d.channels > 1);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["series_id", "origin", "step", "point", "q10", "q50", "q90"];
    if multichannel {
        header.push("channel");
    }
    w.write_record(&header)?;
    debug_assert_eq!(QUANTILES.len(), 3);
    for d in dists {
        let stats = &prep.stats.iter().find(|s| s.series_id == d.series_id).expect("prepared series").stats;
        for step in 0..d.horizon {
            for ch in 0..d.channels {
                let at = step * d.channels + ch;
                let v = |x: f64| format!("{:.10}", stats.denormalize_value(x, ch));
                let mut rec = vec![
                    d.series_id.clone(),
                    d.origin.to_string(),
                    (step + 1).to_string(),
                    v(d.point[at]),
                    v(d.quantiles[0][at]),
                    v(d.quantiles[1][at]),
                    v(d.quantiles[2][at]),
                ];
                if multichannel {
                    rec.push(ch.to_string());
                }
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Checksum of a parameter set as stored in artifacts.
pub fn parameter_fingerprint(params: &ParameterSet) -> u32 {
    fingerprint(params)
}
