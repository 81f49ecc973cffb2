use std::path::Path;

use fusioncast::artifact::{EncoderFile, ModelFile};
use fusioncast::config::RunConfig;
use fusioncast::dataset::TimeSeries;
use fusioncast::encoder::EncoderConfig;
use fusioncast::flow::FlowConfig;
use fusioncast::forecaster::{ForecasterConfig, PointForecaster};
use fusioncast::numerics::{OptimizerConfig, RandomStream};
use fusioncast::pipeline::{
    evaluation_origins, prepare, run_encode, run_evaluate, run_forecast, run_pretrain, run_train,
    score_point_forecasts, ArtifactPaths, LoadedModel,
};
use fusioncast::store::Store;
use fusioncast::synth::{generate, Sinusoid, SynthSpec};
use fusioncast::{Error, Result};
use proptest::prelude::*;

fn hourly(seed: u64) -> Vec<TimeSeries> {
    let spec = SynthSpec {
        length: 1200,
        stride: 3600,
        start: 1_704_067_200,
        series: 2,
        sinusoids: vec![
            Sinusoid {
                period: 24.0,
                amplitude: 2.0,
                phase: 0.0,
            },
            Sinusoid {
                period: 168.0,
                amplitude: 1.0,
                phase: 0.5,
            },
        ],
        slope: 0.0,
        level: 5.0,
        noise: 0.2,
    };
    generate(&spec, &RandomStream::new(seed)).unwrap()
}

fn small_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig {
        dataset: dir.join("toy.csv"),
        output_dir: dir.to_path_buf(),
        seed: 3,
        ..RunConfig::default()
    };
    c.encoder = EncoderConfig {
        latent_dim: 8,
        heads: 2,
        hidden_dim: 8,
        conv_branches: 2,
        time_dim: 4,
        freq_dim: 4,
        fft_window: 16,
        period_hidden: 8,
        ..EncoderConfig::default()
    };
    c.pretrain.window = 64;
    c.pretrain.batch_size = 4;
    c.pretrain.steps_per_epoch = 3;
    c.forecaster = ForecasterConfig {
        backcast: 48,
        context_dim: 8,
        id_dim: 2,
        heads: 2,
        proj_hidden: 8,
        flow: FlowConfig {
            layers: 2,
            hidden: 8,
            scale_clamp: 3.0,
        },
    };
    c.train.horizon = 24;
    c.train.stride = 24;
    c.train.batch_size = 4;
    c.train.steps_per_epoch = 4;
    c.train.optimizer = OptimizerConfig::adam(1e-2);
    c.eval.horizons = vec![24, 48];
    c.eval.n_samples = 8;
    c
}

fn run_all(cfg: &RunConfig, raw: &[TimeSeries]) -> Result<()> {
    run_pretrain(cfg, raw)?;
    run_encode(cfg, raw)?;
    run_train(cfg, raw)?;
    run_evaluate(cfg, raw)?;
    run_forecast(cfg, raw)?;
    Ok(())
}

#[test]
fn stages_produce_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let raw = hourly(1);
    run_pretrain(&cfg, &raw).unwrap();
    let records = run_encode(&cfg, &raw).unwrap();
    assert_eq!(records, 2 * (1200 / 24));
    run_train(&cfg, &raw).unwrap();
    let eval = run_evaluate(&cfg, &raw).unwrap();
    assert_eq!(eval.model.len(), 3);
    assert!(eval.model.iter().all(|r| r.mse.is_finite() && r.mae.is_finite()));
    assert_eq!(eval.model[2].horizon, None);
    let dists = run_forecast(&cfg, &raw).unwrap();
    assert_eq!(dists.len(), 2);

    let text = std::fs::read_to_string(dir.path().join("forecast.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "series_id,origin,step,point,q10,q50,q90");
    assert_eq!(lines.count(), 2 * 96);
    // Forecasts are written on the original scale, around the level of 5.
    let first: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(3).map(|v| v.parse().unwrap()).collect();
    assert!(first[1] <= first[2] && first[2] <= first[3], "{first:?}");
    assert!((first[0] - 5.0).abs() < 10.0);

    let mut files: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "baseline_metrics.csv",
            "encoder.json",
            "forecast.csv",
            "metrics.csv",
            "metrics.json",
            "model.json",
            "pretrain_loss.csv",
            "representations.store",
            "train_loss.csv"
        ]
    );
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let raw = hourly(1);
    let runs: Vec<(Vec<Vec<u8>>, u32)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = small_config(dir.path());
            run_all(&cfg, &raw).unwrap();
            let files = ["metrics.csv", "forecast.csv", "representations.store", "train_loss.csv"]
                .iter()
                .map(|f| std::fs::read(dir.path().join(f)).unwrap())
                .collect();
            // model.json embeds the output directory, so compare its parameters.
            let model = ModelFile::load(dir.path().join("model.json")).unwrap();
            (files, model.forecaster.checksum)
        })
        .collect();
    for (i, name) in ["metrics.csv", "forecast.csv", "representations.store", "train_loss.csv"].iter().enumerate() {
        assert!(runs[0].0[i] == runs[1].0[i], "{name} differs");
    }
    assert_eq!(runs[0].1, runs[1].1);
}

#[test]
fn train_requires_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let raw = hourly(1);
    run_pretrain(&cfg, &raw).unwrap();
    match run_train(&cfg, &raw) {
        Err(Error::MissingArtifact { path, .. }) => assert!(path.ends_with("representations.store")),
        other => panic!("expected a missing store, got {other:?}"),
    }
    assert!(!dir.path().join("model.json").exists());
}

#[test]
fn no_repr_runs_without_a_store() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.ablation.no_repr = true;
    let raw = hourly(1);
    run_pretrain(&cfg, &raw).unwrap();
    run_train(&cfg, &raw).unwrap();
    let eval = run_evaluate(&cfg, &raw).unwrap();
    assert!(eval.model.iter().all(|r| r.mse.is_finite()));
}

#[test]
fn ablation_mismatch_at_evaluation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.ablation.no_repr = true;
    let raw = hourly(1);
    run_pretrain(&cfg, &raw).unwrap();
    run_train(&cfg, &raw).unwrap();
    cfg.ablation.no_repr = false;
    assert!(matches!(run_evaluate(&cfg, &raw), Err(Error::Config(_))));
}

#[test]
fn store_from_another_encoder_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    let raw = hourly(1);
    run_pretrain(&cfg, &raw).unwrap();
    run_encode(&cfg, &raw).unwrap();
    cfg.seed = 4;
    run_pretrain(&cfg, &raw).unwrap();
    assert!(matches!(run_train(&cfg, &raw), Err(Error::Schema(_))));
}

#[test]
fn stored_fingerprint_matches_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let raw = hourly(1);
    run_pretrain(&cfg, &raw).unwrap();
    run_encode(&cfg, &raw).unwrap();
    let paths = ArtifactPaths::new(dir.path());
    let enc = EncoderFile::load(paths.encoder()).unwrap();
    let store = Store::open(paths.store()).unwrap();
    assert_eq!(store.fingerprint(), enc.encoder.checksum);
    assert_ne!(store.fingerprint(), 0);
}

#[test]
fn held_out_rows_never_influence_training() {
    let raw = hourly(1);
    let mut altered = raw.clone();
    let train_rows = (1200.0 * 0.7) as usize;
    for s in &mut altered {
        for v in &mut s.values[train_rows..] {
            *v = *v * -3.0 + 100.0;
        }
    }
    let models: Vec<ModelFile> = [&raw, &altered]
        .iter()
        .map(|data| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = small_config(dir.path());
            run_pretrain(&cfg, data).unwrap();
            run_encode(&cfg, data).unwrap();
            run_train(&cfg, data).unwrap().0
        })
        .collect();
    assert_eq!(models[0].normalization, models[1].normalization);
    assert_eq!(models[0].encoder.checksum, models[1].encoder.checksum);
    assert_eq!(models[0].forecaster.checksum, models[1].forecaster.checksum);
}

#[test]
fn forecasts_ignore_rows_after_the_origin() {
    let raw = hourly(1);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    run_pretrain(&cfg, &raw).unwrap();
    run_encode(&cfg, &raw).unwrap();
    run_train(&cfg, &raw).unwrap();
    let origin_row = 1007;
    cfg.forecast.origin = Some(raw[0].timestamps[origin_row]);
    let before = run_forecast(&cfg, &raw).unwrap();

    // Rewrite the future and re-encode: anchors at or before the origin are unchanged.
    let mut altered = raw.clone();
    for s in &mut altered {
        for v in &mut s.values[origin_row + 1..] {
            *v += 50.0;
        }
    }
    run_encode(&cfg, &altered).unwrap();
    let after = run_forecast(&cfg, &altered).unwrap();
    assert_eq!(before[0].samples, after[0].samples);
    assert_eq!(before[1].point, after[1].point);
}

#[test]
fn unknown_origin_is_a_config_error() {
    let raw = hourly(1);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.ablation.no_repr = true;
    run_pretrain(&cfg, &raw).unwrap();
    run_train(&cfg, &raw).unwrap();
    cfg.forecast.origin = Some(17);
    assert!(matches!(run_forecast(&cfg, &raw), Err(Error::Config(_))));
}

#[test]
fn forecast_before_train_names_the_missing_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    match run_forecast(&cfg, &hourly(1)) {
        Err(Error::MissingArtifact { path, hint }) => {
            assert!(path.ends_with("model.json"));
            assert!(hint.contains("train"));
        }
        other => panic!("{other:?}"),
    }
}

/// Returns the true continuation of the series it was built from.
struct Oracle {
    full: Vec<TimeSeries>,
}

impl PointForecaster for Oracle {
    fn point_forecast(&self, history: &TimeSeries, horizon: usize) -> Result<Vec<f64>> {
        let s = self.full.iter().find(|s| s.series_id == history.series_id).unwrap();
        let start = history.len() * s.channels;
        Ok(s.values[start..start + horizon * s.channels].to_vec())
    }
}

#[test]
fn oracle_scores_zero_and_constant_offset_scores_its_square() {
    let raw = hourly(2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let prep = prepare(&cfg, &raw, None).unwrap();
    let oracle = Oracle {
        full: prep.series.clone(),
    };
    let scores = score_point_forecasts(&oracle, &prep, &[24, 48], 24, 48, false).unwrap();
    for (_, mse, mae) in &scores {
        assert_eq!(*mse, 0.0);
        assert_eq!(*mae, 0.0);
    }

    struct Shifted(Oracle);
    impl PointForecaster for Shifted {
        fn point_forecast(&self, history: &TimeSeries, horizon: usize) -> Result<Vec<f64>> {
            Ok(self.0.point_forecast(history, horizon)?.iter().map(|v| v + 0.5).collect())
        }
    }
    let shifted = Shifted(Oracle {
        full: prep.series.clone(),
    });
    for (_, mse, mae) in score_point_forecasts(&shifted, &prep, &[24, 48], 24, 48, false).unwrap() {
        assert!((mse - 0.25).abs() < 1e-12);
        assert!((mae - 0.5).abs() < 1e-12);
    }
    // On the original scale the offset is multiplied by each series' std.
    let denorm = score_point_forecasts(&shifted, &prep, &[24], 24, 48, true).unwrap();
    let stds: Vec<f64> = prep.stats.iter().map(|s| s.stats.std[0]).collect();
    let expected = stds.iter().map(|s| (0.5 * s).powi(2)).sum::<f64>() / 2.0;
    assert!((denorm[0].1 - expected).abs() < 1e-9, "{} vs {expected}", denorm[0].1);
}

proptest! {
    #[test]
    fn origins_respect_the_test_region(
        start in 1usize..300,
        len in 1usize..300,
        stride in 1usize..50,
        min_history in 1usize..200,
        shortest in 1usize..60,
    ) {
        let test = start..start + len;
        let origins = evaluation_origins(&test, stride, min_history, shortest);
        for &a in &origins {
            prop_assert!(a + 1 >= test.start);
            prop_assert!(a + shortest < test.end);
            prop_assert!(a + 1 >= min_history);
            prop_assert_eq!((a + 1) % stride, 0);
        }
        let brute = (0..test.end)
            .filter(|&a| a + 1 >= test.start && a + 1 >= min_history && (a + 1) % stride == 0 && a + shortest < test.end)
            .count();
        prop_assert_eq!(origins.len(), brute);
    }
}

#[test]
fn saved_model_reloads_to_identical_forecasts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let raw = hourly(8);
    run_pretrain(&cfg, &raw).unwrap();
    run_encode(&cfg, &raw).unwrap();
    run_train(&cfg, &raw).unwrap();
    let path = ArtifactPaths::new(dir.path()).model();
    let forecast = || {
        let loaded = LoadedModel::load(&cfg).unwrap();
        loaded.forecast(&raw[1], 48, 16, 5).unwrap().samples
    };
    let before = forecast();
    let original = std::fs::read(&path).unwrap();
    ModelFile::load(&path).unwrap().save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), original);
    let after = forecast();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
}
