use fusioncast::contrastive::{
    batch_gradients, batch_losses, freq_contrastive_loss, pretrain, time_contrastive_loss, PretrainBatch,
    PretrainConfig,
};
use fusioncast::dataset::TimeSeries;
use fusioncast::encoder::{Encoder, EncoderConfig};
use fusioncast::numerics::{evaluate_with_gradients, Graph, OptimizerConfig, RandomStream, Tensor};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct transcription of the time-domain loss as nested loops.
fn time_oracle(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..a.len() {
        let m = a[i].len();
        for t in 0..m {
            let num = dot(&a[i][t], &b[i][t]).exp();
            let mut den = 0.0;
            for t2 in 0..m {
                den += dot(&a[i][t], &b[i][t2]).exp();
                if t2 != t {
                    den += dot(&a[i][t], &a[i][t2]).exp();
                }
            }
            total += -(num / den).ln();
            n += 1;
        }
    }
    total / n as f64
}

/// Frequency-domain loss: negatives are other batch members at the same position.
fn freq_oracle(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    let batch = a.len();
    for i in 0..batch {
        for t in 0..a[i].len() {
            let num = dot(&a[i][t], &b[i][t]).exp();
            let mut den = 0.0;
            for j in 0..batch {
                den += dot(&a[i][t], &b[j][t]).exp();
                if j != i {
                    den += dot(&a[i][t], &a[j][t]).exp();
                }
            }
            total += -(num / den).ln();
            n += 1;
        }
    }
    total / n as f64
}

fn random_views(batch: usize, m: usize, k: usize, s: &mut RandomStream) -> Vec<Vec<Vec<f64>>> {
    (0..batch)
        .map(|_| (0..m).map(|_| (0..k).map(|_| s.normal()).collect()).collect())
        .collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn time_loss_matches_loop_oracle() {
    let mut s = RandomStream::new(1);
    for _ in 0..10 {
        let a = random_views(2, 3, 4, &mut s);
        let b = random_views(2, 3, 4, &mut s);
        let mut g = Graph::new();
        let va: Vec<_> = a.iter().map(|w| g.constant(to_tensor(w))).collect();
        let vb: Vec<_> = b.iter().map(|w| g.constant(to_tensor(w))).collect();
        let l = time_contrastive_loss(&mut g, &va, &vb).unwrap();
        assert!((g.value(l).item() - time_oracle(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn freq_loss_matches_loop_oracle() {
    let mut s = RandomStream::new(2);
    for _ in 0..10 {
        let a = random_views(3, 5, 4, &mut s);
        let b = random_views(3, 5, 4, &mut s);
        let mut g = Graph::new();
        let va: Vec<_> = a.iter().map(|w| g.constant(to_tensor(w))).collect();
        let vb: Vec<_> = b.iter().map(|w| g.constant(to_tensor(w))).collect();
        let l = freq_contrastive_loss(&mut g, &va, &vb).unwrap();
        assert!((g.value(l).item() - freq_oracle(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn time_loss_handles_windows_of_different_overlap() {
    let mut s = RandomStream::new(3);
    let a = vec![random_views(1, 2, 3, &mut s).remove(0), random_views(1, 4, 3, &mut s).remove(0)];
    let b = vec![random_views(1, 2, 3, &mut s).remove(0), random_views(1, 4, 3, &mut s).remove(0)];
    let mut g = Graph::new();
    let va: Vec<_> = a.iter().map(|w| g.constant(to_tensor(w))).collect();
    let vb: Vec<_> = b.iter().map(|w| g.constant(to_tensor(w))).collect();
    let l = time_contrastive_loss(&mut g, &va, &vb).unwrap();
    assert!((g.value(l).item() - time_oracle(&a, &b)).abs() < 1e-10);
}

#[test]
fn batch_order_does_not_change_losses() {
    let mut s = RandomStream::new(4);
    let a = random_views(4, 3, 2, &mut s);
    let b = random_views(4, 3, 2, &mut s);
    let order = [2usize, 0, 3, 1];
    let eval = |a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]| {
        let mut g = Graph::new();
        let va: Vec<_> = a.iter().map(|w| g.constant(to_tensor(w))).collect();
        let vb: Vec<_> = b.iter().map(|w| g.constant(to_tensor(w))).collect();
        let lt = time_contrastive_loss(&mut g, &va, &vb).unwrap();
        let lf = freq_contrastive_loss(&mut g, &va, &vb).unwrap();
        (g.value(lt).item(), g.value(lf).item())
    };
    let pa: Vec<_> = order.iter().map(|&i| a[i].clone()).collect();
    let pb: Vec<_> = order.iter().map(|&i| b[i].clone()).collect();
    let (t1, f1) = eval(&a, &b);
    let (t2, f2) = eval(&pa, &pb);
    assert!((t1 - t2).abs() < 1e-12);
    assert!((f1 - f2).abs() < 1e-12);
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_channels: 1,
        latent_dim: 8,
        heads: 2,
        hidden_dim: 8,
        conv_branches: 3,
        time_dim: 4,
        freq_dim: 4,
        qkv_kernel: 3,
        qkv_dilation: 1,
        fft_window: 8,
        period_hidden: 8,
    }
}

fn sine_windows(n: usize, len: usize, s: &mut RandomStream) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            let period = 6.0 + 3.0 * i as f64;
            let data = (0..len)
                .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin() + 0.1 * s.normal())
                .collect();
            Tensor::matrix(len, 1, data).unwrap()
        })
        .collect()
}

#[test]
fn total_gradient_is_sum_of_component_gradients() {
    let enc = Encoder::new(tiny_encoder()).unwrap();
    let params = enc.init(&mut RandomStream::new(5)).unwrap();
    let mut s = RandomStream::new(6);
    let batch = PretrainBatch::sample(sine_windows(3, 24, &mut s), 0.5, &mut s).unwrap();
    let (parts, total) = batch_gradients(&enc, &params, &batch).unwrap();
    assert!((parts.total - (parts.time + parts.freq)).abs() < 1e-12);
    let (_, gt) = evaluate_with_gradients(&params, |g, p| Ok(batch_losses(&enc, g, p, &batch)?.0)).unwrap();
    let (_, gf) = evaluate_with_gradients(&params, |g, p| Ok(batch_losses(&enc, g, p, &batch)?.1)).unwrap();
    let summed = gt.added(&gf);
    for (path, t) in total.iter() {
        let d = t.max_abs_diff(summed.get(path).unwrap());
        assert!(d < 1e-10, "{path}: {d}");
    }
}

#[test]
fn every_encoder_parameter_receives_gradient() {
    let enc = Encoder::new(tiny_encoder()).unwrap();
    let params = enc.init(&mut RandomStream::new(7)).unwrap();
    let mut s = RandomStream::new(8);
    let batch = PretrainBatch::sample(sine_windows(3, 30, &mut s), 0.5, &mut s).unwrap();
    let (_, grads) = batch_gradients(&enc, &params, &batch).unwrap();
    assert_eq!(grads.len(), params.len());
    for (path, g) in grads.iter() {
        assert!(g.data().iter().any(|&v| v != 0.0), "{path} has an all-zero gradient");
    }
}

#[test]
fn fixed_batch_loss_strictly_decreases() {
    let enc = Encoder::new(tiny_encoder()).unwrap();
    let mut params = enc.init(&mut RandomStream::new(9)).unwrap();
    let mut s = RandomStream::new(10);
    let batch = PretrainBatch::sample(sine_windows(4, 40, &mut s), 0.5, &mut s).unwrap();
    let mut opt = OptimizerConfig::Sgd { lr: 1e-3 }.build();
    let mut history = Vec::new();
    for _ in 0..50 {
        let (loss, grads) = batch_gradients(&enc, &params, &batch).unwrap();
        history.push(loss.total);
        opt.step(&mut params, &grads);
    }
    for w in history[..11].windows(2) {
        assert!(w[1] < w[0], "{history:?}");
    }
    assert!(history[49] < history[0]);
}

fn toy_series() -> Vec<TimeSeries> {
    let mut s = RandomStream::new(11);
    (0..2)
        .map(|i| {
            let t = 300;
            let values = (0..t)
                .map(|k| (2.0 * std::f64::consts::PI * k as f64 / (12.0 + 5.0 * i as f64)).sin() + 0.2 * s.normal())
                .collect();
            TimeSeries::univariate(format!("s{i}"), (0..t as i64).map(|k| k * 300).collect(), values).unwrap()
        })
        .collect()
}

#[test]
fn zero_epochs_return_initial_parameters() {
    let enc = Encoder::new(tiny_encoder()).unwrap();
    let init = enc.init(&mut RandomStream::new(12)).unwrap();
    let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
    let (out, report) = pretrain(&enc, init.clone(), &toy_series(), &cfg, &RandomStream::new(1)).unwrap();
    assert_eq!(out, init);
    assert!(report.steps.is_empty());
}

#[test]
fn pretraining_is_deterministic() {
    let enc = Encoder::new(tiny_encoder()).unwrap();
    let init = enc.init(&mut RandomStream::new(13)).unwrap();
    let cfg = PretrainConfig {
        epochs: 2,
        batch_size: 3,
        window: 48,
        steps_per_epoch: 3,
        ..PretrainConfig::default()
    };
    let series = toy_series();
    let (p1, r1) = pretrain(&enc, init.clone(), &series, &cfg, &RandomStream::new(5)).unwrap();
    let (p2, r2) = pretrain(&enc, init, &series, &cfg, &RandomStream::new(5)).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(r1.steps, r2.steps);
    assert_eq!(r1.epoch_means.len(), 2);
}
