use std::f64::consts::PI;

use fusioncast::flow::{fit, FitConfig, FlowConfig, FlowStack};
use fusioncast::numerics::gradcheck::{check_gradients, GradCheckConfig};
use fusioncast::numerics::{Graph, OptimizerConfig, ParameterSet, RandomStream, Tensor};

fn build(dim: usize, cond: usize, layers: usize, seed: u64, spread: f64) -> (FlowStack, ParameterSet) {
    let cfg = FlowConfig { layers, hidden: 16, scale_clamp: 3.0 };
    let flow = FlowStack::new("flow", dim, cond, &cfg).unwrap();
    let mut params = ParameterSet::new();
    let mut s = RandomStream::new(seed);
    flow.init(&mut params, &mut s).unwrap();
    if spread > 0.0 {
        let paths: Vec<String> = params.paths().map(str::to_string).collect();
        for p in paths {
            for v in params.get_mut(&p).unwrap().data_mut() {
                *v = spread * s.normal();
            }
        }
    }
    (flow, params)
}

fn random(rows: usize, cols: usize, s: &mut RandomStream) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| s.normal()).collect()).unwrap()
}

/// `(y, logdet)` of the forward map for a single row.
fn forward_row(flow: &FlowStack, params: &ParameterSet, z: &[f64], h: Option<&[f64]>) -> (Vec<f64>, f64) {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let zv = g.constant(Tensor::row(z));
    let hv = h.map(|h| g.constant(Tensor::row(h)));
    let (y, ld) = flow.forward(&mut g, &p, zv, hv).unwrap();
    (g.value(y).data().to_vec(), g.value(ld).item())
}

/// `log|det A|` by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        let d = a[c][c];
        acc += d.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / d;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

fn numeric_log_det(flow: &FlowStack, params: &ParameterSet, z: &[f64], h: Option<&[f64]>) -> f64 {
    let d = z.len();
    // Five-point central differences.
    let eps = 1e-4;
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let at = |k: f64| {
            let mut x = z.to_vec();
            x[j] += k * eps;
            forward_row(flow, params, &x, h).0
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        for i in 0..d {
            jac[i][j] = (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * eps);
        }
    }
    log_abs_det(jac)
}

#[test]
fn constant_scale_coupling_closed_form() {
    let (flow, mut params) = build(2, 0, 1, 1, 0.0);
    let c: f64 = 0.7;
    params.get_mut("flow.0.s.l2.b").unwrap().data_mut()[0] = (c / 3.0).atanh();
    let (y, ld) = forward_row(&flow, &params, &[0.4, -1.3], None);
    assert_eq!(y[0], 0.4);
    assert!((y[1] - (-1.3 * c.exp())).abs() < 1e-12);
    assert!((ld - c).abs() < 1e-12);
}

#[test]
fn identity_layer_round_trips_exactly() {
    let (flow, params) = build(3, 2, 1, 2, 0.0);
    let (y, ld) = forward_row(&flow, &params, &[1.0, 2.0, 3.0], Some(&[0.1, 0.2]));
    assert_eq!(y, vec![1.0, 2.0, 3.0]);
    assert_eq!(ld, 0.0);
}

#[test]
fn jacobian_matches_logdet_for_single_layer_and_stacks() {
    let mut s = RandomStream::new(3);
    let mut worst: f64 = 0.0;
    for (dim, layers) in [(5, 1), (2, 4), (3, 3), (8, 8), (1, 2), (6, 5)] {
        let (flow, params) = build(dim, 2, layers, 10 + dim as u64, 0.25);
        for _ in 0..3 {
            let z: Vec<f64> = (0..dim).map(|_| s.normal()).collect();
            let h = [s.normal(), s.normal()];
            let (_, ld) = forward_row(&flow, &params, &z, Some(&h));
            let num = numeric_log_det(&flow, &params, &z, Some(&h));
            let rel = (ld - num).abs() / ld.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst relative log-det error {worst}");
}

#[test]
fn round_trip_and_logdets_cancel() {
    let mut s = RandomStream::new(4);
    let (flow, params) = build(4, 3, 6, 5, 0.5);
    let z = random(1000, 4, &mut s);
    let h = random(1000, 3, &mut s);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let zv = g.constant(z.clone());
    let hv = g.constant(h);
    let (y, ld_f) = flow.forward(&mut g, &p, zv, Some(hv)).unwrap();
    let (back, ld_i) = flow.inverse(&mut g, &p, y, Some(hv)).unwrap();
    assert!(g.value(back).max_abs_diff(&z) < 1e-8);
    let sum: f64 = g.value(ld_f).data().iter().zip(g.value(ld_i).data()).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    assert!(sum < 1e-10);
}

#[test]
fn stack_logdet_is_sum_of_layer_logdets() {
    let mut s = RandomStream::new(6);
    let (flow, params) = build(3, 1, 4, 7, 0.5);
    let z = random(5, 3, &mut s);
    let h = random(5, 1, &mut s);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let zv = g.constant(z);
    let hv = g.constant(h);
    let (_, total) = flow.forward(&mut g, &p, zv, Some(hv)).unwrap();
    let mut x = zv;
    let mut acc = vec![0.0; 5];
    for layer in &flow.layers {
        let (y, ld) = layer.forward(&mut g, &p, x, Some(hv));
        for (a, v) in acc.iter_mut().zip(g.value(ld).data()) {
            *a += v;
        }
        x = y;
    }
    assert_eq!(g.value(total).data(), acc.as_slice());
}

#[test]
fn scaled_coordinate_has_analytic_density() {
    // One layer with s ≡ log 2, t ≡ 0 turns N(0,1) into N(0,4).
    for (dim, scaled) in [(1usize, 0usize), (2, 1)] {
        let (flow, mut params) = build(dim, 0, 1, 8, 0.0);
        params.get_mut("flow.0.s.l2.b").unwrap().data_mut()[0] = (2f64.ln() / 3.0).atanh();
        let mut s = RandomStream::new(9);
        for _ in 0..20 {
            let y: Vec<f64> = (0..dim).map(|_| 3.0 * s.normal()).collect();
            let lp = flow.log_density_values(&params, &Tensor::row(&y), None).unwrap()[0];
            let mut expect = 0.0;
            for (i, v) in y.iter().enumerate() {
                let var: f64 = if i == scaled { 4.0 } else { 1.0 };
                expect += -0.5 * (2.0 * PI * var).ln() - v * v / (2.0 * var);
            }
            assert!((lp - expect).abs() < 1e-8, "D={dim}: {lp} vs {expect}");
        }
    }
}

#[test]
fn identity_stack_density_is_standard_normal() {
    let (flow, params) = build(3, 2, 4, 10, 0.0);
    let y = [0.3, -1.0, 2.0];
    let lp = flow.log_density_values(&params, &Tensor::row(&y), Some(&Tensor::row(&[5.0, -5.0]))).unwrap()[0];
    let expect = -1.5 * (2.0 * PI).ln() - 0.5 * y.iter().map(|v| v * v).sum::<f64>();
    assert!((lp - expect).abs() < 1e-12);
}

#[test]
fn fitted_flow_integrates_to_one() {
    // Importance sampling with a wide Gaussian proposal.
    let mut s = RandomStream::new(12);
    let n = 4000;
    let hs = random(n, 1, &mut s).map(|v| 0.5 * v);
    let data = Tensor::matrix(n, 2, (0..n).flat_map(|i| {
        let a = s.normal();
        [a + hs.get(i, 0), 0.8 * a + 0.6 * s.normal()]
    }).collect()).unwrap();
    let (flow, mut params) = build(2, 1, 4, 11, 0.0);
    let cfg = FitConfig { steps: 300, batch_size: 128, optimizer: OptimizerConfig::adam(1e-2) };
    fit(&flow, &mut params, &data, Some(&hs), &cfg, &mut RandomStream::new(13)).unwrap();
    let n = 100_000;
    let sigma: f64 = 3.0;
    let q = random(n, 2, &mut s).map(|v| v * sigma);
    let h = Tensor::full(&[n, 1], 0.4);
    let lp = flow.log_density_values(&params, &q, Some(&h)).unwrap();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        let r = q.row_slice(i);
        let lq = -(2.0 * PI * sigma * sigma).ln() - (r[0] * r[0] + r[1] * r[1]) / (2.0 * sigma * sigma);
        acc += (l - lq).exp();
    }
    let z = acc / n as f64;
    assert!((0.97..=1.03).contains(&z), "normalization estimate {z}");
}

#[test]
fn identity_stack_samples_are_standard_normal() {
    let (flow, params) = build(2, 0, 4, 13, 0.0);
    let a = flow.sample(&params, None, &mut RandomStream::new(14), 10_000).unwrap();
    for c in 0..2 {
        let m = (0..a.rows()).map(|r| a.get(r, c)).sum::<f64>() / a.rows() as f64;
        assert!(m.abs() < 0.05);
    }
    let b = flow.sample(&params, None, &mut RandomStream::new(14), 10_000).unwrap();
    assert!(a.bitwise_eq(&b));
    let one = flow.sample(&params, None, &mut RandomStream::new(1), 1).unwrap();
    assert_eq!(one.shape(), &[1, 2]);
}

#[test]
fn samples_have_finite_density() {
    let (flow, params) = build(3, 2, 4, 15, 0.5);
    let h = Tensor::row(&[0.2, -0.7]);
    let y = flow.sample(&params, Some(&h), &mut RandomStream::new(16), 50).unwrap();
    let hs = Tensor::matrix(50, 2, h.data().repeat(50)).unwrap();
    assert!(flow.log_density_values(&params, &y, Some(&hs)).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn coupling_gradients_match_finite_differences() {
    let (flow, params) = build(3, 2, 3, 17, 0.4);
    let mut s = RandomStream::new(18);
    let y = random(4, 3, &mut s);
    let h = random(4, 2, &mut s);
    let report = check_gradients(
        &params,
        |g, p| {
            let yv = g.constant(y.clone());
            let hv = g.constant(h.clone());
            let lp = flow.log_density(g, p, yv, Some(hv))?;
            Ok(g.mean(lp))
        },
        &GradCheckConfig::default(),
        &mut RandomStream::new(19),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn conditioning_is_used_after_fitting() {
    let mut s = RandomStream::new(20);
    let n = 2000;
    let h = random(n, 1, &mut s);
    let y = Tensor::matrix(n, 2, (0..n).flat_map(|i| {
        let c = h.get(i, 0);
        [2.0 * c + 0.3 * s.normal(), -c + 0.3 * s.normal()]
    }).collect()).unwrap();
    let (flow, mut params) = build(2, 1, 2, 21, 0.0);
    let cfg = FitConfig { steps: 400, batch_size: 128, optimizer: OptimizerConfig::adam(1e-2) };
    fit(&flow, &mut params, &y, Some(&h), &cfg, &mut RandomStream::new(22)).unwrap();
    let true_ll: f64 = flow.log_density_values(&params, &y, Some(&h)).unwrap().iter().sum::<f64>() / n as f64;
    let mut shuffled = (0..n).collect::<Vec<_>>();
    RandomStream::new(23).shuffle(&mut shuffled);
    let hs = Tensor::matrix(n, 1, shuffled.iter().map(|&i| h.get(i, 0)).collect()).unwrap();
    let shuffled_ll: f64 = flow.log_density_values(&params, &y, Some(&hs)).unwrap().iter().sum::<f64>() / n as f64;
    assert!(true_ll > shuffled_ll + 0.5, "{true_ll} vs {shuffled_ll}");
}
