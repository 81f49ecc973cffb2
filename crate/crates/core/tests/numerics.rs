use std::f64::consts::PI;

use fusioncast::nn::Mlp;
use fusioncast::numerics::gradcheck::{check_gradients, GradCheckConfig};
use fusioncast::numerics::{fft_real, ifft_real, Complex64, ParameterSet, RandomStream, Tensor};
use proptest::prelude::*;

fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, &v)| {
                let angle = -2.0 * PI * (k * t) as f64 / n as f64;
                acc + Complex64::new(v * angle.cos(), v * angle.sin())
            })
        })
        .collect()
}

#[test]
fn fft_matches_the_naive_dft() {
    let mut s = RandomStream::new(4);
    for case in 0..25 {
        let n = 1 + s.below(64);
        let x: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let fast = fft_real(&x).unwrap();
        let slow = naive_dft(&x);
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9, "case {case}, n={n}: {a} vs {b}");
        }
    }
}

#[test]
fn pure_tone_lands_in_its_bin() {
    let n = 64;
    let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * 5.0 * t as f64 / n as f64).cos()).collect();
    let spec = fft_real(&x).unwrap();
    for (k, c) in spec.iter().enumerate() {
        let expected = if k == 5 { n as f64 / 2.0 } else { 0.0 };
        assert!((c.norm() - expected).abs() < 1e-9, "bin {k}: {}", c.norm());
    }
}

proptest! {
    #[test]
    fn fft_is_linear(xs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..64), a in -3.0f64..3.0) {
        let x: Vec<f64> = xs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = xs.iter().map(|p| p.1).collect();
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + v).collect();
        let (fx, fy, fm) = (fft_real(&x).unwrap(), fft_real(&y).unwrap(), fft_real(&mixed).unwrap());
        for k in 0..fm.len() {
            prop_assert!((fm[k] - (fx[k] * a + fy[k])).norm() < 1e-9);
        }
    }

    #[test]
    fn parseval_holds(x in prop::collection::vec(-5.0f64..5.0, 1..80)) {
        let n = x.len();
        let half = fft_real(&x).unwrap();
        // Bins strictly between DC and Nyquist appear twice in the full spectrum.
        let spectral: f64 = half
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let twice = k != 0 && !(n % 2 == 0 && k == n / 2);
                c.norm_sqr() * if twice { 2.0 } else { 1.0 }
            })
            .sum::<f64>()
            / n as f64;
        let energy: f64 = x.iter().map(|v| v * v).sum();
        prop_assert!((spectral - energy).abs() < 1e-9 * energy.max(1.0));
    }

    #[test]
    fn inverse_round_trips(x in prop::collection::vec(-5.0f64..5.0, 1..80)) {
        let back = ifft_real(&fft_real(&x).unwrap(), x.len()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn small_mlp_gradients_match_finite_differences_everywhere() {
    let mlp = Mlp::new("mlp", 2, 3, 2);
    let mut params = ParameterSet::new();
    let mut s = RandomStream::new(8);
    mlp.init(&mut params, &mut s).unwrap();
    assert_eq!(params.num_scalars(), 17);
    let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![1.5, 0.4], vec![-0.7, 0.9]]).unwrap();
    let cfg = GradCheckConfig {
        max_entries_per_param: usize::MAX,
        ..GradCheckConfig::default()
    };
    let report = check_gradients(
        &params,
        |g, p| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, p, xv);
            let sq = g.square(y);
            Ok(g.mean(sq))
        },
        &cfg,
        &mut s,
    )
    .unwrap();
    assert_eq!(report.checked, 17);
    assert!(report.passed(), "{:?}", report.failures);
}
