//! Real-input discrete Fourier transform.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{contract, Result};

/// Spectrum bins `0..=n/2` of a real signal:
/// `X[k] = Σ_t x[t]·exp(−2πi·k·t/n)`.
pub fn fft_real(signal: &[f64]) -> Result<Vec<Complex64>> {
    let mut full = fft_full(signal)?;
    full.truncate(signal.len() / 2 + 1);
    Ok(full)
}

/// All `n` bins of the forward transform of a real signal.
pub fn fft_full(signal: &[f64]) -> Result<Vec<Complex64>> {
    if signal.is_empty() {
        return Err(contract("fft of an empty signal"));
    }
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    Ok(buf)
}

/// Inverse of [`fft_real`]: rebuilds the length-`n` real signal from its
/// half spectrum.
pub fn ifft_real(half: &[Complex64], n: usize) -> Result<Vec<f64>> {
    if n == 0 || half.len() != n / 2 + 1 {
        return Err(contract(format!(
            "half spectrum of length {} does not match signal length {n}",
            half.len()
        )));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..half.len()].copy_from_slice(half);
    for k in half.len()..n {
        buf[k] = half[n - k].conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    Ok(buf.iter().map(|c| c.re / n as f64).collect())
}

/// Magnitudes of [`fft_real`].
pub fn magnitude_spectrum(signal: &[f64]) -> Result<Vec<f64>> {
    Ok(fft_real(signal)?.iter().map(|c| c.norm()).collect())
}
