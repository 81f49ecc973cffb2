//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numerical side only ever calls the forward program, so it stays
//! independent of the backward implementation it is checking.

use super::graph::{Graph, Var};
use super::params::{evaluate, evaluate_with_gradients, Bound, ParameterSet};
use super::rng::RandomStream;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// that are zero up to round-off compare on an absolute scale.
    pub floor: f64,
    /// Entries sampled per parameter tensor (all entries when smaller).
    pub max_entries_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            floor: 1e-6,
            max_entries_per_param: 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients of `program` with central differences on a
/// random sample of entries of every trainable parameter.
pub fn check_gradients<F>(
    params: &ParameterSet,
    program: F,
    cfg: &GradCheckConfig,
    stream: &mut RandomStream,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let (_, grads) = evaluate_with_gradients(params, &program)?;
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (path, analytic) in grads.iter() {
        let n = analytic.len();
        let picks: Vec<usize> = if n <= cfg.max_entries_per_param {
            (0..n).collect()
        } else {
            stream.distinct(n, cfg.max_entries_per_param)
        };
        for idx in picks {
            let orig = params.get(path).expect("gradient for known path").data()[idx];
            probe.get_mut(path).unwrap().data_mut()[idx] = orig + cfg.step;
            let up = evaluate(&probe, &program)?;
            probe.get_mut(path).unwrap().data_mut()[idx] = orig - cfg.step;
            let down = evaluate(&probe, &program)?;
            probe.get_mut(path).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[idx];
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > cfg.rel_tol {
                report.failures.push(Mismatch {
                    path: path.to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
