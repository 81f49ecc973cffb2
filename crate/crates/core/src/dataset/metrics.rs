use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::Contract(format!(
            "metric shape mismatch: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("metric over an empty forecast".into()));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth)?;
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Mean absolute error over all entries.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth)?;
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// One line of a metrics report. `horizon` is `None` for the average row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub horizon: Option<usize>,
    pub mse: f64,
    pub mae: f64,
    pub seed: u64,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["dataset", "horizon", "mse", "mae", "seed"])?;
    for r in rows {
        let horizon = r.horizon.map_or_else(|| "avg".to_string(), |h| h.to_string());
        w.write_record([
            r.dataset.clone(),
            horizon,
            format!("{:.10}", r.mse),
            format!("{:.10}", r.mae),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_json(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)?;
    std::fs::write(path.as_ref(), text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_offset() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        let p = t.map(|v| v + 1.0);
        assert_eq!(mse(&p, &t).unwrap(), 1.0);
        assert_eq!(mae(&p, &t).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(mse(&a, &b), Err(Error::Contract(_))));
    }
}
