//! Regression metrics on held-out target labels.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

/// R², RMSE and MAE of `predictions` against `labels`.
pub fn evaluate(predictions: ArrayView1<'_, f64>, labels: ArrayView1<'_, f64>) -> Result<MetricsReport> {
    let n = labels.len();
    if predictions.len() != n {
        return Err(psc_core::PscError::DimMismatch { expected: n, got: predictions.len() }.into());
    }
    if n < 2 {
        return Err(psc_core::PscError::TooFewSamples { needed: 2, got: n }.into());
    }
    let mean = labels.sum() / n as f64;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(BenchError::ConstantLabels);
    }
    let mut ss_res = 0.0;
    let mut abs = 0.0;
    for (p, y) in predictions.iter().zip(labels) {
        ss_res += (y - p).powi(2);
        abs += (y - p).abs();
    }
    Ok(MetricsReport {
        r2: 1.0 - ss_res / ss_tot,
        rmse: (ss_res / n as f64).sqrt(),
        mae: abs / n as f64,
        n,
    })
}
