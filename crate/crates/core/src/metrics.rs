//! Scene-flow quality metrics: end-point error and accuracy/outlier ratios.

use serde::{Deserialize, Serialize};

use crate::types::{self, Point3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no points to evaluate")]
    Empty,
    #[error("predicted warp has {predicted} rows, ground truth has {truth}")]
    CountMismatch { predicted: usize, truth: usize },
    #[error("non-finite warp vector at row {0}")]
    NonFinite(usize),
}

/// Thresholds of the accuracy and outlier ratios. Absolute thresholds are in
/// the units of the warp vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub strict_rel: f64,
    pub strict_abs: f64,
    pub relaxed_rel: f64,
    pub relaxed_abs: f64,
    pub outlier_rel: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            strict_rel: 0.025,
            strict_abs: 0.025,
            relaxed_rel: 0.05,
            relaxed_abs: 0.05,
            outlier_rel: 0.3,
        }
    }
}

/// Floor on the ground-truth norm in the relative error.
pub const REL_FLOOR: f64 = 1e-12;

/// EPE in warp units; the ratios are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub epe: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub outlier: f64,
    pub count: usize,
}

/// Per-point `(error norm, relative error)`.
pub fn point_errors(predicted: Point3, truth: Point3) -> (f64, f64) {
    let e = types::norm(types::sub(predicted, truth));
    (e, e / types::norm(truth).max(REL_FLOOR))
}

pub fn compute_metrics(
    predicted: &[Point3],
    truth: &[Point3],
) -> Result<FlowMetrics, MetricsError> {
    compute_metrics_with(predicted, truth, &Thresholds::default())
}

pub fn compute_metrics_with(
    predicted: &[Point3],
    truth: &[Point3],
    th: &Thresholds,
) -> Result<FlowMetrics, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::CountMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut epe = 0.0;
    let (mut strict, mut relaxed, mut outliers) = (0usize, 0usize, 0usize);
    for (i, (&p, &g)) in predicted.iter().zip(truth).enumerate() {
        if !p.iter().chain(&g).all(|c| c.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
        let (e, rel) = point_errors(p, g);
        epe += e;
        strict += usize::from(rel < th.strict_rel || e < th.strict_abs);
        relaxed += usize::from(rel < th.relaxed_rel || e < th.relaxed_abs);
        outliers += usize::from(rel > th.outlier_rel);
    }
    let n = predicted.len() as f64;
    let pct = |c: usize| 100.0 * c as f64 / n;
    Ok(FlowMetrics {
        epe: epe / n,
        acc_s: pct(strict),
        acc_r: pct(relaxed),
        outlier: pct(outliers),
        count: predicted.len(),
    })
}
