//! Scoring: NMSE, ID/OOD reporting, time-ordered differentiation, and the
//! built-in benchmark generators.

mod dataset;
mod problems;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{evaluate, EvalError};
use crate::fit::FittedModel;

pub use dataset::{Dataset, Partition, PartitionData, SPLIT_COLUMN};
pub use problems::{generate_problem, Family, GroundTruth, ProblemSpec, Sampling, VarRange};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("data is not time-ordered")]
    NotTimeOrdered,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Normalized mean squared error: SSE over the target's sum of squared
/// deviations from its mean. Any non-finite prediction scores +inf.
pub fn nmse(predictions: &[f64], targets: &[f64]) -> Result<f64, ScoreError> {
    if predictions.len() != targets.len() {
        return Err(ScoreError::LengthMismatch(predictions.len(), targets.len()));
    }
    if targets.len() < 2 {
        return Err(ScoreError::TooFewRows(targets.len()));
    }
    if predictions.iter().any(|p| !p.is_finite()) {
        return Ok(f64::INFINITY);
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let sst: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (y - p).powi(2))
        .sum();
    if sst == 0.0 {
        return Ok(if sse == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(sse / sst)
}

/// Derivative of `values` along `ordinate`: second-order central differences
/// in the interior (non-uniform spacing allowed), one-sided at both ends.
pub fn numeric_gradient(values: &[f64], ordinate: &[f64]) -> Result<Vec<f64>, ScoreError> {
    if values.len() != ordinate.len() {
        return Err(ScoreError::LengthMismatch(values.len(), ordinate.len()));
    }
    if values.len() < 2 {
        return Err(ScoreError::TooFewRows(values.len()));
    }
    Ok(gradient_unchecked(values, ordinate))
}

pub(crate) fn gradient_unchecked(f: &[f64], x: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    out[0] = (f[1] - f[0]) / (x[1] - x[0]);
    out[n - 1] = (f[n - 1] - f[n - 2]) / (x[n - 1] - x[n - 2]);
    for i in 1..n - 1 {
        let hs = x[i] - x[i - 1];
        let hd = x[i + 1] - x[i];
        out[i] = (hs * hs * f[i + 1] + (hd * hd - hs * hs) * f[i] - hd * hd * f[i - 1])
            / (hs * hd * (hd + hs));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub id_nmse: f64,
    /// `None` when the dataset has no OOD rows.
    pub ood_nmse: Option<f64>,
}

/// NMSE of a fitted model on one partition.
pub fn partition_nmse(model: &FittedModel, part: &PartitionData) -> Result<f64, ScoreError> {
    let frame = part.frame()?;
    let predictions = evaluate(&model.skeleton, &model.params, &frame)?;
    nmse(&predictions, part.target())
}

/// Reports ID and OOD NMSE separately. OOD is for reporting only.
pub fn score_solution(model: &FittedModel, data: &Dataset) -> Result<SplitScores, ScoreError> {
    let id_nmse = partition_nmse(model, &data.partition(Partition::Id))?;
    let ood_nmse = if data.ood_rows().is_empty() {
        None
    } else {
        Some(partition_nmse(model, &data.partition(Partition::Ood))?)
    };
    Ok(SplitScores { id_nmse, ood_nmse })
}
