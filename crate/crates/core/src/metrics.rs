//! Accuracy, fairness and coverage metrics, plus summary statistics of the
//! scalarization weights.

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{loss, predict, ModelSpec, ParameterVector};
use crate::numerics::{mean, std_dev};
use crate::scalarization::ScalarizationWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    pub selected_model: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    /// `None` when the client has no test split.
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub jain_index: f64,
}

impl FairnessReport {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("no values to summarize".into()));
        }
        Ok(Self {
            mean: mean(values),
            std: std_dev(values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            jain_index: jain_index(values)?,
        })
    }
}

/// Fraction of rows predicted correctly.
pub fn accuracy(spec: &ModelSpec, theta: &ParameterVector, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Domain("accuracy of an empty dataset".into()));
    }
    let pred = predict(spec, theta, dataset.features.view())?;
    let hits = pred.iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// `(sum x)^2 / (n * sum x^2)`.
pub fn jain_index(values: &[f64]) -> Result<f64> {
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("jain index needs finite nonnegative values".into()));
    }
    let top = values.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) {
        return Err(Error::Domain("jain index needs at least one positive value".into()));
    }
    // scale by the maximum so equal inputs give exactly 1
    let sum: f64 = values.iter().map(|v| v / top).sum();
    let sq: f64 = values.iter().map(|v| (v / top) * (v / top)).sum();
    Ok(sum * sum / (values.len() as f64 * sq))
}

fn train_loss(spec: &ModelSpec, theta: &ParameterVector, client: &ClientDataset) -> Result<f64> {
    loss(spec, theta, &client.train.batch())
}

/// `max_{i,j} L_i(theta_j*) - L_i(theta_i*)` on full training losses.
pub fn heterogeneity_delta(spec: &ModelSpec, optima: &[ParameterVector], clients: &[ClientDataset]) -> Result<f64> {
    if optima.len() != clients.len() {
        return Err(Error::Contract(format!("{} optima for {} clients", optima.len(), clients.len())));
    }
    let mut worst: f64 = 0.0;
    for (i, client) in clients.iter().enumerate() {
        let own = train_loss(spec, &optima[i], client)?;
        for (j, other) in optima.iter().enumerate() {
            if j != i {
                worst = worst.max(train_loss(spec, other, client)? - own);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageGap {
    pub per_client: Vec<f64>,
    pub mean: f64,
}

/// `min_k L_i(theta_k) - L_i(theta_i*)`, clamped at zero.
pub fn coverage_gap(
    spec: &ModelSpec,
    models: &[ParameterVector],
    optima: &[ParameterVector],
    clients: &[ClientDataset],
) -> Result<CoverageGap> {
    if optima.len() != clients.len() {
        return Err(Error::Contract(format!("{} optima for {} clients", optima.len(), clients.len())));
    }
    if models.is_empty() {
        return Err(Error::Contract("coverage gap needs at least one model".into()));
    }
    let per_client = clients
        .iter()
        .zip(optima)
        .map(|(client, opt)| {
            let own = train_loss(spec, opt, client)?;
            let best = models
                .iter()
                .map(|m| train_loss(spec, m, client))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            Ok((best - own).max(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean(&per_client);
    Ok(CoverageGap { per_client, mean })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightDiagnostics {
    /// Coefficient of variation (std / mean) of the outer weights.
    pub alpha_cv: f64,
    /// Mean natural-log entropy of the inner-weight rows.
    pub w_entropy_mean: f64,
    pub w_max_mean: f64,
}

pub fn weight_diagnostics(weights: &ScalarizationWeights) -> WeightDiagnostics {
    let m = weights.clients();
    let alpha_cv = std_dev(&weights.alpha) / mean(&weights.alpha);
    let mut entropy = 0.0;
    let mut max = 0.0;
    for i in 0..m {
        let row = weights.w_row(i);
        entropy += row.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum::<f64>();
        max += row.iter().copied().fold(0.0, f64::max);
    }
    let k_ln = (weights.models as f64).ln();
    WeightDiagnostics { alpha_cv, w_entropy_mean: (entropy / m as f64).clamp(0.0, k_ln), w_max_mean: max / m as f64 }
}
