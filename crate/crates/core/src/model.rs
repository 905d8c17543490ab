//! Differentiable classifiers with hand-written gradients.
//!
//! Parameters are stored flat with the bias folded into each unit's row:
//!
//! * softmax regression: `C` rows of `p + 1` (weights then bias)
//! * one-hidden-layer tanh MLP: `h` rows of `p + 1`, then `C` rows of `h + 1`
//!
//! The objective is mean cross-entropy plus `(l2_penalty / 2) * ||theta||^2`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Rng};

pub const DEFAULT_L2_PENALTY: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub classes: usize,
    pub l2_penalty: f64,
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, classes: usize) -> Self {
        Self { kind: ModelKind::SoftmaxRegression, input_dim, classes, l2_penalty: DEFAULT_L2_PENALTY }
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self { kind: ModelKind::Mlp { hidden }, input_dim, classes, l2_penalty: DEFAULT_L2_PENALTY }
    }

    pub fn with_l2(mut self, l2_penalty: f64) -> Self {
        self.l2_penalty = l2_penalty;
        self
    }

    /// Parameter count `d`.
    pub fn dim(&self) -> usize {
        let (p, c) = (self.input_dim, self.classes);
        match self.kind {
            ModelKind::SoftmaxRegression => (p + 1) * c,
            ModelKind::Mlp { hidden } => (p + 1) * hidden + (hidden + 1) * c,
        }
    }

    pub fn is_convex(&self) -> bool {
        matches!(self.kind, ModelKind::SoftmaxRegression)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(Error::Config(format!(
                "model needs input_dim >= 1 and classes >= 2 (got {} and {})",
                self.input_dim, self.classes
            )));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.kind {
            return Err(Error::Config("mlp hidden_dim must be >= 1".into()));
        }
        if !(self.l2_penalty >= 0.0) || !self.l2_penalty.is_finite() {
            return Err(Error::Config(format!("l2_penalty must be >= 0, got {}", self.l2_penalty)));
        }
        Ok(())
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer.
    pub fn init(&self, rng: &mut Rng) -> ParameterVector {
        let p = self.input_dim;
        let mut values = Vec::with_capacity(self.dim());
        let mut layer = |rows: usize, fan_in: usize, values: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..rows * (fan_in + 1) {
                values.push(rng.uniform_range(-bound, bound));
            }
        };
        match self.kind {
            ModelKind::SoftmaxRegression => layer(self.classes, p, &mut values),
            ModelKind::Mlp { hidden } => {
                layer(hidden, p, &mut values);
                layer(self.classes, hidden, &mut values);
            }
        }
        ParameterVector(values)
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        crate::numerics::norm(&self.0)
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Borrowed rows of features with their labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Self {
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check(spec: &ModelSpec, theta: &ParameterVector, features: ArrayView2<'_, f64>) -> Result<()> {
    if theta.len() != spec.dim() {
        return Err(Error::Contract(format!(
            "parameter dimension {} does not match model dimension {}",
            theta.len(),
            spec.dim()
        )));
    }
    if features.ncols() != spec.input_dim {
        return Err(Error::Contract(format!(
            "feature width {} does not match model input_dim {}",
            features.ncols(),
            spec.input_dim
        )));
    }
    Ok(())
}

fn check_batch(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch<'_>) -> Result<()> {
    check(spec, theta, batch.features)?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if batch.features.nrows() != batch.labels.len() {
        return Err(Error::Contract(format!(
            "{} feature rows but {} labels",
            batch.features.nrows(),
            batch.labels.len()
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= spec.classes) {
        return Err(Error::Contract(format!("label {y} out of range for {} classes", spec.classes)));
    }
    Ok(())
}

/// `out[r] = w[r, ..p] . x + w[r, p]` for a layer stored as rows of `p + 1`.
fn affine(w: &[f64], x: &[f64], out: &mut [f64]) {
    let stride = x.len() + 1;
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * stride..(r + 1) * stride];
        let mut z = row[x.len()];
        for (a, b) in row[..x.len()].iter().zip(x) {
            z += a * b;
        }
        *o = z;
    }
}

/// Per-row forward pass; fills `hidden` (MLP only) and `logits`.
fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    match spec.kind {
        ModelKind::SoftmaxRegression => affine(theta, x, logits),
        ModelKind::Mlp { hidden: h } => {
            let split = h * (spec.input_dim + 1);
            affine(&theta[..split], x, hidden);
            for v in hidden.iter_mut() {
                *v = v.tanh();
            }
            affine(&theta[split..], hidden, logits);
        }
    }
}

fn hidden_len(spec: &ModelSpec) -> usize {
    match spec.kind {
        ModelKind::SoftmaxRegression => 0,
        ModelKind::Mlp { hidden } => hidden,
    }
}

fn l2_term(spec: &ModelSpec, theta: &ParameterVector) -> f64 {
    0.5 * spec.l2_penalty * crate::numerics::dot(&theta.0, &theta.0)
}

/// Mean cross-entropy over the batch plus the L2 penalty.
pub fn loss(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch<'_>) -> Result<f64> {
    check_batch(spec, theta, batch)?;
    let mut hidden = vec![0.0; hidden_len(spec)];
    let mut logits = vec![0.0; spec.classes];
    let mut total = 0.0;
    for (x, &y) in batch.features.rows().into_iter().zip(batch.labels) {
        let x = x.to_slice().map(std::borrow::Cow::Borrowed).unwrap_or_else(|| x.to_vec().into());
        forward(spec, &theta.0, &x, &mut hidden, &mut logits);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    Ok(total / batch.len() as f64 + l2_term(spec, theta))
}

/// Loss and its analytic gradient in one pass.
pub fn loss_and_grad(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch<'_>) -> Result<(f64, ParameterVector)> {
    check_batch(spec, theta, batch)?;
    let p = spec.input_dim;
    let c = spec.classes;
    let h = hidden_len(spec);
    let mut g = vec![0.0; theta.len()];
    let mut hidden = vec![0.0; h];
    let mut probs = vec![0.0; c];
    let mut delta_hidden = vec![0.0; h];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;

    for (x, &y) in batch.features.rows().into_iter().zip(batch.labels) {
        let x = x.to_slice().map(std::borrow::Cow::Borrowed).unwrap_or_else(|| x.to_vec().into());
        forward(spec, &theta.0, &x, &mut hidden, &mut probs);
        let m = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + probs.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - probs[y];
        softmax_in_place(&mut probs);
        // dL/dlogits = probs - onehot(y)
        probs[y] -= 1.0;

        match spec.kind {
            ModelKind::SoftmaxRegression => {
                for (k, &dk) in probs.iter().enumerate() {
                    let row = &mut g[k * (p + 1)..(k + 1) * (p + 1)];
                    for (gj, xj) in row[..p].iter_mut().zip(x.iter()) {
                        *gj += scale * dk * xj;
                    }
                    row[p] += scale * dk;
                }
            }
            ModelKind::Mlp { .. } => {
                let split = h * (p + 1);
                let (g1, g2) = g.split_at_mut(split);
                let w2 = &theta.0[split..];
                delta_hidden.iter_mut().for_each(|v| *v = 0.0);
                for (k, &dk) in probs.iter().enumerate() {
                    let row = &mut g2[k * (h + 1)..(k + 1) * (h + 1)];
                    let wrow = &w2[k * (h + 1)..(k + 1) * (h + 1)];
                    for j in 0..h {
                        row[j] += scale * dk * hidden[j];
                        delta_hidden[j] += dk * wrow[j];
                    }
                    row[h] += scale * dk;
                }
                for j in 0..h {
                    let dz = delta_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                    let row = &mut g1[j * (p + 1)..(j + 1) * (p + 1)];
                    for (gi, xi) in row[..p].iter_mut().zip(x.iter()) {
                        *gi += scale * dz * xi;
                    }
                    row[p] += scale * dz;
                }
            }
        }
    }

    if spec.l2_penalty > 0.0 {
        for (gi, ti) in g.iter_mut().zip(&theta.0) {
            *gi += spec.l2_penalty * ti;
        }
    }
    Ok((total * scale + l2_term(spec, theta), ParameterVector(g)))
}

/// Analytic gradient of [`loss`].
pub fn grad(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch<'_>) -> Result<ParameterVector> {
    loss_and_grad(spec, theta, batch).map(|(_, g)| g)
}

/// Class probabilities, one row per input row.
pub fn probabilities(spec: &ModelSpec, theta: &ParameterVector, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check(spec, theta, features)?;
    let mut out = Array2::zeros((features.nrows(), spec.classes));
    let mut hidden = vec![0.0; hidden_len(spec)];
    let mut logits = vec![0.0; spec.classes];
    for (r, x) in features.rows().into_iter().enumerate() {
        let x = x.to_vec();
        forward(spec, &theta.0, &x, &mut hidden, &mut logits);
        softmax_in_place(&mut logits);
        for (k, &v) in logits.iter().enumerate() {
            out[[r, k]] = v;
        }
    }
    Ok(out)
}

/// Argmax class per row; ties resolve to the lowest class index.
pub fn predict(spec: &ModelSpec, theta: &ParameterVector, features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    check(spec, theta, features)?;
    let mut hidden = vec![0.0; hidden_len(spec)];
    let mut logits = vec![0.0; spec.classes];
    let mut out = Vec::with_capacity(features.nrows());
    for x in features.rows() {
        let x = x.to_vec();
        forward(spec, &theta.0, &x, &mut hidden, &mut logits);
        out.push(argmax(&logits));
    }
    Ok(out)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient, one coordinate at a time.
pub fn finite_difference_grad(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch<'_>,
    step: f64,
) -> Result<ParameterVector> {
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    check_batch(spec, theta, batch)?;
    let mut probe = theta.clone();
    let mut g = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let orig = probe.0[j];
        probe.0[j] = orig + step;
        let up = loss(spec, &probe, batch)?;
        probe.0[j] = orig - step;
        let down = loss(spec, &probe, batch)?;
        probe.0[j] = orig;
        g.push((up - down) / (2.0 * step));
    }
    Ok(ParameterVector(g))
}
