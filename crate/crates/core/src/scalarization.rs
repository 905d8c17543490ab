//! Tchebycheff set scalarization over an `M x K` client-by-model loss
//! matrix, its doubly smoothed surrogate, and the gradient weights that
//! surrogate induces.
//!
//! With `S_i = sum_k exp(-L_ik / mu)` the smoothed objective is
//! `mu * ln(sum_i 1 / S_i)`, and its gradient with respect to model `k` is
//! `sum_i alpha_i * w_ik * grad L_ik` where
//!
//! * `w_ik = exp(-L_ik / mu) / S_i` softly selects the best model per client,
//! * `alpha_i = softmax_i(-ln S_i)` up-weights clients no model serves well.
//!
//! Everything is carried in the log domain; `S_i` itself is never formed.

use crate::error::{Error, Result};
use crate::model::ParameterVector;
use crate::numerics::{axpy, softmin_unchecked};

pub const DEFAULT_MU: f64 = 0.01;

/// Losses `L_i(theta_k)`, row-major by client.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    clients: usize,
    models: usize,
    values: Vec<f64>,
    /// `n_i / sum_j n_j` when sample weighting has been applied.
    sample_weights: Option<Vec<f64>>,
}

impl LossMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let clients = rows.len();
        let models = rows.first().map_or(0, Vec::len);
        if clients == 0 || models == 0 {
            return Err(Error::Contract("loss matrix needs at least one client and one model".into()));
        }
        if rows.iter().any(|r| r.len() != models) {
            return Err(Error::Contract("ragged loss matrix".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Contract(format!("loss entries must be finite and nonnegative, got {v}")));
        }
        Ok(Self { clients, models, values, sample_weights: None })
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn models(&self) -> usize {
        self.models
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.models + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.models..(i + 1) * self.models]
    }

    pub fn sample_weights(&self) -> Option<&[f64]> {
        self.sample_weights.as_deref()
    }

    /// New matrix with every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let rows = (0..self.clients).map(|i| self.row(i).iter().map(|v| v * c).collect()).collect();
        Self::new(rows)
    }
}

/// Multiplies row `i` by `n_i / sum_j n_j`.
pub fn apply_sample_weighting(raw: Vec<Vec<f64>>, sizes: &[usize]) -> Result<LossMatrix> {
    if sizes.len() != raw.len() {
        return Err(Error::Contract(format!("{} sizes for {} clients", sizes.len(), raw.len())));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Config("total sample count is zero".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("every client needs a positive sample count".into()));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    let rows = raw.into_iter().zip(&weights).map(|(row, &s)| row.into_iter().map(|v| v * s).collect()).collect();
    let mut lm = LossMatrix::new(rows)?;
    lm.sample_weights = Some(weights);
    Ok(lm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarizationConfig {
    pub mu: f64,
    /// Client preferences `lambda_i`; `None` means all ones.
    pub preferences: Option<Vec<f64>>,
    /// Ideal points `z_i*`; `None` means all zeros.
    pub ideal_points: Option<Vec<f64>>,
    pub use_sample_weighting: bool,
}

impl Default for ScalarizationConfig {
    fn default() -> Self {
        Self { mu: DEFAULT_MU, preferences: None, ideal_points: None, use_sample_weighting: true }
    }
}

impl ScalarizationConfig {
    pub fn with_mu(mu: f64) -> Self {
        Self { mu, ..Self::default() }
    }

    fn validate(&self, clients: usize) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if let Some(l) = &self.preferences {
            if l.len() != clients || l.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config("preferences must be M positive reals".into()));
            }
        }
        if let Some(z) = &self.ideal_points {
            if z.len() != clients || z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("ideal points must be M finite reals".into()));
            }
        }
        Ok(())
    }

    fn lambda(&self, i: usize) -> f64 {
        self.preferences.as_ref().map_or(1.0, |l| l[i])
    }

    fn ideal(&self, i: usize) -> f64 {
        self.ideal_points.as_ref().map_or(0.0, |z| z[i])
    }

    /// Row `i` as `lambda_i * (L_ik - z_i*)`.
    fn shifted_row(&self, lm: &LossMatrix, i: usize) -> Vec<f64> {
        let (l, z) = (self.lambda(i), self.ideal(i));
        lm.row(i).iter().map(|v| l * (v - z)).collect()
    }
}

/// `max_i lambda_i * (min_k L_ik - z_i*)`, the non-smooth objective.
pub fn tch_set_value(lm: &LossMatrix, cfg: &ScalarizationConfig) -> Result<f64> {
    cfg.validate(lm.clients())?;
    Ok((0..lm.clients())
        .map(|i| cfg.shifted_row(lm, i).into_iter().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Smoothed objective `mu * ln(sum_i (sum_k exp(-L_ik / mu))^-1)`.
pub fn stch_set_value(lm: &LossMatrix, cfg: &ScalarizationConfig) -> Result<f64> {
    cfg.validate(lm.clients())?;
    let neg_log_s: Vec<f64> =
        (0..lm.clients()).map(|i| -softmin_unchecked(&cfg.shifted_row(lm, i), cfg.mu).1).collect();
    let m = neg_log_s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = neg_log_s.iter().map(|v| (v - m).exp()).sum();
    Ok(cfg.mu * (m + s.ln()))
}

/// Outer client weights and inner model weights of the smoothed objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarizationWeights {
    pub alpha: Vec<f64>,
    /// `M x K`, row-major.
    pub w: Vec<f64>,
    pub log_s: Vec<f64>,
    pub models: usize,
    /// Chain-rule factor `lambda_i` applied during aggregation.
    pub preferences: Vec<f64>,
}

impl ScalarizationWeights {
    pub fn clients(&self) -> usize {
        self.alpha.len()
    }

    pub fn w_row(&self, i: usize) -> &[f64] {
        &self.w[i * self.models..(i + 1) * self.models]
    }

    pub fn w_at(&self, i: usize, k: usize) -> f64 {
        self.w[i * self.models + k]
    }

    /// Flattened `alpha_i * w_ik`.
    pub fn joint(&self) -> Vec<f64> {
        (0..self.clients()).flat_map(|i| self.w_row(i).iter().map(move |w| self.alpha[i] * w)).collect()
    }
}

pub fn compute_weights(lm: &LossMatrix, cfg: &ScalarizationConfig) -> Result<ScalarizationWeights> {
    cfg.validate(lm.clients())?;
    let m = lm.clients();
    let mut w = Vec::with_capacity(m * lm.models());
    let mut log_s = Vec::with_capacity(m);
    for i in 0..m {
        let (row, ls) = softmin_unchecked(&cfg.shifted_row(lm, i), cfg.mu);
        w.extend(row);
        log_s.push(ls);
    }
    // alpha = softmax(-log S)
    let top = log_s.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let mut alpha: Vec<f64> = log_s.iter().map(|v| (-v - top).exp()).collect();
    let total: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= total);
    Ok(ScalarizationWeights {
        alpha,
        w,
        log_s,
        models: lm.models(),
        preferences: (0..m).map(|i| cfg.lambda(i)).collect(),
    })
}

/// `out_k = sum_i alpha_i * w_ik * g_ik`, summed in ascending client order.
///
/// `grads[i][k]` is client `i`'s gradient for model `k`.
pub fn aggregate_gradients(
    weights: &ScalarizationWeights,
    grads: &[Vec<ParameterVector>],
) -> Result<Vec<ParameterVector>> {
    let (m, k) = (weights.clients(), weights.models);
    if grads.len() != m || grads.iter().any(|row| row.len() != k) {
        return Err(Error::Contract(format!("expected {m} x {k} gradients")));
    }
    let d = grads[0][0].len();
    if grads.iter().flatten().any(|g| g.len() != d) {
        return Err(Error::Contract("gradients differ in dimension".into()));
    }
    let mut out = vec![ParameterVector::zeros(d); k];
    for (i, row) in grads.iter().enumerate() {
        let a = weights.alpha[i] * weights.preferences[i];
        for (kk, g) in row.iter().enumerate() {
            axpy(a * weights.w_at(i, kk), g.as_slice(), out[kk].as_mut_slice());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn lm(rows: &[&[f64]]) -> LossMatrix {
        LossMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn cfg(mu: f64) -> ScalarizationConfig {
        ScalarizationConfig { mu, use_sample_weighting: false, ..Default::default() }
    }

    fn random_matrix(rng: &mut Rng, max_loss: f64) -> LossMatrix {
        let m = 1 + rng.index(8);
        let k = 1 + rng.index(5);
        LossMatrix::new((0..m).map(|_| (0..k).map(|_| rng.uniform() * max_loss).collect()).collect()).unwrap()
    }

    #[test]
    fn sample_weighting() {
        let l = apply_sample_weighting(vec![vec![2.0, 4.0]; 4], &[5, 5, 5, 5]).unwrap();
        assert_eq!(l.row(3), &[0.5, 1.0]);
        let l = apply_sample_weighting(vec![vec![4.0, 4.0], vec![4.0, 4.0]], &[1, 3]).unwrap();
        assert_eq!(l.row(0), &[1.0, 1.0]);
        assert_eq!(l.row(1), &[3.0, 3.0]);
        assert_eq!(l.sample_weights(), Some(&[0.25, 0.75][..]));
        assert!(matches!(apply_sample_weighting(vec![vec![1.0]], &[0]), Err(Error::Config(_))));
        let pre = lm(&[&[1.0, 1.0], &[3.0, 3.0]]);
        let c = cfg(0.5);
        assert_eq!(stch_set_value(&l, &c).unwrap(), stch_set_value(&pre, &c).unwrap());
    }

    #[test]
    fn tch_examples() {
        assert_eq!(tch_set_value(&lm(&[&[2.0]]), &cfg(1.0)).unwrap(), 2.0);
        let l = lm(&[&[1.0, 2.0], &[3.0, 0.5]]);
        assert_eq!(tch_set_value(&l, &cfg(1.0)).unwrap(), 1.0);
        let shifted = ScalarizationConfig { ideal_points: Some(vec![1.0, 1.0]), ..cfg(1.0) };
        assert_eq!(tch_set_value(&l, &shifted).unwrap(), 0.0);
    }

    #[test]
    fn stch_examples() {
        for mu in [1e-3, 0.5, 10.0] {
            assert!((stch_set_value(&lm(&[&[1.75]]), &cfg(mu)).unwrap() - 1.75).abs() < 1e-14);
        }
        let direct = -((-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((stch_set_value(&lm(&[&[1.0, 2.0]]), &cfg(1.0)).unwrap() - direct).abs() < 1e-15);
        assert!((direct - 0.686738).abs() < 1e-6);
        assert!(matches!(stch_set_value(&lm(&[&[1.0]]), &cfg(0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn stch_positive_homogeneity() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let l = random_matrix(&mut rng, 3.0);
            let mu = 0.05 + rng.uniform();
            let a = stch_set_value(&l.scaled(3.7).unwrap(), &cfg(3.7 * mu)).unwrap();
            let b = 3.7 * stch_set_value(&l, &cfg(mu)).unwrap();
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn weights_examples() {
        let w = compute_weights(&lm(&[&[0.4; 3], &[0.4; 3]]), &cfg(0.1)).unwrap();
        assert!(w.alpha.iter().all(|a| (a - 0.5).abs() < 1e-15));
        assert!(w.w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let w = compute_weights(&lm(&[&[1.0, 2.0]]), &cfg(1.0)).unwrap();
        let (e1, e2) = ((-1.0f64).exp(), (-2.0f64).exp());
        assert!((w.w[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert_eq!(w.alpha, vec![1.0]);

        let base = lm(&[&[1.0, 2.0], &[1.5, 0.5]]);
        let raised = lm(&[&[3.0, 4.0], &[1.5, 0.5]]);
        let (a, b) = (compute_weights(&base, &cfg(1.0)).unwrap(), compute_weights(&raised, &cfg(1.0)).unwrap());
        for k in 0..2 {
            assert!((a.w_at(0, k) - b.w_at(0, k)).abs() < 1e-15);
        }
        assert!(b.alpha[0] > a.alpha[0]);
    }

    #[test]
    fn aggregate_examples() {
        let g = |v: &[f64]| ParameterVector(v.to_vec());
        let w = compute_weights(&lm(&[&[0.2, 0.9]]), &cfg(0.5)).unwrap();
        let out = aggregate_gradients(&w, &[vec![g(&[1.0, 2.0]), g(&[-3.0, 4.0])]]).unwrap();
        assert_eq!(out[0].0, vec![w.w[0], 2.0 * w.w[0]]);
        assert_eq!(out[1].0, vec![-3.0 * w.w[1], 4.0 * w.w[1]]);

        let w = compute_weights(&lm(&[&[0.7; 3][..]; 4]), &cfg(0.01)).unwrap();
        let same = vec![vec![g(&[0.3, -0.6]); 3]; 4];
        for o in aggregate_gradients(&w, &same).unwrap() {
            assert!((o.0[0] - 0.1).abs() < 1e-15 && (o.0[1] + 0.2).abs() < 1e-15);
        }
        assert!(matches!(aggregate_gradients(&w, &same[..2]), Err(Error::Contract(_))));
    }

    #[test]
    fn chain_rule_through_toy_map() {
        // L_ik(theta) = sum_j c_ikj * (theta_kj - t_ikj)^2 + b_ik
        let mut rng = Rng::new(42);
        for trial in 0..30 {
            let (m, k, d) = (1 + rng.index(4), 1 + rng.index(3), 1 + rng.index(4));
            let coef: Vec<f64> = (0..m * k * d).map(|_| 0.1 + rng.uniform()).collect();
            let target: Vec<f64> = (0..m * k * d).map(|_| rng.standard_normal()).collect();
            let theta: Vec<f64> = (0..k * d).map(|_| rng.standard_normal()).collect();
            let mu = 0.2 + rng.uniform();
            let idx = |i: usize, kk: usize, j: usize| (i * k + kk) * d + j;
            let losses = |th: &[f64]| -> LossMatrix {
                LossMatrix::new(
                    (0..m)
                        .map(|i| {
                            (0..k)
                                .map(|kk| {
                                    (0..d)
                                        .map(|j| coef[idx(i, kk, j)] * (th[kk * d + j] - target[idx(i, kk, j)]).powi(2))
                                        .sum()
                                })
                                .collect()
                        })
                        .collect(),
                )
                .unwrap()
            };
            let grads: Vec<Vec<ParameterVector>> = (0..m)
                .map(|i| {
                    (0..k)
                        .map(|kk| {
                            ParameterVector(
                                (0..d)
                                    .map(|j| 2.0 * coef[idx(i, kk, j)] * (theta[kk * d + j] - target[idx(i, kk, j)]))
                                    .collect(),
                            )
                        })
                        .collect()
                })
                .collect();
            let c = cfg(mu);
            let w = compute_weights(&losses(&theta), &c).unwrap();
            let agg: Vec<f64> = aggregate_gradients(&w, &grads).unwrap().into_iter().flat_map(|p| p.0).collect();
            let h = 1e-6;
            let fd: Vec<f64> = (0..k * d)
                .map(|j| {
                    let mut up = theta.clone();
                    let mut dn = theta.clone();
                    up[j] += h;
                    dn[j] -= h;
                    (stch_set_value(&losses(&up), &c).unwrap() - stch_set_value(&losses(&dn), &c).unwrap()) / (2.0 * h)
                })
                .collect();
            let diff: f64 = agg.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = crate::numerics::norm(&fd).max(1e-8);
            assert!(diff / scale <= 1e-4, "trial {trial}: {}", diff / scale);
        }
    }

    #[test]
    fn corrected_sandwich_holds() {
        // max_i smin_i <= stch <= max_i smin_i + mu ln M and min - mu ln K <= smin <= min
        let mut rng = Rng::new(9);
        for _ in 0..10_000 {
            let l = random_matrix(&mut rng, 5.0);
            let mu = [1e-3, 1e-2, 0.1, 1.0][rng.index(4)];
            let c = cfg(mu);
            let (t, s) = (tch_set_value(&l, &c).unwrap(), stch_set_value(&l, &c).unwrap());
            let (m, k) = (l.clients() as f64, l.models() as f64);
            assert!(s - mu * m.ln() <= t + 1e-12);
            assert!(t <= s + mu * k.ln() + 1e-12);
        }
    }

    #[test]
    fn log_domain_survives_huge_losses() {
        let l = lm(&[&[1e6, 2e6, 5e5], &[3e6, 1e6, 9e5]]);
        let w = compute_weights(&l, &cfg(0.01)).unwrap();
        assert!(w.alpha.iter().chain(&w.w).all(|v| v.is_finite() && *v >= 0.0));
        assert!(stch_set_value(&l, &cfg(0.01)).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn convex_combination(seed in 0u64..100_000) {
            let mut rng = Rng::new(seed);
            let l = random_matrix(&mut rng, 10.0);
            let mu = 10f64.powf(-3.0 + 3.0 * rng.uniform());
            let w = compute_weights(&l, &cfg(mu)).unwrap();
            let joint = w.joint();
            prop_assert!(joint.iter().all(|v| *v >= 0.0));
            prop_assert!((joint.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            for i in 0..l.clients() {
                prop_assert!((w.w_row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
        }

        #[test]
        fn smaller_mu_sharpens_rows(seed in 0u64..100_000, mu in 0.01..2.0f64) {
            let mut rng = Rng::new(seed);
            let l = random_matrix(&mut rng, 3.0);
            let hi = compute_weights(&l, &cfg(mu)).unwrap();
            let lo = compute_weights(&l, &cfg(mu / 2.0)).unwrap();
            for i in 0..l.clients() {
                let max = |r: &[f64]| r.iter().copied().fold(0.0, f64::max);
                prop_assert!(max(lo.w_row(i)) + 1e-15 >= max(hi.w_row(i)));
            }
        }

        #[test]
        fn weighting_composes(seed in 0u64..100_000) {
            let mut rng = Rng::new(seed);
            let l = random_matrix(&mut rng, 3.0);
            let sizes: Vec<usize> = (0..l.clients()).map(|_| 1 + rng.index(50)).collect();
            let raw: Vec<Vec<f64>> = (0..l.clients()).map(|i| l.row(i).to_vec()).collect();
            let weighted = apply_sample_weighting(raw.clone(), &sizes).unwrap();
            let total: usize = sizes.iter().sum();
            let pre = LossMatrix::new(
                raw.iter().zip(&sizes).map(|(r, &n)| r.iter().map(|v| v * (n as f64 / total as f64)).collect()).collect(),
            ).unwrap();
            let (a, b) = (compute_weights(&weighted, &cfg(0.05)).unwrap(), compute_weights(&pre, &cfg(0.05)).unwrap());
            prop_assert_eq!(a.alpha, b.alpha);
            prop_assert_eq!(a.w, b.w);
        }
    }
}
