//! In-process simulation of the federated protocols.
//!
//! Every round broadcasts an immutable snapshot of the server models, runs
//! the per-client work (optionally on the rayon pool), then aggregates on a
//! single thread in ascending `(client, model)` order. All randomness a
//! client task consumes comes from its own `(round, client, model)` stream,
//! so results do not depend on scheduling.

use rayon::prelude::*;

use crate::data::{
    dirichlet_partition_with, gen_mixture, load_csv, pathological_partition_with, ClientDataset, MixtureSpec,
    SplitFractions,
};
use crate::error::{Error, Result};
use crate::metrics::{weight_diagnostics, WeightDiagnostics};
use crate::model::{loss, loss_and_grad, ModelKind, ModelSpec, ParameterVector};
use crate::numerics::{axpy, dot, norm, Rng, Stream};
use crate::scalarization::{
    aggregate_gradients, apply_sample_weighting, compute_weights, stch_set_value, LossMatrix, ScalarizationConfig,
    ScalarizationWeights,
};

/// Aggregated-gradient norm below which a round counts as stationary.
pub const STATIONARITY_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FedFew,
    FedAvg,
    Ifca,
    Local,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedFew => "fedfew",
            Method::FedAvg => "fedavg",
            Method::Ifca => "ifca",
            Method::Local => "local",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fedfew" => Some(Method::FedFew),
            "fedavg" => Some(Method::FedAvg),
            "ifca" => Some(Method::Ifca),
            "local" => Some(Method::Local),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelArch {
    Softmax,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Partition {
    Dirichlet { alpha: f64 },
    Pathological { classes_per_client: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub groups: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub samples_per_client: usize,
    pub test_samples_per_client: usize,
    pub permute_labels: bool,
}

impl Default for MixtureParams {
    fn default() -> Self {
        Self {
            groups: 3,
            input_dim: 5,
            classes: 3,
            separation: 5.0,
            noise: 1.0,
            samples_per_client: 100,
            test_samples_per_client: 100,
            permute_labels: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Mixture(MixtureParams),
    Csv { path: std::path::PathBuf, partition: Partition, test_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub clients: usize,
    pub models: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Rows per local mini-batch; values at or above a client's train size
    /// mean full-batch steps.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mu: f64,
    pub seed: u64,
    pub model: ModelArch,
    pub l2_penalty: f64,
    pub data: DataSpec,
    pub validation_fraction: f64,
    pub use_sample_weighting: bool,
    /// Evaluate client tasks on the rayon pool.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::FedFew,
            clients: 12,
            models: 3,
            rounds: 100,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.1,
            mu: crate::scalarization::DEFAULT_MU,
            seed: 0,
            model: ModelArch::Softmax,
            l2_penalty: crate::model::DEFAULT_L2_PENALTY,
            data: DataSpec::Mixture(MixtureParams::default()),
            validation_fraction: crate::data::DEFAULT_VALIDATION_FRACTION,
            use_sample_weighting: true,
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.clients == 0 || self.models == 0 || self.rounds == 0 || self.local_epochs == 0 {
            return bad("M, K, T and E must all be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return bad("mu must be positive");
        }
        if self.method == Method::FedAvg && self.models != 1 {
            return bad("fedavg trains a single model; K must be 1");
        }
        if !(self.l2_penalty >= 0.0) {
            return bad("l2 penalty must be nonnegative");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if let ModelArch::Mlp { hidden: 0 } = self.model {
            return bad("mlp hidden size must be at least 1");
        }
        match &self.data {
            DataSpec::Mixture(p) => {
                if p.groups == 0 || p.groups > self.clients {
                    return bad("mixture groups must lie in [1, M]");
                }
            }
            DataSpec::Csv { partition, test_fraction, .. } => {
                if !(*test_fraction >= 0.0 && *test_fraction < 1.0) {
                    return bad("csv test fraction must lie in [0, 1)");
                }
                match partition {
                    Partition::Dirichlet { alpha } if !(*alpha > 0.0) => {
                        return bad("dirichlet alpha must be positive")
                    }
                    Partition::Pathological { classes_per_client: 0 } => return bad("classes_per_client must be >= 1"),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn scalarization(&self) -> ScalarizationConfig {
        ScalarizationConfig { mu: self.mu, use_sample_weighting: self.use_sample_weighting, ..Default::default() }
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        let kind = match self.model {
            ModelArch::Softmax => ModelKind::SoftmaxRegression,
            ModelArch::Mlp { hidden } => ModelKind::Mlp { hidden },
        };
        ModelSpec { kind, input_dim, classes, l2_penalty: self.l2_penalty }
    }
}

/// Builds the client datasets described by `cfg.data`.
pub fn build_clients(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    let mut rng = Rng::substream(cfg.seed, Stream::Data, &[]);
    match &cfg.data {
        DataSpec::Mixture(p) => {
            let mut spec = MixtureSpec::balanced(p.groups, cfg.clients);
            spec.input_dim = p.input_dim;
            spec.classes = p.classes;
            spec.class_mean_separation = p.separation;
            spec.noise_std = p.noise;
            spec.samples_per_client = p.samples_per_client;
            spec.test_samples_per_client = p.test_samples_per_client;
            spec.label_permutation_per_group = p.permute_labels;
            spec.validation_fraction = cfg.validation_fraction;
            gen_mixture(&spec, &mut rng)
        }
        DataSpec::Csv { path, partition, test_fraction } => {
            let base = load_csv(path)?;
            let split = SplitFractions { validation: cfg.validation_fraction, test: *test_fraction };
            let mut prng = Rng::substream(cfg.seed, Stream::Partition, &[]);
            match partition {
                Partition::Dirichlet { alpha } => {
                    dirichlet_partition_with(&base, *alpha, cfg.clients, split, &mut prng)
                }
                Partition::Pathological { classes_per_client } => {
                    pathological_partition_with(&base, *classes_per_client, cfg.clients, split, &mut prng)
                }
            }
        }
    }
}

/// The `K` server models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub models: Vec<ParameterVector>,
}

impl ModelSet {
    pub fn new(models: Vec<ParameterVector>) -> Result<Self> {
        let d = models.first().map(ParameterVector::len).ok_or_else(|| Error::Contract("empty model set".into()))?;
        if models.iter().any(|m| m.len() != d) {
            return Err(Error::Contract("model dimensions differ".into()));
        }
        Ok(Self { models })
    }

    /// `K` independent draws, model `k` from init substream `k`.
    pub fn init(spec: &ModelSpec, k: usize, seed: u64) -> Self {
        Self { models: (0..k).map(|i| spec.init(&mut Rng::substream(seed, Stream::Init, &[i as u64]))).collect() }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    /// 1-based.
    pub round: usize,
    pub stch_value: f64,
    /// One entry per server model (a single entry for local-only training).
    pub grad_norms: Vec<f64>,
    pub alpha_cv: f64,
    pub w_entropy_mean: f64,
    pub w_max_mean: f64,
    /// Messages sent from clients to the server this round.
    pub uploads: usize,
    /// All aggregated gradient norms were at most [`STATIONARITY_EPS`] and
    /// the joint weights formed a convex combination.
    pub stationary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub selected: Vec<usize>,
    /// `losses[i][k]`: client `i`'s validation loss under model `k`.
    pub losses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub models: ModelSet,
    pub traces: Vec<RoundTrace>,
    /// IFCA cluster membership per round.
    pub assignments: Vec<Vec<usize>>,
    /// Weights of the last fedfew round.
    pub final_weights: Option<ScalarizationWeights>,
}

/// Client-side local training: `epochs` passes of mini-batch descent.
fn local_train(
    spec: &ModelSpec,
    client: &ClientDataset,
    theta: &ParameterVector,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<ParameterVector> {
    let train = &client.train;
    if train.is_empty() {
        return Err(Error::Config(format!("client {} has an empty train split", client.client_id)));
    }
    let mut theta = theta.clone();
    if lr == 0.0 {
        return Ok(theta);
    }
    let n = train.len();
    for _ in 0..epochs {
        if batch_size >= n {
            let (_, g) = loss_and_grad(spec, &theta, &train.batch())?;
            axpy(-lr, g.as_slice(), theta.as_mut_slice());
            continue;
        }
        let order = rng.permutation(n);
        for chunk in order.chunks(batch_size) {
            let mb = train.subset(chunk);
            let (_, g) = loss_and_grad(spec, &theta, &mb.batch())?;
            axpy(-lr, g.as_slice(), theta.as_mut_slice());
        }
    }
    Ok(theta)
}

/// Local epochs from the broadcast `theta_k`, then the full-train gradient
/// and loss at the locally updated point. The local parameters are dropped.
pub fn client_round(
    spec: &ModelSpec,
    client: &ClientDataset,
    theta_k: &ParameterVector,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<(ParameterVector, f64)> {
    if theta_k.len() != spec.dim() {
        return Err(Error::Contract(format!("model dimension {} != {}", theta_k.len(), spec.dim())));
    }
    let local = local_train(spec, client, theta_k, epochs, batch_size, lr, rng)?;
    let (l, g) = loss_and_grad(spec, &local, &client.train.batch())?;
    Ok((g, l))
}

fn batch_rng(seed: u64, round: usize, client: usize, model: usize) -> Rng {
    Rng::substream(seed, Stream::Batch, &[round as u64, client as u64, model as u64])
}

/// Runs `f` over `0..n`, on the rayon pool when `parallel`, returning
/// results in index order.
fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

fn loss_matrix(raw: Vec<Vec<f64>>, sizes: &[usize], weighted: bool) -> Result<LossMatrix> {
    if weighted {
        apply_sample_weighting(raw, sizes)
    } else {
        LossMatrix::new(raw)
    }
}

fn diagnostics(lm: &LossMatrix, scfg: &ScalarizationConfig) -> Result<(f64, WeightDiagnostics, ScalarizationWeights)> {
    let w = compute_weights(lm, scfg)?;
    Ok((stch_set_value(lm, scfg)?, weight_diagnostics(&w), w))
}

fn weighted_average(params: &[&ParameterVector], sizes: &[usize]) -> ParameterVector {
    let total: usize = sizes.iter().sum();
    let mut out = ParameterVector::zeros(params[0].len());
    for (p, &n) in params.iter().zip(sizes) {
        axpy(n as f64 / total as f64, p.as_slice(), out.as_mut_slice());
    }
    out
}

fn pseudo_gradient_norm(old: &ParameterVector, new: &ParameterVector, lr: f64) -> f64 {
    let diff: Vec<f64> = old.as_slice().iter().zip(new.as_slice()).map(|(a, b)| a - b).collect();
    norm(&diff) / lr
}

/// Clients plus the model they are trained on.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub spec: ModelSpec,
    pub clients: Vec<ClientDataset>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let clients = build_clients(&cfg)?;
        let input_dim = clients[0].train.input_dim();
        let classes = clients.iter().map(|c| c.train.class_count.max(c.validation.class_count)).max().unwrap_or(0);
        let spec = cfg.model_spec(input_dim, classes);
        spec.validate()?;
        Self::with_clients(cfg, spec, clients)
    }

    pub fn with_clients(cfg: ExperimentConfig, spec: ModelSpec, clients: Vec<ClientDataset>) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if clients.len() != cfg.clients {
            return Err(Error::Config(format!(
                "config says M={} but {} clients were built",
                cfg.clients,
                clients.len()
            )));
        }
        Ok(Self { cfg, spec, clients })
    }

    fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientDataset::train_size).collect()
    }

    pub fn init_models(&self, k: usize) -> ModelSet {
        ModelSet::init(&self.spec, k, self.cfg.seed)
    }

    pub fn run(&self) -> Result<RunOutput> {
        match self.cfg.method {
            Method::FedFew => self.run_fedfew(),
            Method::FedAvg => self.run_fedavg(),
            Method::Ifca => self.run_ifca(),
            Method::Local => self.run_local(),
        }
    }

    /// One fedfew round from `models`: returns the updated models, the
    /// aggregated gradients and the server-side weights.
    pub fn fedfew_round(
        &self,
        round: usize,
        models: &ModelSet,
    ) -> Result<(ModelSet, Vec<ParameterVector>, LossMatrix, ScalarizationWeights)> {
        let cfg = &self.cfg;
        let (m, k) = (self.clients.len(), models.len());
        let results = map_indexed(m * k, cfg.parallel, |idx| {
            let (i, kk) = (idx / k, idx % k);
            let mut rng = batch_rng(cfg.seed, round, i, kk);
            client_round(
                &self.spec,
                &self.clients[i],
                &models.models[kk],
                cfg.local_epochs,
                cfg.batch_size,
                cfg.learning_rate,
                &mut rng,
            )
        })?;

        let mut raw = vec![vec![0.0; k]; m];
        let mut grads: Vec<Vec<ParameterVector>> = Vec::with_capacity(m);
        let mut it = results.into_iter();
        for row in raw.iter_mut() {
            let mut grow = Vec::with_capacity(k);
            for slot in row.iter_mut() {
                let (g, l) = it.next().expect("m * k results");
                *slot = l;
                grow.push(g);
            }
            grads.push(grow);
        }

        let scfg = cfg.scalarization();
        let lm = loss_matrix(raw, &self.sizes(), cfg.use_sample_weighting)?;
        if let Some(sw) = lm.sample_weights() {
            for (row, &s) in grads.iter_mut().zip(sw) {
                for g in row.iter_mut() {
                    g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let weights = compute_weights(&lm, &scfg)?;
        let agg = aggregate_gradients(&weights, &grads)?;
        let mut next = models.clone();
        for (theta, g) in next.models.iter_mut().zip(&agg) {
            axpy(-cfg.learning_rate, g.as_slice(), theta.as_mut_slice());
        }
        Ok((next, agg, lm, weights))
    }

    pub fn run_fedfew(&self) -> Result<RunOutput> {
        let cfg = &self.cfg;
        let scfg = cfg.scalarization();
        let mut models = self.init_models(cfg.models);
        let mut traces = Vec::with_capacity(cfg.rounds);
        let mut last = None;
        for t in 1..=cfg.rounds {
            let (next, agg, lm, weights) = self.fedfew_round(t, &models)?;
            let diag = weight_diagnostics(&weights);
            let grad_norms: Vec<f64> = agg.iter().map(ParameterVector::norm).collect();
            let stationary = grad_norms.iter().all(|&g| g <= STATIONARITY_EPS);
            if stationary {
                let joint = weights.joint();
                let total: f64 = joint.iter().sum();
                if joint.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-10 {
                    return Err(Error::Domain(format!("round {t}: stationarity weights are not a convex combination")));
                }
            }
            traces.push(RoundTrace {
                round: t,
                stch_value: stch_set_value(&lm, &scfg)?,
                grad_norms,
                alpha_cv: diag.alpha_cv,
                w_entropy_mean: diag.w_entropy_mean,
                w_max_mean: diag.w_max_mean,
                uploads: self.clients.len() * cfg.models,
                stationary,
            });
            models = next;
            last = Some(weights);
        }
        Ok(RunOutput { models, traces, assignments: Vec::new(), final_weights: last })
    }

    /// Full-train losses of every client under every model.
    fn train_losses(&self, models: &[ParameterVector]) -> Result<Vec<Vec<f64>>> {
        map_indexed(self.clients.len(), self.cfg.parallel, |i| {
            models.iter().map(|m| loss(&self.spec, m, &self.clients[i].train.batch())).collect()
        })
    }

    /// One fedavg round; returns the new global model.
    pub fn fedavg_round(&self, round: usize, global: &ParameterVector) -> Result<ParameterVector> {
        let cfg = &self.cfg;
        let locals = map_indexed(self.clients.len(), cfg.parallel, |i| {
            let mut rng = batch_rng(cfg.seed, round, i, 0);
            local_train(
                &self.spec,
                &self.clients[i],
                global,
                cfg.local_epochs,
                cfg.batch_size,
                cfg.learning_rate,
                &mut rng,
            )
        })?;
        let refs: Vec<&ParameterVector> = locals.iter().collect();
        Ok(weighted_average(&refs, &self.sizes()))
    }

    pub fn run_fedavg(&self) -> Result<RunOutput> {
        let cfg = &self.cfg;
        if cfg.models != 1 {
            return Err(Error::Config("fedavg trains a single model; K must be 1".into()));
        }
        let scfg = cfg.scalarization();
        let mut global = self.init_models(1).models.remove(0);
        let mut traces = Vec::with_capacity(cfg.rounds);
        for t in 1..=cfg.rounds {
            let raw = self.train_losses(std::slice::from_ref(&global))?;
            let next = self.fedavg_round(t, &global)?;
            let lm = loss_matrix(raw, &self.sizes(), cfg.use_sample_weighting)?;
            let (stch, diag, _) = diagnostics(&lm, &scfg)?;
            traces.push(RoundTrace {
                round: t,
                stch_value: stch,
                grad_norms: vec![pseudo_gradient_norm(&global, &next, cfg.learning_rate)],
                alpha_cv: diag.alpha_cv,
                w_entropy_mean: diag.w_entropy_mean,
                w_max_mean: diag.w_max_mean,
                uploads: self.clients.len(),
                stationary: false,
            });
            global = next;
        }
        Ok(RunOutput { models: ModelSet::new(vec![global])?, traces, assignments: Vec::new(), final_weights: None })
    }

    pub fn run_ifca(&self) -> Result<RunOutput> {
        let cfg = &self.cfg;
        let scfg = cfg.scalarization();
        let k = cfg.models;
        let mut models = self.init_models(k);
        let mut traces = Vec::with_capacity(cfg.rounds);
        let mut assignments = Vec::with_capacity(cfg.rounds);
        let sizes = self.sizes();
        for t in 1..=cfg.rounds {
            let raw = self.train_losses(&models.models)?;
            let choice: Vec<usize> = raw.iter().map(|row| argmin(row)).collect();
            let locals = map_indexed(self.clients.len(), cfg.parallel, |i| {
                let c = choice[i];
                let mut rng = batch_rng(cfg.seed, t, i, c);
                local_train(
                    &self.spec,
                    &self.clients[i],
                    &models.models[c],
                    cfg.local_epochs,
                    cfg.batch_size,
                    cfg.learning_rate,
                    &mut rng,
                )
            })?;
            let mut next = models.clone();
            for (c, theta) in next.models.iter_mut().enumerate() {
                let members: Vec<usize> = (0..self.clients.len()).filter(|&i| choice[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                let params: Vec<&ParameterVector> = members.iter().map(|&i| &locals[i]).collect();
                let msizes: Vec<usize> = members.iter().map(|&i| sizes[i]).collect();
                *theta = weighted_average(&params, &msizes);
            }
            let lm = loss_matrix(raw, &sizes, cfg.use_sample_weighting)?;
            let (stch, diag, _) = diagnostics(&lm, &scfg)?;
            traces.push(RoundTrace {
                round: t,
                stch_value: stch,
                grad_norms: models
                    .models
                    .iter()
                    .zip(&next.models)
                    .map(|(a, b)| pseudo_gradient_norm(a, b, cfg.learning_rate))
                    .collect(),
                alpha_cv: diag.alpha_cv,
                w_entropy_mean: diag.w_entropy_mean,
                w_max_mean: diag.w_max_mean,
                uploads: self.clients.len() * (k + 1),
                stationary: false,
            });
            assignments.push(choice);
            models = next;
        }
        Ok(RunOutput { models, traces, assignments, final_weights: None })
    }

    /// Each client trains its own model; client `i` starts from init stream `i`.
    pub fn run_local(&self) -> Result<RunOutput> {
        let cfg = &self.cfg;
        let scfg = cfg.scalarization();
        let m = self.clients.len();
        let mut models = self.init_models(m);
        let mut traces = Vec::with_capacity(cfg.rounds);
        for t in 1..=cfg.rounds {
            let step = map_indexed(m, cfg.parallel, |i| {
                let client = &self.clients[i];
                let (l, g) = loss_and_grad(&self.spec, &models.models[i], &client.train.batch())?;
                let mut rng = batch_rng(cfg.seed, t, i, 0);
                let next = local_train(
                    &self.spec,
                    client,
                    &models.models[i],
                    cfg.local_epochs,
                    cfg.batch_size,
                    cfg.learning_rate,
                    &mut rng,
                )?;
                Ok((l, g.norm(), next))
            })?;
            let raw: Vec<Vec<f64>> = step.iter().map(|(l, _, _)| vec![*l]).collect();
            let lm = loss_matrix(raw, &self.sizes(), cfg.use_sample_weighting)?;
            let (stch, diag, _) = diagnostics(&lm, &scfg)?;
            let mean_norm = step.iter().map(|(_, n, _)| n).sum::<f64>() / m as f64;
            traces.push(RoundTrace {
                round: t,
                stch_value: stch,
                grad_norms: vec![mean_norm],
                alpha_cv: diag.alpha_cv,
                w_entropy_mean: diag.w_entropy_mean,
                w_max_mean: diag.w_max_mean,
                uploads: 0,
                stationary: false,
            });
            models = ModelSet::new(step.into_iter().map(|(_, _, p)| p).collect())?;
        }
        Ok(RunOutput { models, traces, assignments: Vec::new(), final_weights: None })
    }
}

pub(crate) fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Each client picks the model with the lowest validation loss.
pub fn select_models(spec: &ModelSpec, models: &ModelSet, clients: &[ClientDataset]) -> Result<AssignmentResult> {
    let losses = clients
        .iter()
        .map(|c| models.models.iter().map(|m| loss(spec, m, &c.validation.batch())).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let selected = losses.iter().map(|row| argmin(row)).collect();
    Ok(AssignmentResult { selected, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimumResult {
    pub theta: ParameterVector,
    pub grad_norm: f64,
    pub steps: usize,
    /// Set when the budget ran out with the gradient norm above 1e-3.
    pub warning: Option<String>,
}

/// Minimizer of the client's full train loss by gradient descent with
/// Armijo backtracking. The trial step is the Barzilai-Borwein step.
pub fn per_client_optimum(client: &ClientDataset, spec: &ModelSpec, budget: usize) -> Result<OptimumResult> {
    const TOL: f64 = 1e-6;
    let batch = client.train.batch();
    let mut theta = ParameterVector::zeros(spec.dim());
    let (mut f, mut g) = loss_and_grad(spec, &theta, &batch)?;
    let mut step = 1.0;
    let mut steps = 0;
    while steps < budget && g.norm() > TOL {
        let gg = dot(g.as_slice(), g.as_slice());
        let mut t = step;
        let (mut cand, mut fc, mut gc);
        loop {
            cand = theta.clone();
            axpy(-t, g.as_slice(), cand.as_mut_slice());
            (fc, gc) = loss_and_grad(spec, &cand, &batch)?;
            if fc <= f - 0.5 * t * gg || t < 1e-16 {
                break;
            }
            t *= 0.5;
        }
        // Barzilai-Borwein: s.s / s.y
        let s: Vec<f64> = cand.as_slice().iter().zip(theta.as_slice()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy > 0.0 { (dot(&s, &s) / sy).clamp(1e-8, 1e8) } else { t * 2.0 };
        theta = cand;
        f = fc;
        g = gc;
        steps += 1;
    }
    let grad_norm = g.norm();
    let warning =
        (grad_norm > 1e-3).then(|| format!("optimum not reached: gradient norm {grad_norm:.3e} after {steps} steps"));
    Ok(OptimumResult { theta, grad_norm, steps, warning })
}
