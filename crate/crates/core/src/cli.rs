//! Experiment runner: config parsing, method dispatch and CSV output.
//!
//! Config files hold one `key=value` per line; `#` starts a comment line.
//! Every run directory gets `trace.csv`, `clients.csv`, `summary.csv` and
//! `manifest.txt`; ablations add an `ablation.csv` at the top level.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::{
    per_client_optimum, select_models, DataSpec, Experiment, ExperimentConfig, Method, MixtureParams, ModelArch,
    Partition, RunOutput,
};
use crate::metrics::{accuracy, coverage_gap, ClientReport, CoverageGap, FairnessReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Step budget for each per-client optimum when the oracle is on.
pub const DEFAULT_ORACLE_BUDGET: usize = 20_000;

const KEYS: &[&str] = &[
    "method",
    "M",
    "K",
    "T",
    "E",
    "batch_size",
    "lr",
    "mu",
    "seed",
    "validation_fraction",
    "join_ratio",
    "sample_weighting",
    "parallel",
    "oracle",
    "oracle.budget",
    "model",
    "model.hidden",
    "model.l2",
    "dataset",
    "mixture.G",
    "mixture.dim",
    "mixture.classes",
    "mixture.sep",
    "mixture.noise",
    "mixture.n_per_client",
    "mixture.n_test",
    "mixture.permute_labels",
    "csv.path",
    "csv.test_fraction",
    "partition",
    "dirichlet.alpha",
    "pathological.classes_per_client",
    "sweep.mu",
    "ablation.K",
    "ablation.mu",
    "ablation.local_epochs",
    "ablation.total_updates",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Models,
    Mu,
    LocalEpochs,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "K" | "k" => Some(Axis::Models),
            "mu" => Some(Axis::Mu),
            "local_epochs" | "E" => Some(Axis::LocalEpochs),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Models => "K",
            Axis::Mu => "mu",
            Axis::LocalEpochs => "local_epochs",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationValues {
    pub models: Vec<usize>,
    pub mu: Vec<f64>,
    pub local_epochs: Vec<usize>,
    /// `T * E` held fixed along the local-epochs axis.
    pub total_updates: Option<usize>,
}

/// An experiment config plus the runner-level options.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Compute per-client optima and the coverage gap.
    pub oracle: bool,
    pub oracle_budget: usize,
    /// When non-empty, `run` writes one subdirectory per value.
    pub sweep_mu: Vec<f64>,
    pub ablation: AblationValues,
}

impl RunConfig {
    pub fn new(experiment: ExperimentConfig) -> Self {
        Self {
            experiment,
            oracle: false,
            oracle_budget: DEFAULT_ORACLE_BUDGET,
            sweep_mu: Vec::new(),
            ablation: AblationValues::default(),
        }
    }

    /// Resolved config as sorted `key=value` lines. The manifest checksum is
    /// taken over this text.
    pub fn canonical(&self) -> String {
        let c = &self.experiment;
        let mut kv: Vec<(&str, String)> = vec![
            ("method", c.method.name().to_string()),
            ("M", c.clients.to_string()),
            ("K", c.models.to_string()),
            ("T", c.rounds.to_string()),
            ("E", c.local_epochs.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("lr", fmt_num(c.learning_rate)),
            ("mu", fmt_num(c.mu)),
            ("seed", c.seed.to_string()),
            ("validation_fraction", fmt_num(c.validation_fraction)),
            ("join_ratio", "1".into()),
            ("sample_weighting", c.use_sample_weighting.to_string()),
            ("oracle", self.oracle.to_string()),
            ("oracle.budget", self.oracle_budget.to_string()),
            ("model.l2", fmt_num(c.l2_penalty)),
        ];
        match c.model {
            ModelArch::Softmax => kv.push(("model", "softmax".into())),
            ModelArch::Mlp { hidden } => {
                kv.push(("model", "mlp".into()));
                kv.push(("model.hidden", hidden.to_string()));
            }
        }
        match &c.data {
            DataSpec::Mixture(p) => {
                kv.push(("dataset", "mixture".into()));
                kv.push(("mixture.G", p.groups.to_string()));
                kv.push(("mixture.dim", p.input_dim.to_string()));
                kv.push(("mixture.classes", p.classes.to_string()));
                kv.push(("mixture.sep", fmt_num(p.separation)));
                kv.push(("mixture.noise", fmt_num(p.noise)));
                kv.push(("mixture.n_per_client", p.samples_per_client.to_string()));
                kv.push(("mixture.n_test", p.test_samples_per_client.to_string()));
                kv.push(("mixture.permute_labels", p.permute_labels.to_string()));
            }
            DataSpec::Csv { path, partition, test_fraction } => {
                kv.push(("dataset", "csv".into()));
                kv.push(("csv.path", path.display().to_string()));
                kv.push(("csv.test_fraction", fmt_num(*test_fraction)));
                match partition {
                    Partition::Dirichlet { alpha } => {
                        kv.push(("partition", "dirichlet".into()));
                        kv.push(("dirichlet.alpha", fmt_num(*alpha)));
                    }
                    Partition::Pathological { classes_per_client } => {
                        kv.push(("partition", "pathological".into()));
                        kv.push(("pathological.classes_per_client", classes_per_client.to_string()));
                    }
                }
            }
        }
        let list = |v: &[f64]| v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(",");
        let ilist = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        if !self.sweep_mu.is_empty() {
            kv.push(("sweep.mu", list(&self.sweep_mu)));
        }
        let a = &self.ablation;
        if !a.models.is_empty() {
            kv.push(("ablation.K", ilist(&a.models)));
        }
        if !a.mu.is_empty() {
            kv.push(("ablation.mu", list(&a.mu)));
        }
        if !a.local_epochs.is_empty() {
            kv.push(("ablation.local_epochs", ilist(&a.local_epochs)));
        }
        if let Some(n) = a.total_updates {
            kv.push(("ablation.total_updates", n.to_string()));
        }
        kv.sort_by(|a, b| a.0.cmp(b.0));
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn checksum(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Entry {
    line: usize,
    value: String,
}

struct Entries(BTreeMap<String, Entry>);

fn line_err(line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigLine { line, msg: msg.into() }
}

impl Entries {
    fn line(&self, key: &str) -> Option<usize> {
        self.0.get(key).map(|e| e.line)
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        self.0.get(key)
    }

    fn get<T: FromStr>(&self, key: &str, ok: impl Fn(&T) -> bool, expect: &str) -> Result<Option<T>> {
        let Some(e) = self.0.get(key) else { return Ok(None) };
        match e.value.parse::<T>() {
            Ok(v) if ok(&v) => Ok(Some(v)),
            _ => Err(line_err(e.line, format!("{key}={}: expected {expect}", e.value))),
        }
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        let Some(e) = self.0.get(key) else { return Ok(None) };
        match e.value.as_str() {
            "true" | "1" | "yes" | "on" => Ok(Some(true)),
            "false" | "0" | "no" | "off" => Ok(Some(false)),
            v => Err(line_err(e.line, format!("{key}={v}: expected true or false"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, ok: impl Fn(&T) -> bool, expect: &str) -> Result<Vec<T>> {
        let Some(e) = self.0.get(key) else { return Ok(Vec::new()) };
        let bad = || line_err(e.line, format!("{key}={}: expected a comma-separated list of {expect}", e.value));
        let out = e
            .value
            .split(',')
            .map(|s| s.trim().parse::<T>().ok().filter(|v| ok(v)).ok_or_else(bad))
            .collect::<Result<Vec<T>>>()?;
        if out.is_empty() {
            return Err(bad());
        }
        Ok(out)
    }

    /// Rejects `key` when it is present but does not apply.
    fn forbid(&self, key: &str, why: &str) -> Result<()> {
        match self.line(key) {
            Some(line) => Err(line_err(line, format!("{key} {why}"))),
            None => Ok(()),
        }
    }
}

fn positive(x: &f64) -> bool {
    *x > 0.0 && x.is_finite()
}

fn at_least_one(x: &usize) -> bool {
    *x >= 1
}

fn unit_open(x: &f64) -> bool {
    *x > 0.0 && *x < 1.0
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path.parent().unwrap_or(Path::new("")))
}

/// Parses config text. Relative `csv.path` values are resolved against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| line_err(line, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(line_err(line, format!("unknown key '{key}'")));
        }
        if let Some(prev) = map.insert(key.to_string(), Entry { line, value: value.to_string() }) {
            return Err(line_err(line, format!("duplicate key '{key}' (first set at line {})", prev.line)));
        }
    }
    let e = Entries(map);

    let method = match e.raw("method") {
        None => return Err(Error::Config("missing required key 'method'".into())),
        Some(m) => Method::parse(&m.value)
            .ok_or_else(|| line_err(m.line, format!("method={}: expected fedfew, fedavg, ifca or local", m.value)))?,
    };
    let mut cfg = ExperimentConfig { method, ..Default::default() };
    if method == Method::FedAvg || method == Method::Local {
        cfg.models = 1;
    }
    if let Some(v) = e.get("M", at_least_one, "an integer >= 1")? {
        cfg.clients = v;
    }
    if let Some(v) = e.get("K", at_least_one, "an integer >= 1")? {
        if method == Method::FedAvg && v != 1 {
            return Err(line_err(e.line("K").unwrap_or(0), "fedavg trains a single model; K must be 1"));
        }
        cfg.models = v;
    }
    if let Some(v) = e.get("T", at_least_one, "an integer >= 1")? {
        cfg.rounds = v;
    }
    if let Some(v) = e.get("E", at_least_one, "an integer >= 1")? {
        cfg.local_epochs = v;
    }
    if let Some(v) = e.get("batch_size", at_least_one, "an integer >= 1")? {
        cfg.batch_size = v;
    }
    if let Some(v) = e.get("lr", positive, "a positive number")? {
        cfg.learning_rate = v;
    }
    if let Some(v) = e.get("mu", positive, "a positive number")? {
        cfg.mu = v;
    }
    if let Some(v) = e.get("seed", |_: &u64| true, "an unsigned integer")? {
        cfg.seed = v;
    }
    if let Some(v) = e.get("validation_fraction", unit_open, "a number in (0, 1)")? {
        cfg.validation_fraction = v;
    }
    e.get("join_ratio", |x: &f64| *x == 1.0, "1.0 (every client joins every round)")?;
    if let Some(v) = e.flag("sample_weighting")? {
        cfg.use_sample_weighting = v;
    }
    if let Some(v) = e.flag("parallel")? {
        cfg.parallel = v;
    }
    if let Some(v) = e.get("model.l2", |x: &f64| *x >= 0.0 && x.is_finite(), "a nonnegative number")? {
        cfg.l2_penalty = v;
    }
    cfg.model = match e.raw("model").map(|m| (m.line, m.value.as_str())) {
        None | Some((_, "softmax")) => {
            e.forbid("model.hidden", "only applies to model=mlp")?;
            ModelArch::Softmax
        }
        Some((_, "mlp")) => {
            let hidden = e.get("model.hidden", at_least_one, "an integer >= 1")?.unwrap_or(16);
            ModelArch::Mlp { hidden }
        }
        Some((line, v)) => return Err(line_err(line, format!("model={v}: expected softmax or mlp"))),
    };

    let mixture_keys = KEYS.iter().filter(|k| k.starts_with("mixture."));
    let csv_keys = ["csv.path", "csv.test_fraction", "partition", "dirichlet.alpha", "pathological.classes_per_client"];
    cfg.data = match e.raw("dataset").map(|d| (d.line, d.value.as_str())) {
        None | Some((_, "mixture")) => {
            for k in csv_keys {
                e.forbid(k, "only applies to dataset=csv")?;
            }
            let d = MixtureParams::default();
            let g = e.get("mixture.G", at_least_one, "an integer >= 1")?.unwrap_or(d.groups);
            if g > cfg.clients {
                return Err(line_err(
                    e.line("mixture.G").unwrap_or(0),
                    format!("mixture.G={g} exceeds M={}", cfg.clients),
                ));
            }
            DataSpec::Mixture(MixtureParams {
                groups: g,
                input_dim: e.get("mixture.dim", at_least_one, "an integer >= 1")?.unwrap_or(d.input_dim),
                classes: e.get("mixture.classes", |c: &usize| *c >= 2, "an integer >= 2")?.unwrap_or(d.classes),
                separation: e.get("mixture.sep", positive, "a positive number")?.unwrap_or(d.separation),
                noise: e.get("mixture.noise", positive, "a positive number")?.unwrap_or(d.noise),
                samples_per_client: e
                    .get("mixture.n_per_client", |n: &usize| *n >= 2, "an integer >= 2")?
                    .unwrap_or(d.samples_per_client),
                test_samples_per_client: e
                    .get("mixture.n_test", |_: &usize| true, "an integer")?
                    .unwrap_or(d.test_samples_per_client),
                permute_labels: e.flag("mixture.permute_labels")?.unwrap_or(d.permute_labels),
            })
        }
        Some((_, "csv")) => {
            for k in mixture_keys {
                e.forbid(k, "only applies to dataset=mixture")?;
            }
            let path = e
                .raw("csv.path")
                .map(|p| base_dir.join(&p.value))
                .ok_or_else(|| Error::Config("dataset=csv requires csv.path".into()))?;
            let test_fraction =
                e.get("csv.test_fraction", |x: &f64| *x >= 0.0 && *x < 1.0, "a number in [0, 1)")?.unwrap_or(0.2);
            let partition = match e.raw("partition").map(|p| (p.line, p.value.as_str())) {
                None | Some((_, "dirichlet")) => {
                    e.forbid("pathological.classes_per_client", "only applies to partition=pathological")?;
                    Partition::Dirichlet {
                        alpha: e.get("dirichlet.alpha", positive, "a positive number")?.unwrap_or(0.5),
                    }
                }
                Some((_, "pathological")) => {
                    e.forbid("dirichlet.alpha", "only applies to partition=dirichlet")?;
                    Partition::Pathological {
                        classes_per_client: e
                            .get("pathological.classes_per_client", at_least_one, "an integer >= 1")?
                            .unwrap_or(2),
                    }
                }
                Some((line, v)) => {
                    return Err(line_err(line, format!("partition={v}: expected dirichlet or pathological")))
                }
            };
            DataSpec::Csv { path, partition, test_fraction }
        }
        Some((line, v)) => return Err(line_err(line, format!("dataset={v}: expected mixture or csv"))),
    };

    let mut run = RunConfig::new(cfg);
    run.oracle = e.flag("oracle")?.unwrap_or(false);
    if let Some(b) = e.get("oracle.budget", at_least_one, "an integer >= 1")? {
        run.oracle_budget = b;
    }
    run.sweep_mu = e.list("sweep.mu", positive, "positive numbers")?;
    run.ablation = AblationValues {
        models: e.list("ablation.K", at_least_one, "integers >= 1")?,
        mu: e.list("ablation.mu", positive, "positive numbers")?,
        local_epochs: e.list("ablation.local_epochs", at_least_one, "integers >= 1")?,
        total_updates: e.get("ablation.total_updates", at_least_one, "an integer >= 1")?,
    };
    run.experiment.validate()?;
    Ok(run)
}

/// Renders a number with 9 significant digits, switching to exponent
/// notation outside `[1e-5, 1e9)`.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent format");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// A finished run with its per-client evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub output: RunOutput,
    pub reports: Vec<ClientReport>,
    pub coverage: Option<CoverageGap>,
}

impl Evaluation {
    /// Test accuracies when every client has a test split, validation otherwise.
    pub fn headline_accuracies(&self) -> Vec<f64> {
        if self.reports.iter().all(|r| r.test_accuracy.is_some()) {
            self.reports.iter().filter_map(|r| r.test_accuracy).collect()
        } else {
            self.reports.iter().map(|r| r.validation_accuracy).collect()
        }
    }
}

/// Builds the data, runs the configured method and evaluates every client.
pub fn execute(cfg: &RunConfig) -> Result<Evaluation> {
    let exp = Experiment::new(cfg.experiment.clone())?;
    let output = exp.run()?;
    let selected = match exp.cfg.method {
        Method::Local => (0..exp.clients.len()).collect(),
        _ => select_models(&exp.spec, &output.models, &exp.clients)?.selected,
    };
    let reports = exp
        .clients
        .iter()
        .zip(&selected)
        .map(|(c, &k)| {
            let theta = &output.models.models[k];
            Ok(ClientReport {
                client_id: c.client_id,
                selected_model: k,
                train_accuracy: accuracy(&exp.spec, theta, &c.train)?,
                validation_accuracy: accuracy(&exp.spec, theta, &c.validation)?,
                test_accuracy: c.test.as_ref().map(|t| accuracy(&exp.spec, theta, t)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let coverage = if cfg.oracle {
        let optima = exp
            .clients
            .par_iter()
            .map(|c| per_client_optimum(c, &exp.spec, cfg.oracle_budget).map(|o| o.theta))
            .collect::<Result<Vec<_>>>()?;
        Some(coverage_gap(&exp.spec, &output.models.models, &optima, &exp.clients)?)
    } else {
        None
    };
    Ok(Evaluation { output, reports, coverage })
}

pub fn trace_csv(output: &RunOutput) -> String {
    let k = output.traces.first().map_or(0, |t| t.grad_norms.len());
    let mut s = String::from("round,stch_value");
    for j in 1..=k {
        let _ = write!(s, ",grad_norm_{j}");
    }
    s.push_str(",alpha_cv,w_entropy_mean,w_max_mean,uploads_count\n");
    for t in &output.traces {
        let _ = write!(s, "{},{}", t.round, fmt_num(t.stch_value));
        for g in &t.grad_norms {
            let _ = write!(s, ",{}", fmt_num(*g));
        }
        let _ = writeln!(
            s,
            ",{},{},{},{}",
            fmt_num(t.alpha_cv),
            fmt_num(t.w_entropy_mean),
            fmt_num(t.w_max_mean),
            t.uploads
        );
    }
    s
}

pub fn clients_csv(reports: &[ClientReport]) -> String {
    let mut s = String::from("client_id,selected_model,train_acc,val_acc,test_acc\n");
    for r in reports {
        let test = r.test_accuracy.map(fmt_num).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.client_id,
            r.selected_model,
            fmt_num(r.train_accuracy),
            fmt_num(r.validation_accuracy),
            test
        );
    }
    s
}

/// One row per split. `coverage_gap_mean` is empty unless the oracle ran.
pub fn summary_csv(eval: &Evaluation) -> Result<String> {
    let mut s = String::from("split,mean,std,min,max,jain_index,coverage_gap_mean\n");
    let gap = eval.coverage.as_ref().map(|g| fmt_num(g.mean)).unwrap_or_default();
    let train: Vec<f64> = eval.reports.iter().map(|r| r.train_accuracy).collect();
    let val: Vec<f64> = eval.reports.iter().map(|r| r.validation_accuracy).collect();
    let test: Option<Vec<f64>> = eval.reports.iter().map(|r| r.test_accuracy).collect();
    let mut rows = vec![("train", train), ("validation", val)];
    if let Some(test) = test {
        rows.push(("test", test));
    }
    for (name, values) in rows {
        let f = fairness(&values)?;
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{gap}",
            fmt_num(f.mean),
            fmt_num(f.std),
            fmt_num(f.min),
            fmt_num(f.max),
            fmt_num(f.jain_index)
        );
    }
    Ok(s)
}

/// Fairness summary; an all-zero accuracy vector gets a Jain index of 1.
fn fairness(values: &[f64]) -> Result<FairnessReport> {
    if values.iter().all(|v| *v == 0.0) && !values.is_empty() {
        return Ok(FairnessReport { mean: 0.0, std: 0.0, min: 0.0, max: 0.0, jain_index: 1.0 });
    }
    FairnessReport::from_values(values)
}

pub fn manifest(cfg: &RunConfig, out: &Path) -> String {
    format!("version={VERSION}\nchecksum=sha256:{}\noutput={}\n\n{}", cfg.checksum(), out.display(), cfg.canonical())
}

/// Writes `files` into `dir`; on failure every file written so far, and the
/// directory if this call created it, is removed.
fn write_all(dir: &Path, files: &[(&str, String)]) -> Result<()> {
    let created = !dir.exists();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, body) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            if created {
                let _ = fs::remove_dir_all(dir);
            }
            return Err(Error::io(path, e));
        }
        written.push(path);
    }
    Ok(())
}

fn render(cfg: &RunConfig, eval: &Evaluation, out: &Path) -> Result<Vec<(&'static str, String)>> {
    Ok(vec![
        ("trace.csv", trace_csv(&eval.output)),
        ("clients.csv", clients_csv(&eval.reports)),
        ("summary.csv", summary_csv(eval)?),
        ("manifest.txt", manifest(cfg, out)),
    ])
}

fn run_single(cfg: &RunConfig, out: &Path) -> Result<Evaluation> {
    let eval = execute(cfg)?;
    let files = render(cfg, &eval, out)?;
    write_all(out, &files)?;
    Ok(eval)
}

/// Runs `cfg` and writes its outputs under `out`. With `sweep.mu` set, each
/// value gets its own `mu_<value>` subdirectory.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<Vec<Evaluation>> {
    if cfg.sweep_mu.is_empty() {
        return Ok(vec![run_single(cfg, out)?]);
    }
    let runs: Vec<(RunConfig, PathBuf)> = cfg
        .sweep_mu
        .iter()
        .map(|&mu| {
            let mut c = cfg.clone();
            c.sweep_mu.clear();
            c.experiment.mu = mu;
            (c, out.join(format!("mu_{}", fmt_num(mu))))
        })
        .collect();
    run_all(&runs)
}

/// Evaluates every run before writing anything, so a failing run leaves no
/// outputs behind.
fn run_all(runs: &[(RunConfig, PathBuf)]) -> Result<Vec<Evaluation>> {
    let evals = runs.par_iter().map(|(c, _)| execute(c)).collect::<Result<Vec<_>>>()?;
    let mut rendered = Vec::with_capacity(runs.len());
    for ((c, dir), eval) in runs.iter().zip(&evals) {
        rendered.push(render(c, eval, dir)?);
    }
    for (i, ((_, dir), files)) in runs.iter().zip(&rendered).enumerate() {
        if let Err(e) = write_all(dir, files) {
            for (_, done) in &runs[..i] {
                let _ = fs::remove_dir_all(done);
            }
            return Err(e);
        }
    }
    Ok(evals)
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: f64,
    pub rounds: usize,
    pub mean_accuracy: f64,
    pub jain_index: f64,
    pub coverage_gap_mean: Option<f64>,
    pub final_stch_value: f64,
    pub final_w_entropy_mean: f64,
    pub uploads_total: usize,
}

/// The per-value configs of an ablation along `axis`.
pub fn ablation_configs(cfg: &RunConfig, axis: Axis) -> Result<Vec<(f64, RunConfig)>> {
    let a = &cfg.ablation;
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        c.sweep_mu.clear();
        f(&mut c.experiment);
        c
    };
    let runs: Vec<(f64, RunConfig)> = match axis {
        Axis::Models => {
            if cfg.experiment.method == Method::FedAvg && a.models.iter().any(|&k| k != 1) {
                return Err(Error::Config("fedavg cannot be ablated over K".into()));
            }
            a.models.iter().map(|&k| (k as f64, with(&|e| e.models = k))).collect()
        }
        Axis::Mu => a.mu.iter().map(|&mu| (mu, with(&|e| e.mu = mu))).collect(),
        Axis::LocalEpochs => {
            let total = a
                .total_updates
                .ok_or_else(|| Error::Config("local_epochs ablation needs ablation.total_updates".into()))?;
            a.local_epochs
                .iter()
                .map(|&ep| {
                    if total % ep != 0 {
                        return Err(Error::Config(format!(
                            "ablation.total_updates={total} is not divisible by E={ep}"
                        )));
                    }
                    Ok((
                        ep as f64,
                        with(&|e| {
                            e.local_epochs = ep;
                            e.rounds = total / ep;
                        }),
                    ))
                })
                .collect::<Result<_>>()?
        }
    };
    if runs.is_empty() {
        return Err(Error::Config(format!("no values listed for ablation.{}", axis.name())));
    }
    for (_, c) in &runs {
        c.experiment.validate()?;
    }
    Ok(runs)
}

/// One run per axis value, each in its own subdirectory, plus `ablation.csv`.
pub fn run_ablation(cfg: &RunConfig, axis: Axis, out: &Path) -> Result<Vec<AblationRow>> {
    let configs = ablation_configs(cfg, axis)?;
    let runs: Vec<(RunConfig, PathBuf)> =
        configs.iter().map(|(v, c)| (c.clone(), out.join(format!("{}_{}", axis.name(), fmt_num(*v))))).collect();
    let evals = run_all(&runs)?;
    let rows = configs
        .iter()
        .zip(&evals)
        .map(|((v, c), e)| {
            let acc = e.headline_accuracies();
            let f = fairness(&acc)?;
            let last = e.output.traces.last();
            Ok(AblationRow {
                value: *v,
                rounds: c.experiment.rounds,
                mean_accuracy: f.mean,
                jain_index: f.jain_index,
                coverage_gap_mean: e.coverage.as_ref().map(|g| g.mean),
                final_stch_value: last.map_or(f64::NAN, |t| t.stch_value),
                final_w_entropy_mean: last.map_or(f64::NAN, |t| t.w_entropy_mean),
                uploads_total: e.output.traces.iter().map(|t| t.uploads).sum(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let body = ablation_csv(axis, &rows);
    if let Err(err) = write_all(out, &[("ablation.csv", body)]) {
        for (_, dir) in &runs {
            let _ = fs::remove_dir_all(dir);
        }
        return Err(err);
    }
    Ok(rows)
}

pub fn ablation_csv(axis: Axis, rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{},rounds,mean_accuracy,jain_index,coverage_gap_mean,final_stch_value,final_w_entropy_mean,uploads_total\n",
        axis.name()
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            fmt_num(r.value),
            r.rounds,
            fmt_num(r.mean_accuracy),
            fmt_num(r.jain_index),
            r.coverage_gap_mean.map(fmt_num).unwrap_or_default(),
            fmt_num(r.final_stch_value),
            fmt_num(r.final_w_entropy_mean),
            r.uploads_total
        );
    }
    s
}
