//! Synthetic client data and non-IID partitioning.
//!
//! [`gen_mixture`] draws clients from a controllable Gaussian mixture with
//! latent client groups. [`dirichlet_partition`] and
//! [`pathological_partition`] split an existing dataset across clients.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::Rng;

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Contract(format!("{} feature rows but {} labels", features.nrows(), labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Contract(format!("label {y} out of range for {class_count} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite feature value".into()));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(self.features.view(), &self.labels)
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Concatenation of datasets sharing a feature width.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Contract(format!("feature widths differ: {e}")))?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        let class_count = parts.iter().map(|d| d.class_count).max().unwrap_or(first.class_count);
        Ok(Dataset { features, labels, class_count })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    /// Latent group, when the data came from a generator that has one.
    pub group: Option<usize>,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
}

impl ClientDataset {
    pub fn train_size(&self) -> usize {
        self.train.len()
    }
}

/// Gaussian mixture with latent client groups.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub latent_groups: usize,
    pub clients_per_group: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    pub class_mean_separation: f64,
    pub noise_std: f64,
    pub samples_per_client: usize,
    /// Held-out samples per client drawn from the client's distribution.
    pub test_samples_per_client: usize,
    pub label_permutation_per_group: bool,
    pub validation_fraction: f64,
}

impl MixtureSpec {
    /// `groups` groups of equal size totalling `clients` clients.
    pub fn balanced(groups: usize, clients: usize) -> Self {
        let base = clients / groups.max(1);
        let extra = clients % groups.max(1);
        Self {
            latent_groups: groups,
            clients_per_group: (0..groups).map(|g| base + usize::from(g < extra)).collect(),
            input_dim: 5,
            classes: 3,
            class_mean_separation: 5.0,
            noise_std: 1.0,
            samples_per_client: 100,
            test_samples_per_client: 100,
            label_permutation_per_group: true,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
        }
    }

    pub fn clients(&self) -> usize {
        self.clients_per_group.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_groups == 0 {
            return bad("mixture needs at least one latent group".into());
        }
        if self.clients_per_group.len() != self.latent_groups {
            return bad(format!(
                "clients_per_group has {} entries for {} groups",
                self.clients_per_group.len(),
                self.latent_groups
            ));
        }
        if self.clients_per_group.contains(&0) {
            return bad("every latent group needs at least one client".into());
        }
        if self.classes < 2 || self.input_dim == 0 {
            return bad("mixture needs classes >= 2 and input_dim >= 1".into());
        }
        if !(self.class_mean_separation > 0.0) || !(self.noise_std > 0.0) {
            return bad("separation and noise must be positive".into());
        }
        if self.samples_per_client < 2 {
            return bad("samples_per_client must be >= 2".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)".into());
        }
        if self.label_permutation_per_group && self.latent_groups > factorial(self.classes) {
            return bad(format!(
                "{} groups need distinct label permutations but only {}! exist",
                self.latent_groups, self.classes
            ));
        }
        Ok(())
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k)).unwrap_or(usize::MAX)
}

/// Class centers with pairwise distance `sep`, centered at the origin.
fn class_centers(spec: &MixtureSpec, rng: &mut Rng) -> Array2<f64> {
    let (c, p) = (spec.classes, spec.input_dim);
    let mut centers = Array2::zeros((c, p));
    if p >= c {
        let r = spec.class_mean_separation / std::f64::consts::SQRT_2;
        for k in 0..c {
            centers[[k, k]] = r;
        }
    } else {
        for k in 0..c {
            let dir: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
            let n = crate::numerics::norm(&dir).max(1e-12);
            for j in 0..p {
                centers[[k, j]] = 0.5 * spec.class_mean_separation * dir[j] / n;
            }
        }
    }
    let mean = centers.mean_axis(Axis(0)).expect("at least one class");
    centers - &mean
}

/// Label maps per group. Cyclic shifts when `G <= C` so every pair of
/// groups disagrees on every class; distinct random permutations otherwise.
fn group_label_maps(spec: &MixtureSpec, rng: &mut Rng) -> Vec<Vec<usize>> {
    let c = spec.classes;
    if !spec.label_permutation_per_group {
        return vec![(0..c).collect(); spec.latent_groups];
    }
    if spec.latent_groups <= c {
        return (0..spec.latent_groups).map(|g| (0..c).map(|k| (k + g) % c).collect()).collect();
    }
    let mut maps: Vec<Vec<usize>> = Vec::new();
    while maps.len() < spec.latent_groups {
        let p = rng.permutation(c);
        if !maps.contains(&p) {
            maps.push(p);
        }
    }
    maps
}

/// Draws `M` clients. Clients of group `g` share one distribution: class
/// `k` features come from `N(center_k + offset_g, noise^2 I)` labelled
/// `map_g(k)`. With label permutations the offsets are zero, so groups
/// differ only in how they label the same clusters.
pub fn gen_mixture(spec: &MixtureSpec, rng: &mut Rng) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let centers = class_centers(spec, rng);
    let maps = group_label_maps(spec, rng);
    let p = spec.input_dim;
    let offsets: Vec<Vec<f64>> = (0..spec.latent_groups)
        .map(|g| {
            if spec.label_permutation_per_group || g == 0 {
                vec![0.0; p]
            } else {
                let dir: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
                let n = crate::numerics::norm(&dir).max(1e-12);
                dir.iter().map(|v| spec.class_mean_separation * v / n).collect()
            }
        })
        .collect();

    let draw = |g: usize, n: usize, rng: &mut Rng| -> Dataset {
        let mut features = Array2::zeros((n, p));
        let mut labels = Vec::with_capacity(n);
        for r in 0..n {
            let k = rng.index(spec.classes);
            for j in 0..p {
                features[[r, j]] = centers[[k, j]] + offsets[g][j] + spec.noise_std * rng.standard_normal();
            }
            labels.push(maps[g][k]);
        }
        Dataset { features, labels, class_count: spec.classes }
    };

    let mut clients = Vec::with_capacity(spec.clients());
    for (g, &count) in spec.clients_per_group.iter().enumerate() {
        for _ in 0..count {
            let id = clients.len();
            let pool = draw(g, spec.samples_per_client, rng);
            let test = (spec.test_samples_per_client > 0).then(|| draw(g, spec.test_samples_per_client, rng));
            let (train, validation) = split_train_validation(&pool, spec.validation_fraction, rng)?;
            clients.push(ClientDataset { client_id: id, group: Some(g), train, validation, test });
        }
    }
    Ok(clients)
}

/// Fractions carved out of each partitioned client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub validation: f64,
    /// Zero disables the per-client test split.
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { validation: DEFAULT_VALIDATION_FRACTION, test: 0.0 }
    }
}

impl SplitFractions {
    fn min_client_size(&self) -> usize {
        if self.test > 0.0 {
            3
        } else {
            2
        }
    }
}

fn clients_from_parts(
    base: &Dataset,
    parts: Vec<Vec<usize>>,
    split: SplitFractions,
    rng: &mut Rng,
) -> Result<Vec<ClientDataset>> {
    parts
        .into_iter()
        .enumerate()
        .map(|(id, mut idx)| {
            idx.sort_unstable();
            let local = base.subset(&idx);
            let (rest, test) = if split.test > 0.0 {
                let (rest, test) = split_train_validation(&local, split.test, rng)?;
                (rest, Some(test))
            } else {
                (local, None)
            };
            let (train, validation) = split_train_validation(&rest, split.validation, rng)?;
            Ok(ClientDataset { client_id: id, group: None, train, validation, test })
        })
        .collect()
}

/// Moves single samples from the largest client until every client holds
/// at least `min` samples.
fn repair_small_clients(parts: &mut [Vec<usize>], min: usize) {
    loop {
        let Some(small) = (0..parts.len()).find(|&i| parts[i].len() < min) else { return };
        let largest = (0..parts.len()).fold(0, |b, i| if parts[i].len() > parts[b].len() { i } else { b });
        if parts[largest].len() <= min {
            return;
        }
        let moved = parts[largest].pop().expect("largest client is non-empty");
        parts[small].push(moved);
    }
}

fn indices_by_class(base: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); base.class_count];
    for (i, &y) in base.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Per-class Dirichlet allocation over clients.
pub fn dirichlet_partition(base: &Dataset, alpha: f64, clients: usize, rng: &mut Rng) -> Result<Vec<ClientDataset>> {
    dirichlet_partition_with(base, alpha, clients, SplitFractions::default(), rng)
}

pub fn dirichlet_partition_with(
    base: &Dataset,
    alpha: f64,
    clients: usize,
    split: SplitFractions,
    rng: &mut Rng,
) -> Result<Vec<ClientDataset>> {
    let parts = dirichlet_indices(base, alpha, clients, split.min_client_size(), rng)?;
    clients_from_parts(base, parts, split, rng)
}

pub(crate) fn dirichlet_indices(
    base: &Dataset,
    alpha: f64,
    clients: usize,
    min_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if base.len() < clients * base.class_count.max(min_size) {
        return Err(Error::Config(format!("{} samples cannot be split across {} clients", base.len(), clients)));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet alpha: {e}")))?;
    let mut parts = vec![Vec::new(); clients];
    for mut idx in indices_by_class(base) {
        if idx.is_empty() {
            continue;
        }
        rng.shuffle(&mut idx);
        let mut props: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            // every draw underflowed; the limit is a single winner
            props = vec![0.0; clients];
            props[rng.index(clients)] = 1.0;
        } else {
            props.iter_mut().for_each(|p| *p /= total);
        }
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (c, p) in props.iter().enumerate() {
            cum += p;
            let end = if c + 1 == clients { n } else { ((cum * n as f64).round() as usize).min(n) };
            let end = end.max(start);
            parts[c].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    repair_small_clients(&mut parts, min_size);
    Ok(parts)
}

/// Each client receives shards of exactly `classes_per_client` classes.
pub fn pathological_partition(
    base: &Dataset,
    classes_per_client: usize,
    clients: usize,
    rng: &mut Rng,
) -> Result<Vec<ClientDataset>> {
    pathological_partition_with(base, classes_per_client, clients, SplitFractions::default(), rng)
}

pub fn pathological_partition_with(
    base: &Dataset,
    classes_per_client: usize,
    clients: usize,
    split: SplitFractions,
    rng: &mut Rng,
) -> Result<Vec<ClientDataset>> {
    let parts = pathological_indices(base, classes_per_client, clients, split.min_client_size(), rng)?;
    clients_from_parts(base, parts, split, rng)
}

pub(crate) fn pathological_indices(
    base: &Dataset,
    classes_per_client: usize,
    clients: usize,
    min_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let c = base.class_count;
    if clients == 0 || classes_per_client == 0 {
        return Err(Error::Config("need at least one client and one class per client".into()));
    }
    if classes_per_client >= c {
        return Err(Error::Config(format!("classes_per_client {classes_per_client} must be below class count {c}")));
    }
    if classes_per_client * clients < c {
        return Err(Error::Config(format!(
            "{clients} clients with {classes_per_client} classes each cannot cover {c} classes"
        )));
    }
    let order = rng.permutation(c);
    let assigned: Vec<Vec<usize>> = (0..clients)
        .map(|i| (0..classes_per_client).map(|j| order[(i * classes_per_client + j) % c]).collect())
        .collect();
    let mut holders = vec![Vec::new(); c];
    for (i, classes) in assigned.iter().enumerate() {
        for &k in classes {
            holders[k].push(i);
        }
    }
    let by_class = indices_by_class(base);
    let mut parts = vec![Vec::new(); clients];
    for (k, mut idx) in by_class.into_iter().enumerate() {
        let owners = &holders[k];
        if idx.len() < owners.len() {
            return Err(Error::Config(format!("class {k} has {} samples for {} shards", idx.len(), owners.len())));
        }
        rng.shuffle(&mut idx);
        let shards = owners.len();
        for (s, &owner) in owners.iter().enumerate() {
            let lo = s * idx.len() / shards;
            let hi = (s + 1) * idx.len() / shards;
            parts[owner].extend_from_slice(&idx[lo..hi]);
        }
    }
    if let Some(i) = parts.iter().position(|p| p.len() < min_size) {
        return Err(Error::Config(format!("client {i} received only {} samples", parts[i].len())));
    }
    Ok(parts)
}

/// Disjoint split with `ceil(fraction * n)` validation rows (at least one,
/// leaving at least one for training). Stratified by class when every
/// present class has two or more samples.
pub fn split_train_validation(d: &Dataset, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let n = d.len();
    if n < 2 {
        return Err(Error::Config(format!("cannot split {n} samples into train and validation")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let n_val = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);

    let by_class = indices_by_class(d);
    let stratify = by_class.iter().all(|idx| idx.is_empty() || idx.len() >= 2);
    let mut val = Vec::with_capacity(n_val);
    if stratify {
        let mut pools: Vec<Vec<usize>> = by_class
            .into_iter()
            .map(|mut idx| {
                rng.shuffle(&mut idx);
                idx
            })
            .collect();
        let quotas: Vec<f64> = pools.iter().map(|idx| fraction * idx.len() as f64).collect();
        let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut assigned: usize = take.iter().sum();
        let mut order: Vec<usize> = (0..pools.len()).filter(|&k| !pools[k].is_empty()).collect();
        order.sort_by(|&a, &b| {
            (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b))
        });
        // hand out the remainder by largest fractional part, then anywhere with room
        for pass in 0..2 {
            for &k in &order {
                if assigned >= n_val {
                    break;
                }
                let cap = if pass == 0 { pools[k].len() - 1 } else { pools[k].len() };
                if take[k] < cap {
                    take[k] += 1;
                    assigned += 1;
                }
            }
        }
        while assigned > n_val {
            let k = (0..take.len()).rev().find(|&k| take[k] > 0).expect("some class contributes");
            take[k] -= 1;
            assigned -= 1;
        }
        for (k, pool) in pools.iter_mut().enumerate() {
            val.extend(pool.drain(..take[k]));
        }
    } else {
        let perm = rng.permutation(n);
        val.extend_from_slice(&perm[..n_val]);
    }
    val.sort_unstable();
    let mut in_val = vec![false; n];
    for &i in &val {
        in_val[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| !in_val[i]).collect();
    Ok((d.subset(&train), d.subset(&val)))
}

/// Comma-separated numeric features followed by an integer label column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

pub(crate) fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let perr = |row: usize, msg: String| Error::Parse { path: path.to_path_buf(), row, msg };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in text.split('\n').enumerate() {
        let row = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(perr(row, "need at least one feature column and a label column".into()));
        }
        let p = cells.len() - 1;
        match width {
            None => width = Some(p),
            Some(w) if w != p => return Err(perr(row, format!("expected {} columns, found {}", w + 1, p + 1))),
            _ => {}
        }
        for cell in &cells[..p] {
            let v: f64 = cell.parse().map_err(|_| perr(row, format!("invalid number {cell:?}")))?;
            if !v.is_finite() {
                return Err(perr(row, format!("non-finite feature {cell:?}")));
            }
            values.push(v);
        }
        let label: usize = cells[p].parse().map_err(|_| perr(row, format!("invalid label {:?}", cells[p])))?;
        labels.push(label);
    }
    let Some(p) = width else {
        return Err(perr(1, "file contains no data rows".into()));
    };
    let n = labels.len();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    let features = Array2::from_shape_vec((n, p), values).expect("row widths checked");
    Ok(Dataset { features, labels, class_count })
}
