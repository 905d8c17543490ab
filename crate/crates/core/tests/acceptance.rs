//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;

use fedfew::cli::{run_experiment, RunConfig};
use fedfew::data::Dataset;
use fedfew::federation::{select_models, DataSpec, Experiment, ExperimentConfig, Method, MixtureParams};
use fedfew::metrics::{accuracy, jain_index};
use fedfew::model::{loss, loss_and_grad, ModelSpec, ParameterVector};
use fedfew::numerics::{log_sum_exp, smooth_min, Rng};
use fedfew::scalarization::{
    aggregate_gradients, apply_sample_weighting, compute_weights, stch_set_value, tch_set_value, LossMatrix,
    ScalarizationConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const FULL_BATCH: usize = 1 << 20;

/// The permuted-label G=3 mixture setup shared by the experiment criteria.
fn mixture_cfg(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        method: Method::FedFew,
        clients: 12,
        models: 3,
        rounds: 300,
        local_epochs: 1,
        batch_size: FULL_BATCH,
        learning_rate: 0.5,
        mu: 0.03,
        seed,
        use_sample_weighting: false,
        data: DataSpec::Mixture(MixtureParams { groups: 3, separation: 5.0, noise: 1.0, ..Default::default() }),
        ..Default::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_dataset(rng: &mut Rng, n: usize, p: usize, classes: usize) -> Dataset {
    let features = Array2::from_shape_fn((n, p), |_| rng.standard_normal() * 2.0);
    let labels = (0..n).map(|_| rng.index(classes)).collect();
    Dataset::new(features, labels, classes).unwrap()
}

fn random_params(rng: &mut Rng, d: usize) -> ParameterVector {
    ParameterVector((0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
}

fn gradient_consistency() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = 1 + rng.index(5);
        let k = 1 + rng.index(3);
        let classes = 2 + rng.index(3);
        let p = 1 + rng.index(40 / classes - 1);
        let spec = ModelSpec::softmax(p, classes);
        assert!(spec.dim() <= 40);
        let data: Vec<Dataset> = (0..m)
            .map(|_| {
                let n = 5 + rng.index(20);
                random_dataset(&mut rng, n, p, classes)
            })
            .collect();
        let sizes: Vec<usize> = data.iter().map(Dataset::len).collect();
        let mut thetas: Vec<ParameterVector> = (0..k).map(|_| random_params(&mut rng, spec.dim())).collect();
        let mu = 10f64.powf(rng.uniform_range(-2.0, 0.0));
        let cfg = ScalarizationConfig::with_mu(mu);

        let objective = |thetas: &[ParameterVector]| {
            let raw: Vec<Vec<f64>> =
                data.iter().map(|d| thetas.iter().map(|t| loss(&spec, t, &d.batch()).unwrap()).collect()).collect();
            stch_set_value(&apply_sample_weighting(raw, &sizes).unwrap(), &cfg).unwrap()
        };

        let mut raw = vec![vec![0.0; k]; m];
        let mut grads = Vec::with_capacity(m);
        for (i, d) in data.iter().enumerate() {
            let s = sizes[i] as f64 / sizes.iter().sum::<usize>() as f64;
            let mut row = Vec::with_capacity(k);
            for (kk, t) in thetas.iter().enumerate() {
                let (l, mut g) = loss_and_grad(&spec, t, &d.batch()).unwrap();
                raw[i][kk] = l;
                g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
                row.push(g);
            }
            grads.push(row);
        }
        let weights = compute_weights(&apply_sample_weighting(raw, &sizes).unwrap(), &cfg).unwrap();
        let analytic = aggregate_gradients(&weights, &grads).unwrap();

        let h = 1e-5;
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        for kk in 0..k {
            for j in 0..spec.dim() {
                let orig = thetas[kk].0[j];
                thetas[kk].0[j] = orig + h;
                let up = objective(&thetas);
                thetas[kk].0[j] = orig - h;
                let down = objective(&thetas);
                thetas[kk].0[j] = orig;
                let fd = (up - down) / (2.0 * h);
                diff2 += (fd - analytic[kk].0[j]).powi(2);
                fd2 += fd * fd;
            }
        }
        worst = worst.max(diff2.sqrt() / fd2.sqrt().max(1e-12));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e} over 50 instances in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn random_loss_matrix(rng: &mut Rng) -> LossMatrix {
    let m = 1 + rng.index(8);
    let k = 1 + rng.index(5);
    let scale = [0.01, 1.0, 10.0][rng.index(3)];
    LossMatrix::new((0..m).map(|_| (0..k).map(|_| rng.uniform() * scale).collect()).collect()).unwrap()
}

fn theorem_sandwich() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(202);
    let mus = [1e-3, 1e-2, 0.1, 1.0];
    let (mut lower_bad, mut upper_bad, mut corrected_bad, mut checks) = (0, 0, 0, 0);
    let mut witness = None;
    for _ in 0..10_000 {
        let lm = random_loss_matrix(&mut rng);
        let (m, k) = (lm.clients() as f64, lm.models() as f64);
        for &mu in &mus {
            let cfg = ScalarizationConfig::with_mu(mu);
            let tch = tch_set_value(&lm, &cfg).unwrap();
            let stch = stch_set_value(&lm, &cfg).unwrap();
            checks += 1;
            if stch - mu * (m.ln() + k.ln()) > tch + 1e-12 {
                lower_bad += 1;
            }
            if tch > stch + 1e-12 {
                upper_bad += 1;
                witness.get_or_insert((lm.clients(), lm.models(), mu, tch, stch));
            }
            if stch - mu * m.ln() > tch + 1e-12 || tch > stch + mu * k.ln() + 1e-12 {
                corrected_bad += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let mut detail = format!(
        "{checks} checks in {:.2}s: lower side violated {lower_bad}, tch <= stch violated {upper_bad}",
        elapsed.as_secs_f64()
    );
    if let Some((m, k, mu, tch, stch)) = witness {
        detail += &format!(" (e.g. M={m} K={k} mu={mu}: tch={tch:.6} > stch={stch:.6})");
    }
    detail += &format!("; stch - mu log M <= tch <= stch + mu log K violated {corrected_bad}");
    outcome(lower_bad == 0 && upper_bad == 0 && elapsed < Duration::from_secs(5), detail)
}

fn lse_bounds() -> Outcome {
    let mut rng = Rng::new(303);
    let mut bad = 0;
    for trial in 0..10_000 {
        let n = 1 + rng.index(20);
        let scale = [1.0, 1e3, 1e6][trial % 3];
        let y: Vec<f64> = (0..n).map(|_| rng.uniform_range(-scale, scale)).collect();
        let mu = 10f64.powf(rng.uniform_range(-3.0, 1.0));
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let slack = mu * (n as f64).ln();
        let lse = log_sum_exp(&y, mu).unwrap();
        let sm = smooth_min(&y, mu).unwrap();
        if !(max <= lse + 1e-10 && lse <= max + slack + 1e-10) {
            bad += 1;
        }
        if !(min - slack <= sm + 1e-10 && sm <= min + 1e-10) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{bad} violations over 10^4 vectors (entries up to 1e6)"))
}

fn weight_limits() -> Outcome {
    let lm = LossMatrix::new(vec![
        vec![0.10, 0.25, 0.40],
        vec![0.45, 0.30, 0.60],
        vec![0.55, 0.70, 0.40],
        vec![0.20, 0.35, 0.50],
    ])
    .unwrap();
    let weights_at = |mu: f64| compute_weights(&lm, &ScalarizationConfig::with_mu(mu)).unwrap();
    let sharp = weights_at(1e-4);
    let min_max = (0..lm.clients()).map(|i| sharp.w_row(i).iter().copied().fold(0.0, f64::max)).fold(1.0, f64::min);
    let flat = weights_at(10.0);
    let k = lm.models() as f64;
    let max_dev = flat.w.iter().map(|w| (w - 1.0 / k).abs()).fold(0.0, f64::max);
    let entropy = |w: &[f64]| w.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum::<f64>();
    let mus = [1e-3, 1e-2, 1e-1, 1.0];
    let per_mu: Vec<_> = mus.iter().map(|&mu| weights_at(mu)).collect();
    let increasing =
        (0..lm.clients()).all(|i| per_mu.windows(2).all(|p| entropy(p[0].w_row(i)) < entropy(p[1].w_row(i))));
    let mean_entropy_at_1 = mean(&(0..lm.clients()).map(|i| entropy(per_mu[3].w_row(i))).collect::<Vec<_>>());
    outcome(
        min_max >= 0.99 && max_dev <= 1e-2 && increasing,
        format!(
            "min row max weight {min_max:.6} at mu=1e-4; max |w - 1/K| {max_dev:.2e} at mu=10; \
             entropy strictly increasing: {increasing}; mean entropy {mean_entropy_at_1:.4} at mu=1"
        ),
    )
}

struct RecoverySeed {
    grouped: bool,
    fedfew_acc: Vec<f64>,
    fedavg_mean: f64,
    ifca_acc: Vec<f64>,
    seconds: f64,
}

fn test_accuracies(exp: &Experiment, models: &[ParameterVector], selected: &[usize]) -> Vec<f64> {
    exp.clients
        .iter()
        .zip(selected)
        .map(|(c, &k)| accuracy(&exp.spec, &models[k], c.test.as_ref().unwrap()).unwrap())
        .collect()
}

fn recovery_seed(seed: u64) -> RecoverySeed {
    let start = Instant::now();
    let exp = Experiment::new(mixture_cfg(seed)).unwrap();
    let out = exp.run_fedfew().unwrap();
    let sel = select_models(&exp.spec, &out.models, &exp.clients).unwrap();
    let grouped = (0..3).all(|g| {
        let picks: Vec<usize> =
            exp.clients.iter().zip(&sel.selected).filter(|(c, _)| c.group == Some(g)).map(|(_, &k)| k).collect();
        picks.windows(2).all(|w| w[0] == w[1])
    });
    let fedfew_acc = test_accuracies(&exp, &out.models.models, &sel.selected);
    let seconds = start.elapsed().as_secs_f64();

    let avg = Experiment::with_clients(
        ExperimentConfig { method: Method::FedAvg, models: 1, ..mixture_cfg(seed) },
        exp.spec,
        exp.clients.clone(),
    )
    .unwrap();
    let avg_out = avg.run_fedavg().unwrap();
    let fedavg_mean = mean(&test_accuracies(&avg, &avg_out.models.models, &[0; 12]));

    let ifca = Experiment::with_clients(
        ExperimentConfig { method: Method::Ifca, ..mixture_cfg(seed) },
        exp.spec,
        exp.clients.clone(),
    )
    .unwrap();
    let ifca_out = ifca.run_ifca().unwrap();
    let ifca_sel = select_models(&ifca.spec, &ifca_out.models, &ifca.clients).unwrap();
    let ifca_acc = test_accuracies(&ifca, &ifca_out.models.models, &ifca_sel.selected);
    RecoverySeed { grouped, fedfew_acc, fedavg_mean, ifca_acc, seconds }
}

fn group_recovery(seeds: &[RecoverySeed]) -> Outcome {
    let grouped = seeds.iter().filter(|s| s.grouped).count();
    let fedfew = mean(&seeds.iter().map(|s| mean(&s.fedfew_acc)).collect::<Vec<_>>());
    let fedavg = mean(&seeds.iter().map(|s| s.fedavg_mean).collect::<Vec<_>>());
    let worst_fedavg = seeds.iter().map(|s| s.fedavg_mean).fold(0.0, f64::max);
    let slowest = seeds.iter().map(|s| s.seconds).fold(0.0, f64::max);
    outcome(
        grouped >= 18 && fedfew >= 0.90 && fedavg <= 0.55 && slowest < 120.0,
        format!(
            "groups recovered in {grouped}/20 seeds; fedfew mean test acc {fedfew:.4}; \
             fedavg mean {fedavg:.4} (worst seed {worst_fedavg:.4}); slowest fedfew seed {slowest:.2}s"
        ),
    )
}

fn coverage_monotone() -> Outcome {
    let mut gaps = [0.0; 3];
    for seed in 0..10 {
        for k in 1..=3 {
            let mut cfg = mixture_cfg(seed);
            cfg.models = k;
            cfg.rounds = 1000;
            cfg.data = DataSpec::Mixture(MixtureParams { noise: 0.5, ..Default::default() });
            let mut run = RunConfig::new(cfg);
            run.oracle = true;
            let eval = fedfew::cli::execute(&run).unwrap();
            gaps[k - 1] += eval.coverage.unwrap().mean / 10.0;
        }
    }
    outcome(
        gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] <= 1e-2,
        format!("mean coverage gap K=1 {:.4}, K=2 {:.4}, K=3 {:.2e} over 10 seeds", gaps[0], gaps[1], gaps[2]),
    )
}

fn convergence_trace() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for k in [1, 3, 5] {
        let mut cfg = mixture_cfg(0);
        cfg.models = k;
        cfg.learning_rate = 0.02;
        let out = Experiment::new(cfg).unwrap().run_fedfew().unwrap();
        let values: Vec<f64> = out.traces.iter().map(|t| t.stch_value).collect();
        let later: Vec<bool> = values.windows(2).skip(10).map(|w| w[1] <= w[0]).collect();
        let frac = later.iter().filter(|&&b| b).count() as f64 / later.len() as f64;
        pass &= frac >= 0.95;
        parts.push(format!("K={k}: {:.1}% non-increasing", 100.0 * frac));
    }
    outcome(pass, parts.join(", "))
}

fn communication_tradeoff() -> Outcome {
    let mut accs = Vec::new();
    let mut accounting = true;
    for e in [1usize, 2, 4] {
        let mut total = 0.0;
        for seed in 0..10 {
            let mut cfg = mixture_cfg(seed);
            cfg.learning_rate = 0.15;
            cfg.local_epochs = e;
            cfg.rounds = 240 / e;
            let exp = Experiment::new(cfg.clone()).unwrap();
            let out = exp.run_fedfew().unwrap();
            let uploads: usize = out.traces.iter().map(|t| t.uploads).sum();
            accounting &= out.traces.iter().all(|t| t.uploads == 12 * 3) && uploads == 12 * 3 * cfg.rounds;
            let sel = select_models(&exp.spec, &out.models, &exp.clients).unwrap();
            total += mean(&test_accuracies(&exp, &out.models.models, &sel.selected)) / 10.0;
        }
        accs.push(total);
    }
    let spread = accs.iter().copied().fold(0.0, f64::max) - accs.iter().copied().fold(1.0, f64::min);
    outcome(
        spread <= 0.015 && accounting,
        format!(
            "mean acc E=1 {:.4}, E=2 {:.4}, E=4 {:.4} (spread {:.2} pp); uploads = M*K*T: {accounting}",
            accs[0],
            accs[1],
            accs[2],
            100.0 * spread
        ),
    )
}

fn fairness(seeds: &[RecoverySeed]) -> Outcome {
    let exact = jain_index(&[0.83; 12]).unwrap() == 1.0 && jain_index(&[5.0; 3]).unwrap() == 1.0;
    let mut rng = Rng::new(909);
    let mut out_of_range = 0;
    for _ in 0..10_000 {
        let n = 1 + rng.index(30);
        let mut v: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.2 { 0.0 } else { rng.uniform() * 10.0 }).collect();
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        let j = jain_index(&v).unwrap();
        if !(j >= 1.0 / n as f64 - 1e-12 && j <= 1.0) {
            out_of_range += 1;
        }
    }
    let wins = seeds.iter().filter(|s| jain_index(&s.fedfew_acc).unwrap() >= jain_index(&s.ifca_acc).unwrap()).count();
    outcome(
        exact && out_of_range == 0 && wins >= 14,
        format!(
            "equal inputs give exactly 1: {exact}; {out_of_range} out of [1/M, 1]; fedfew >= ifca in {wins}/20 seeds"
        ),
    )
}

fn stationarity_witness() -> Outcome {
    let cfg = ExperimentConfig {
        method: Method::FedFew,
        clients: 3,
        models: 2,
        rounds: 2000,
        batch_size: FULL_BATCH,
        learning_rate: 0.5,
        mu: 0.1,
        seed: 5,
        l2_penalty: 0.05,
        data: DataSpec::Mixture(MixtureParams {
            groups: 3,
            input_dim: 2,
            classes: 3,
            separation: 2.0,
            noise: 1.0,
            samples_per_client: 40,
            test_samples_per_client: 0,
            permute_labels: true,
        }),
        ..Default::default()
    };
    let exp = Experiment::new(cfg).unwrap();
    let d = exp.spec.dim();
    let out = exp.run_fedfew().unwrap();
    let last = out.traces.last().unwrap();
    let max_norm = last.grad_norms.iter().copied().fold(0.0, f64::max);
    let joint = out.final_weights.as_ref().unwrap().joint();
    let nonneg = joint.iter().all(|&v| v >= 0.0);
    let total: f64 = joint.iter().sum();
    outcome(
        d <= 10 && max_norm <= 1e-4 && nonneg && (total - 1.0).abs() <= 1e-10,
        format!(
            "d={d}; final max aggregated grad norm {max_norm:.2e}; weights nonnegative {nonneg}, sum - 1 = {:.1e}",
            total - 1.0
        ),
    )
}

fn read_outputs(dir: &Path) -> Vec<Vec<u8>> {
    ["trace.csv", "clients.csv", "summary.csv"].iter().map(|f| fs::read(dir.join(f)).unwrap()).collect()
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let mut total = 0;
    for method in [Method::FedFew, Method::FedAvg, Method::Ifca, Method::Local] {
        let mut cfg = mixture_cfg(11);
        cfg.method = method;
        cfg.rounds = 40;
        cfg.batch_size = 16;
        cfg.learning_rate = 0.2;
        if method == Method::FedAvg {
            cfg.models = 1;
        }
        let mut outputs = Vec::new();
        for (run, parallel) in [(0, true), (1, true), (2, false)] {
            let mut rc = RunConfig::new(ExperimentConfig { parallel, ..cfg.clone() });
            rc.oracle = method == Method::FedFew;
            let dir = root.path().join(format!("{}_{run}", method.name()));
            run_experiment(&rc, &dir).unwrap();
            outputs.push(read_outputs(&dir));
        }
        total += 1;
        if outputs.windows(2).all(|w| w[0] == w[1]) {
            identical += 1;
        }
    }
    outcome(
        identical == total,
        format!("{identical}/{total} methods byte-identical across two parallel runs and one sequential run"),
    )
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let recovery: Vec<RecoverySeed> = (0..20).map(recovery_seed).collect();
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient consistency", Box::new(gradient_consistency)),
        ("stch/tch sandwich", Box::new(theorem_sandwich)),
        ("log-sum-exp bounds", Box::new(lse_bounds)),
        ("weight limits", Box::new(weight_limits)),
        ("group recovery", Box::new(|| group_recovery(&recovery))),
        ("coverage-gap monotonicity", Box::new(coverage_monotone)),
        ("convergence trace", Box::new(convergence_trace)),
        ("communication trade-off", Box::new(communication_tradeoff)),
        ("fairness", Box::new(|| fairness(&recovery))),
        ("stationarity witness", Box::new(stationarity_witness)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} {:<26} {}  {}", n + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
