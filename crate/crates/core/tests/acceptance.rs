//! Acceptance run. Prints one line per criterion and exits nonzero if any
//! fails. Pass criterion names (`ac1` .. `ac10`) as arguments to run a subset:
//!
//! cargo test --test acceptance -- ac3 ac8

#![allow(clippy::needless_range_loop)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use hmine::attack::{run_attack, AttackConfig};
use hmine::data::{sample_batch, Batch, Dataset};
use hmine::fed::{run_fedsgd, stream_rng, FedConfig, Stream, TaskModel, TaskSpec};
use hmine::harness::{
    load_dataset, mean_over_seeds, run_convergence, run_factors, run_validate_attack, spearman,
    ExperimentConfig, RunOptions, RunRecord,
};
use hmine::mi::{covariance_metric, estimate_mi, EstimatorConfig, GaussianSource};
use hmine::nd::{Activation, Graph, Mlp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 3] = [0, 1, 2];

type Criterion = (&'static str, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(root().join("configs").join(name)).expect("config loads");
    cfg.data_path = root().join("data/adult.data");
    cfg
}

fn adult() -> Dataset {
    load_dataset(&ExperimentConfig {
        data_path: root().join("data/adult.data"),
        ..ExperimentConfig::default()
    })
    .expect("adult loads")
}

fn serial() -> RunOptions {
    RunOptions::default()
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_rho(r: Option<f64>) -> String {
    r.map_or("undefined".into(), |v| format!("{v:.3}"))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Reverse-mode gradients of random MLPs and task losses against central
/// differences.
fn ac1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let depth = rng.gen_range(2..=4);
        let dims: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=10)).collect();
        let rows = rng.gen_range(1..=4);
        let x = Tensor::matrix(
            rows,
            dims[0],
            (0..rows * dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        if i % 2 == 0 {
            // network with a sum-of-squares head
            let mut mlp = Mlp::new(&dims, Activation::Relu, Activation::Identity, &mut rng).unwrap();
            for l in 0..mlp.num_layers() {
                for b in mlp.bias_mut(l) {
                    *b = rng.gen_range(0.05..0.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                }
            }
            let f = |m: &Mlp| -> f64 { m.forward(&x).unwrap().data().iter().map(|v| v * v).sum() };
            let mut g = Graph::new();
            let vars = mlp.register(&mut g);
            let input = g.constant(x.clone());
            let out = mlp.forward_on(&mut g, &vars, input).unwrap();
            let sq = g.mul(out, out).unwrap();
            let loss = g.sum(sq);
            let analytic = vars.flat_grad(&g.backward(loss).unwrap());
            for p in 0..mlp.param_count() {
                let (mut plus, mut minus) = (mlp.clone(), mlp.clone());
                plus.params_mut()[p] += h;
                minus.params_mut()[p] -= h;
                worst = worst.max(rel_err(analytic[p], (f(&plus) - f(&minus)) / (2.0 * h)));
            }
        } else {
            // task loss: alternate logreg and a classification MLP
            let spec = if i % 4 == 1 {
                TaskSpec::Logreg
            } else {
                TaskSpec::Mlp {
                    hidden: dims[1..].to_vec(),
                    classes: 2,
                }
            };
            let mut model = TaskModel::new(&spec, dims[0], &mut rng).unwrap();
            let theta: Vec<f64> = model.theta().iter().map(|t| t + rng.gen_range(-0.3..0.3)).collect();
            model.set_theta(&theta).unwrap();
            let labels: Vec<u8> = (0..rows).map(|_| rng.gen_range(0..2)).collect();
            let samples = (0..rows)
                .map(|r| hmine::data::Sample {
                    features: x.row_slice(r).to_vec(),
                    label: labels[r],
                })
                .collect();
            let ds = Dataset::from_samples(samples).unwrap();
            let batch = Batch::from_indices(&ds, (0..rows).collect()).unwrap();
            let analytic = model.compute_gradient(&batch).unwrap().values;
            for p in 0..theta.len() {
                let mut t = theta.clone();
                t[p] += h;
                model.set_theta(&t).unwrap();
                let lp = model.mean_loss(&x, &labels).unwrap();
                t[p] -= 2.0 * h;
                model.set_theta(&t).unwrap();
                let lm = model.mean_loss(&x, &labels).unwrap();
                worst = worst.max(rel_err(analytic[p], (lp - lm) / (2.0 * h)));
            }
            model.set_theta(&theta).unwrap();
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 100 instances (< 1e-4)"))
}

/// One client without noise is plain minibatch SGD.
fn ac2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d, b) = (50, 4, 5);
    let samples: Vec<_> = (0..n)
        .map(|_| hmine::data::Sample {
            features: (0..d).map(|_| rng.sample(StandardNormal)).collect(),
            label: rng.gen_range(0..2),
        })
        .collect();
    let ds = Dataset::from_samples(samples.clone()).unwrap();
    let cfg = FedConfig {
        clients: 1,
        batch_size: b,
        lr: 0.1,
        epochs: 10,
        checkpoint_epochs: (1..=10).collect(),
        noise_sigma: 0.0,
        seed: 11,
        task: TaskSpec::Logreg,
    };
    let traj = run_fedsgd(&cfg, std::slice::from_ref(&ds)).unwrap();

    // reference: same initialization and index stream, hand-written update
    let init = TaskModel::new(&TaskSpec::Logreg, d, &mut stream_rng(cfg.seed, Stream::Init)).unwrap();
    let mut theta = init.theta().to_vec();
    let mut batches = stream_rng(cfg.seed, Stream::Batches(0));
    let mut worst: f64 = 0.0;
    let rounds = traj.rounds_per_epoch * cfg.epochs;
    for round in 1..=rounds {
        let idx: Vec<usize> = (0..b).map(|_| batches.gen_range(0..n)).collect();
        let mut grad = vec![0.0; d + 1];
        for &i in &idx {
            let s = &ds.samples()[i];
            let z = theta[d] + s.features.iter().zip(&theta[..d]).map(|(x, w)| x * w).sum::<f64>();
            let c = 1.0 / (1.0 + (-z).exp()) - f64::from(s.label);
            for k in 0..d {
                grad[k] += c * s.features[k] / b as f64;
            }
            grad[d] += c / b as f64;
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= cfg.lr * g;
        }
        if round % traj.rounds_per_epoch == 0 {
            let ck = traj.at_epoch(round / traj.rounds_per_epoch).unwrap();
            for (a, r) in ck.theta.iter().zip(&theta) {
                worst = worst.max((a - r).abs());
            }
        }
    }
    outcome(
        rounds == 100 && worst <= 1e-12,
        format!("{rounds} rounds, max |θ_fed − θ_sgd| = {worst:.2e} (<= 1e-12)"),
    )
}

/// Estimator against the closed-form MI of correlated Gaussians.
fn ac3() -> Outcome {
    let cfg = EstimatorConfig::default();
    let strong = GaussianSource::new(1, 0.9).unwrap();
    let t1 = estimate_mi(&strong, &cfg).unwrap();
    let none = GaussianSource::new(1, 0.0).unwrap();
    let t0 = estimate_mi(&none, &cfg).unwrap();
    let (e1, e0) = (t1.readout(), t0.readout());
    let truth = strong.analytic_mi();
    let pass = (e1 - truth).abs() <= 0.1 && e0.abs() <= 0.05 && t1.converged && t0.converged;
    outcome(
        pass,
        format!(
            "rho=0.9: {e1:.4} vs {truth:.4} (±0.1, converged {}); rho=0: {e0:.4} (±0.05, converged {})",
            t1.converged, t0.converged
        ),
    )
}

/// H-MINE convergence on Adult at epoch 1 for B = 1 and 3; the flat network
/// is only logged.
fn ac4() -> Outcome {
    let cfg = config("convergence.toml");
    let cells = run_convergence(&cfg, &adult(), &serial()).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for c in &cells {
        let (conv, est, iters) = match &c.trace {
            Some(t) => (t.converged, t.readout(), t.iterations()),
            None => (false, f64::NAN, 0),
        };
        if c.variant == hmine::mi::Variant::Hierarchical {
            pass &= conv;
        }
        parts.push(format!(
            "{:?} B={}: converged {conv}, readout {est:.3} after {iters} it",
            c.variant, c.batch_size
        ));
    }
    outcome(pass, parts.join("; "))
}

fn seeds_of(cfg: &ExperimentConfig, f: impl Fn(&ExperimentConfig) -> Vec<RunRecord>) -> Vec<Vec<RunRecord>> {
    SEEDS
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            f(&c)
        })
        .collect()
}

/// MI falls and attack error rises with batch size and with noise.
fn ac5() -> Outcome {
    let ds = adult();
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["validate_attack_batch.toml", "validate_attack_noise.toml"] {
        let cfg = config(name);
        let runs = seeds_of(&cfg, |c| run_validate_attack(c, &ds, &serial()).unwrap());
        let mi = mean_over_seeds(&runs, |r| Some(r.mi_nats));
        let eps = mean_over_seeds(&runs, |r| r.epsilon);
        let (r_mi, r_eps) = (spearman(&cfg.grid, &mi), spearman(&cfg.grid, &eps));
        pass &= r_mi.is_some_and(|r| r <= -0.8) && r_eps.is_some_and(|r| r >= 0.8);
        parts.push(format!(
            "{}: MI {} rho {} (<= -0.8), ε {} rho {} (>= 0.8)",
            cfg.axis.unwrap().name(),
            fmt_vec(&mi),
            fmt_rho(r_mi),
            fmt_vec(&eps),
            fmt_rho(r_eps)
        ));
    }
    outcome(pass, parts.join("; "))
}

/// MI peaks at the first epoch and settles by the last two.
fn ac6() -> Outcome {
    let ds = adult();
    let cfg = config("factors_epoch.toml");
    let runs = seeds_of(&cfg, |c| run_factors(c, &ds, &serial()).unwrap());
    let mi = mean_over_seeds(&runs, |r| Some(r.mi_nats));
    let first_is_max = mi.iter().all(|&v| v <= mi[0]);
    let n = mi.len();
    let gap = (mi[n - 1] - mi[n - 2]).abs();
    outcome(
        first_is_max && gap < 0.1,
        format!(
            "epochs {:?}: MI {} (epoch 1 max: {first_is_max}; last two differ by {gap:.4}, < 0.1)",
            cfg.grid,
            fmt_vec(&mi)
        ),
    )
}

/// MI rises with the client's positive ratio.
fn ac7() -> Outcome {
    let ds = adult();
    let cfg = config("factors_imbalance.toml");
    let runs = seeds_of(&cfg, |c| run_factors(c, &ds, &serial()).unwrap());
    let mi = mean_over_seeds(&runs, |r| Some(r.mi_nats));
    let rho = spearman(&cfg.grid, &mi);
    let monotone = mi.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        monotone && rho.is_some_and(|r| r >= 0.8),
        format!(
            "ratios {:?}: MI {} (non-decreasing: {monotone}; rho {}, >= 0.8)",
            cfg.grid,
            fmt_vec(&mi),
            fmt_rho(rho)
        ),
    )
}

/// Independent two-pass cross-covariance, every entry summed.
fn brute_covariance(xs: &[Vec<f64>], gs: &[Vec<f64>]) -> f64 {
    let n = xs.len() as f64;
    let mean = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / n;
    let mx: Vec<f64> = (0..xs[0].len()).map(|j| mean(xs, j)).collect();
    let mg: Vec<f64> = (0..gs[0].len()).map(|j| mean(gs, j)).collect();
    let mut total = 0.0;
    for a in 0..mx.len() {
        for b in 0..mg.len() {
            total += (0..xs.len()).map(|i| (xs[i][a] - mx[a]) * (gs[i][b] - mg[b])).sum::<f64>() / (n - 1.0);
        }
    }
    total
}

fn ac8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, dx, dg) = (rng.gen_range(2..40), rng.gen_range(1..8), rng.gen_range(1..8));
        let mut draw = |d: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect()
        };
        let (xs, gs) = (draw(dx), draw(dg));
        let fast = covariance_metric(&xs, &gs).unwrap();
        worst = worst.max((fast - brute_covariance(&xs, &gs)).abs());
    }
    outcome(worst <= 1e-12, format!("max abs difference {worst:.2e} over 50 inputs (<= 1e-12)"))
}

/// Gradient matching on one logreg sample recovers `g_w / g_b`.
fn ac9() -> Outcome {
    let ds = adult();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = TaskModel::new(&TaskSpec::Logreg, ds.feature_dim(), &mut rng).unwrap();
    let batch = sample_batch(&ds, 1, &mut rng).unwrap();
    let g = model.compute_gradient(&batch).unwrap().values;
    let d = ds.feature_dim();
    let closed: Vec<f64> = g[..d].iter().map(|v| v / g[d]).collect();
    let report = run_attack(&model, &g, &batch.labels, &AttackConfig::default()).unwrap();
    let mut worst_cos: f64 = 1.0;
    let mut worst_loss: f64 = 0.0;
    for r in &report.restarts {
        let rec = r.reconstruction.as_ref().unwrap().data();
        let dot: f64 = rec.iter().zip(&closed).map(|(a, b)| a * b).sum();
        let na = rec.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = closed.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst_cos = worst_cos.min(dot / (na * nb));
        worst_loss = worst_loss.max(r.final_loss);
    }
    outcome(
        worst_cos > 0.99 && worst_loss < 1e-6,
        format!(
            "{} restarts: min cosine {worst_cos:.6} (> 0.99), max final loss {worst_loss:.2e} (< 1e-6)",
            report.restarts.len()
        ),
    )
}

/// A grid rerun in serial mode reproduces the parallel run.
fn ac10() -> Outcome {
    let ds = adult();
    let mut cfg = config("validate_attack_noise.toml");
    cfg.seed = 5;
    cfg.estimator.max_iterations = 300;
    cfg.estimator.min_iterations = 300;
    cfg.estimator.window = 100;
    cfg.attack.iterations = 200;
    let parallel = RunOptions {
        serial: false,
        workers: 2,
        ..RunOptions::default()
    };
    let a = run_validate_attack(&cfg, &ds, &parallel).unwrap();
    let b = run_validate_attack(&cfg, &ds, &serial()).unwrap();
    let c = run_validate_attack(&cfg, &ds, &serial()).unwrap();
    let mut worst: f64 = 0.0;
    let mut missing = false;
    for (x, y) in a.iter().zip(&b).chain(b.iter().zip(&c)) {
        worst = worst.max((x.mi_nats - y.mi_nats).abs());
        worst = worst.max((x.cov_baseline - y.cov_baseline).abs());
        match (x.epsilon, y.epsilon) {
            (Some(e), Some(f)) => worst = worst.max((e - f).abs()),
            _ => missing = true,
        }
    }
    outcome(
        !missing && a.len() == cfg.grid.len() && worst <= 1e-12,
        format!("{} points, max difference {worst:.2e} (<= 1e-12)", a.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("ac1", "gradient correctness", ac1),
        ("ac2", "FedSGD degeneracy", ac2),
        ("ac3", "Gaussian MI oracle", ac3),
        ("ac4", "convergence on Adult", ac4),
        ("ac5", "batch and noise trends", ac5),
        ("ac6", "epoch trend", ac6),
        ("ac7", "imbalance trend", ac7),
        ("ac8", "covariance baseline", ac8),
        ("ac9", "attack oracle", ac9),
        ("ac10", "determinism", ac10),
    ];
    // libtest flags such as --nocapture are ignored
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {id} {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
