use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attack::run_attack;
use crate::data::{load_adult, preprocess, resample_imbalance, sample_batch, AdultSchema, Dataset};
use crate::error::{Error, Result};
use crate::fed::{add_gradient_noise, run_fedsgd, TaskModel, Trajectory};
use crate::harness::config::{derive_seed, Axis, ExperimentConfig, ImbalanceModel};
use crate::harness::{write_grid_csv, write_runs_csv, RunOptions, RunRecord};
use crate::mi::{covariance_metric, estimate_mi, EstimatorConfig, GradientSource, MITrace, PairSource, Variant};

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    preprocess(&load_adult(&config.data_path, &AdultSchema::default())?)
}

fn run_points<T: Send>(opts: &RunOptions, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    if opts.serial || opts.workers <= 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

fn write_file(opts: &RunOptions, name: &str, f: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        let mut file = fs::File::create(Path::new(dir).join(name))?;
        f(&mut file)?;
    }
    Ok(())
}

/// Trains the task model with checkpoints at `epochs`.
fn train(config: &ExperimentConfig, datasets: &[Dataset], epochs: &[usize], seed: u64) -> Result<Trajectory> {
    let mut fed = config.fed.clone();
    fed.seed = seed;
    fed.epochs = epochs.iter().copied().max().unwrap_or(0);
    fed.checkpoint_epochs = epochs.to_vec();
    run_fedsgd(&fed, datasets)
}

#[derive(Clone, Debug)]
pub struct PointResult {
    pub trace: MITrace,
    pub cov_baseline: f64,
    pub epsilon: Option<f64>,
    pub attack_error: Option<String>,
}

/// MI estimate, covariance baseline and (optionally) attack error for one
/// `(θ, B, σ)` probe.
pub fn probe_point(
    dataset: &Dataset,
    model: &TaskModel,
    batch_size: usize,
    sigma: f64,
    config: &ExperimentConfig,
    point_seed: u64,
    with_attack: bool,
) -> Result<PointResult> {
    let sub = |purpose: &str| derive_seed(point_seed, "", 0.0, purpose);
    let source = GradientSource {
        dataset,
        model,
        batch_size,
        sigma,
        include_label: config.estimator.include_label,
    };
    let est = EstimatorConfig {
        seed: sub("estimator"),
        ..config.estimator.clone()
    };
    let trace = estimate_mi(&source, &est)?;

    let mut rng = ChaCha8Rng::seed_from_u64(sub("cov"));
    let mut xs = Vec::with_capacity(config.cov_draws);
    let mut gs = Vec::with_capacity(config.cov_draws);
    for _ in 0..config.cov_draws {
        let (x, g) = source.draw_one(&mut rng)?;
        xs.push(x);
        gs.push(g);
    }
    let cov_baseline = covariance_metric(&xs, &gs)?;

    let (mut epsilon, mut attack_error) = (None, None);
    if with_attack {
        let mut rng = ChaCha8Rng::seed_from_u64(sub("attack-batch"));
        let batch = sample_batch(dataset, batch_size, &mut rng)?;
        let g = add_gradient_noise(&model.compute_gradient(&batch)?, sigma, &mut rng);
        let acfg = crate::attack::AttackConfig {
            seed: sub("attack"),
            ..config.attack.clone()
        };
        match run_attack(model, &g.values, &batch.labels, &acfg) {
            Ok(report) => epsilon = Some(report.epsilon),
            Err(e) => attack_error = Some(e.to_string()),
        }
    }
    Ok(PointResult {
        trace,
        cov_baseline,
        epsilon,
        attack_error,
    })
}

fn record(hash: &str, axis_value: f64, seed: u64, p: &PointResult, start: Instant) -> RunRecord {
    RunRecord {
        config_hash: hash.to_string(),
        axis_value,
        seed,
        mi_nats: p.trace.readout(),
        cov_baseline: p.cov_baseline,
        epsilon: p.epsilon,
        converged: p.trace.converged,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

fn write_grid(opts: &RunOptions, stem: &str, records: &[RunRecord]) -> Result<()> {
    write_file(opts, &format!("{stem}.csv"), |f| write_grid_csv(f, records))?;
    write_file(opts, &format!("{stem}_runs.csv"), |f| write_runs_csv(f, records))
}

fn check_kind(config: &ExperimentConfig, kind: crate::harness::ExperimentKind) -> Result<()> {
    config.validate()?;
    if config.kind != kind {
        return Err(Error::Config(format!("expected a {kind:?} config, got {:?}", config.kind)));
    }
    Ok(())
}

/// MI against the attack's inference error over batch sizes or noise levels.
pub fn run_validate_attack(config: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions) -> Result<Vec<RunRecord>> {
    check_kind(config, crate::harness::ExperimentKind::ValidateAttack)?;
    let axis = config.axis.expect("validated");
    let hash = config.hash();
    let traj = train(config, std::slice::from_ref(dataset), &[config.epoch], derive_seed(config.seed, &hash, 0.0, "fed"))?;
    let model = traj.model_at_epoch(config.epoch)?;
    let results = run_points(opts, config.grid.len(), |i| {
        let v = config.grid[i];
        let start = Instant::now();
        let (b, sigma) = match axis {
            Axis::BatchSize => (v as usize, config.noise_sigma),
            _ => (config.batch_size, v),
        };
        let seed = derive_seed(config.seed, &hash, v, "point");
        probe_point(dataset, &model, b, sigma, config, seed, config.run_attack)
            .map(|p| (record(&hash, v, seed, &p, start), p))
    })?;
    let mut records = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (rec, p) = r?;
        write_file(opts, &format!("trace_{}_{}.csv", axis.name(), i), |f| p.trace.write_csv(f))?;
        records.push(rec);
    }
    write_grid(opts, &format!("validate_attack_{}", axis.name()), &records)?;
    Ok(records)
}

/// MI over training epochs or client class ratios.
pub fn run_factors(config: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions) -> Result<Vec<RunRecord>> {
    check_kind(config, crate::harness::ExperimentKind::Factors)?;
    let axis = config.axis.expect("validated");
    let hash = config.hash();
    let fed_seed = derive_seed(config.seed, &hash, 0.0, "fed");
    let b = config.batch_size;
    let sigma = config.noise_sigma;
    let results = match axis {
        Axis::Epoch => {
            let epochs: Vec<usize> = config.grid.iter().map(|&e| e as usize).collect();
            let traj = train(config, std::slice::from_ref(dataset), &epochs, fed_seed)?;
            run_points(opts, epochs.len(), |i| {
                let start = Instant::now();
                let v = config.grid[i];
                let seed = derive_seed(config.seed, &hash, v, "point");
                let model = traj.model_at_epoch(epochs[i])?;
                probe_point(dataset, &model, b, sigma, config, seed, false).map(|p| (record(&hash, v, seed, &p, start), p))
            })?
        }
        Axis::Imbalance => {
            let global = match config.imbalance_model {
                ImbalanceModel::Global => Some(
                    train(config, std::slice::from_ref(dataset), &[config.epoch], fed_seed)?.model_at_epoch(config.epoch)?,
                ),
                ImbalanceModel::Local => None,
            };
            let size = config.imbalance_size.unwrap_or(dataset.len());
            run_points(opts, config.grid.len(), |i| {
                let start = Instant::now();
                let v = config.grid[i];
                let seed = derive_seed(config.seed, &hash, v, "point");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &hash, v, "imbalance"));
                let client = resample_imbalance(dataset, v, size, &mut rng)?;
                let model = match &global {
                    Some(m) => m.clone(),
                    None => train(config, std::slice::from_ref(&client), &[config.epoch], derive_seed(config.seed, &hash, v, "fed"))?
                        .model_at_epoch(config.epoch)?,
                };
                probe_point(&client, &model, b, sigma, config, seed, false).map(|p| (record(&hash, v, seed, &p, start), p))
            })?
        }
        _ => unreachable!("validated"),
    };
    let mut records = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (rec, p) = r?;
        write_file(opts, &format!("trace_{}_{}.csv", axis.name(), i), |f| p.trace.write_csv(f))?;
        records.push(rec);
    }
    write_grid(opts, &format!("factors_{}", axis.name()), &records)?;
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct ConvergenceCell {
    pub variant: Variant,
    pub batch_size: usize,
    pub trace: Option<MITrace>,
    pub error: Option<String>,
}

/// One trace per (statistic network, batch size); failures are kept as
/// cells with an error instead of stopping the run.
pub fn run_convergence(config: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions) -> Result<Vec<ConvergenceCell>> {
    check_kind(config, crate::harness::ExperimentKind::Convergence)?;
    let hash = config.hash();
    let traj = train(config, std::slice::from_ref(dataset), &[config.epoch], derive_seed(config.seed, &hash, 0.0, "fed"))?;
    let model = traj.model_at_epoch(config.epoch)?;
    let cells: Vec<(Variant, usize)> = config
        .variants
        .iter()
        .flat_map(|&v| config.grid.iter().map(move |&b| (v, b as usize)))
        .collect();
    let out = run_points(opts, cells.len(), |i| {
        let (variant, b) = cells[i];
        let source = GradientSource {
            dataset,
            model: &model,
            batch_size: b,
            sigma: config.noise_sigma,
            include_label: config.estimator.include_label,
        };
        // both variants at one batch size share a seed
        let est = EstimatorConfig {
            variant,
            seed: derive_seed(config.seed, &hash, b as f64, "estimator"),
            ..config.estimator.clone()
        };
        match estimate_mi(&source, &est) {
            Ok(t) => ConvergenceCell { variant, batch_size: b, trace: Some(t), error: None },
            Err(e) => ConvergenceCell { variant, batch_size: b, trace: None, error: Some(e.to_string()) },
        }
    })?;
    for c in &out {
        if let Some(t) = &c.trace {
            write_file(opts, &format!("trace_{}_b{}.csv", c.variant, c.batch_size), |f| t.write_csv(f))?;
        }
    }
    write_file(opts, "convergence_summary.csv", |f| {
        use std::io::Write;
        writeln!(f, "variant,batch_size,converged,final_estimate_nats,readout_nats,iterations,max_abs_v,nan_count,error")?;
        for c in &out {
            match &c.trace {
                Some(t) => writeln!(
                    f,
                    "{},{},{},{},{:?},{},{:?},{},",
                    c.variant,
                    c.batch_size,
                    t.converged,
                    t.final_estimate.map(|e| format!("{e:?}")).unwrap_or_default(),
                    t.readout(),
                    t.iterations(),
                    t.diagnostics.max_abs,
                    t.diagnostics.nan_count
                )?,
                None => writeln!(
                    f,
                    "{},{},false,,,,,,\"{}\"",
                    c.variant,
                    c.batch_size,
                    c.error.as_deref().unwrap_or("").replace('"', "'")
                )?,
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Single estimate at the configured `(epoch, B, σ)`.
pub fn run_estimate(config: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions) -> Result<(MITrace, RunRecord)> {
    config.validate()?;
    let hash = config.hash();
    let start = Instant::now();
    let traj = train(config, std::slice::from_ref(dataset), &[config.epoch], derive_seed(config.seed, &hash, 0.0, "fed"))?;
    let model = traj.model_at_epoch(config.epoch)?;
    let v = config.batch_size as f64;
    let seed = derive_seed(config.seed, &hash, v, "point");
    let p = probe_point(dataset, &model, config.batch_size, config.noise_sigma, config, seed, false)?;
    let rec = record(&hash, v, seed, &p, start);
    write_file(opts, "trace.csv", |f| p.trace.write_csv(f))?;
    write_grid(opts, "estimate", std::slice::from_ref(&rec))?;
    Ok((p.trace, rec))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Publish,
    Withhold,
}

#[derive(Clone, Debug)]
pub struct PrealarmOutcome {
    pub decision: Decision,
    pub estimate: Option<f64>,
    pub converged: bool,
    pub reason: String,
}

/// Publish iff the estimator converged and its estimate is below
/// `threshold`; any estimator failure withholds.
pub fn risk_prealarm(source: &dyn PairSource, estimator: &EstimatorConfig, threshold: f64) -> Result<PrealarmOutcome> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Config(format!("threshold must be >= 0, got {threshold}")));
    }
    decide(estimate_mi(source, estimator), threshold)
}

/// The pre-alarm decision for an estimation outcome.
pub fn decide(estimation: Result<MITrace>, threshold: f64) -> Result<PrealarmOutcome> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Config(format!("threshold must be >= 0, got {threshold}")));
    }
    let trace = match estimation {
        Ok(t) => t,
        Err(e @ (Error::Estimation(_) | Error::Numeric(_))) => {
            return Ok(PrealarmOutcome {
                decision: Decision::Withhold,
                estimate: None,
                converged: false,
                reason: format!("estimator failed: {e}"),
            })
        }
        Err(e) => return Err(e),
    };
    Ok(match trace.final_estimate {
        None => PrealarmOutcome {
            decision: Decision::Withhold,
            estimate: Some(trace.readout()),
            converged: false,
            reason: format!("estimator did not converge in {} iterations", trace.iterations()),
        },
        Some(e) if e >= threshold => PrealarmOutcome {
            decision: Decision::Withhold,
            estimate: Some(e),
            converged: true,
            reason: format!("estimate {e:.4} nats >= threshold {threshold}"),
        },
        Some(e) => PrealarmOutcome {
            decision: Decision::Publish,
            estimate: Some(e),
            converged: true,
            reason: format!("estimate {e:.4} nats < threshold {threshold}"),
        },
    })
}

/// Pre-alarm on the configured Adult client at `(epoch, B, σ)`.
pub fn run_prealarm(config: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions) -> Result<PrealarmOutcome> {
    check_kind(config, crate::harness::ExperimentKind::Prealarm)?;
    let hash = config.hash();
    let traj = train(config, std::slice::from_ref(dataset), &[config.epoch], derive_seed(config.seed, &hash, 0.0, "fed"))?;
    let model = traj.model_at_epoch(config.epoch)?;
    let source = GradientSource {
        dataset,
        model: &model,
        batch_size: config.batch_size,
        sigma: config.noise_sigma,
        include_label: config.estimator.include_label,
    };
    let est = EstimatorConfig {
        seed: derive_seed(config.seed, &hash, config.batch_size as f64, "estimator"),
        ..config.estimator.clone()
    };
    let out = risk_prealarm(&source, &est, config.threshold.expect("validated"))?;
    write_file(opts, "prealarm.csv", |f| {
        use std::io::Write;
        writeln!(f, "decision,estimate_nats,converged,reason")?;
        writeln!(
            f,
            "{},{},{},\"{}\"",
            match out.decision {
                Decision::Publish => "publish",
                Decision::Withhold => "withhold",
            },
            out.estimate.map(|e| format!("{e:?}")).unwrap_or_default(),
            out.converged,
            out.reason.replace('"', "'")
        )?;
        Ok(())
    })?;
    Ok(out)
}
