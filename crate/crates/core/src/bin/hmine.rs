use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmine::harness::{
    load_dataset, run_convergence, run_estimate, run_factors, run_prealarm, run_validate_attack,
    spearman, Decision, ExperimentConfig, ExperimentKind, RunOptions, RunRecord,
};

#[derive(Parser)]
#[command(name = "hmine", about = "Gradient leakage risk estimation for federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate I(X_B; G) at one (epoch, B, sigma) point.
    Estimate(Common),
    /// Trace the estimator for each statistic network and batch size.
    Convergence(Common),
    /// Compare MI with the attack's inference error over a grid.
    ValidateAttack(Common),
    /// MI over training epochs or class imbalance.
    Factors(Common),
    /// Decide whether a gradient may be published.
    Prealarm {
        #[command(flatten)]
        common: Common,
        /// Withhold threshold in nats.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Run grid points one after another.
    #[arg(long)]
    serial: bool,
}

impl Common {
    fn load(&self, kind: ExperimentKind) -> hmine::Result<(ExperimentConfig, RunOptions)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig {
                kind,
                ..ExperimentConfig::default()
            },
        };
        if cfg.kind != kind {
            return Err(hmine::Error::Config(format!(
                "config is for {:?}, subcommand needs {kind:?}",
                cfg.kind
            )));
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let opts = RunOptions {
            out_dir: self.out_dir.clone(),
            workers: self.workers.max(1),
            serial: self.serial,
        };
        Ok((cfg, opts))
    }
}

fn print_grid(records: &[RunRecord]) {
    println!("axis_value\tmi_nats\tcov_baseline\tepsilon\tconverged");
    for r in records {
        let eps = r.epsilon.map_or("-".to_string(), |e| format!("{e:.5}"));
        println!(
            "{}\t{:.4}\t{:.5}\t{eps}\t{}",
            r.axis_value, r.mi_nats, r.cov_baseline, r.converged
        );
    }
    let x: Vec<f64> = records.iter().map(|r| r.axis_value).collect();
    let mi: Vec<f64> = records.iter().map(|r| r.mi_nats).collect();
    let eps: Vec<f64> = records.iter().map(|r| r.epsilon.unwrap_or(f64::NAN)).collect();
    let fmt = |s: Option<f64>| s.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    println!("spearman(axis, mi) {}", fmt(spearman(&x, &mi)));
    println!("spearman(axis, epsilon) {}", fmt(spearman(&x, &eps)));
}

fn run(cli: Cli) -> hmine::Result<()> {
    match cli.command {
        Command::Estimate(c) => {
            let (cfg, opts) = c.load(ExperimentKind::Estimate)?;
            let ds = load_dataset(&cfg)?;
            let (trace, rec) = run_estimate(&cfg, &ds, &opts)?;
            println!(
                "mi_nats {:.4} converged {} iterations {} cov_baseline {:.5}",
                rec.mi_nats,
                rec.converged,
                trace.iterations(),
                rec.cov_baseline
            );
        }
        Command::Convergence(c) => {
            let (cfg, opts) = c.load(ExperimentKind::Convergence)?;
            let ds = load_dataset(&cfg)?;
            println!("variant\tbatch_size\tconverged\treadout_nats\titerations");
            for cell in run_convergence(&cfg, &ds, &opts)? {
                match (&cell.trace, &cell.error) {
                    (Some(t), _) => println!(
                        "{}\t{}\t{}\t{:.4}\t{}",
                        cell.variant,
                        cell.batch_size,
                        t.converged,
                        t.readout(),
                        t.iterations()
                    ),
                    (None, e) => println!(
                        "{}\t{}\tfailed\t{}",
                        cell.variant,
                        cell.batch_size,
                        e.as_deref().unwrap_or("")
                    ),
                }
            }
        }
        Command::ValidateAttack(c) => {
            let (cfg, opts) = c.load(ExperimentKind::ValidateAttack)?;
            let ds = load_dataset(&cfg)?;
            print_grid(&run_validate_attack(&cfg, &ds, &opts)?);
        }
        Command::Factors(c) => {
            let (cfg, opts) = c.load(ExperimentKind::Factors)?;
            let ds = load_dataset(&cfg)?;
            print_grid(&run_factors(&cfg, &ds, &opts)?);
        }
        Command::Prealarm { common, threshold } => {
            let (mut cfg, opts) = common.load(ExperimentKind::Prealarm)?;
            if threshold.is_some() {
                cfg.threshold = threshold;
            }
            cfg.validate()?;
            let ds = load_dataset(&cfg)?;
            let out = run_prealarm(&cfg, &ds, &opts)?;
            let decision = match out.decision {
                Decision::Publish => "publish",
                Decision::Withhold => "withhold",
            };
            println!("decision {decision}");
            println!("reason {}", out.reason);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\tkind={}\tmessage={:?}", e.kind(), e.to_string());
            ExitCode::from(2)
        }
    }
}
