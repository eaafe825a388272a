//! Run a TOML experiment config through the harness and print its records.
//!
//! cargo run --release --example experiment_grid -- configs/validate_attack_batch.toml [out_dir]

use hmine::harness::{
    load_dataset, run_factors, run_validate_attack, spearman, ExperimentConfig, ExperimentKind,
    RunOptions,
};

fn main() -> hmine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = args.get(1).map_or("configs/validate_attack_batch.toml", String::as_str);
    let config = ExperimentConfig::load(path)?;
    let opts = RunOptions {
        out_dir: args.get(2).map(Into::into),
        ..RunOptions::default()
    };
    let ds = load_dataset(&config)?;
    let records = match config.kind {
        ExperimentKind::ValidateAttack => run_validate_attack(&config, &ds, &opts)?,
        ExperimentKind::Factors => run_factors(&config, &ds, &opts)?,
        other => {
            return Err(hmine::Error::Config(format!("{other:?} has no grid records; use the hmine binary")))
        }
    };
    println!("config {}", config.hash());
    for r in &records {
        println!(
            "{:>6}  MI {:.4}  cov {:+.4}  ε {}  ({:.1}s)",
            r.axis_value,
            r.mi_nats,
            r.cov_baseline,
            r.epsilon.map_or("-".into(), |e| format!("{e:.4}")),
            r.wall_time_s
        );
    }
    let mi: Vec<f64> = records.iter().map(|r| r.mi_nats).collect();
    if let Some(rho) = spearman(&config.grid, &mi) {
        println!("Spearman(axis, MI) = {rho:.3}");
    }
    Ok(())
}
