//! Estimate I(X_B; G) for one Adult client at a given batch size and noise
//! level, printing the smoothed trace every 500 iterations.
//!
//! cargo run --release --example adult_estimate -- [batch_size] [sigma] [iterations]

use hmine::data::{load_adult, preprocess, AdultSchema};
use hmine::fed::{run_fedsgd, FedConfig};
use hmine::mi::{estimate_mi, EstimatorConfig, GradientSource};

fn main() -> hmine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let b: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let sigma: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let iterations: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let ds = preprocess(&load_adult("data/adult.data", &AdultSchema::default())?)?;
    let fed = FedConfig {
        lr: 0.001,
        ..FedConfig::default()
    };
    let model = run_fedsgd(&fed, std::slice::from_ref(&ds))?.model_at_epoch(3)?;

    let source = GradientSource {
        sigma,
        ..GradientSource::new(&ds, &model, b)
    };
    let config = EstimatorConfig {
        max_iterations: iterations,
        min_iterations: iterations.min(2000),
        ..EstimatorConfig::default()
    };
    let trace = estimate_mi(&source, &config)?;
    for (i, v) in trace.smoothed.iter().enumerate().skip(499).step_by(500) {
        println!("{:>6}  {v:.4}", i + 1);
    }
    println!("readout {:.4} nats, converged {}", trace.readout(), trace.converged);
    Ok(())
}
