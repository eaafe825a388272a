//! Estimate MI on correlated Gaussian pairs and compare with the closed form.
//!
//! cargo run --release --example gaussian_oracle -- [rho] [seed]

use std::time::Instant;

use hmine::mi::{estimate_mi, EstimatorConfig, GaussianSource};

fn main() -> hmine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let rho: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let source = GaussianSource::new(1, rho)?;
    let config = EstimatorConfig {
        seed,
        ..EstimatorConfig::default()
    };
    let start = Instant::now();
    let trace = estimate_mi(&source, &config)?;
    println!("rho                {rho}");
    println!("analytic MI (nats) {:.4}", source.analytic_mi());
    println!("estimate (nats)    {:.4}", trace.readout());
    println!("converged          {}", trace.converged);
    println!("iterations         {}", trace.iterations());
    println!("seconds            {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}
