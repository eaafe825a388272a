//! Client-side gate: estimate MI before releasing a gradient and withhold it
//! above a threshold. Uses Gaussian surrogates so the decision is quick.
//!
//! cargo run --release --example risk_prealarm -- [threshold]

use hmine::harness::{risk_prealarm, Decision};
use hmine::mi::{EstimatorConfig, GaussianSource};

fn main() -> hmine::Result<()> {
    let threshold: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let estimator = EstimatorConfig::default();
    for rho in [0.0, 0.5, 0.9, 0.99] {
        let source = GaussianSource::new(1, rho)?;
        let out = risk_prealarm(&source, &estimator, threshold)?;
        let verdict = match out.decision {
            Decision::Publish => "publish",
            Decision::Withhold => "withhold",
        };
        println!(
            "rho {rho:<4}  true MI {:.3}  {verdict:<8} ({})",
            source.analytic_mi(),
            out.reason
        );
    }
    Ok(())
}
