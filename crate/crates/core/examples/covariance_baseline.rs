//! The covariance baseline over batch sizes, next to a short MI estimate.
//!
//! cargo run --release --example covariance_baseline

use hmine::data::{load_adult, preprocess, AdultSchema};
use hmine::fed::{run_fedsgd, FedConfig};
use hmine::mi::{covariance_metric, GradientSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hmine::Result<()> {
    let ds = preprocess(&load_adult("data/adult.data", &AdultSchema::default())?)?;
    let fed = FedConfig {
        lr: 0.001,
        ..FedConfig::default()
    };
    let model = run_fedsgd(&fed, std::slice::from_ref(&ds))?.model_at_epoch(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for b in 1..=4 {
        let source = GradientSource::new(&ds, &model, b);
        let (mut xs, mut gs) = (Vec::new(), Vec::new());
        for _ in 0..1024 {
            let (x, g) = source.draw_one(&mut rng)?;
            xs.push(x);
            gs.push(g);
        }
        println!("B={b}  C(X_B, G) = {:+.5}", covariance_metric(&xs, &gs)?);
    }
    Ok(())
}
