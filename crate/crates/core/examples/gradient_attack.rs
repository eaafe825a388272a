//! Invert one released gradient with gradient matching and report the spread
//! of the restarts.
//!
//! cargo run --release --example gradient_attack -- [batch_size] [sigma]

use hmine::attack::{run_attack, AttackConfig};
use hmine::data::{load_adult, preprocess, sample_batch, AdultSchema};
use hmine::fed::{add_gradient_noise, run_fedsgd, FedConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hmine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let b: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let sigma: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let ds = preprocess(&load_adult("data/adult.data", &AdultSchema::default())?)?;
    let fed = FedConfig {
        lr: 0.001,
        epochs: 1,
        checkpoint_epochs: vec![1],
        ..FedConfig::default()
    };
    let model = run_fedsgd(&fed, std::slice::from_ref(&ds))?.model_at_epoch(1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = sample_batch(&ds, b, &mut rng)?;
    let g = add_gradient_noise(&model.compute_gradient(&batch)?, sigma, &mut rng);
    let report = run_attack(&model, &g.values, &batch.labels, &AttackConfig::default())?;

    for r in &report.restarts {
        let Some(rec) = &r.reconstruction else {
            println!("restart {} aborted: {}", r.index, r.aborted.as_deref().unwrap_or(""));
            continue;
        };
        let err: f64 = rec
            .data()
            .iter()
            .zip(batch.features.data())
            .map(|(a, t)| (a - t).powi(2))
            .sum::<f64>()
            .sqrt();
        println!("restart {}  matching loss {:.3e}  |x̂ − x| {err:.4}", r.index, r.final_loss);
    }
    println!("inference error ε = {:.5}", report.epsilon);
    Ok(())
}
