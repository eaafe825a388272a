//! Train logistic regression with FedSGD on Adult split across clients and
//! print the training loss per epoch.
//!
//! cargo run --release --example fedsgd_training -- [clients] [data/adult.data]

use hmine::data::{load_adult, preprocess, AdultSchema, Dataset};
use hmine::fed::{run_fedsgd, write_checkpoints, FedConfig, TaskSpec};

fn main() -> hmine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let clients: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let path = args.get(2).map_or("data/adult.data", String::as_str);
    let full = preprocess(&load_adult(path, &AdultSchema::default())?)?;

    // contiguous shards, all sharing the pooled standardization
    let per = full.len().div_ceil(clients);
    let shards = full
        .samples()
        .chunks(per)
        .map(|c| Dataset::new(c.to_vec(), full.meta().to_vec()))
        .collect::<hmine::Result<Vec<_>>>()?;

    let config = FedConfig {
        clients: shards.len(),
        batch_size: 32,
        lr: 0.05,
        epochs: 3,
        checkpoint_epochs: vec![1, 2, 3],
        noise_sigma: 0.0,
        seed: 7,
        task: TaskSpec::Logreg,
    };
    let traj = run_fedsgd(&config, &shards)?;
    println!("{} clients, {} rounds per epoch", shards.len(), traj.rounds_per_epoch);
    for (epoch, loss) in traj.epoch_losses.iter().enumerate() {
        println!("epoch {epoch:>2}  loss {loss:.5}");
    }
    let mut out = Vec::new();
    write_checkpoints(&mut out, &traj.checkpoints)?;
    println!("checkpoint file is {} bytes", out.len());
    Ok(())
}
