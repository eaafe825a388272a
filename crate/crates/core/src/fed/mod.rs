//! Task models and a single-process FedSGD simulation.
//!
//! One communication round: every client draws a batch from its own dataset,
//! computes `G_i = ∇_θ L(X_B)`, optionally perturbs it with Gaussian noise,
//! and the server applies `θ ← θ − η Σ_i G_i`.

mod checkpoint;
mod model;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Batch, Dataset};
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoints, write_checkpoints, CHECKPOINT_VERSION};
pub use model::{GradientVector, ParamVector, Provenance, TaskModel, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub clients: usize,
    pub batch_size: usize,
    /// Server step size `η`.
    pub lr: f64,
    /// Total epochs to train; see [`rounds_per_epoch`].
    pub epochs: usize,
    /// Epoch indices at which `θ` is stored (0 = initial model).
    pub checkpoint_epochs: Vec<usize>,
    /// Std of the Gaussian noise added to every client gradient.
    pub noise_sigma: f64,
    pub seed: u64,
    pub task: TaskSpec,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 1,
            batch_size: 3,
            lr: 0.1,
            epochs: 3,
            checkpoint_epochs: vec![3],
            noise_sigma: 0.0,
            seed: 0,
            task: TaskSpec::Logreg,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if let Some(&e) = self.checkpoint_epochs.iter().find(|&&e| e > self.epochs) {
            return Err(Error::Config(format!(
                "checkpoint epoch {e} beyond the {} trained epochs",
                self.epochs
            )));
        }
        Ok(())
    }
}

/// One epoch is `ceil(|D| / B)` rounds, with `|D|` the largest client dataset.
pub fn rounds_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    dataset_len.div_ceil(batch_size)
}

/// Independent RNG streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Batches(usize),
    Noise(usize),
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = match stream {
        Stream::Init => 0,
        Stream::Batches(c) => 1 + 2 * c as u64,
        Stream::Noise(c) => 2 + 2 * c as u64,
    };
    rng.set_stream(id);
    rng
}

/// `G + ε`, `ε ~ N(0, σ²)` per coordinate. `σ = 0` returns `G` untouched.
pub fn add_gradient_noise<R: Rng + ?Sized>(
    gradient: &GradientVector,
    sigma: f64,
    rng: &mut R,
) -> GradientVector {
    let mut out = gradient.clone();
    out.provenance.sigma = sigma;
    if sigma > 0.0 {
        for v in out.values.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += sigma * e;
        }
    }
    out
}

/// Server step `θ' = θ − η Σ_i G_i`.
pub fn aggregate(theta: &[f64], gradients: &[GradientVector], lr: f64) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; theta.len()];
    for (i, g) in gradients.iter().enumerate() {
        if g.len() != theta.len() {
            return Err(Error::Contract(format!(
                "client {i} sent {} gradient entries, θ has {}",
                g.len(),
                theta.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(&g.values) {
            *s += v;
        }
    }
    Ok(theta.iter().zip(&sum).map(|(t, s)| t - lr * s).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub epoch: usize,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub spec: TaskSpec,
    pub input_dim: usize,
    pub rounds_per_epoch: usize,
    pub checkpoints: Vec<Checkpoint>,
    /// Mean training loss over all client data at the end of each epoch;
    /// entry 0 is the initial model.
    pub epoch_losses: Vec<f64>,
}

impl Trajectory {
    pub fn at_epoch(&self, epoch: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.epoch == epoch)
    }

    pub fn model_at_epoch(&self, epoch: usize) -> Result<TaskModel> {
        let ck = self.at_epoch(epoch).ok_or_else(|| {
            Error::Contract(format!("no checkpoint stored for epoch {epoch}"))
        })?;
        TaskModel::with_params(&self.spec, self.input_dim, ck.theta.clone())
    }
}

fn full_loss(model: &TaskModel, datasets: &[Dataset]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ds in datasets {
        let batch = Batch::from_indices(ds, (0..ds.len()).collect())?;
        total += model.per_sample_loss(&batch.features, &batch.labels)?.iter().sum::<f64>();
        n += ds.len();
    }
    Ok(total / n as f64)
}

/// Runs FedSGD with one dataset per client and returns the stored
/// checkpoints.
pub fn run_fedsgd(config: &FedConfig, datasets: &[Dataset]) -> Result<Trajectory> {
    config.validate()?;
    if datasets.len() != config.clients {
        return Err(Error::Contract(format!(
            "{} clients configured but {} datasets given",
            config.clients,
            datasets.len()
        )));
    }
    let input_dim = datasets[0].feature_dim();
    if datasets.iter().any(|d| d.feature_dim() != input_dim) {
        return Err(Error::Contract("client datasets differ in feature count".into()));
    }
    let mut model = TaskModel::new(&config.task, input_dim, &mut stream_rng(config.seed, Stream::Init))?;
    let mut batch_rngs: Vec<_> = (0..config.clients)
        .map(|c| stream_rng(config.seed, Stream::Batches(c)))
        .collect();
    let mut noise_rngs: Vec<_> = (0..config.clients)
        .map(|c| stream_rng(config.seed, Stream::Noise(c)))
        .collect();

    let largest = datasets.iter().map(Dataset::len).max().unwrap_or(1);
    let per_epoch = rounds_per_epoch(largest, config.batch_size);
    let mut checkpoints = Vec::new();
    let mut epoch_losses = vec![full_loss(&model, datasets)?];
    if config.checkpoint_epochs.contains(&0) {
        checkpoints.push(Checkpoint {
            round: 0,
            epoch: 0,
            theta: model.theta().to_vec(),
        });
    }

    let mut round = 0;
    for epoch in 1..=config.epochs {
        for _ in 0..per_epoch {
            let mut grads = Vec::with_capacity(config.clients);
            for (c, ds) in datasets.iter().enumerate() {
                let batch = sample_batch(ds, config.batch_size, &mut batch_rngs[c])?;
                let mut g = model.compute_gradient(&batch)?;
                g.provenance.round = round;
                g.provenance.client = c;
                grads.push(add_gradient_noise(&g, config.noise_sigma, &mut noise_rngs[c]));
            }
            let theta = aggregate(model.theta(), &grads, config.lr)?;
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    round,
                    msg: "θ became non-finite".into(),
                });
            }
            model.set_theta(&theta)?;
            round += 1;
        }
        epoch_losses.push(full_loss(&model, datasets)?);
        if config.checkpoint_epochs.contains(&epoch) {
            checkpoints.push(Checkpoint {
                round,
                epoch,
                theta: model.theta().to_vec(),
            });
        }
    }
    Ok(Trajectory {
        spec: config.task.clone(),
        input_dim,
        rounds_per_epoch: per_epoch,
        checkpoints,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn grad(values: Vec<f64>) -> GradientVector {
        GradientVector {
            values,
            provenance: Provenance::default(),
        }
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let f: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                let label = u8::from(f[0] + 0.5 * f[1] > 0.0);
                Sample { features: f, label }
            })
            .collect();
        Dataset::from_samples(samples).unwrap()
    }

    #[test]
    fn zero_gradients_leave_theta() {
        let theta = vec![0.5, -1.0];
        let out = aggregate(&theta, &[grad(vec![0.0, 0.0]), grad(vec![0.0, 0.0])], 0.3).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn opposite_gradients_cancel() {
        let theta = vec![0.25, 2.0];
        let g = vec![0.5, -0.125];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let out = aggregate(&theta, &[grad(g), grad(neg)], 0.1).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn single_client_step() {
        let out = aggregate(&[1.0], &[grad(vec![2.0])], 0.1).unwrap();
        assert!((out[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        assert!(matches!(
            aggregate(&[1.0, 2.0], &[grad(vec![1.0])], 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let g = grad(vec![0.1, 0.2, -0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = add_gradient_noise(&g, 0.0, &mut rng);
        assert_eq!(out.values, g.values);
        assert_eq!(out.provenance.sigma, 0.0);
    }

    #[test]
    fn noise_std_and_determinism() {
        let g = grad(vec![0.0; 100_000]);
        let a = add_gradient_noise(&g, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        let b = add_gradient_noise(&g, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let n = a.len() as f64;
        let mean = a.values.iter().sum::<f64>() / n;
        let std = (a.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.1).abs() < 0.002, "std {std}");
        assert_eq!(a.provenance.sigma, 0.1);
    }

    #[test]
    fn zero_lr_keeps_theta_constant() {
        let ds = toy_dataset(20, 1);
        let cfg = FedConfig {
            lr: 0.0,
            epochs: 2,
            checkpoint_epochs: vec![0, 1, 2],
            ..FedConfig::default()
        };
        let tr = run_fedsgd(&cfg, &[ds]).unwrap();
        assert_eq!(tr.checkpoints.len(), 3);
        for ck in &tr.checkpoints {
            assert_eq!(ck.theta, tr.checkpoints[0].theta);
        }
    }

    #[test]
    fn epoch_rounds_and_checkpoints() {
        let ds = toy_dataset(10, 2);
        let cfg = FedConfig {
            batch_size: 3,
            epochs: 2,
            checkpoint_epochs: vec![1, 2],
            ..FedConfig::default()
        };
        let tr = run_fedsgd(&cfg, &[ds]).unwrap();
        assert_eq!(tr.rounds_per_epoch, 4);
        assert_eq!(tr.checkpoints[0].round, 4);
        assert_eq!(tr.checkpoints[1].round, 8);
        assert_eq!(tr.epoch_losses.len(), 3);
    }

    #[test]
    fn client_order_does_not_change_aggregate() {
        let gs = vec![grad(vec![0.1, 0.7]), grad(vec![-0.3, 0.2]), grad(vec![0.05, -0.4])];
        let mut rev = gs.clone();
        rev.reverse();
        let a = aggregate(&[1.0, 1.0], &gs, 0.2).unwrap();
        let b = aggregate(&[1.0, 1.0], &rev, 0.2).unwrap();
        // floating-point sums may differ in the last bit with different order
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_configs() {
        let ds = toy_dataset(5, 3);
        let bad = FedConfig {
            batch_size: 0,
            ..FedConfig::default()
        };
        assert!(run_fedsgd(&bad, std::slice::from_ref(&ds)).is_err());
        let bad = FedConfig {
            clients: 2,
            ..FedConfig::default()
        };
        assert!(run_fedsgd(&bad, &[ds]).is_err());
    }

    #[test]
    fn divergence_reports_round() {
        let ds = toy_dataset(10, 4);
        let cfg = FedConfig {
            lr: f64::MAX,
            epochs: 1,
            checkpoint_epochs: vec![],
            ..FedConfig::default()
        };
        match run_fedsgd(&cfg, &[ds]) {
            Err(Error::Divergence { .. }) | Err(Error::Numeric(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn logreg_on_adult_loss_decreases() {
        let cfg = FedConfig {
            clients: 1,
            batch_size: 32,
            lr: 0.1,
            epochs: 3,
            checkpoint_epochs: vec![3],
            noise_sigma: 0.0,
            seed: 4,
            task: TaskSpec::Logreg,
        };
        let traj = run_fedsgd(&cfg, &[crate::data::bundled_adult()]).unwrap();
        assert_eq!(traj.epoch_losses.len(), 4);
        for w in traj.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "losses {:?}", traj.epoch_losses);
        }
    }
}
