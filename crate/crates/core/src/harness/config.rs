use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::fed::FedConfig;
use crate::mi::{EstimatorConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Estimate,
    Convergence,
    ValidateAttack,
    Factors,
    Prealarm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    BatchSize,
    Noise,
    Epoch,
    Imbalance,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::BatchSize => "batch_size",
            Axis::Noise => "noise",
            Axis::Epoch => "epoch",
            Axis::Imbalance => "imbalance",
        }
    }
}

/// Which model an imbalanced client probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ImbalanceModel {
    /// The global model trained on the full pool; the client only holds the
    /// resampled data.
    #[default]
    Global,
    /// A model trained on the resampled client data itself.
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub axis: Option<Axis>,
    /// Axis values; batch sizes for `convergence`.
    pub grid: Vec<f64>,
    /// Statistic networks compared by `convergence`.
    pub variants: Vec<Variant>,
    pub data_path: PathBuf,
    /// Probed batch size `B` when it is not the axis.
    pub batch_size: usize,
    /// Gradient noise `σ` when it is not the axis.
    pub noise_sigma: f64,
    /// Training epoch whose `θ` is probed when epoch is not the axis.
    pub epoch: usize,
    /// Client dataset size for the imbalance axis (default: full pool).
    pub imbalance_size: Option<usize>,
    pub imbalance_model: ImbalanceModel,
    /// Paired draws behind the covariance baseline.
    pub cov_draws: usize,
    pub run_attack: bool,
    /// Withhold threshold in nats, `prealarm` only.
    pub threshold: Option<f64>,
    pub seed: u64,
    pub fed: FedConfig,
    pub estimator: EstimatorConfig,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Estimate,
            axis: None,
            grid: Vec::new(),
            variants: vec![Variant::Hierarchical],
            data_path: PathBuf::from("data/adult.data"),
            batch_size: 3,
            noise_sigma: 0.0,
            epoch: 3,
            imbalance_size: None,
            imbalance_model: ImbalanceModel::Global,
            cov_draws: 256,
            run_attack: true,
            threshold: None,
            seed: 0,
            fed: FedConfig {
                batch_size: 3,
                lr: 0.001,
                ..FedConfig::default()
            },
            estimator: EstimatorConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        use ExperimentKind as K;
        match (self.kind, self.axis) {
            (K::Convergence, None | Some(Axis::BatchSize)) => {
                if self.variants.is_empty() {
                    return bad("convergence needs at least one variant");
                }
            }
            (K::Convergence, Some(a)) => {
                return Err(Error::Config(format!("convergence runs over batch sizes, not {}", a.name())))
            }
            (K::ValidateAttack, Some(Axis::BatchSize | Axis::Noise)) => {}
            (K::Factors, Some(Axis::Epoch | Axis::Imbalance)) => {}
            (K::ValidateAttack | K::Factors, None) => return bad("this experiment needs an axis"),
            (K::ValidateAttack | K::Factors, Some(a)) => {
                return Err(Error::Config(format!(
                    "axis {} does not belong to the {:?} experiment",
                    a.name(),
                    self.kind
                )))
            }
            (K::Estimate | K::Prealarm, _) => {}
        }
        let needs_grid = matches!(self.kind, K::Convergence | K::ValidateAttack | K::Factors);
        if needs_grid && self.grid.is_empty() {
            return bad("grid must not be empty");
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return bad("grid values must be finite");
        }
        let int_axis = self.kind == K::Convergence
            || matches!(self.axis, Some(Axis::BatchSize | Axis::Epoch));
        if needs_grid && int_axis && self.grid.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return bad("batch-size and epoch grids take non-negative integers");
        }
        if (self.kind == K::Convergence || self.axis == Some(Axis::BatchSize))
            && self.grid.contains(&0.0)
        {
            return bad("batch sizes must be >= 1");
        }
        if self.axis == Some(Axis::Noise) && self.grid.iter().any(|&v| v < 0.0) {
            return bad("noise levels must be >= 0");
        }
        if self.axis == Some(Axis::Imbalance) && self.grid.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return bad("imbalance ratios must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.cov_draws < 2 {
            return bad("cov_draws must be >= 2");
        }
        if self.kind == K::Prealarm {
            match self.threshold {
                None => return bad("prealarm needs a threshold"),
                Some(t) if t.is_nan() || t < 0.0 => return bad("threshold must be >= 0"),
                _ => {}
            }
        }
        self.estimator.validate()?;
        if self.run_attack && self.kind == K::ValidateAttack {
            self.attack.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the config with every seed zeroed, so the hash names
    /// the experiment rather than one seeded run of it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.fed.seed = 0;
        c.estimator.seed = 0;
        c.attack.seed = 0;
        let text = toml::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for one purpose at one grid point.
pub fn derive_seed(master: u64, config_hash: &str, axis_value: f64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(config_hash.as_bytes());
    h.update(axis_value.to_bits().to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factors(axis: Axis, grid: Vec<f64>) -> ExperimentConfig {
        ExperimentConfig {
            kind: ExperimentKind::Factors,
            axis: Some(axis),
            grid,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
kind = "validate-attack"
axis = "noise"
grid = [0.0, 0.01, 0.05, 0.1]
batch_size = 3

[estimator]
max_iterations = 3000

[fed]
lr = 0.001
epochs = 3

[fed.task]
kind = "logreg"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.axis, Some(Axis::Noise));
        assert_eq!(cfg.estimator.max_iterations, 3000);
        assert_eq!(cfg.estimator.sample_size, 64);
        let again = ExperimentConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("kind = \"estimate\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn axis_must_match_kind() {
        assert!(factors(Axis::Epoch, vec![1.0, 3.0]).validate().is_ok());
        assert!(factors(Axis::Noise, vec![0.0]).validate().is_err());
        let mut c = factors(Axis::Epoch, vec![]);
        assert!(c.validate().is_err());
        c.grid = vec![1.5];
        assert!(c.validate().is_err());
        assert!(factors(Axis::Imbalance, vec![0.5, 1.0]).validate().is_err());
    }

    #[test]
    fn convergence_needs_variants() {
        let c = ExperimentConfig {
            kind: ExperimentKind::Convergence,
            grid: vec![1.0, 3.0],
            variants: vec![],
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn prealarm_needs_threshold() {
        let mut c = ExperimentConfig {
            kind: ExperimentKind::Prealarm,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        c.threshold = Some(f64::INFINITY);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn hash_ignores_seeds_only() {
        let a = factors(Axis::Epoch, vec![1.0, 3.0]);
        let mut b = a.clone();
        b.seed = 99;
        b.estimator.seed = 7;
        assert_eq!(a.hash(), b.hash());
        b.grid.push(5.0);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn derived_seeds_depend_on_every_part() {
        let s = derive_seed(1, "abc", 0.5, "mi");
        assert_eq!(s, derive_seed(1, "abc", 0.5, "mi"));
        assert_ne!(s, derive_seed(2, "abc", 0.5, "mi"));
        assert_ne!(s, derive_seed(1, "abd", 0.5, "mi"));
        assert_ne!(s, derive_seed(1, "abc", 0.7, "mi"));
        assert_ne!(s, derive_seed(1, "abc", 0.5, "attack"));
    }
}
