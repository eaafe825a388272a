//! Gradient-matching inversion: recover a batch from its gradient by
//! minimizing `‖∇_θ L(X̂) − G‖²` over dummy inputs `X̂`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::TaskModel;
use crate::nd::{AdamConfig, AdamState, Direction, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Std of the normal initialization of the dummy features.
    pub init_std: f64,
    pub seed: u64,
    /// Every restart starts from the same initialization.
    pub shared_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            iterations: 2_000,
            lr: 0.01,
            init_std: 1.0,
            seed: 0,
            shared_init: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts < 2 {
            return Err(Error::Config(format!(
                "need at least 2 restarts to measure spread, got {}",
                self.restarts
            )));
        }
        if !(self.lr > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("attack lr and init_std must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Restart {
    pub index: usize,
    /// `[B, d]`; `None` if the restart was aborted.
    pub reconstruction: Option<Tensor>,
    pub final_loss: f64,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub restarts: Vec<Restart>,
    /// Inference error over the successful restarts.
    pub epsilon: f64,
    pub config: AttackConfig,
}

impl AttackReport {
    pub fn reconstructions(&self) -> Vec<&Tensor> {
        self.restarts.iter().filter_map(|r| r.reconstruction.as_ref()).collect()
    }

    /// `restart,final_loss` rows and a `# summary` line with `ε`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "restart,final_loss")?;
        for r in &self.restarts {
            match &r.aborted {
                None => writeln!(out, "{},{:?}", r.index, r.final_loss)?,
                Some(_) => writeln!(out, "{},nan", r.index)?,
            }
        }
        writeln!(out, "# summary epsilon={:?}", self.epsilon)?;
        Ok(())
    }
}

/// Mean over coordinates of the per-coordinate sample variance (`n − 1`)
/// across reconstructions.
pub fn inference_error(reconstructions: &[&Tensor]) -> Result<f64> {
    let k = reconstructions.len();
    if k < 2 {
        return Err(Error::Contract(format!("need at least 2 reconstructions, got {k}")));
    }
    let shape = reconstructions[0].shape();
    if reconstructions.iter().any(|r| r.shape() != shape) {
        return Err(Error::Contract("reconstructions differ in shape".into()));
    }
    let n = reconstructions[0].len();
    let mut total = 0.0;
    for c in 0..n {
        let mean = reconstructions.iter().map(|r| r.data()[c]).sum::<f64>() / k as f64;
        let var = reconstructions
            .iter()
            .map(|r| (r.data()[c] - mean).powi(2))
            .sum::<f64>()
            / (k - 1) as f64;
        total += var;
    }
    Ok(total / n as f64)
}

/// `‖∇_θ L(X̂) − G‖²` and its gradient with respect to `X̂`.
pub fn matching_loss(
    model: &TaskModel,
    dummy: &Tensor,
    labels: &[u8],
    target: &[f64],
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let x = g.param(dummy.clone());
    let grad = model.gradient_graph(&mut g, x, labels)?;
    if g.value(grad).len() != target.len() {
        return Err(Error::Contract(format!(
            "target gradient has {} entries, model has {}",
            target.len(),
            g.value(grad).len()
        )));
    }
    let t = g.constant(Tensor::row(target.to_vec()));
    let diff = g.sub(grad, t)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.sum(sq);
    let value = g.value(loss).item();
    Ok((value, g.backward(loss)?.wrt(x)))
}

fn restart_rng(config: &AttackConfig, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(if config.shared_init { 0 } else { k as u64 });
    rng
}

fn run_restart(
    model: &TaskModel,
    target: &[f64],
    labels: &[u8],
    config: &AttackConfig,
    k: usize,
) -> Restart {
    let (b, d) = (labels.len(), model.input_dim());
    let mut rng = restart_rng(config, k);
    let init: Vec<f64> = (0..b * d)
        .map(|_| config.init_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut dummy = Tensor::matrix(b, d, init).expect("shape");
    let mut adam = AdamState::new(b * d, AdamConfig::with_lr(config.lr));
    let abort = |msg: String| Restart {
        index: k,
        reconstruction: None,
        final_loss: f64::NAN,
        aborted: Some(msg),
    };
    for it in 0..config.iterations {
        let (loss, grad) = match matching_loss(model, &dummy, labels, target) {
            Ok(v) => v,
            Err(e) => return abort(e.to_string()),
        };
        if !loss.is_finite() || !grad.all_finite() {
            return abort(format!("non-finite matching loss at iteration {it}"));
        }
        if let Err(e) = adam.step(dummy.data_mut(), grad.data(), Direction::Descent) {
            return abort(e.to_string());
        }
    }
    match matching_loss(model, &dummy, labels, target) {
        Ok((loss, _)) if loss.is_finite() => Restart {
            index: k,
            reconstruction: Some(dummy),
            final_loss: loss,
            aborted: None,
        },
        Ok(_) => abort("non-finite final matching loss".into()),
        Err(e) => abort(e.to_string()),
    }
}

/// Runs `config.restarts` independent reconstructions of the batch behind
/// `target`. Labels are known to the attacker.
pub fn run_attack(
    model: &TaskModel,
    target: &[f64],
    labels: &[u8],
    config: &AttackConfig,
) -> Result<AttackReport> {
    config.validate()?;
    if labels.is_empty() {
        return Err(Error::Contract("attack needs at least one label".into()));
    }
    let restarts: Vec<Restart> = (0..config.restarts)
        .into_par_iter()
        .map(|k| run_restart(model, target, labels, config, k))
        .collect();
    let ok: Vec<&Tensor> = restarts.iter().filter_map(|r| r.reconstruction.as_ref()).collect();
    if ok.len() < 2 {
        let reasons: Vec<String> = restarts.iter().filter_map(|r| r.aborted.clone()).collect();
        return Err(Error::Attack(format!(
            "{} of {} restarts aborted: {}",
            reasons.len(),
            config.restarts,
            reasons.join("; ")
        )));
    }
    let epsilon = inference_error(&ok)?;
    Ok(AttackReport {
        restarts,
        epsilon,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, Dataset, Sample};
    use crate::fed::TaskSpec;

    fn logreg(theta: Vec<f64>) -> TaskModel {
        TaskModel::with_params(&TaskSpec::Logreg, theta.len() - 1, theta).unwrap()
    }

    fn gradient_of(model: &TaskModel, rows: Vec<Vec<f64>>, labels: Vec<u8>) -> Vec<f64> {
        let n = rows.len();
        let samples = rows
            .into_iter()
            .zip(&labels)
            .map(|(features, &label)| Sample { features, label })
            .collect();
        let ds = Dataset::from_samples(samples).unwrap();
        let b = Batch::from_indices(&ds, (0..n).collect()).unwrap();
        model.compute_gradient(&b).unwrap().values
    }

    #[test]
    fn inference_error_examples() {
        let a = Tensor::row(vec![-1.0]);
        let b = Tensor::row(vec![1.0]);
        assert!((inference_error(&[&a, &b]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(inference_error(&[&a, &a, &a]).unwrap(), 0.0);
        let c = Tensor::row(vec![1.0, 2.0]);
        assert!(matches!(inference_error(&[&a, &c]), Err(Error::Contract(_))));
        assert!(inference_error(&[&a]).is_err());
    }

    #[test]
    fn inference_error_of_standard_normals_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let recs: Vec<Tensor> = (0..5)
            .map(|_| Tensor::row((0..20_000).map(|_| rng.sample(StandardNormal)).collect()))
            .collect();
        let refs: Vec<&Tensor> = recs.iter().collect();
        let eps = inference_error(&refs).unwrap();
        assert!((eps - 1.0).abs() < 0.05, "{eps}");
    }

    #[test]
    fn inference_error_ignores_common_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recs: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let perm = [3, 0, 5, 1, 4, 2];
        let t: Vec<Tensor> = recs.iter().map(|r| Tensor::row(r.clone())).collect();
        let p: Vec<Tensor> = recs.iter().map(|r| Tensor::row(perm.iter().map(|&i| r[i]).collect())).collect();
        let a = inference_error(&t.iter().collect::<Vec<_>>()).unwrap();
        let b = inference_error(&p.iter().collect::<Vec<_>>()).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn matching_loss_is_zero_at_truth() {
        let m = logreg(vec![0.4, -0.2, 0.7, 0.1]);
        let x = vec![0.5, 1.5, -1.0];
        let target = gradient_of(&m, vec![x.clone()], vec![1]);
        let (loss, grad) = matching_loss(&m, &Tensor::row(x), &[1], &target).unwrap();
        assert!(loss < 1e-28);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn matching_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = TaskSpec::Mlp {
            hidden: vec![5, 4],
            classes: 2,
        };
        let m = TaskModel::new(&spec, 3, &mut rng).unwrap();
        let target = gradient_of(&m, vec![vec![0.3, -0.6, 1.1], vec![-0.2, 0.9, 0.4]], vec![0, 1]);
        let dummy = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.7, -0.5, 0.25]).unwrap();
        let (_, grad) = matching_loss(&m, &dummy, &[0, 1], &target).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut p = dummy.clone();
            p.data_mut()[i] += h;
            let mut q = dummy.clone();
            q.data_mut()[i] -= h;
            let num = (matching_loss(&m, &p, &[0, 1], &target).unwrap().0
                - matching_loss(&m, &q, &[0, 1], &target).unwrap().0)
                / (2.0 * h);
            let rel = (grad.data()[i] - num).abs() / grad.data()[i].abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {i}: {} vs {num}", grad.data()[i]);
        }
    }

    #[test]
    fn logreg_single_sample_is_recovered() {
        let m = logreg(vec![0.8, -0.5, 0.3, 1.2, -0.4, 0.2]);
        let x = vec![0.9, -1.3, 0.4, 0.1, 1.7];
        let target = gradient_of(&m, vec![x.clone()], vec![0]);
        // closed form: x = g_w / g_b
        let closed: Vec<f64> = target[..5].iter().map(|g| g / target[5]).collect();
        for (a, b) in closed.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        let report = run_attack(&m, &target, &[0], &AttackConfig::default()).unwrap();
        for r in &report.restarts {
            let rec = r.reconstruction.as_ref().unwrap().data();
            let dot: f64 = rec.iter().zip(&closed).map(|(a, b)| a * b).sum();
            let na = rec.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = closed.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dot / (na * nb) > 0.99, "cosine {}", dot / (na * nb));
            assert!(r.final_loss < 1e-6, "loss {}", r.final_loss);
        }
    }

    #[test]
    fn zero_iterations_keep_the_initialization() {
        let m = logreg(vec![0.0; 4]);
        let target = vec![0.0; 4];
        let cfg = AttackConfig {
            iterations: 0,
            seed: 3,
            ..AttackConfig::default()
        };
        let report = run_attack(&m, &target, &[1, 0], &cfg).unwrap();
        for (k, r) in report.restarts.iter().enumerate() {
            let mut rng = restart_rng(&cfg, k);
            let init: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            assert_eq!(r.reconstruction.as_ref().unwrap().data(), init.as_slice());
        }
        let recs = report.reconstructions();
        assert_eq!(report.epsilon, inference_error(&recs).unwrap());
    }

    #[test]
    fn shared_initialization_gives_zero_error() {
        let m = logreg(vec![0.3, -0.1, 0.2]);
        let target = gradient_of(&m, vec![vec![1.0, 2.0], vec![0.5, -1.0]], vec![1, 0]);
        let cfg = AttackConfig {
            iterations: 50,
            shared_init: true,
            ..AttackConfig::default()
        };
        assert_eq!(run_attack(&m, &target, &[1, 0], &cfg).unwrap().epsilon, 0.0);
    }

    #[test]
    fn wrong_target_length_aborts_everything() {
        let m = logreg(vec![0.3, -0.1, 0.2]);
        let err = run_attack(&m, &[1.0, 2.0], &[1], &AttackConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Attack(_)));
    }

    #[test]
    fn report_csv() {
        let m = logreg(vec![0.3, -0.1, 0.2]);
        let target = gradient_of(&m, vec![vec![1.0, 2.0]], vec![1]);
        let cfg = AttackConfig {
            iterations: 5,
            restarts: 3,
            ..AttackConfig::default()
        };
        let report = run_attack(&m, &target, &[1], &cfg).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "restart,final_loss");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("# summary epsilon="));
    }
}
