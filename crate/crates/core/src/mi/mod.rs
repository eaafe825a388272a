//! Mutual-information estimation between a batch `X_B` and its gradient `G`.
//!
//! The estimator maximizes the Donsker-Varadhan bound
//! `V(φ) = mean_k T_φ(X_B, G) − log mean_k exp T_φ(X_B, Ĝ)` over a statistic
//! network `T_φ`, where `Ĝ` is the gradient of an independent batch.

mod source;
mod statnet;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{log_sum_exp, AdamConfig, AdamState, Direction, Graph, Tensor};

pub use source::{GaussianSource, GradientSource, PairDraw, PairSource};
pub use statnet::{StatNet, StatVars, Variant, BLOCK_WIDTHS, FLAT_WIDTHS, MIX_WIDTHS};

/// `mean(joint) − (logsumexp(marginal) − ln S)`, in nats.
pub fn dv_lower_bound(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    if joint.len() < 2 || marginal.len() < 2 {
        return Err(Error::Contract("DV bound needs at least 2 samples per side".into()));
    }
    if joint.iter().chain(marginal).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite statistic score".into()));
    }
    let mean = joint.iter().sum::<f64>() / joint.len() as f64;
    Ok(mean - (log_sum_exp(marginal) - (marginal.len() as f64).ln()))
}

/// Sum of every entry of the cross-covariance matrix between flattened `X`
/// draws and `G` draws, with the `n − 1` denominator.
///
/// By bilinearity this equals the covariance of the row sums.
pub fn covariance_metric(xs: &[Vec<f64>], gs: &[Vec<f64>]) -> Result<f64> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 paired draws, got {n}")));
    }
    if gs.len() != n {
        return Err(Error::Contract(format!("{n} X draws but {} G draws", gs.len())));
    }
    let sx: Vec<f64> = xs.iter().map(|x| x.iter().sum()).collect();
    let sg: Vec<f64> = gs.iter().map(|g| g.iter().sum()).collect();
    let mx = sx.iter().sum::<f64>() / n as f64;
    let mg = sg.iter().sum::<f64>() / n as f64;
    let c: f64 = sx.iter().zip(&sg).map(|(a, b)| (a - mx) * (b - mg)).sum();
    Ok(c / (n - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    /// Mean of the last window; present only when converged.
    pub estimate: Option<f64>,
}

/// Converged iff the last `window` values contain no NaN and their
/// (population) standard deviation is below `tolerance`.
pub fn check_convergence(trace: &[f64], window: usize, tolerance: f64) -> Convergence {
    let not = Convergence {
        converged: false,
        estimate: None,
    };
    if window == 0 || trace.len() < window {
        return not;
    }
    let w = &trace[trace.len() - window..];
    if w.iter().any(|v| !v.is_finite()) {
        return not;
    }
    let mean = w.iter().sum::<f64>() / window as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window as f64;
    if var.sqrt() < tolerance {
        Convergence {
            converged: true,
            estimate: Some(mean),
        }
    } else {
        not
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub variant: Variant,
    /// Draws per iteration `S`.
    pub sample_size: usize,
    pub max_iterations: usize,
    /// No convergence check before this many iterations.
    pub min_iterations: usize,
    pub window: usize,
    pub tolerance: f64,
    /// How often (in iterations) convergence is tested.
    pub check_every: usize,
    /// EMA factor for the smoothed trace.
    pub smoothing: f64,
    pub lr: f64,
    pub seed: u64,
    /// Moving-average correction of the exp-term gradient.
    pub ma_correction: bool,
    pub ma_rate: f64,
    /// Feed `G` to the MixModel alongside the embeddings.
    pub mix_takes_gradient: bool,
    /// Append labels to the `x_j` blocks.
    pub include_label: bool,
    /// Consecutive non-finite iterations tolerated before giving up.
    pub nan_patience: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Hierarchical,
            sample_size: 64,
            max_iterations: 20_000,
            min_iterations: 2_000,
            window: 1_000,
            tolerance: 0.05,
            check_every: 100,
            smoothing: 0.99,
            lr: 5e-5,
            seed: 0,
            ma_correction: false,
            ma_rate: 0.01,
            mix_takes_gradient: true,
            include_label: true,
            nan_patience: 20,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_size < 2 {
            return bad(format!("sample size must be >= 2, got {}", self.sample_size));
        }
        if self.max_iterations == 0 || self.window == 0 || self.check_every == 0 {
            return bad("iteration counts must be positive".into());
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance must be > 0, got {}", self.tolerance));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing must be in [0, 1), got {}", self.smoothing));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if self.ma_correction && !(self.ma_rate > 0.0 && self.ma_rate <= 1.0) {
            return bad(format!("ma_rate must be in (0, 1], got {}", self.ma_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub nan_count: usize,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MITrace {
    pub variant: Variant,
    pub v_raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub converged: bool,
    pub final_estimate: Option<f64>,
    pub window: usize,
    pub diagnostics: Diagnostics,
}

impl MITrace {
    pub fn iterations(&self) -> usize {
        self.v_raw.len()
    }

    /// The converged estimate, or else the mean of the last window of the
    /// smoothed trace.
    pub fn readout(&self) -> f64 {
        if let Some(e) = self.final_estimate {
            return e;
        }
        let w = self.window.min(self.smoothed.len()).max(1);
        let tail: Vec<f64> = self.smoothed[self.smoothed.len().saturating_sub(w)..]
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }

    /// `iteration,v_raw,v_smoothed` rows followed by a `# summary` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,v_raw,v_smoothed")?;
        for (i, (r, s)) in self.v_raw.iter().zip(&self.smoothed).enumerate() {
            writeln!(out, "{i},{r:?},{s:?}")?;
        }
        match self.final_estimate {
            Some(e) => writeln!(out, "# summary converged=true final_estimate_nats={e:?}")?,
            None => writeln!(
                out,
                "# summary converged=false final_estimate_nats=none last_window_mean_nats={:?}",
                self.readout()
            )?,
        }
        Ok(())
    }
}

/// Result of one DV evaluation.
#[derive(Clone, Debug)]
pub struct DvStep {
    pub value: f64,
    /// `log mean exp` of the marginal scores.
    pub marginal_lme: f64,
    /// `∇_φ` of the objective, in [`StatNet::params`] layout.
    pub grad: Vec<f64>,
}

/// The DV value and its gradient w.r.t. the network parameters for one
/// set of draws. With `log_ma` the gradient of the exp-term uses the
/// moving-average denominator instead of the batch mean.
pub fn dv_value_and_grad(net: &StatNet, draw: &PairDraw, log_ma: Option<f64>) -> Result<DvStep> {
    let mut g = Graph::new();
    let vars = net.register(&mut g);
    let joint = net.scores_on(&mut g, &vars, &draw.x, &draw.g)?;
    let marg = net.scores_on(&mut g, &vars, &draw.x, &draw.g_hat)?;
    let s = draw.x.rows() as f64;
    let jm = g.mean(joint);
    let value = dv_lower_bound(g.value(joint).data(), g.value(marg).data())?;
    let marginal_lme = log_sum_exp(g.value(marg).data()) - s.ln();
    let objective = match log_ma {
        None => {
            let lse = g.log_sum_exp(marg);
            g.sub(jm, lse)?
        }
        Some(log_ma) => {
            let m = g.value(marg).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let shift = g.constant(Tensor::full(g.value(marg).shape(), -m));
            let shifted = g.add(marg, shift)?;
            let e = g.exp(shifted);
            let em = g.mean(e);
            let em = g.scale(em, (m - log_ma).exp());
            g.sub(jm, em)?
        }
    };
    let grads = g.backward(objective)?;
    Ok(DvStep {
        value,
        marginal_lme,
        grad: vars.flat_grad(&grads),
    })
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains a fresh statistic network on draws from `source` and records the
/// DV trace.
pub fn estimate_mi(source: &dyn PairSource, config: &EstimatorConfig) -> Result<MITrace> {
    config.validate()?;
    let mut init_rng = rng_stream(config.seed, 0);
    let mut data_rng = rng_stream(config.seed, 1);
    let mut net = StatNet::new(
        config.variant,
        source.x_dim(),
        source.g_dim(),
        source.blocks(),
        config.mix_takes_gradient,
        &mut init_rng,
    )?;
    let mut params = net.params();
    let mut adam = AdamState::new(params.len(), AdamConfig::with_lr(config.lr));

    let mut v_raw = Vec::new();
    let mut smoothed = Vec::new();
    let mut ema: Option<f64> = None;
    let mut log_ma: Option<f64> = None;
    let mut diag = Diagnostics::default();
    let mut streak = 0;
    let mut conv = Convergence {
        converged: false,
        estimate: None,
    };

    for it in 0..config.max_iterations {
        let draw = source.draw(config.sample_size, &mut data_rng)?;
        let ma_arg = if config.ma_correction { log_ma } else { None };
        let step = dv_value_and_grad(&net, &draw, ma_arg);
        let step = match step {
            Ok(s) if s.value.is_finite() && s.grad.iter().all(|x| x.is_finite()) => Some(s),
            Ok(_) | Err(Error::Numeric(_)) => None,
            Err(e) => return Err(e),
        };
        let Some(step) = step else {
            diag.nan_count += 1;
            streak += 1;
            v_raw.push(f64::NAN);
            smoothed.push(ema.unwrap_or(f64::NAN));
            if streak >= config.nan_patience {
                return Err(Error::Estimation(format!(
                    "{streak} consecutive non-finite DV values at iteration {it} \
                     (nan_count={}, max_abs={})",
                    diag.nan_count, diag.max_abs
                )));
            }
            continue;
        };
        streak = 0;
        let v = step.value;
        if config.ma_correction {
            let lme = step.marginal_lme;
            log_ma = Some(match log_ma {
                None => lme,
                Some(prev) => {
                    let a = prev + (1.0 - config.ma_rate).ln();
                    let b = lme + config.ma_rate.ln();
                    a.max(b) + (-(a - b).abs()).exp().ln_1p()
                }
            });
        }
        adam.step(&mut params, &step.grad, Direction::Ascent)?;
        net.set_params(&params)?;

        diag.max_abs = diag.max_abs.max(v.abs());
        let e = match ema {
            None => v,
            Some(prev) => config.smoothing * prev + (1.0 - config.smoothing) * v,
        };
        ema = Some(e);
        v_raw.push(v);
        smoothed.push(e);

        let n = it + 1;
        if n >= config.min_iterations.max(config.window) && n % config.check_every == 0 {
            conv = check_convergence(&smoothed, config.window, config.tolerance);
            if conv.converged {
                break;
            }
        }
    }
    Ok(MITrace {
        variant: config.variant,
        v_raw,
        smoothed,
        converged: conv.converged,
        final_estimate: conv.estimate,
        window: config.window,
        diagnostics: diag,
    })
}
