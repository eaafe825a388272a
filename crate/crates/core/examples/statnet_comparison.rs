//! Hierarchical and flat statistic networks on the same Gaussian source with
//! B blocks, side by side.
//!
//! cargo run --release --example statnet_comparison -- [blocks] [rho]

use hmine::mi::{estimate_mi, EstimatorConfig, GaussianSource, PairDraw, PairSource, Variant};
use hmine::nd::Tensor;
use rand::RngCore;

/// `blocks` copies of a 1-d Gaussian pair stacked into one draw; `G` holds
/// the sum of the partners, so each block shares information with it.
struct Stacked {
    inner: GaussianSource,
    blocks: usize,
}

impl PairSource for Stacked {
    fn x_dim(&self) -> usize {
        1
    }
    fn g_dim(&self) -> usize {
        1
    }
    fn blocks(&self) -> usize {
        self.blocks
    }
    fn draw(&self, s: usize, rng: &mut dyn RngCore) -> hmine::Result<PairDraw> {
        let parts: Vec<PairDraw> = (0..self.blocks)
            .map(|_| self.inner.draw(s, rng))
            .collect::<hmine::Result<_>>()?;
        let mut x = Vec::with_capacity(s * self.blocks);
        let (mut g, mut g_hat) = (vec![0.0; s], vec![0.0; s]);
        for r in 0..s {
            for p in &parts {
                x.push(p.x.data()[r]);
                g[r] += p.g.data()[r];
                g_hat[r] += p.g_hat.data()[r];
            }
        }
        Ok(PairDraw {
            x: Tensor::matrix(s, self.blocks, x)?,
            g: Tensor::matrix(s, 1, g)?,
            g_hat: Tensor::matrix(s, 1, g_hat)?,
        })
    }
}

fn main() -> hmine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let blocks: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let rho: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let source = Stacked {
        inner: GaussianSource::new(1, rho)?,
        blocks,
    };
    // G = Σ y_j with corr(x_j, y_j) = ρ: I(X; G) = −½ ln(1 − ρ²)
    println!("analytic {:.4} nats", -0.5 * (1.0 - rho * rho).ln());
    for variant in [Variant::Hierarchical, Variant::Flat] {
        let config = EstimatorConfig {
            variant,
            max_iterations: 6000,
            ..EstimatorConfig::default()
        };
        let t = estimate_mi(&source, &config)?;
        println!(
            "{variant:?}: readout {:.4} nats, converged {} after {} iterations",
            t.readout(),
            t.converged,
            t.iterations()
        );
    }
    Ok(())
}
