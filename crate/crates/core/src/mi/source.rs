use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::fed::{add_gradient_noise, TaskModel};
use crate::nd::Tensor;

/// `S` joint draws `(X_B, G)` plus `S` gradients `Ĝ` of independent batches.
#[derive(Clone, Debug)]
pub struct PairDraw {
    /// `[S, B·dx]`.
    pub x: Tensor,
    /// `[S, dg]`, `G` computed from the matching row of `x`.
    pub g: Tensor,
    /// `[S, dg]`, independent of `x`.
    pub g_hat: Tensor,
}

/// Anything that can produce paired samples for the estimator.
pub trait PairSource {
    /// Values per block `x_j`.
    fn x_dim(&self) -> usize;
    fn g_dim(&self) -> usize;
    /// Number of blocks `B` in one draw.
    fn blocks(&self) -> usize;
    fn draw(&self, s: usize, rng: &mut dyn RngCore) -> Result<PairDraw>;
}

/// Batches of a client dataset and their gradients under a fixed `θ^t`.
#[derive(Clone, Debug)]
pub struct GradientSource<'a> {
    pub dataset: &'a Dataset,
    pub model: &'a TaskModel,
    pub batch_size: usize,
    /// Gaussian noise added to every released gradient.
    pub sigma: f64,
    /// Append the label to each `x_j`.
    pub include_label: bool,
}

impl<'a> GradientSource<'a> {
    pub fn new(dataset: &'a Dataset, model: &'a TaskModel, batch_size: usize) -> Self {
        Self {
            dataset,
            model,
            batch_size,
            sigma: 0.0,
            include_label: true,
        }
    }

    /// One batch and its (possibly noised) gradient.
    pub fn draw_one(&self, rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = sample_batch(self.dataset, self.batch_size, rng)?;
        let g = self.model.compute_gradient(&batch)?;
        let g = add_gradient_noise(&g, self.sigma, rng);
        let mut x = Vec::with_capacity(self.batch_size * self.x_dim());
        for (i, &label) in batch.labels.iter().enumerate() {
            x.extend_from_slice(batch.features.row_slice(i));
            if self.include_label {
                x.push(f64::from(label));
            }
        }
        Ok((x, g.values))
    }
}

impl PairSource for GradientSource<'_> {
    fn x_dim(&self) -> usize {
        self.dataset.feature_dim() + usize::from(self.include_label)
    }

    fn g_dim(&self) -> usize {
        self.model.param_count()
    }

    fn blocks(&self) -> usize {
        self.batch_size
    }

    fn draw(&self, s: usize, rng: &mut dyn RngCore) -> Result<PairDraw> {
        let (mut xs, mut gs, mut hs) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..s {
            let (x, g) = self.draw_one(rng)?;
            xs.extend(x);
            gs.extend(g);
            let (_, h) = self.draw_one(rng)?;
            hs.extend(h);
        }
        Ok(PairDraw {
            x: Tensor::matrix(s, self.blocks() * self.x_dim(), xs)?,
            g: Tensor::matrix(s, self.g_dim(), gs)?,
            g_hat: Tensor::matrix(s, self.g_dim(), hs)?,
        })
    }
}

/// Correlated Gaussian pairs with analytic MI, for checking the estimator.
#[derive(Clone, Copy, Debug)]
pub struct GaussianSource {
    pub dim: usize,
    pub rho: f64,
}

impl GaussianSource {
    pub fn new(dim: usize, rho: f64) -> Result<Self> {
        if dim == 0 || !(rho.abs() < 1.0) {
            return Err(Error::Contract(format!(
                "gaussian source needs dim >= 1 and |rho| < 1, got dim={dim} rho={rho}"
            )));
        }
        Ok(Self { dim, rho })
    }

    pub fn analytic_mi(&self) -> f64 {
        crate::data::gaussian_mi(self.dim, self.rho)
    }
}

impl PairSource for GaussianSource {
    fn x_dim(&self) -> usize {
        self.dim
    }

    fn g_dim(&self) -> usize {
        self.dim
    }

    fn blocks(&self) -> usize {
        1
    }

    fn draw(&self, s: usize, rng: &mut dyn RngCore) -> Result<PairDraw> {
        let n = s * self.dim;
        let c = (1.0 - self.rho * self.rho).sqrt();
        let mut x = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            x.push(a);
            g.push(self.rho * a + c * e);
            // marginal of g is N(0, 1)
            h.push(rng.sample(StandardNormal));
        }
        Ok(PairDraw {
            x: Tensor::matrix(s, self.dim, x)?,
            g: Tensor::matrix(s, self.dim, g)?,
            g_hat: Tensor::matrix(s, self.dim, h)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::fed::TaskSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_source_shapes_and_labels() {
        let samples = (0..6)
            .map(|i| Sample {
                features: vec![i as f64, (i * i) as f64],
                label: (i % 2) as u8,
            })
            .collect();
        let ds = Dataset::from_samples(samples).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = TaskModel::new(&TaskSpec::Logreg, 2, &mut rng).unwrap();
        let src = GradientSource::new(&ds, &model, 3);
        let d = src.draw(4, &mut rng).unwrap();
        assert_eq!(d.x.shape(), &[4, 9]);
        assert_eq!(d.g.shape(), &[4, 3]);
        assert_eq!(d.g_hat.shape(), &[4, 3]);
        // every third value is a label
        for row in 0..4 {
            for j in 0..3 {
                let l = d.x.row_slice(row)[j * 3 + 2];
                assert!(l == 0.0 || l == 1.0);
            }
        }
    }

    #[test]
    fn gaussian_source_rejects_unit_rho() {
        assert!(GaussianSource::new(1, 1.0).is_err());
        assert!(GaussianSource::new(0, 0.5).is_err());
    }
}
