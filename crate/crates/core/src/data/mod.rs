//! Dataset types, Adult ingestion, batch sampling and synthetic oracle data.

pub mod adult;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::Tensor;

pub use adult::{load_adult, parse_adult, preprocess, AdultSchema, ColumnKind, RawColumn, RawTable};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    /// Category strings in code order, for encoded categorical columns.
    pub categories: Option<Vec<String>>,
    /// Imputation value, in encoded units.
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation; 0 marks a constant column.
    pub std: f64,
}

/// Preprocessed samples plus the statistics used to produce them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    meta: Vec<ColumnMeta>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, meta: Vec<ColumnMeta>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("dataset must not be empty".into()));
        }
        let dim = samples[0].features.len();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Shape(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if s.label > 1 {
                return Err(Error::Contract(format!("sample {i} has label {}", s.label)));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("sample {i} has non-finite features")));
            }
        }
        Ok(Self { samples, meta })
    }

    /// Dataset without column metadata, e.g. for synthetic tests.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        Self::new(samples, Vec::new())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn meta(&self) -> &[ColumnMeta] {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].features.len()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    pub fn positive_ratio(&self) -> f64 {
        self.positives() as f64 / self.len() as f64
    }

    /// The samples as an all-numeric table, so the result can be fed back
    /// through [`preprocess`].
    pub fn to_raw_table(&self) -> RawTable {
        let dim = self.feature_dim();
        let names = if self.meta.len() == dim {
            self.meta.iter().map(|m| m.name.clone()).collect()
        } else {
            (0..dim).map(|i| format!("x{i}")).collect()
        };
        let columns = (0..dim)
            .map(|c| RawColumn::Numeric(self.samples.iter().map(|s| Some(s.features[c])).collect()))
            .collect();
        RawTable {
            names,
            columns,
            labels: self.samples.iter().map(|s| s.label).collect(),
        }
    }

    /// A new dataset holding `indices` (repeats allowed), standardized again.
    pub fn select_restandardized(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Contract("empty selection".into()));
        }
        let mut samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let dim = self.feature_dim();
        let mut meta = Vec::with_capacity(dim);
        let mut column = vec![0.0; samples.len()];
        for c in 0..dim {
            for (v, s) in column.iter_mut().zip(&samples) {
                *v = s.features[c];
            }
            let (mean, std) = adult::standardize(&mut column);
            for (v, s) in column.iter().zip(samples.iter_mut()) {
                s.features[c] = *v;
            }
            let base = self.meta.get(c);
            meta.push(ColumnMeta {
                name: base.map_or_else(|| format!("x{c}"), |m| m.name.clone()),
                categories: base.and_then(|m| m.categories.clone()),
                median: base.map_or(0.0, |m| m.median),
                mean,
                std,
            });
        }
        Dataset::new(samples, meta)
    }
}

/// `B` samples drawn from a dataset, with their source indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, feature_dim]`.
    pub features: Tensor,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_indices(dataset: &Dataset, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        let dim = dataset.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            let s = dataset.samples().get(i).ok_or_else(|| {
                Error::Contract(format!("index {i} out of range for {} samples", dataset.len()))
            })?;
            data.extend_from_slice(&s.features);
            labels.push(s.label);
        }
        Ok(Self {
            features: Tensor::matrix(indices.len(), dim, data)?,
            indices,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The bundled Adult file, preprocessed.
#[cfg(test)]
pub(crate) fn bundled_adult() -> Dataset {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/adult.data");
    preprocess(&load_adult(path, &AdultSchema::default()).unwrap()).unwrap()
}

/// Uniform draw of `b` indices with replacement.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, b: usize, rng: &mut R) -> Result<Batch> {
    if b < 1 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let n = dataset.len();
    let indices = (0..b).map(|_| rng.gen_range(0..n)).collect();
    Batch::from_indices(dataset, indices)
}

/// Client dataset of `size` samples with `round(size * positive_ratio)`
/// positives, each class drawn with replacement from the source.
pub fn resample_imbalance<R: Rng + ?Sized>(
    dataset: &Dataset,
    positive_ratio: f64,
    size: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if !(positive_ratio > 0.0 && positive_ratio < 1.0) {
        return Err(Error::Contract(format!(
            "positive ratio must lie in (0, 1), got {positive_ratio}"
        )));
    }
    if size == 0 {
        return Err(Error::Contract("resampled size must be positive".into()));
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset.samples()[i].label == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract(
            "both classes must be present in the source dataset".into(),
        ));
    }
    let n_pos = (size as f64 * positive_ratio).round() as usize;
    let mut indices: Vec<usize> = (0..n_pos).map(|_| pos[rng.gen_range(0..pos.len())]).collect();
    indices.extend((n_pos..size).map(|_| neg[rng.gen_range(0..neg.len())]));
    dataset.select_restandardized(&indices)
}

/// Paired draws where each coordinate pair is standard bivariate normal with
/// correlation `rho`, independent across coordinates.
#[derive(Clone, Debug)]
pub struct GaussianPairs {
    /// `[n, dim]`.
    pub x: Tensor,
    /// `[n, dim]`.
    pub g: Tensor,
    pub rho: f64,
}

/// Closed-form MI in nats of the [`gaussian_pairs`] distribution.
pub fn gaussian_mi(dim: usize, rho: f64) -> f64 {
    dim as f64 / 2.0 * (1.0 / (1.0 - rho * rho)).ln()
}

pub fn gaussian_pairs<R: Rng + ?Sized>(
    dim: usize,
    rho: f64,
    n: usize,
    rng: &mut R,
) -> Result<GaussianPairs> {
    if rho.abs() >= 1.0 || !rho.is_finite() {
        return Err(Error::Contract(format!("|rho| must be < 1, got {rho}")));
    }
    if dim < 1 || n < 1 {
        return Err(Error::Contract("dim and n must be at least 1".into()));
    }
    let resid = (1.0 - rho * rho).sqrt();
    let mut x = Vec::with_capacity(n * dim);
    let mut g = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        let a: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        x.push(a);
        g.push(rho * a + resid * e);
    }
    Ok(GaussianPairs {
        x: Tensor::matrix(n, dim, x)?,
        g: Tensor::matrix(n, dim, g)?,
        rho,
    })
}

impl GaussianPairs {
    pub fn analytic_mi(&self) -> f64 {
        gaussian_mi(self.x.cols(), self.rho)
    }
}
