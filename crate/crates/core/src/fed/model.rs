use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nd::{Activation, Graph, Mlp, MlpVars, Tensor, Var};

/// Architecture of the model being trained by the federation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// One sigmoid unit trained with binary cross-entropy.
    #[default]
    Logreg,
    /// Relu MLP with `hidden` layer widths and `classes` softmax outputs.
    Mlp { hidden: Vec<usize>, classes: usize },
}

impl TaskSpec {
    /// The `100-100-2` classifier used for the attack validation.
    pub fn default_mlp() -> Self {
        TaskSpec::Mlp {
            hidden: vec![100, 100],
            classes: 2,
        }
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        match self {
            TaskSpec::Logreg => vec![input_dim, 1],
            TaskSpec::Mlp { hidden, classes } => {
                let mut d = vec![input_dim];
                d.extend(hidden);
                d.push(*classes);
                d
            }
        }
    }
}

/// Flat parameter vector `θ` with the layer dims that give it structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub dims: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Provenance {
    pub round: usize,
    pub client: usize,
    pub batch_size: usize,
    pub sigma: f64,
}

/// `∇_θ` of the mean batch loss, in the layout of [`ParamVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl GradientVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    spec: TaskSpec,
    net: Mlp,
}

impl TaskModel {
    /// Logistic regression starts at `θ = 0`; MLPs get Glorot weights.
    pub fn new<R: Rng + ?Sized>(spec: &TaskSpec, input_dim: usize, rng: &mut R) -> Result<Self> {
        let dims = spec.layer_dims(input_dim);
        let net = match spec {
            TaskSpec::Logreg => Mlp::from_params(
                &dims,
                Activation::Identity,
                Activation::Sigmoid,
                vec![0.0; crate::nd::param_count(&dims)],
            )?,
            TaskSpec::Mlp { classes, .. } => {
                if *classes < 2 {
                    return Err(Error::Config("mlp task needs at least 2 classes".into()));
                }
                Mlp::new(&dims, Activation::Relu, Activation::Identity, rng)?
            }
        };
        Ok(Self {
            spec: spec.clone(),
            net,
        })
    }

    pub fn with_params(spec: &TaskSpec, input_dim: usize, params: Vec<f64>) -> Result<Self> {
        let dims = spec.layer_dims(input_dim);
        let (hidden, output) = match spec {
            TaskSpec::Logreg => (Activation::Identity, Activation::Sigmoid),
            TaskSpec::Mlp { .. } => (Activation::Relu, Activation::Identity),
        };
        Ok(Self {
            spec: spec.clone(),
            net: Mlp::from_params(&dims, hidden, output, params)?,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params(&self) -> ParamVector {
        ParamVector {
            values: self.net.params().to_vec(),
            dims: self.net.dims().to_vec(),
        }
    }

    pub fn theta(&self) -> &[f64] {
        self.net.params()
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "θ has {} entries, model expects {}",
                theta.len(),
                self.param_count()
            )));
        }
        self.net.params_mut().copy_from_slice(theta);
        Ok(())
    }

    fn check_batch(&self, features: &Tensor, labels: &[u8]) -> Result<()> {
        if features.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                features.cols(),
                self.input_dim()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape("feature rows and label count differ".into()));
        }
        Ok(())
    }

    /// Output logits, `[B, 1]` for logreg and `[B, classes]` for the MLP.
    fn logits(&self, features: &Tensor) -> Result<Tensor> {
        match self.spec {
            TaskSpec::Logreg => {
                let w = self.net.weight(0);
                let mut z = features.matmul(&w)?;
                let b = self.net.bias(0).item();
                z.data_mut().iter_mut().for_each(|v| *v += b);
                Ok(z)
            }
            TaskSpec::Mlp { .. } => self.net.forward(features),
        }
    }

    /// Loss of each sample.
    pub fn per_sample_loss(&self, features: &Tensor, labels: &[u8]) -> Result<Vec<f64>> {
        self.check_batch(features, labels)?;
        let z = self.logits(features)?;
        Ok(match self.spec {
            TaskSpec::Logreg => z
                .data()
                .iter()
                .zip(labels)
                .map(|(&zi, &y)| softplus(zi) - f64::from(y) * zi)
                .collect(),
            TaskSpec::Mlp { .. } => (0..z.rows())
                .map(|i| {
                    let row = z.row_slice(i);
                    crate::nd::log_sum_exp(row) - row[labels[i] as usize]
                })
                .collect(),
        })
    }

    pub fn mean_loss(&self, features: &Tensor, labels: &[u8]) -> Result<f64> {
        let l = self.per_sample_loss(features, labels)?;
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    }

    fn one_hot(&self, labels: &[u8]) -> Result<Tensor> {
        let classes = self.net.output_dim();
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y as usize >= classes {
                return Err(Error::Contract(format!("label {y} outside {classes} classes")));
            }
            data[i * classes + y as usize] = 1.0;
        }
        Tensor::matrix(labels.len(), classes, data)
    }

    /// Records the mean loss on `g` for parameters `vars` and input `x`.
    pub fn loss_on(&self, g: &mut Graph, vars: &MlpVars, x: Var, labels: &[u8]) -> Result<Var> {
        self.check_batch(g.value(x), labels)?;
        match self.spec {
            TaskSpec::Logreg => {
                let z = g.matmul(x, vars.weights()[0])?;
                let z = g.add_row(z, vars.biases()[0])?;
                // BCE with logits: softplus(z) - y z
                let y = g.constant(Tensor::matrix(
                    labels.len(),
                    1,
                    labels.iter().map(|&l| f64::from(l)).collect(),
                )?);
                let sp = g.softplus(z);
                let yz = g.mul(y, z)?;
                let l = g.sub(sp, yz)?;
                Ok(g.mean(l))
            }
            TaskSpec::Mlp { .. } => {
                let z = self.net.forward_on(g, vars, x)?;
                let lsm = g.log_softmax_rows(z);
                let y = g.constant(self.one_hot(labels)?);
                let picked = g.mul(y, lsm)?;
                let total = g.sum(picked);
                Ok(g.scale(total, -1.0 / labels.len() as f64))
            }
        }
    }

    /// Mean-over-batch loss gradient at the current `θ`.
    pub fn compute_gradient(&self, batch: &Batch) -> Result<GradientVector> {
        let losses = self.per_sample_loss(&batch.features, &batch.labels)?;
        if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at batch sample {i} (dataset index {})",
                batch.indices[i]
            )));
        }
        let values = match self.spec {
            TaskSpec::Logreg => self.logreg_gradient(&batch.features, &batch.labels)?,
            TaskSpec::Mlp { .. } => {
                let mut g = Graph::new();
                let vars = self.net.register(&mut g);
                let x = g.constant(batch.features.clone());
                let loss = self.loss_on(&mut g, &vars, x, &batch.labels)?;
                vars.flat_grad(&g.backward(loss)?)
            }
        };
        Ok(GradientVector {
            values,
            provenance: Provenance {
                batch_size: batch.len(),
                ..Provenance::default()
            },
        })
    }

    /// Closed form: `c_i = σ(z_i) − y_i`, `∇w = mean(c_i x_i)`, `∇b = mean(c_i)`.
    fn logreg_gradient(&self, features: &Tensor, labels: &[u8]) -> Result<Vec<f64>> {
        let z = self.logits(features)?;
        let d = features.cols();
        let inv_b = 1.0 / labels.len() as f64;
        let mut grad = vec![0.0; d + 1];
        for (i, &y) in labels.iter().enumerate() {
            let c = crate::nd::sigmoid(z.data()[i]) - f64::from(y);
            for (gw, &x) in grad[..d].iter_mut().zip(features.row_slice(i)) {
                *gw += c * x * inv_b;
            }
            grad[d] += c * inv_b;
        }
        Ok(grad)
    }

    /// The loss gradient as a differentiable function of the input `x`,
    /// with `θ` held fixed. Returns a `[1, P]` row in parameter layout.
    ///
    /// Used by gradient-matching attacks, which need `∂/∂x ‖∇_θ L(x) − G‖²`.
    pub fn gradient_graph(&self, g: &mut Graph, x: Var, labels: &[u8]) -> Result<Var> {
        self.check_batch(g.value(x), labels)?;
        let inv_b = 1.0 / labels.len() as f64;
        let layers = self.net.num_layers();
        let weights: Vec<Var> = (0..layers).map(|l| g.constant(self.net.weight(l))).collect();
        let biases: Vec<Var> = (0..layers).map(|l| g.constant(self.net.bias(l))).collect();

        // forward, keeping pre-activations
        let mut inputs = vec![x];
        let mut pre = Vec::with_capacity(layers);
        let mut h = x;
        for l in 0..layers {
            let z = g.matmul(h, weights[l])?;
            let z = g.add_row(z, biases[l])?;
            pre.push(z);
            if l + 1 < layers {
                h = match self.net.hidden_activation() {
                    Activation::Relu => g.relu(z),
                    Activation::Identity => z,
                    Activation::Sigmoid => {
                        return Err(Error::Contract(
                            "symbolic gradient supports relu or identity hidden layers".into(),
                        ))
                    }
                };
                inputs.push(h);
            }
        }

        // dL/dz at the output
        let z_out = pre[layers - 1];
        let target = match self.spec {
            TaskSpec::Logreg => Tensor::matrix(
                labels.len(),
                1,
                labels.iter().map(|&l| f64::from(l)).collect(),
            )?,
            TaskSpec::Mlp { .. } => self.one_hot(labels)?,
        };
        let target = g.constant(target);
        let prob = match self.spec {
            TaskSpec::Logreg => g.sigmoid(z_out),
            TaskSpec::Mlp { .. } => {
                let lsm = g.log_softmax_rows(z_out);
                g.exp(lsm)
            }
        };
        let diff = g.sub(prob, target)?;
        let mut delta = g.scale(diff, inv_b);

        let mut pieces = vec![None; layers];
        for l in (0..layers).rev() {
            let a_t = g.transpose(inputs[l]);
            let dw = g.matmul(a_t, delta)?;
            let db = g.sum_rows(delta);
            let (r, c) = (self.net.dims()[l], self.net.dims()[l + 1]);
            let dw = g.reshape(dw, vec![1, r * c])?;
            pieces[l] = Some(g.concat_cols(dw, db)?);
            if l > 0 {
                let w_t = g.transpose(weights[l]);
                let dh = g.matmul(delta, w_t)?;
                delta = match self.net.hidden_activation() {
                    Activation::Relu => {
                        let mask = g.step(pre[l - 1]);
                        g.mul(dh, mask)?
                    }
                    _ => dh,
                };
            }
        }
        let mut flat = pieces[0].take().expect("layer 0 gradient");
        for p in pieces.into_iter().skip(1) {
            flat = g.concat_cols(flat, p.expect("layer gradient"))?;
        }
        Ok(flat)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
