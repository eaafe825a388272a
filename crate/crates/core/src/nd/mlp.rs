use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::graph::{sigmoid, Gradients, Graph, Var};
use crate::nd::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn record(self, g: &mut Graph, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Relu => g.relu(v),
            Activation::Sigmoid => g.sigmoid(v),
        }
    }
}

/// Fully connected network. All parameters live in one flat buffer laid out
/// layer by layer as `[W_0 (row-major, in x out), b_0, W_1, b_1, ...]`, which
/// is also the layout of [`MlpVars::flat_grad`] and what the optimizer sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Graph handles for one registration of an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl MlpVars {
    pub fn weights(&self) -> &[Var] {
        &self.weights
    }

    pub fn biases(&self) -> &[Var] {
        &self.biases
    }

    /// Gradient in the flat parameter layout of the owning [`Mlp`].
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(grads.wrt(*w).data());
            out.extend_from_slice(grads.wrt(*b).data());
        }
        out
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer dims {dims:?}")));
        }
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn from_params(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer dims {dims:?}")));
        }
        if params.len() != param_count(dims) {
            return Err(Error::Shape(format!(
                "layer dims {dims:?} need {} parameters, got {}",
                param_count(dims),
                params.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize, usize) {
        let start: usize = param_count(&self.dims[..=layer]);
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        (start, start + i * o, start + i * o + o)
    }

    pub fn weight(&self, layer: usize) -> Tensor {
        let (s, m, _) = self.layer_offsets(layer);
        Tensor::matrix(
            self.dims[layer],
            self.dims[layer + 1],
            self.params[s..m].to_vec(),
        )
        .expect("layout")
    }

    pub fn bias(&self, layer: usize) -> Tensor {
        let (_, m, e) = self.layer_offsets(layer);
        Tensor::row(self.params[m..e].to_vec())
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let (s, m, _) = self.layer_offsets(layer);
        &mut self.params[s..m]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, m, e) = self.layer_offsets(layer);
        &mut self.params[m..e]
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.cols() != self.dims[0] {
            return Err(Error::Shape(format!(
                "layer 0 expects {} inputs, got {}",
                self.dims[0],
                input.cols()
            )));
        }
        Ok(())
    }

    /// Untaped evaluation on a `[rows, input_dim]` matrix.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut h = Tensor::matrix(input.rows(), input.cols(), input.data().to_vec())?;
        for l in 0..self.num_layers() {
            let mut z = gemm(&h, false, &self.weight(l), false)
                .map_err(|e| Error::Shape(format!("layer {l}: {e}")))?;
            let b = self.bias(l);
            let act = self.activation_for(l);
            let cols = z.cols();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = act.apply(*v + b.data()[i % cols]);
            }
            h = z;
        }
        Ok(h)
    }

    /// Put the current parameters on `g` as differentiable leaves.
    pub fn register(&self, g: &mut Graph) -> MlpVars {
        let mut weights = Vec::with_capacity(self.num_layers());
        let mut biases = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            weights.push(g.param(self.weight(l)));
            biases.push(g.param(self.bias(l)));
        }
        MlpVars { weights, biases }
    }

    /// Taped forward pass using parameters previously registered on `g`.
    pub fn forward_on(&self, g: &mut Graph, vars: &MlpVars, input: Var) -> Result<Var> {
        self.check_input(g.value(input))?;
        let mut h = input;
        for l in 0..self.num_layers() {
            let z = g
                .matmul(h, vars.weights[l])
                .map_err(|e| Error::Shape(format!("layer {l}: {e}")))?;
            let z = g.add_row(z, vars.biases[l])?;
            h = self.activation_for(l).record(g, z);
        }
        Ok(h)
    }
}
