use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{Activation, Graph, Mlp, MlpVars, Tensor, Var};

pub const BLOCK_WIDTHS: [usize; 3] = [200, 200, 5];
pub const MIX_WIDTHS: [usize; 2] = [500, 1];
pub const FLAT_WIDTHS: [usize; 3] = [200, 200, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One MLP over `concat(x_1, ..., x_B, G)`.
    Flat,
    /// Shared BlockModel per `(x_j, G)`, MixModel over the embeddings.
    #[default]
    Hierarchical,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Flat => "flat",
            Variant::Hierarchical => "hierarchical",
        })
    }
}

/// Statistic network `T_φ(X_B, G)`.
///
/// `X_B` is passed as a `[S, B·dx]` matrix (block `j` in columns
/// `j·dx..(j+1)·dx`) and `G` as `[S, dg]`.
#[derive(Clone, Debug, PartialEq)]
pub enum StatNet {
    Flat {
        net: Mlp,
        dx: usize,
        blocks: usize,
    },
    Hierarchical {
        block: Mlp,
        mix: Mlp,
        dx: usize,
        blocks: usize,
        mix_takes_gradient: bool,
    },
}

/// Graph handles for one registration of a [`StatNet`].
pub enum StatVars {
    Flat(MlpVars),
    Hierarchical(MlpVars, MlpVars),
}

impl StatVars {
    pub fn flat_grad(&self, grads: &crate::nd::Gradients) -> Vec<f64> {
        match self {
            StatVars::Flat(v) => v.flat_grad(grads),
            StatVars::Hierarchical(b, m) => {
                let mut out = b.flat_grad(grads);
                out.extend(m.flat_grad(grads));
                out
            }
        }
    }
}

impl StatNet {
    pub fn new<R: Rng + ?Sized>(
        variant: Variant,
        dx: usize,
        dg: usize,
        blocks: usize,
        mix_takes_gradient: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dx == 0 || dg == 0 || blocks == 0 {
            return Err(Error::Contract(format!(
                "statistic network needs positive dims, got dx={dx} dg={dg} B={blocks}"
            )));
        }
        Ok(match variant {
            Variant::Flat => StatNet::Flat {
                net: Mlp::new(
                    &Self::flat_dims(dx, dg, blocks),
                    Activation::Relu,
                    Activation::Identity,
                    rng,
                )?,
                dx,
                blocks,
            },
            Variant::Hierarchical => {
                let block = Mlp::new(
                    &Self::block_dims(dx, dg),
                    Activation::Relu,
                    Activation::Identity,
                    rng,
                )?;
                let mix = Mlp::new(
                    &Self::mix_dims(dg, blocks, mix_takes_gradient),
                    Activation::Relu,
                    Activation::Identity,
                    rng,
                )?;
                StatNet::Hierarchical {
                    block,
                    mix,
                    dx,
                    blocks,
                    mix_takes_gradient,
                }
            }
        })
    }

    pub fn flat_dims(dx: usize, dg: usize, blocks: usize) -> Vec<usize> {
        let mut d = vec![blocks * dx + dg];
        d.extend(FLAT_WIDTHS);
        d
    }

    pub fn block_dims(dx: usize, dg: usize) -> Vec<usize> {
        let mut d = vec![dx + dg];
        d.extend(BLOCK_WIDTHS);
        d
    }

    pub fn mix_dims(dg: usize, blocks: usize, mix_takes_gradient: bool) -> Vec<usize> {
        let embed = BLOCK_WIDTHS[BLOCK_WIDTHS.len() - 1];
        let mut d = vec![blocks * embed + if mix_takes_gradient { dg } else { 0 }];
        d.extend(MIX_WIDTHS);
        d
    }

    pub fn variant(&self) -> Variant {
        match self {
            StatNet::Flat { .. } => Variant::Flat,
            StatNet::Hierarchical { .. } => Variant::Hierarchical,
        }
    }

    pub fn blocks(&self) -> usize {
        match self {
            StatNet::Flat { blocks, .. } | StatNet::Hierarchical { blocks, .. } => *blocks,
        }
    }

    pub fn x_dim(&self) -> usize {
        match self {
            StatNet::Flat { dx, .. } | StatNet::Hierarchical { dx, .. } => *dx,
        }
    }

    pub fn g_dim(&self) -> usize {
        match self {
            StatNet::Flat { net, dx, blocks } => net.input_dim() - dx * blocks,
            StatNet::Hierarchical { block, dx, .. } => block.input_dim() - dx,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            StatNet::Flat { net, .. } => net.param_count(),
            StatNet::Hierarchical { block, mix, .. } => block.param_count() + mix.param_count(),
        }
    }

    /// Parameters as one flat vector (block before mix).
    pub fn params(&self) -> Vec<f64> {
        match self {
            StatNet::Flat { net, .. } => net.params().to_vec(),
            StatNet::Hierarchical { block, mix, .. } => {
                let mut p = block.params().to_vec();
                p.extend_from_slice(mix.params());
                p
            }
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "statistic network has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        match self {
            StatNet::Flat { net, .. } => net.params_mut().copy_from_slice(params),
            StatNet::Hierarchical { block, mix, .. } => {
                let n = block.param_count();
                block.params_mut().copy_from_slice(&params[..n]);
                mix.params_mut().copy_from_slice(&params[n..]);
            }
        }
        Ok(())
    }

    pub fn block_model(&self) -> Option<&Mlp> {
        match self {
            StatNet::Hierarchical { block, .. } => Some(block),
            StatNet::Flat { .. } => None,
        }
    }

    pub fn block_model_mut(&mut self) -> Option<&mut Mlp> {
        match self {
            StatNet::Hierarchical { block, .. } => Some(block),
            StatNet::Flat { .. } => None,
        }
    }

    pub fn mix_model_mut(&mut self) -> Option<&mut Mlp> {
        match self {
            StatNet::Hierarchical { mix, .. } => Some(mix),
            StatNet::Flat { .. } => None,
        }
    }

    /// `h_j = BlockModel(x_j, G)`.
    pub fn block_embed(&self, x: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        let StatNet::Hierarchical { block, .. } = self else {
            return Err(Error::Contract("block_embed needs the hierarchical variant".into()));
        };
        if x.len() + g.len() != block.input_dim() {
            return Err(Error::Contract(format!(
                "block input has {} values, BlockModel expects {}",
                x.len() + g.len(),
                block.input_dim()
            )));
        }
        let mut input = x.to_vec();
        input.extend_from_slice(g);
        Ok(block.forward(&Tensor::row(input))?.into_data())
    }

    /// `MixModel(h_1, ..., h_B, G)`.
    pub fn mix_score(&self, embeddings: &[Vec<f64>], g: &[f64]) -> Result<f64> {
        let StatNet::Hierarchical {
            mix,
            blocks,
            mix_takes_gradient,
            ..
        } = self
        else {
            return Err(Error::Contract("mix_score needs the hierarchical variant".into()));
        };
        if embeddings.len() != *blocks {
            return Err(Error::Contract(format!(
                "expected {blocks} embeddings, got {}",
                embeddings.len()
            )));
        }
        let mut input: Vec<f64> = embeddings.concat();
        if *mix_takes_gradient {
            input.extend_from_slice(g);
        }
        if input.len() != mix.input_dim() {
            return Err(Error::Contract(format!(
                "mix input has {} values, MixModel expects {}",
                input.len(),
                mix.input_dim()
            )));
        }
        Ok(mix.forward(&Tensor::row(input))?.item())
    }

    /// `T_φ(X_B, G)` for a single draw; `x` holds the `B` blocks back to back.
    pub fn score(&self, x: &[f64], g: &[f64]) -> Result<f64> {
        match self {
            StatNet::Flat { net, .. } => {
                let mut input = x.to_vec();
                input.extend_from_slice(g);
                if input.len() != net.input_dim() {
                    return Err(Error::Contract(format!(
                        "flat input has {} values, network expects {}",
                        input.len(),
                        net.input_dim()
                    )));
                }
                Ok(net.forward(&Tensor::row(input))?.item())
            }
            StatNet::Hierarchical { dx, blocks, .. } => {
                if x.len() != dx * blocks {
                    return Err(Error::Contract(format!(
                        "expected {} block values, got {}",
                        dx * blocks,
                        x.len()
                    )));
                }
                let h = x
                    .chunks(*dx)
                    .map(|xj| self.block_embed(xj, g))
                    .collect::<Result<Vec<_>>>()?;
                self.mix_score(&h, g)
            }
        }
    }

    pub fn register(&self, g: &mut Graph) -> StatVars {
        match self {
            StatNet::Flat { net, .. } => StatVars::Flat(net.register(g)),
            StatNet::Hierarchical { block, mix, .. } => {
                StatVars::Hierarchical(block.register(g), mix.register(g))
            }
        }
    }

    /// Taped scores for `S` draws: `x` is `[S, B·dx]`, `grad` is `[S, dg]`.
    /// Returns a `[S, 1]` node.
    pub fn scores_on(&self, g: &mut Graph, vars: &StatVars, x: &Tensor, grad: &Tensor) -> Result<Var> {
        let s = x.rows();
        if grad.rows() != s {
            return Err(Error::Shape(format!(
                "{s} block rows but {} gradient rows",
                grad.rows()
            )));
        }
        match (self, vars) {
            (StatNet::Flat { net, .. }, StatVars::Flat(v)) => {
                let cols = x.cols() + grad.cols();
                let mut data = Vec::with_capacity(s * cols);
                for i in 0..s {
                    data.extend_from_slice(x.row_slice(i));
                    data.extend_from_slice(grad.row_slice(i));
                }
                let input = g.constant(Tensor::matrix(s, cols, data)?);
                net.forward_on(g, v, input)
            }
            (
                StatNet::Hierarchical {
                    block,
                    mix,
                    dx,
                    blocks,
                    mix_takes_gradient,
                },
                StatVars::Hierarchical(bv, mv),
            ) => {
                if x.cols() != dx * blocks {
                    return Err(Error::Contract(format!(
                        "expected {} block columns, got {}",
                        dx * blocks,
                        x.cols()
                    )));
                }
                // one BlockModel row per (draw, block)
                let dg = grad.cols();
                let width = dx + dg;
                let mut data = Vec::with_capacity(s * blocks * width);
                for i in 0..s {
                    let xi = x.row_slice(i);
                    let gi = grad.row_slice(i);
                    for j in 0..*blocks {
                        data.extend_from_slice(&xi[j * dx..(j + 1) * dx]);
                        data.extend_from_slice(gi);
                    }
                }
                let input = g.constant(Tensor::matrix(s * blocks, width, data)?);
                let h = block.forward_on(g, bv, input)?;
                let embed = block.output_dim();
                let h = g.reshape(h, vec![s, blocks * embed])?;
                let h = if *mix_takes_gradient {
                    let gc = g.constant(grad.clone());
                    g.concat_cols(h, gc)?
                } else {
                    h
                };
                mix.forward_on(g, mv, h)
            }
            _ => Err(Error::Contract("graph handles belong to another variant".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::param_count;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hier(dx: usize, dg: usize, b: usize) -> StatNet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        StatNet::new(Variant::Hierarchical, dx, dg, b, true, &mut rng).unwrap()
    }

    #[test]
    fn identical_blocks_embed_identically() {
        let net = hier(3, 2, 2);
        let g = [0.3, -0.2];
        let a = net.block_embed(&[1.0, 2.0, 3.0], &g).unwrap();
        let b = net.block_embed(&[1.0, 2.0, 3.0], &g).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_blocks_permutes_embeddings() {
        let net = hier(2, 2, 2);
        let g = [0.5, 0.1];
        let (x1, x2) = ([1.0, -1.0], [0.2, 0.7]);
        let e1 = net.block_embed(&x1, &g).unwrap();
        let e2 = net.block_embed(&x2, &g).unwrap();
        assert_ne!(e1, e2);
        // embeddings of the swapped batch are the swapped embeddings
        let swapped: Vec<_> = [x2, x1]
            .iter()
            .map(|x| net.block_embed(x, &g).unwrap())
            .collect();
        assert_eq!(swapped, vec![e2, e1]);
    }

    #[test]
    fn block_dim_mismatch() {
        let net = hier(3, 2, 1);
        assert!(matches!(net.block_embed(&[1.0], &[0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_mix_weights_emit_bias() {
        let mut net = hier(2, 3, 2);
        let mix = net.mix_model_mut().unwrap();
        mix.params_mut().fill(0.0);
        let last = mix.num_layers() - 1;
        mix.bias_mut(last)[0] = 0.75;
        let h = vec![vec![1.0; 5], vec![-2.0; 5]];
        assert_eq!(net.mix_score(&h, &[1.0, 2.0, 3.0]).unwrap(), 0.75);
    }

    #[test]
    fn wrong_embedding_count() {
        let net = hier(2, 3, 2);
        assert!(matches!(
            net.mix_score(&[vec![0.0; 5]], &[0.0; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn flat_and_hierarchical_return_one_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = [0.1, 0.2, 0.3, 0.4];
        let g = [1.0, -1.0, 0.5];
        for v in [Variant::Flat, Variant::Hierarchical] {
            let net = StatNet::new(v, 2, 3, 2, true, &mut rng).unwrap();
            assert!(net.score(&x, &g).unwrap().is_finite());
        }
    }

    #[test]
    fn taped_scores_match_single_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in [Variant::Flat, Variant::Hierarchical] {
            for mix_g in [true, false] {
                let net = StatNet::new(v, 2, 3, 3, mix_g, &mut rng).unwrap();
                let x = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
                let gr = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
                let mut g = Graph::new();
                let vars = net.register(&mut g);
                let out = net.scores_on(&mut g, &vars, &x, &gr).unwrap();
                assert_eq!(g.value(out).shape(), &[4, 1]);
                for i in 0..4 {
                    let direct = net.score(x.row_slice(i), gr.row_slice(i)).unwrap();
                    assert!((g.value(out).data()[i] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_parameters_do_not_depend_on_batch_size() {
        let dx = 15;
        let dg = 15;
        let count = |b| {
            let net = hier(dx, dg, b);
            net.block_model().unwrap().param_count()
        };
        assert_eq!(count(1), count(3));
        assert_eq!(count(1), count(8));
        assert_eq!(count(1), param_count(&StatNet::block_dims(dx, dg)));
    }

    #[test]
    fn first_layer_input_shrinks_by_batch_factor() {
        // x part of the first-layer weights: B·dx·200 flat vs dx·200 hierarchical
        let (dx, dg) = (15, 15);
        for b in [1, 2, 3, 4, 8] {
            let flat_x = b * dx * FLAT_WIDTHS[0];
            let block_x = dx * BLOCK_WIDTHS[0];
            assert_eq!(flat_x, b * block_x);
            let flat_in = StatNet::flat_dims(dx, dg, b)[0] * FLAT_WIDTHS[0];
            let block_in = StatNet::block_dims(dx, dg)[0] * BLOCK_WIDTHS[0];
            assert_eq!(flat_in - block_in, (b - 1) * dx * BLOCK_WIDTHS[0]);
        }
    }

    #[test]
    fn perturbing_block_changes_every_embedding() {
        let mut net = hier(2, 2, 3);
        let g = [0.2, 0.4];
        let xs = [[1.0, 0.5], [-0.3, 0.8], [0.0, -1.2]];
        let before: Vec<_> = xs.iter().map(|x| net.block_embed(x, &g).unwrap()).collect();
        let last = net.block_model().unwrap().num_layers() - 1;
        net.block_model_mut().unwrap().bias_mut(last)[0] += 0.1;
        for (x, b) in xs.iter().zip(&before) {
            assert_ne!(&net.block_embed(x, &g).unwrap(), b);
        }
    }
}
