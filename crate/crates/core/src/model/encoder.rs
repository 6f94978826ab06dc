use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Encoder architecture. An MLP with `hidden_layers` tanh hidden layers, or
/// the parameter-free identity map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderArch {
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        embed_dim: usize,
    },
    Identity {
        dim: usize,
    },
}

impl EncoderArch {
    pub fn mlp(input_dim: usize, hidden_dim: usize, hidden_layers: usize, embed_dim: usize) -> Self {
        EncoderArch::Mlp { input_dim, hidden_dim, hidden_layers, embed_dim }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            EncoderArch::Mlp { input_dim, .. } => input_dim,
            EncoderArch::Identity { dim } => dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match *self {
            EncoderArch::Mlp { embed_dim, .. } => embed_dim,
            EncoderArch::Identity { dim } => dim,
        }
    }

    /// `(out, in)` for each linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match *self {
            EncoderArch::Identity { .. } => Vec::new(),
            EncoderArch::Mlp { input_dim, hidden_dim, hidden_layers, embed_dim } => {
                let mut dims = vec![input_dim];
                dims.extend(std::iter::repeat_n(hidden_dim, hidden_layers));
                dims.push(embed_dim);
                dims.windows(2).map(|w| (w[1], w[0])).collect()
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            EncoderArch::Mlp { input_dim, hidden_dim, hidden_layers, embed_dim } => {
                input_dim > 0 && embed_dim > 0 && (hidden_layers == 0 || hidden_dim > 0)
            }
            EncoderArch::Identity { dim } => dim > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate encoder architecture {self:?}")))
        }
    }
}

/// Fully connected layer computing `x · weightᵀ + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// The image encoder `f(·)`: linear layers with tanh between them and no
/// activation on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    arch: EncoderArch,
    layers: Vec<Linear>,
}

impl ImageEncoder {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init(arch: &EncoderArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let bound = 1.0 / (inp as f64).sqrt();
                let w = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
                let b = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
                Linear {
                    weight: Tensor::new(vec![out, inp], w).expect("sized"),
                    bias: Tensor::vector(b),
                }
            })
            .collect();
        Ok(Self { arch: *arch, layers })
    }

    /// All-zero parameters; the identity architecture has none.
    pub fn zeros(arch: EncoderArch) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| Linear { weight: Tensor::zeros(&[out, inp]), bias: Tensor::zeros(&[out]) })
            .collect();
        Ok(Self { arch, layers })
    }

    pub fn identity(dim: usize) -> Self {
        Self { arch: EncoderArch::Identity { dim }, layers: Vec::new() }
    }

    /// Builds an encoder from explicit layers, checking them against `arch`.
    pub fn from_layers(arch: EncoderArch, layers: Vec<Linear>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Dimension(format!(
                "architecture has {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (k, ((out, inp), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weight.shape() != [*out, *inp] || l.bias.shape() != [*out] {
                return Err(Error::Dimension(format!(
                    "layer {k}: weight {:?} / bias {:?}, expected [{out}, {inp}] / [{out}]",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> EncoderArch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    /// Parameter tensors in layer order: weight, bias, weight, bias, ...
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records the parameters on `graph`, as leaves when `trainable`,
    /// otherwise as constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundEncoder<'g> {
        let put = |t: &Tensor| if trainable { graph.leaf(t.clone()) } else { graph.constant(t.clone()) };
        BoundEncoder {
            input_dim: self.input_dim(),
            layers: self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect(),
        }
    }

    /// Embeds a batch without recording gradients.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        Ok(bound.encode(g.constant(x.clone()))?.value())
    }
}

/// Encoder parameters recorded on a graph.
pub struct BoundEncoder<'g> {
    input_dim: usize,
    layers: Vec<(Var<'g>, Var<'g>)>,
}

impl<'g> BoundEncoder<'g> {
    pub fn encode(&self, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Dimension(format!(
                "encoder expects [B × {}] input, got {:?}",
                self.input_dim, shape
            )));
        }
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (k, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul_t(*w)?.add_row(*b)?;
            if k < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Parameter handles in the order of [`ImageEncoder::params`].
    pub fn params(&self) -> Vec<Var<'g>> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}
