use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

/// Stack of affine layers with an activation between consecutive layers.
/// The last layer is affine only. An empty stack is the identity map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
    dims: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    /// Registers weights `{name}.{i}.weight` / `{name}.{i}.bias` for the
    /// layer chain `dims[0] → dims[1] → … → dims[last]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::validation("mlp dims", "at least the input width is required"));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight =
                store.register_uniform(format!("{name}.{i}.weight"), group, fan_in, fan_out, rng)?;
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            let bias =
                store.register_uniform_with(format!("{name}.{i}.bias"), group, 1, fan_out, bound, rng)?;
            layers.push(Linear { weight, bias });
        }
        Ok(Self {
            layers,
            dims: dims.to_vec(),
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("nonempty dims")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(weight, bias)` ids of layer `i`.
    pub fn layer(&self, i: usize) -> (ParamId, ParamId) {
        (self.layers[i].weight, self.layers[i].bias)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let width = g.shape(x).1;
        if width != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                lhs: g.shape(x),
                rhs: (self.input_dim(), self.output_dim()),
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if i + 1 < self.layers.len() && self.activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
