use super::graph::{Graph, NodeId};
use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected network; every layer but the last is followed by the
/// activation. Parameters are named `{prefix}.w{i}` and `{prefix}.b{i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize], activation: Activation) -> Self {
        assert!(
            dims.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        Self {
            prefix: prefix.into(),
            dims: dims.to_vec(),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn init(&self, store: &mut ParamStore) {
        for (i, w) in self.dims.windows(2).enumerate() {
            store.init_glorot(&format!("{}.w{i}", self.prefix), &[w[0], w[1]], w[0], w[1]);
            store.init_zeros(&format!("{}.b{i}", self.prefix), &[w[1]]);
        }
    }

    pub fn build(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let w = g.param(&format!("{}.w{i}", self.prefix));
            let b = g.param(&format!("{}.b{i}", self.prefix));
            h = g.affine(h, w, Some(b));
            if i + 1 < layers {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Relu => g.relu(h),
                };
            }
        }
        h
    }
}
