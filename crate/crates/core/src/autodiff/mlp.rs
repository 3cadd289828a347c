use super::graph::{Graph, NodeId};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully connected layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of dense layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Initializes an MLP. Weights are uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn mlp_init(sizes: &[usize], rng: &mut RngStream) -> Result<Mlp> {
    if sizes.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least two layer sizes, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArchitecture(format!(
            "layer sizes must be positive, got {sizes:?}"
        )));
    }
    let layers = sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            Dense {
                weight: Tensor::matrix(fan_in, fan_out, data).expect("sized above"),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    Ok(Mlp { layers })
}

impl Mlp {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs()];
        s.extend(self.layers.iter().map(Dense::outputs));
        s
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    /// Weight then bias, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Places the parameters on `graph` as leaves.
    pub fn bind(&self, graph: &mut Graph) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (graph.leaf(l.weight.clone()), graph.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Forward pass of a batch without recording gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = h.matmul(&layer.weight)?;
            let c = out.cols();
            let last = i + 1 == self.layers.len();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v += layer.bias.data()[k % c];
                if !last && *v < 0.0 {
                    *v = 0.0;
                }
            }
            h = out;
        }
        Ok(h)
    }
}

/// Graph handles of a bound [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(NodeId, NodeId)>,
}

impl MlpVars {
    /// Rebinds an MLP from leaves laid out as in [`Mlp::tensors`].
    pub fn from_ids(ids: &[NodeId]) -> Result<MlpVars> {
        if ids.is_empty() || !ids.len().is_multiple_of(2) {
            return Err(Error::contract(format!(
                "expected weight/bias pairs, got {} ids",
                ids.len()
            )));
        }
        Ok(MlpVars {
            layers: ids.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    pub fn forward(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = graph.matmul(h, w)?;
            h = graph.add_bias(z, b)?;
            if i + 1 < self.layers.len() {
                h = graph.relu(h);
            }
        }
        Ok(h)
    }

    /// Same order as [`Mlp::tensors`].
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}
