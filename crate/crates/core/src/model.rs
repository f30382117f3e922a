//! Server-side model state: original-space parameters per layer plus the
//! current principal-kernel decomposition of every factorizable layer.

use crate::decomposition::{decompose_matrix, PrincipalKernelSet};
use crate::error::{ensure, Result};
use crate::linalg::{ConvGeometry, Matrix};
use crate::nn::{Architecture, Layer, Network, NodeKind, Op, Param, ParamRole, WeightShape};
use crate::rng::{domain, RandomStream, StreamKey};

#[derive(Clone, Debug, PartialEq)]
pub struct ServerModel {
    pub arch: Architecture,
    /// Whether the classification layer is factorized like the conv layers.
    pub factorize_head: bool,
    /// Per node: `[weight N×(M·k²), bias?]` for conv/dense, `[gamma, beta]`
    /// (as `1×C`) for batch norm, empty otherwise.
    pub params: Vec<Vec<Matrix>>,
    /// Current decomposition of each factorized node.
    pub kernels: Vec<Option<PrincipalKernelSet>>,
    /// Completed rounds.
    pub round: u64,
}

impl ServerModel {
    /// Kaiming-normal weights (`std = √(2/fan_in)`), zero biases, unit
    /// batch-norm scale. Layer `i` draws from stream `(0, INIT, i)`.
    pub fn init(arch: Architecture, seed: u64, factorize_head: bool) -> Result<Self> {
        arch.shapes()?;
        let mut params = Vec::with_capacity(arch.nodes.len());
        for (i, node) in arch.nodes.iter().enumerate() {
            let p = match (&node.kind, arch.weight_shape(i)) {
                (_, Some(ws)) => {
                    let mut s = RandomStream::new(seed, StreamKey::new(0, domain::INIT, i as u64));
                    let std = (2.0 / ws.cols() as f64).sqrt();
                    let w = Matrix::from_fn(ws.out, ws.cols(), |_, _| std * s.normal());
                    let mut p = vec![w];
                    if arch.has_bias(i) {
                        p.push(Matrix::zeros(1, ws.out));
                    }
                    p
                }
                (NodeKind::BatchNorm { channels }, None) => {
                    vec![Matrix::from_fn(1, *channels, |_, _| 1.0), Matrix::zeros(1, *channels)]
                }
                _ => vec![],
            };
            params.push(p);
        }
        let mut model = ServerModel {
            kernels: vec![None; arch.nodes.len()],
            arch,
            factorize_head,
            params,
            round: 0,
        };
        model.refresh()?;
        Ok(model)
    }

    pub fn is_factorized(&self, node: usize) -> bool {
        self.arch.weight_shape(node).is_some() && (self.factorize_head || !self.arch.is_head(node))
    }

    /// Factorized nodes in graph order.
    pub fn factorized_nodes(&self) -> Vec<usize> {
        (0..self.arch.nodes.len()).filter(|&i| self.is_factorized(i)).collect()
    }

    pub fn weight(&self, node: usize) -> &Matrix {
        &self.params[node][0]
    }

    pub fn weight_shape(&self, node: usize) -> WeightShape {
        self.arch.weight_shape(node).expect("weight node")
    }

    /// Re-decomposes every factorized layer from its current weights.
    pub fn refresh(&mut self) -> Result<()> {
        for node in self.factorized_nodes() {
            let ws = self.weight_shape(node);
            let k = match &self.arch.nodes[node].kind {
                NodeKind::Conv(spec) => spec.kernel_size,
                _ => 1,
            };
            let in_ch = ws.cols() / (k * k);
            self.kernels[node] = Some(decompose_matrix(&self.params[node][0], in_ch, k)?);
        }
        Ok(())
    }

    /// Overwrites a layer's weights (for planted-weight experiments); call
    /// [`ServerModel::refresh`] afterwards.
    pub fn set_weight(&mut self, node: usize, w: Matrix) -> Result<()> {
        let cur = self.weight(node);
        ensure(cur.shape() == w.shape(), || {
            format!("weight shape {:?} does not match {:?}", w.shape(), cur.shape())
        })?;
        self.params[node][0] = w;
        Ok(())
    }

    /// The full model in original space.
    pub fn full_network(&self) -> Result<Network> {
        compile(&self.arch, |i| {
            let params = &self.params[i];
            let roles = param_roles(&self.arch.nodes[i].kind, params.len());
            let ps = params
                .iter()
                .zip(roles)
                .map(|(m, r)| Param::new(r, m.clone()))
                .collect();
            Ok((None, ps))
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(|m| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|m| m.is_finite())
    }
}

pub(crate) fn param_roles(kind: &NodeKind, n: usize) -> Vec<ParamRole> {
    let roles = match kind {
        NodeKind::Conv(_) | NodeKind::Dense { .. } => vec![ParamRole::Weight, ParamRole::Bias],
        NodeKind::BatchNorm { .. } => vec![ParamRole::Gamma, ParamRole::Beta],
        _ => vec![],
    };
    roles.into_iter().take(n).collect()
}

/// Lowers an architecture to an executable network. `node_params` returns,
/// for each node, an optional op override (used for factorized layers) and
/// the parameter tensors.
pub(crate) fn compile(
    arch: &Architecture,
    mut node_params: impl FnMut(usize) -> Result<(Option<Op>, Vec<Param>)>,
) -> Result<Network> {
    let mut layers = Vec::with_capacity(arch.nodes.len());
    for (i, node) in arch.nodes.iter().enumerate() {
        let (override_op, params) = node_params(i)?;
        let op = override_op.unwrap_or(match &node.kind {
            NodeKind::Input => Op::Input,
            NodeKind::Conv(spec) => Op::Conv(spec.geometry()),
            NodeKind::Dense { .. } => Op::Conv(ConvGeometry::new(1, 1, 0)),
            NodeKind::BatchNorm { .. } => Op::BatchNorm,
            NodeKind::Relu => Op::Relu,
            NodeKind::MaxPool { kernel, stride } => Op::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            NodeKind::GlobalAvgPool => Op::GlobalAvgPool,
            NodeKind::Add => Op::Add,
            NodeKind::Flatten => Op::Flatten,
        });
        layers.push(Layer {
            name: node.name.clone(),
            op,
            inputs: node.inputs.clone(),
            params,
        });
    }
    Network::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cnn, ActivationTensor};

    #[test]
    fn init_is_deterministic_and_decomposed() {
        let arch = cnn([1, 12, 12], 10, false).unwrap();
        let a = ServerModel::init(arch.clone(), 7, false).unwrap();
        let b = ServerModel::init(arch, 7, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.factorized_nodes().len(), 2);
        for node in a.factorized_nodes() {
            let pks = a.kernels[node].as_ref().unwrap();
            let diff = pks.weight_matrix().max_abs_diff(a.weight(node));
            assert!(diff < 1e-10, "{diff:e}");
        }
    }

    #[test]
    fn full_network_runs() {
        let arch = cnn([1, 12, 12], 10, true).unwrap();
        let m = ServerModel::init(arch, 1, true).unwrap();
        assert_eq!(m.factorized_nodes().len(), 3);
        let net = m.full_network().unwrap();
        let x = ActivationTensor::zeros(8, 1, 12, 12);
        let y = net.predict(&x).unwrap();
        assert_eq!((y.channels, y.batch), (10, 8));
    }
}
