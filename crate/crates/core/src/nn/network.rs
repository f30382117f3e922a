use serde::{Deserialize, Serialize};

use super::layers::{self, shape_of};
use super::tensor::ActivationTensor;
use crate::error::{ensure, Error, Result};
use crate::linalg::{ConvGeometry, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    /// Original-space kernel matrix of a conv or dense layer.
    Weight,
    /// `v′` rows of a factorized layer, `r × M·k²`.
    FactorV,
    /// `u′` columns of a factorized layer, `r_out × r`.
    FactorU,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub role: ParamRole,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(role: ParamRole, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { role, value, grad }
    }

    pub fn vector(role: ParamRole, values: Vec<f64>) -> Self {
        let n = values.len();
        Param::new(role, Matrix::from_vec(1, n, values).expect("length matches"))
    }
}

/// Executable layer kinds. Dense layers run as 1×1 convolutions over the
/// flattened features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Input,
    /// Params: `[weight, bias?]`.
    Conv(ConvGeometry),
    /// Params: `[v′, u′, bias?]`.
    Factorized(ConvGeometry),
    /// Params: `[gamma, beta]`.
    BatchNorm,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Add,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
    pub params: Vec<Param>,
}

/// A concrete layer graph with parameters. Layer 0 is the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    version: u64,
}

#[derive(Clone, Debug)]
enum Cache {
    None,
    Shape((usize, usize, usize, usize)),
    Conv {
        cols: Vec<f64>,
        shape: (usize, usize, usize, usize),
    },
    Factorized {
        cols: Vec<f64>,
        z: Vec<f64>,
        shape: (usize, usize, usize, usize),
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool {
        arg: Vec<usize>,
        shape: (usize, usize, usize, usize),
    },
}

/// Forward intermediates for one backward pass. A tape is tied to the
/// parameter version it was recorded under.
#[derive(Clone, Debug)]
pub struct LayerTape {
    version: u64,
    outputs: Vec<ActivationTensor>,
    caches: Vec<Cache>,
}

impl LayerTape {
    pub fn output(&self) -> &ActivationTensor {
        self.outputs.last().expect("tape has at least the input")
    }

    /// Output of layer `i`.
    pub fn activation(&self, i: usize) -> &ActivationTensor {
        &self.outputs[i]
    }
}

fn bias_of(params: &[Param], idx: usize) -> Option<&[f64]> {
    params.get(idx).map(|p| p.value.data())
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        ensure(layers.first().map(|l| l.op) == Some(Op::Input), || {
            "layer 0 must be the input".to_string()
        })?;
        for (i, l) in layers.iter().enumerate() {
            for &j in &l.inputs {
                ensure(j < i, || format!("layer {} reads from later layer {j}", l.name))?;
            }
            let expected = match l.op {
                Op::Input | Op::Relu | Op::MaxPool { .. } | Op::GlobalAvgPool | Op::Add | Op::Flatten => 0..=0,
                Op::Conv(_) => 1..=2,
                Op::Factorized(_) => 2..=3,
                Op::BatchNorm => 2..=2,
            };
            ensure(expected.contains(&l.params.len()), || {
                format!("layer {} has {} parameter tensors", l.name, l.params.len())
            })?;
            ensure(l.op == Op::Input || !l.inputs.is_empty(), || {
                format!("layer {} has no input", l.name)
            })?;
        }
        Ok(Network { layers, version: 0 })
    }

    /// Incremented whenever parameters change; tapes from older versions are rejected.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks parameters as changed after direct edits through `layers`.
    pub fn mark_updated(&mut self) {
        self.version += 1;
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.version += 1;
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.value.data().len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            for p in &mut l.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    pub fn forward(&self, x: &ActivationTensor) -> Result<LayerTape> {
        self.run(x, true)
    }

    /// Forward pass without keeping backward intermediates.
    pub fn predict(&self, x: &ActivationTensor) -> Result<ActivationTensor> {
        let mut tape = self.run(x, false)?;
        Ok(tape.outputs.pop().expect("non-empty"))
    }

    fn run(&self, x: &ActivationTensor, record: bool) -> Result<LayerTape> {
        let n = self.layers.len();
        let mut outputs: Vec<ActivationTensor> = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for layer in &self.layers {
            let input = |k: usize| -> &ActivationTensor { &outputs[layer.inputs[k]] };
            let (y, cache) = match layer.op {
                Op::Input => (x.clone(), Cache::None),
                Op::Conv(geom) => {
                    let xin = input(0);
                    let (y, cols) = layers::conv_fwd(&layer.params[0].value, bias_of(&layer.params, 1), xin, geom)?;
                    (
                        y,
                        Cache::Conv {
                            cols,
                            shape: shape_of(xin),
                        },
                    )
                }
                Op::Factorized(geom) => {
                    let xin = input(0);
                    let (y, cols, z) = layers::factor_fwd(
                        &layer.params[1].value,
                        &layer.params[0].value,
                        bias_of(&layer.params, 2),
                        xin,
                        geom,
                    )?;
                    (
                        y,
                        Cache::Factorized {
                            cols,
                            z,
                            shape: shape_of(xin),
                        },
                    )
                }
                Op::BatchNorm => {
                    let (y, xhat, inv_std) =
                        layers::bn_fwd(layer.params[0].value.data(), layer.params[1].value.data(), input(0))?;
                    (y, Cache::BatchNorm { xhat, inv_std })
                }
                Op::Relu => (layers::relu_fwd(input(0)), Cache::None),
                Op::MaxPool { kernel, stride } => {
                    let (y, arg) = layers::maxpool_fwd(input(0), kernel, stride)?;
                    (
                        y,
                        Cache::MaxPool {
                            arg,
                            shape: shape_of(input(0)),
                        },
                    )
                }
                Op::GlobalAvgPool => (layers::avgpool_fwd(input(0)), Cache::Shape(shape_of(input(0)))),
                Op::Add => {
                    let ins: Vec<&ActivationTensor> = layer.inputs.iter().map(|&j| &outputs[j]).collect();
                    (layers::add_fwd(&ins)?, Cache::None)
                }
                Op::Flatten => (layers::flatten_fwd(input(0)), Cache::Shape(shape_of(input(0)))),
            };
            outputs.push(y);
            caches.push(if record { cache } else { Cache::None });
        }
        Ok(LayerTape {
            version: self.version,
            outputs,
            caches,
        })
    }

    /// Back-propagates `grad_out` (gradient of the loss with respect to the
    /// final output), accumulating into every parameter's `grad`. Returns the
    /// gradient with respect to the network input.
    pub fn backward(&mut self, tape: &LayerTape, grad_out: &ActivationTensor) -> Result<ActivationTensor> {
        ensure(tape.version == self.version, || {
            format!(
                "stale tape: recorded at parameter version {}, network is at {}",
                tape.version, self.version
            )
        })?;
        ensure(tape.caches.len() == self.layers.len(), || {
            "tape belongs to a different network".to_string()
        })?;
        ensure(grad_out.same_shape(tape.output()), || {
            "output gradient shape does not match the forward output".to_string()
        })?;
        let n = self.layers.len();
        let mut grads: Vec<Option<ActivationTensor>> = vec![None; n];
        grads[n - 1] = Some(grad_out.clone());
        for i in (1..n).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let layer = &mut self.layers[i];
            let mut dxs: Vec<ActivationTensor> = Vec::with_capacity(layer.inputs.len());
            match (&layer.op, &tape.caches[i]) {
                (Op::Conv(geom), Cache::Conv { cols, shape }) => {
                    let (w, rest) = layer.params.split_first_mut().expect("validated");
                    let db = rest.first_mut().map(|b| b.grad.data_mut());
                    dxs.push(layers::conv_bwd(
                        &w.value,
                        cols,
                        *shape,
                        *geom,
                        &dy,
                        w.grad.data_mut(),
                        db,
                    ));
                }
                (Op::Factorized(geom), Cache::Factorized { cols, z, shape }) => {
                    let (vp, rest) = layer.params.split_first_mut().expect("validated");
                    let (up, rest) = rest.split_first_mut().expect("validated");
                    let db = rest.first_mut().map(|b| b.grad.data_mut());
                    dxs.push(layers::factor_bwd(
                        &up.value,
                        &vp.value,
                        cols,
                        z,
                        *shape,
                        *geom,
                        &dy,
                        up.grad.data_mut(),
                        vp.grad.data_mut(),
                        db,
                    ));
                }
                (Op::BatchNorm, Cache::BatchNorm { xhat, inv_std }) => {
                    let (g, rest) = layer.params.split_first_mut().expect("validated");
                    let b = &mut rest[0];
                    dxs.push(layers::bn_bwd(
                        g.value.data(),
                        xhat,
                        inv_std,
                        &dy,
                        g.grad.data_mut(),
                        b.grad.data_mut(),
                    ));
                }
                (Op::Relu, _) => dxs.push(layers::relu_bwd(&tape.outputs[i], &dy)),
                (Op::MaxPool { .. }, Cache::MaxPool { arg, shape }) => dxs.push(layers::maxpool_bwd(arg, *shape, &dy)),
                (Op::GlobalAvgPool, Cache::Shape(shape)) => dxs.push(layers::avgpool_bwd(*shape, &dy)),
                (Op::Add, _) => {
                    for &j in &layer.inputs {
                        dxs.push(layers::add_bwd(tape.outputs[j].channels, &dy));
                    }
                }
                (Op::Flatten, Cache::Shape(shape)) => dxs.push(layers::flatten_bwd(*shape, &dy)),
                _ => {
                    return Err(Error::contract(format!(
                        "tape for layer {} holds no backward intermediates",
                        layer.name
                    )))
                }
            }
            let inputs = self.layers[i].inputs.clone();
            for (j, dx) in inputs.into_iter().zip(dxs) {
                match &mut grads[j] {
                    Some(acc) => acc.data.iter_mut().zip(&dx.data).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(dx),
                }
            }
        }
        Ok(grads[0].take().unwrap_or_else(|| {
            let x = &tape.outputs[0];
            ActivationTensor::zeros(x.batch, x.channels, x.height, x.width)
        }))
    }

    /// Forward, softmax cross-entropy, backward. Gradients accumulate; call
    /// [`Network::zero_grad`] first for a fresh step. Returns `(loss, correct)`.
    pub fn loss_and_grad(&mut self, x: &ActivationTensor, labels: &[usize]) -> Result<(f64, usize)> {
        let tape = self.forward(x)?;
        let (loss, grad, correct) = layers::softmax_cross_entropy(tape.output(), labels)?;
        self.backward(&tape, &grad)?;
        Ok((loss, correct))
    }

    /// Mean loss and correct count without gradients.
    pub fn evaluate_batch(&self, x: &ActivationTensor, labels: &[usize]) -> Result<(f64, usize)> {
        let logits = self.predict(x)?;
        let (loss, _, correct) = layers::softmax_cross_entropy(&logits, labels)?;
        Ok((loss, correct))
    }
}
