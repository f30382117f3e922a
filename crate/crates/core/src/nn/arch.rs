//! Static layer graphs: what a model looks like, independent of its weights.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_batchnorm: bool,
    pub has_relu: bool,
    pub has_bias: bool,
}

impl ConvLayerSpec {
    pub fn new(out_channels: usize, in_channels: usize, kernel_size: usize) -> Self {
        ConvLayerSpec {
            out_channels,
            in_channels,
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
            has_batchnorm: false,
            has_relu: false,
            has_bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn batchnorm(mut self) -> Self {
        self.has_batchnorm = true;
        self
    }

    pub fn relu(mut self) -> Self {
        self.has_relu = true;
        self
    }

    pub fn bias(mut self) -> Self {
        self.has_bias = true;
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.kernel_size, self.stride, self.padding)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.out_channels >= 1 && self.in_channels >= 1 && self.kernel_size >= 1 && self.stride >= 1,
            || format!("invalid convolution spec {self:?}"),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Input,
    /// Convolution only; batch norm and ReLU flags on the layer spec are expanded
    /// into separate nodes by [`ArchBuilder::conv`].
    Conv(ConvLayerSpec),
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Add,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchNode {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
}

/// A layer graph in topological order. Node 0 is the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub input: [usize; 3],
    pub num_classes: usize,
    pub nodes: Vec<ArchNode>,
}

/// A weight layer viewed as an `out × (in_channels·block)` matrix whose
/// columns come in `in_channels` contiguous blocks. For convolutions the
/// block is the `k²` kernel window; for a dense layer fed by a flatten it is
/// the spatial size of the flattened maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightShape {
    pub out: usize,
    pub in_channels: usize,
    pub block: usize,
    pub geometry: ConvGeometry,
}

impl WeightShape {
    pub fn cols(&self) -> usize {
        self.in_channels * self.block
    }

    /// Number of principal kernels `min(N, M·k²)`.
    pub fn num_kernels(&self) -> usize {
        self.out.min(self.cols())
    }
}

impl Architecture {
    /// Output `(channels, height, width)` of every node, validating the graph.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut out: Vec<[usize; 3]> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                ensure(j < i, || format!("node {} reads from later node {j}", node.name))?;
            }
            let first = || -> Result<[usize; 3]> {
                node.inputs
                    .first()
                    .map(|&j| out[j])
                    .ok_or_else(|| Error::contract(format!("node {} has no input", node.name)))
            };
            let shape = match &node.kind {
                NodeKind::Input => {
                    ensure(i == 0, || "only node 0 may be the input".to_string())?;
                    self.input
                }
                NodeKind::Conv(spec) => {
                    spec.validate()?;
                    let [c, h, w] = first()?;
                    ensure(c == spec.in_channels, || {
                        format!("{}: expects {} channels, gets {c}", node.name, spec.in_channels)
                    })?;
                    let (oh, ow) = spec.geometry().output_dims(h, w)?;
                    [spec.out_channels, oh, ow]
                }
                NodeKind::BatchNorm { channels } => {
                    let s = first()?;
                    ensure(s[0] == *channels, || format!("{}: channel mismatch", node.name))?;
                    s
                }
                NodeKind::Relu => first()?,
                NodeKind::MaxPool { kernel, stride } => {
                    let [c, h, w] = first()?;
                    let (oh, ow) = ConvGeometry::new(*kernel, *stride, 0).output_dims(h, w)?;
                    [c, oh, ow]
                }
                NodeKind::GlobalAvgPool => {
                    let [c, _, _] = first()?;
                    [c, 1, 1]
                }
                NodeKind::Add => {
                    let s = first()?;
                    for &j in &node.inputs {
                        ensure(out[j] == s, || format!("{}: input shapes differ", node.name))?;
                    }
                    s
                }
                NodeKind::Flatten => {
                    let [c, h, w] = first()?;
                    [c * h * w, 1, 1]
                }
                NodeKind::Dense {
                    in_features,
                    out_features,
                } => {
                    let s = first()?;
                    ensure(s == [*in_features, 1, 1], || {
                        format!("{}: expects {in_features} features, gets {s:?}", node.name)
                    })?;
                    [*out_features, 1, 1]
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    /// Weight layout of a conv or dense node, `None` for other kinds.
    pub fn weight_shape(&self, node: usize) -> Option<WeightShape> {
        match &self.nodes[node].kind {
            NodeKind::Conv(spec) => Some(WeightShape {
                out: spec.out_channels,
                in_channels: spec.in_channels,
                block: spec.kernel_size * spec.kernel_size,
                geometry: spec.geometry(),
            }),
            NodeKind::Dense {
                in_features,
                out_features,
            } => {
                let (in_channels, block) = self.dense_blocks(node, *in_features);
                Some(WeightShape {
                    out: *out_features,
                    in_channels,
                    block,
                    geometry: ConvGeometry::new(1, 1, 0),
                })
            }
            _ => None,
        }
    }

    fn dense_blocks(&self, node: usize, in_features: usize) -> (usize, usize) {
        let src = self.nodes[node].inputs[0];
        if self.nodes[src].kind == NodeKind::Flatten {
            if let Ok(shapes) = self.shapes() {
                let [c, h, w] = shapes[self.nodes[src].inputs[0]];
                return (c, h * w);
            }
        }
        (in_features, 1)
    }

    /// Indices of conv and dense nodes.
    pub fn weight_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.weight_shape(i).is_some())
            .collect()
    }

    pub fn is_head(&self, node: usize) -> bool {
        matches!(self.nodes[node].kind, NodeKind::Dense { .. }) && node + 1 == self.nodes.len()
    }

    pub fn has_bias(&self, node: usize) -> bool {
        match &self.nodes[node].kind {
            NodeKind::Conv(spec) => spec.has_bias,
            NodeKind::Dense { .. } => true,
            _ => false,
        }
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }
}

/// Incremental graph construction.
pub struct ArchBuilder {
    arch: Architecture,
    shapes: Vec<[usize; 3]>,
}

impl ArchBuilder {
    pub fn new(name: &str, input: [usize; 3], num_classes: usize) -> Self {
        ArchBuilder {
            arch: Architecture {
                name: name.to_string(),
                input,
                num_classes,
                nodes: vec![ArchNode {
                    name: "input".into(),
                    kind: NodeKind::Input,
                    inputs: vec![],
                }],
            },
            shapes: vec![input],
        }
    }

    pub fn push(&mut self, name: &str, kind: NodeKind, inputs: Vec<usize>) -> Result<usize> {
        self.arch.nodes.push(ArchNode {
            name: name.to_string(),
            kind,
            inputs,
        });
        match self.arch.shapes() {
            Ok(s) => {
                self.shapes = s;
                Ok(self.arch.nodes.len() - 1)
            }
            Err(e) => {
                self.arch.nodes.pop();
                Err(e)
            }
        }
    }

    pub fn channels(&self, node: usize) -> usize {
        self.shapes[node][0]
    }

    /// Conv node followed by batch norm and ReLU as the layer spec flags say.
    pub fn conv(&mut self, name: &str, spec: ConvLayerSpec, input: usize) -> Result<usize> {
        let mut last = self.push(name, NodeKind::Conv(spec), vec![input])?;
        if spec.has_batchnorm {
            last = self.push(
                &format!("{name}.bn"),
                NodeKind::BatchNorm {
                    channels: spec.out_channels,
                },
                vec![last],
            )?;
        }
        if spec.has_relu {
            last = self.push(&format!("{name}.relu"), NodeKind::Relu, vec![last])?;
        }
        Ok(last)
    }

    /// Flatten followed by the classification layer.
    pub fn head(&mut self, input: usize) -> Result<usize> {
        let flat = self.push("flatten", NodeKind::Flatten, vec![input])?;
        let in_features = self.shapes[flat][0];
        let out_features = self.arch.num_classes;
        self.push(
            "classifier",
            NodeKind::Dense {
                in_features,
                out_features,
            },
            vec![flat],
        )
    }

    pub fn finish(self) -> Architecture {
        self.arch
    }
}

/// Architecture names accepted in configs.
pub const ARCHITECTURES: [&str; 3] = ["resnet18-cifar", "cnn-femnist", "synthetic"];

/// Builds a named architecture. ResNet-18 requires `3×32×32` inputs and
/// always uses batch norm.
pub fn by_name(name: &str, input: [usize; 3], num_classes: usize, batchnorm: bool) -> Result<Architecture> {
    match name {
        "resnet18-cifar" => {
            ensure(input == [3, 32, 32], || {
                format!("resnet18-cifar takes 3x32x32 inputs, got {input:?}")
            })?;
            Ok(resnet18_cifar(num_classes))
        }
        "cnn-femnist" => cnn(input, num_classes, batchnorm),
        "synthetic" => tiny_cnn(input, num_classes, batchnorm),
        other => Err(Error::config(
            "model",
            format!(
                "unknown architecture `{other}`, expected one of {}",
                ARCHITECTURES.join(", ")
            ),
        )),
    }
}

/// ResNet-18 adapted to 32×32 inputs: 3×3 stem, four stages of two basic
/// blocks, strided 1×1 projections where the width or resolution changes.
pub fn resnet18_cifar(num_classes: usize) -> Architecture {
    let mut b = ArchBuilder::new("resnet18-cifar", [3, 32, 32], num_classes);
    let build = |b: &mut ArchBuilder| -> Result<()> {
        let mut x = b.conv("conv1", ConvLayerSpec::new(64, 3, 3).batchnorm().relu(), 0)?;
        let mut block = 1;
        for (width, stride) in [(64, 1), (128, 2), (256, 2), (512, 2)] {
            for j in 0..2 {
                let s = if j == 0 { stride } else { 1 };
                let cin = b.channels(x);
                let name = format!("block{block}");
                let h = b.conv(
                    &format!("{name}-1"),
                    ConvLayerSpec::new(width, cin, 3).stride(s).batchnorm().relu(),
                    x,
                )?;
                let h = b.conv(&format!("{name}-2"), ConvLayerSpec::new(width, width, 3).batchnorm(), h)?;
                let shortcut = if s != 1 || cin != width {
                    b.conv(
                        &format!("{name}-down"),
                        ConvLayerSpec::new(width, cin, 1).stride(s).padding(0).batchnorm(),
                        x,
                    )?
                } else {
                    x
                };
                let sum = b.push(&format!("{name}.add"), NodeKind::Add, vec![h, shortcut])?;
                x = b.push(&format!("{name}.relu"), NodeKind::Relu, vec![sum])?;
                block += 1;
            }
        }
        let pooled = b.push("avgpool", NodeKind::GlobalAvgPool, vec![x])?;
        b.head(pooled)?;
        Ok(())
    };
    build(&mut b).expect("static architecture is consistent");
    b.finish()
}

/// Two 64-kernel conv layers (5×5 then 3×3), each followed by ReLU and 2×2
/// max pooling, then the classifier. Convolutions carry a bias unless batch
/// norm follows them.
pub fn cnn(input: [usize; 3], num_classes: usize, batchnorm: bool) -> Result<Architecture> {
    small_cnn("cnn-femnist", input, num_classes, 64, batchnorm)
}

/// Same layout as [`cnn`] with 16 kernels per layer, for quick runs.
pub fn tiny_cnn(input: [usize; 3], num_classes: usize, batchnorm: bool) -> Result<Architecture> {
    small_cnn("synthetic", input, num_classes, 16, batchnorm)
}

fn small_cnn(name: &str, input: [usize; 3], num_classes: usize, width: usize, batchnorm: bool) -> Result<Architecture> {
    let mut b = ArchBuilder::new(name, input, num_classes);
    let spec = |out, inp, k| {
        let s = ConvLayerSpec::new(out, inp, k).relu();
        if batchnorm {
            s.batchnorm()
        } else {
            s.bias()
        }
    };
    let x = b.conv("conv1", spec(width, input[0], 5), 0)?;
    let x = b.push("pool1", NodeKind::MaxPool { kernel: 2, stride: 2 }, vec![x])?;
    let x = b.conv("conv2", spec(width, width, 3), x)?;
    let x = b.push("pool2", NodeKind::MaxPool { kernel: 2, stride: 2 }, vec![x])?;
    b.head(x)?;
    Ok(b.finish())
}
