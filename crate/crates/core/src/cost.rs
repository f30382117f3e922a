//! Static cost model, effective-rank traces, and kernel-selection profiles.
//!
//! Parameters count every stored trainable value. MACs count one unit per
//! multiply-accumulate of the conv/dense forward pass. Activation memory
//! counts values written between layers: the network input, conv and dense
//! outputs (including the `r`-channel intermediate of a factorized layer),
//! ReLU and pooling outputs. Batch norm and residual additions run in place
//! and flatten is a view, so they add nothing.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::decomposition::effective_rank;
use crate::error::Result;
use crate::federation::RoundRecord;
use crate::model::ServerModel;
use crate::nn::{Architecture, NodeKind};
use crate::sampler::{layer_budget, propagate_widths, Method};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    /// Per batch.
    pub macs: u64,
    /// Values held in the forward pass, per batch.
    pub activation_mem: u64,
}

impl Add for CostReport {
    type Output = CostReport;
    fn add(self, o: CostReport) -> CostReport {
        CostReport {
            params: self.params + o.params,
            macs: self.macs + o.macs,
            activation_mem: self.activation_mem + o.activation_mem,
        }
    }
}

impl CostReport {
    /// Percentages of `full`, in the order params, MACs, memory.
    pub fn ratios(&self, full: &CostReport) -> [f64; 3] {
        let pct = |a: u64, b: u64| 100.0 * a as f64 / b as f64;
        [
            pct(self.params, full.params),
            pct(self.macs, full.macs),
            pct(self.activation_mem, full.activation_mem),
        ]
    }
}

/// How each weight layer is sent: `(r, out_width)`, `r = None` for
/// original space.
fn layer_costs_with(
    arch: &Architecture,
    batch: usize,
    budget: impl Fn(usize) -> (Option<usize>, usize),
) -> Result<Vec<(String, CostReport)>> {
    let shapes = arch.shapes()?;
    let widths = propagate_widths(arch, |i| budget(i).1);
    let b = batch as u64;
    let mut out = Vec::with_capacity(arch.nodes.len());
    for (i, node) in arch.nodes.iter().enumerate() {
        let [_, h, w] = shapes[i];
        let hw = (h * w) as u64;
        let width = widths[i] as u64;
        let mut c = CostReport::default();
        match &node.kind {
            NodeKind::Input => c.activation_mem = width * hw * b,
            NodeKind::Conv(_) | NodeKind::Dense { .. } => {
                let ws = arch.weight_shape(i).expect("weight node");
                let win = widths[node.inputs[0]] as u64 * ws.block as u64;
                let (r, n) = budget(i);
                let n = n as u64;
                match r {
                    Some(r) => {
                        let r = r as u64;
                        c.params = r * (n + win);
                        c.macs = (r * win + n * r) * hw * b;
                        c.activation_mem = (r + n) * hw * b;
                    }
                    None => {
                        c.params = n * win;
                        c.macs = n * win * hw * b;
                        c.activation_mem = n * hw * b;
                    }
                }
                if arch.has_bias(i) {
                    c.params += n;
                }
            }
            NodeKind::BatchNorm { .. } => c.params = 2 * width,
            NodeKind::Relu | NodeKind::MaxPool { .. } | NodeKind::GlobalAvgPool => c.activation_mem = width * hw * b,
            NodeKind::Add | NodeKind::Flatten => {}
        }
        out.push((node.name.clone(), c));
    }
    Ok(out)
}

/// Per-node cost of a client sub-model. The classifier stays in original
/// space unless `factorize_head`.
pub fn layer_costs(
    arch: &Architecture,
    method: Method,
    keep_ratio: f64,
    out_factor: f64,
    batch: usize,
    factorize_head: bool,
) -> Result<Vec<(String, CostReport)>> {
    layer_costs_with(arch, batch, |i| {
        let ws = arch.weight_shape(i).expect("weight node");
        let head = arch.is_head(i);
        layer_budget(&ws, head, factorize_head || !head, method, keep_ratio, out_factor)
    })
}

/// Cost of a client sub-model (classifier in original space).
pub fn cost_of(
    arch: &Architecture,
    method: Method,
    keep_ratio: f64,
    out_factor: f64,
    batch: usize,
) -> Result<CostReport> {
    Ok(layer_costs(arch, method, keep_ratio, out_factor, batch, false)?
        .into_iter()
        .fold(CostReport::default(), |a, (_, c)| a + c))
}

/// Cost of the unfactorized model, the reference for sub-model ratios.
pub fn original_cost(arch: &Architecture, batch: usize) -> Result<CostReport> {
    let costs = layer_costs_with(arch, batch, |i| (None, arch.weight_shape(i).expect("weight node").out))?;
    Ok(costs.into_iter().fold(CostReport::default(), |a, (_, c)| a + c))
}

/// Mean number of holders per kernel of layer `node_name` over `records`,
/// indexed by σ-sorted kernel position. `None` if the layer never appears.
pub fn selection_profile(records: &[RoundRecord], node_name: &str) -> Option<Vec<f64>> {
    let rows: Vec<&Vec<usize>> = records.iter().filter_map(|r| r.kernel_counts.get(node_name)).collect();
    let first = rows.first()?;
    let mut mean = vec![0.0; first.len()];
    for row in &rows {
        for (m, &c) in mean.iter_mut().zip(row.iter()) {
            *m += c as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    Some(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub node: String,
    pub kernels: usize,
    pub effective_rank: f64,
}

/// Effective rank of every factorized layer's current spectrum.
pub fn rank_trace(server: &ServerModel) -> Result<Vec<LayerRank>> {
    server
        .factorized_nodes()
        .into_iter()
        .filter_map(|i| server.kernels[i].as_ref().map(|k| (i, k)))
        .map(|(i, pks)| {
            Ok(LayerRank {
                node: server.arch.nodes[i].name.clone(),
                kernels: pks.num_kernels(),
                effective_rank: effective_rank(&pks.sigma)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{cnn, resnet18_cifar, ArchBuilder, ConvLayerSpec};
    use crate::rng::{RandomStream, StreamKey};
    use crate::sampler::sample_kernels;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn single_conv_closed_form() {
        // 2 output channels, 2 inputs, 2×2 kernel, 3×3 input, no padding:
        // 2·2·4 weights, each used at 2·2 output positions
        let mut b = ArchBuilder::new("one", [2, 3, 3], 2);
        b.push("conv", NodeKind::Conv(ConvLayerSpec::new(2, 2, 2).padding(0)), vec![0])
            .unwrap();
        let arch = b.finish();
        let c = original_cost(&arch, 3).unwrap();
        assert_eq!(c.params, 16);
        assert_eq!(c.macs, 16 * 4 * 3);
        assert_eq!(c.activation_mem, (18 + 8) * 3);
    }

    #[test]
    fn resnet_full_size() {
        let arch = resnet18_cifar(10);
        let full = original_cost(&arch, 1).unwrap();
        assert_eq!(full.params, 11_173_962);
        assert_eq!(full.macs, 555_422_720);
    }

    #[test]
    fn resnet_ratios() {
        let arch = resnet18_cifar(10);
        let full = original_cost(&arch, 32).unwrap();
        let expect = [
            (0.8, [72.6, 72.0, 117.1]),
            (0.6, [40.8, 40.5, 87.7]),
            (0.4, [18.1, 18.2, 59.2]),
            (0.2, [4.5, 4.6, 29.8]),
        ];
        for (keep, e) in expect {
            let r = cost_of(&arch, Method::Prism, keep, 1.0, 32).unwrap().ratios(&full);
            for (a, b) in r.iter().zip(e) {
                assert!((a - b).abs() < 0.1, "{keep}: {r:?}");
            }
            let orth = cost_of(&arch, Method::OrthDrop, keep, 1.0, 32).unwrap();
            assert_eq!(orth, cost_of(&arch, Method::Prism, keep, 1.0, 32).unwrap());
        }
    }

    #[test]
    fn costs_are_additive() {
        let arch = resnet18_cifar(10);
        let per = layer_costs(&arch, Method::Prism, 0.4, 1.0, 8, false).unwrap();
        let total = per.iter().fold(CostReport::default(), |a, (_, c)| a + *c);
        assert_eq!(total, cost_of(&arch, Method::Prism, 0.4, 1.0, 8).unwrap());
    }

    proptest! {
        #[test]
        fn monotone_in_keep(a in 0.05f64..1.0, b in 0.05f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let arch = cnn([1, 28, 28], 10, false).unwrap();
            for m in [Method::Prism, Method::PrismO2, Method::OrigDrop] {
                let x = cost_of(&arch, m, lo, m.out_factor(), 1).unwrap();
                let y = cost_of(&arch, m, hi, m.out_factor(), 1).unwrap();
                prop_assert!(x.params <= y.params && x.macs <= y.macs);
            }
        }
    }

    fn record(counts: Vec<usize>) -> RoundRecord {
        RoundRecord {
            kernel_counts: BTreeMap::from([("conv".to_string(), counts)]),
            ..RoundRecord::default()
        }
    }

    #[test]
    fn profiles() {
        let full = vec![record(vec![5; 8]), record(vec![5; 8])];
        assert_eq!(selection_profile(&full, "conv").unwrap(), vec![5.0; 8]);
        assert!(selection_profile(&full, "other").is_none());
        let step = vec![record(vec![5, 5, 0, 0])];
        assert_eq!(selection_profile(&step, "conv").unwrap(), vec![5.0, 5.0, 0.0, 0.0]);

        // PriSM with κ = 2.5 on a decaying spectrum
        let sigma: Vec<f64> = (0..16).map(|i| 0.85f64.powi(i)).collect();
        let mut records = Vec::new();
        for round in 0..1000u64 {
            let mut counts = vec![0; 16];
            for client in 0..5 {
                let mut s = RandomStream::new(1, StreamKey::new(round, client, 0));
                for i in sample_kernels(&sigma, 2.5, 4, &mut s).unwrap() {
                    counts[i] += 1;
                }
            }
            records.push(record(counts));
        }
        let p = selection_profile(&records, "conv").unwrap();
        // each count is a sum of 5000 Bernoulli draws; allow 3 standard errors
        let se = |m: f64| 3.0 * (m * (1.0 - m / 5.0) / 1000.0).sqrt();
        assert!(p.windows(2).all(|w| w[1] <= w[0] + se(w[0]) + se(w[1])), "{p:?}");
        assert!((p.iter().sum::<f64>() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rank_traces() {
        let arch = cnn([1, 28, 28], 10, false).unwrap();
        let mut server = ServerModel::init(arch, 3, true).unwrap();
        for l in rank_trace(&server).unwrap() {
            assert!(l.effective_rank >= 0.7 * l.kernels as f64, "{l:?}");
        }
        let node = server.arch.find("conv2").unwrap();
        let w = server.weight(node).clone();
        let planted = Matrix::from_fn(w.rows(), w.cols(), |i, j| (i as f64 + 1.0) * ((j % 7) as f64 - 3.0));
        server.set_weight(node, planted).unwrap();
        server.refresh().unwrap();
        let trace = rank_trace(&server).unwrap();
        let l = trace.iter().find(|l| l.node == "conv2").unwrap();
        assert!((l.effective_rank - 1.0).abs() < 1e-6);

        // rescaling every weight leaves the trace unchanged
        let before = trace;
        for node in server.factorized_nodes() {
            let mut w = server.weight(node).clone();
            w.scale(3.5);
            server.set_weight(node, w).unwrap();
        }
        server.refresh().unwrap();
        for (a, b) in rank_trace(&server).unwrap().iter().zip(&before) {
            assert!((a.effective_rank - b.effective_rank).abs() < 1e-9);
        }
    }
}
