//! Server-side aggregation of client sub-models.
//!
//! Factorized layers are averaged per principal kernel over the clients that
//! held it: each `u′` row and `v′` column over the clients that trained that
//! position. Rows a holder never computed come from its `û` cache, and
//! kernels nobody held keep the server's merged factors. Everything else
//! (biases, batch-norm affine, layers sent in original space) is averaged
//! per element over the clients whose prefix block covers it.

use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::model::ServerModel;
use crate::nn::{Network, Op};
use crate::sampler::{LayerSelection, SubModelSpec};
use crate::trainer::ClientUpdate;

/// Counts and averaged factors of one factorized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAggregate {
    pub node: usize,
    /// `C_i`: clients that held kernel `i`.
    pub kernel_counts: Vec<usize>,
    /// Clients that trained each `(row, kernel)` entry of `u`.
    pub u_counts: Vec<usize>,
    /// Clients that trained each `(kernel, column)` entry of `v`.
    pub v_counts: Vec<usize>,
    /// `N × p`, `√σ`-merged.
    pub u_bar: Matrix,
    /// `p × M·k²`, `√σ`-merged.
    pub v_bar: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregationState {
    pub layers: Vec<LayerAggregate>,
    pub num_clients: usize,
}

impl AggregationState {
    pub fn layer(&self, node: usize) -> Option<&LayerAggregate> {
        self.layers.iter().find(|l| l.node == node)
    }
}

/// Running per-element mean over prefix blocks.
struct PrefixMean {
    sum: Vec<f64>,
    count: Vec<usize>,
    cols: usize,
}

impl PrefixMean {
    fn new(rows: usize, cols: usize) -> Self {
        PrefixMean {
            sum: vec![0.0; rows * cols],
            count: vec![0; rows * cols],
            cols,
        }
    }

    fn add(&mut self, block: &Matrix) {
        for r in 0..block.rows() {
            for (c, v) in block.row(r).iter().enumerate() {
                self.sum[r * self.cols + c] += v;
                self.count[r * self.cols + c] += 1;
            }
        }
    }

    fn apply(&self, target: &mut Matrix) {
        for ((t, s), &n) in target.data_mut().iter_mut().zip(&self.sum).zip(&self.count) {
            if n > 0 {
                *t = s / n as f64;
            }
        }
    }
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, what: &str, client: usize) -> Result<()> {
    ensure(m.shape() == (rows, cols), || {
        format!(
            "client {client}: {what} is {:?}, dispatched as {:?}",
            m.shape(),
            (rows, cols)
        )
    })
}

/// Pairs each update with its dispatch record, ordered by client id so the
/// result does not depend on arrival order.
fn pair<'a>(
    dispatches: &'a [SubModelSpec],
    updates: &'a [ClientUpdate],
) -> Result<Vec<(&'a SubModelSpec, &'a Network)>> {
    let mut pairs = Vec::with_capacity(updates.len());
    for u in updates {
        let spec = dispatches
            .iter()
            .find(|d| d.client == u.client)
            .ok_or_else(|| Error::contract(format!("update from client {} was never dispatched", u.client)))?;
        pairs.push((spec, &u.network));
    }
    pairs.sort_by_key(|(s, _)| s.client);
    ensure(pairs.windows(2).all(|w| w[0].0.client != w[1].0.client), || {
        "duplicate update from one client".to_string()
    })?;
    Ok(pairs)
}

/// Folds this round's updates into `server`. Decompositions are left stale;
/// call [`refresh`] afterwards.
pub fn aggregate(
    server: &mut ServerModel,
    dispatches: &[SubModelSpec],
    updates: &[ClientUpdate],
) -> Result<AggregationState> {
    let pairs = pair(dispatches, updates)?;
    let mut state = AggregationState {
        layers: Vec::new(),
        num_clients: pairs.len(),
    };
    if pairs.is_empty() {
        return Ok(state);
    }
    let arch = server.arch.clone();
    for (node, _) in arch.nodes.iter().enumerate() {
        for (spec, net) in &pairs {
            ensure(net.layers.len() == arch.nodes.len(), || {
                format!("client {} returned {} layers", spec.client, net.layers.len())
            })?;
            ensure(spec.widths.len() == arch.nodes.len(), || {
                format!("dispatch record for client {} has the wrong layer count", spec.client)
            })?;
        }
        if arch.weight_shape(node).is_some() {
            let sels: Vec<&LayerSelection> = pairs
                .iter()
                .map(|(s, _)| {
                    s.layer(node)
                        .ok_or_else(|| Error::contract(format!("client {} has no record of node {node}", s.client)))
                })
                .collect::<Result<_>>()?;
            let factorized = sels.iter().filter(|s| s.factorized).count();
            ensure(factorized == 0 || factorized == sels.len(), || {
                format!("node {node} was sent factorized to some clients only")
            })?;
            if factorized > 0 {
                state.layers.push(aggregate_factors(server, node, &sels, &pairs)?);
                if server.params[node].len() > 1 {
                    let mut bias = PrefixMean::new(1, server.params[node][1].cols());
                    for ((spec, net), sel) in pairs.iter().zip(&sels) {
                        let b = &net.layers[node]
                            .params
                            .get(2)
                            .ok_or_else(|| {
                                Error::contract(format!("client {}: missing bias at node {node}", spec.client))
                            })?
                            .value;
                        check_shape(b, 1, sel.out_width, "bias", spec.client)?;
                        bias.add(b);
                    }
                    bias.apply(&mut server.params[node][1]);
                }
                continue;
            }
            let block = server.weight_shape(node).block;
            for k in 0..server.params[node].len() {
                let target = &server.params[node][k];
                let mut mean = PrefixMean::new(target.rows(), target.cols());
                for ((spec, net), sel) in pairs.iter().zip(&sels) {
                    let m = &net.layers[node]
                        .params
                        .get(k)
                        .ok_or_else(|| {
                            Error::contract(format!("client {}: missing parameter at node {node}", spec.client))
                        })?
                        .value;
                    let (rows, cols) = if k == 0 {
                        (sel.out_width, sel.in_width * block)
                    } else {
                        (1, sel.out_width)
                    };
                    check_shape(m, rows, cols, "weight", spec.client)?;
                    mean.add(m);
                }
                mean.apply(&mut server.params[node][k]);
            }
        } else {
            for k in 0..server.params[node].len() {
                let target = &server.params[node][k];
                let mut mean = PrefixMean::new(target.rows(), target.cols());
                for (spec, net) in &pairs {
                    let m = &net.layers[node]
                        .params
                        .get(k)
                        .ok_or_else(|| {
                            Error::contract(format!("client {}: missing parameter at node {node}", spec.client))
                        })?
                        .value;
                    check_shape(m, 1, spec.widths[node], "affine parameter", spec.client)?;
                    mean.add(m);
                }
                mean.apply(&mut server.params[node][k]);
            }
        }
    }
    Ok(state)
}

fn aggregate_factors(
    server: &mut ServerModel,
    node: usize,
    sels: &[&LayerSelection],
    pairs: &[(&SubModelSpec, &Network)],
) -> Result<LayerAggregate> {
    let pks = server.kernels[node]
        .as_ref()
        .ok_or_else(|| Error::contract(format!("node {node} has no decomposition")))?;
    let ws = server.weight_shape(node);
    let (n, p, cols) = (pks.out_channels(), pks.num_kernels(), pks.v.cols());
    let mut u_bar = pks.merged_u();
    let mut v_bar = pks.merged_v();
    let mut kernel_counts = vec![0usize; p];
    let mut u_sum = vec![0.0; n * p];
    let mut u_counts = vec![0usize; n * p];
    let mut v_sum = vec![0.0; p * cols];
    let mut v_counts = vec![0usize; p * cols];
    // rows of held kernels that no holder computed, taken from a û cache
    let mut cached: Vec<Option<f64>> = vec![None; n * p];

    for ((spec, net), sel) in pairs.iter().zip(sels) {
        let layer = &net.layers[node];
        ensure(matches!(layer.op, Op::Factorized(_)) && layer.params.len() >= 2, || {
            format!("client {}: node {node} is not factorized", spec.client)
        })?;
        let r = sel.indices.len();
        ensure(sel.indices.iter().all(|&i| i < p), || {
            format!("client {}: kernel index out of range at node {node}", spec.client)
        })?;
        let v = &layer.params[0].value;
        let u = &layer.params[1].value;
        let in_cols = sel.in_width * ws.block;
        check_shape(v, r, in_cols, "v'", spec.client)?;
        check_shape(u, sel.out_width, r, "u'", spec.client)?;
        if let Some(h) = &sel.u_hat {
            check_shape(h, n - sel.out_width, r, "u-hat cache", spec.client)?;
        }
        for (j, &i) in sel.indices.iter().enumerate() {
            kernel_counts[i] += 1;
            for row in 0..sel.out_width {
                u_sum[row * p + i] += u[(row, j)];
                u_counts[row * p + i] += 1;
            }
            if let Some(h) = &sel.u_hat {
                for row in sel.out_width..n {
                    cached[row * p + i].get_or_insert(h[(row - sel.out_width, j)]);
                }
            }
            for col in 0..in_cols {
                v_sum[i * cols + col] += v[(j, col)];
                v_counts[i * cols + col] += 1;
            }
        }
    }
    for i in 0..p {
        if kernel_counts[i] == 0 {
            continue;
        }
        for row in 0..n {
            let k = row * p + i;
            if u_counts[k] > 0 {
                u_bar[(row, i)] = u_sum[k] / u_counts[k] as f64;
            } else if let Some(h) = cached[k] {
                u_bar[(row, i)] = h;
            }
        }
        for col in 0..cols {
            let k = i * cols + col;
            if v_counts[k] > 0 {
                v_bar[(i, col)] = v_sum[k] / v_counts[k] as f64;
            }
        }
    }
    server.params[node][0] = u_bar.matmul(&v_bar)?;
    Ok(LayerAggregate {
        node,
        kernel_counts,
        u_counts,
        v_counts,
        u_bar,
        v_bar,
    })
}

/// Re-decomposes every factorized layer from the aggregated weights.
pub fn refresh(server: &mut ServerModel) -> Result<()> {
    server.refresh()
}
