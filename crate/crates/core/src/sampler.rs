//! Per-client sub-model construction: importance-aware kernel sampling,
//! output-channel subsetting, and input-channel slicing of the next layer.

use serde::{Deserialize, Serialize};

use crate::decomposition::merge_sigma;
use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::model::{compile, param_roles, ServerModel};
use crate::nn::{Architecture, Network, NodeKind, Op, Param, ParamRole, WeightShape};
use crate::rng::{RandomStream, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "prism")]
    Prism,
    #[serde(rename = "prism-o2")]
    PrismO2,
    #[serde(rename = "origdrop")]
    OrigDrop,
    #[serde(rename = "orthdrop")]
    OrthDrop,
    #[serde(rename = "fullfedavg")]
    FullFedAvg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Prism => "prism",
            Method::PrismO2 => "prism-o2",
            Method::OrigDrop => "origdrop",
            Method::OrthDrop => "orthdrop",
            Method::FullFedAvg => "fullfedavg",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [
            Method::Prism,
            Method::PrismO2,
            Method::OrigDrop,
            Method::OrthDrop,
            Method::FullFedAvg,
        ]
        .into_iter()
        .find(|m| m.name() == s.to_ascii_lowercase())
    }

    /// Output-channel multiplier of the `Conv_U` sublayer.
    pub fn out_factor(self) -> f64 {
        if self == Method::PrismO2 {
            2.0
        } else {
            1.0
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub kappa: f64,
    pub keep_ratio: f64,
    pub out_factor: f64,
}

impl SamplingConfig {
    pub fn new(kappa: f64, keep_ratio: f64, out_factor: f64) -> Self {
        SamplingConfig {
            kappa,
            keep_ratio,
            out_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.kappa >= 0.0 && self.kappa.is_finite(), || {
            format!("kappa must be a finite nonnegative number, got {}", self.kappa)
        })?;
        ensure(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0, || {
            format!("keep ratio must lie in (0, 1], got {}", self.keep_ratio)
        })?;
        ensure(self.out_factor >= 1.0 && self.out_factor.is_finite(), || {
            format!("out factor must be at least 1, got {}", self.out_factor)
        })
    }
}

/// What one client holds of one conv/dense layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub node: usize,
    /// Selected principal kernels `I_c`, ascending. Empty when the layer is
    /// sent in original space.
    pub indices: Vec<usize>,
    /// Output channels the client computes (a prefix of the layer's outputs).
    pub out_width: usize,
    /// Input channels the client receives (a prefix of the layer's inputs).
    pub in_width: usize,
    pub factorized: bool,
    /// Server-side `û` cache: rows `out_width..N` of the selected merged
    /// `u` vectors. Never sent to the client.
    #[serde(skip)]
    pub u_hat: Option<Matrix>,
}

/// A client's sub-model layout; the server keeps it as the dispatch record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubModelSpec {
    pub client: usize,
    pub method: Method,
    pub keep_ratio: f64,
    pub layers: Vec<LayerSelection>,
    /// Channel width of every node's output.
    pub widths: Vec<usize>,
}

impl SubModelSpec {
    pub fn layer(&self, node: usize) -> Option<&LayerSelection> {
        self.layers.iter().find(|l| l.node == node)
    }
}

/// `p_i = σ_i^κ / Σ_j σ_j^κ` with `0⁰ = 1`.
pub fn sampling_probs(sigma: &[f64], kappa: f64) -> Result<Vec<f64>> {
    let w = sampling_weights(sigma, kappa)?;
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

fn sampling_weights(sigma: &[f64], kappa: f64) -> Result<Vec<f64>> {
    ensure(sigma.iter().all(|s| s.is_finite() && *s >= 0.0), || {
        "singular values must be finite and nonnegative".to_string()
    })?;
    ensure(kappa >= 0.0 && kappa.is_finite(), || format!("invalid kappa {kappa}"))?;
    let max = sigma.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::contract("sampling from an all-zero spectrum"));
    }
    // normalizing by the largest σ keeps σ^κ representable for large κ
    Ok(sigma
        .iter()
        .map(|&s| if kappa == 0.0 { 1.0 } else { (s / max).powf(kappa) })
        .collect())
}

/// `r` distinct kernel indices drawn one at a time with probability
/// proportional to `σ^κ` among those not yet drawn. Returned ascending.
pub fn sample_kernels(sigma: &[f64], kappa: f64, r: usize, stream: &mut RandomStream) -> Result<Vec<usize>> {
    let p = sigma.len();
    ensure(r >= 1 && r <= p, || format!("cannot draw {r} of {p} kernels"))?;
    let mut w = sampling_weights(sigma, kappa)?;
    let mut chosen = Vec::with_capacity(r);
    for _ in 0..r {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let target = stream.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi > 0.0 {
                    acc += wi;
                    pick = Some(i);
                    if target < acc {
                        break;
                    }
                }
            }
            pick.expect("positive total")
        } else {
            // only zero-weight kernels remain
            let left: Vec<usize> = (0..p).filter(|i| !chosen.contains(i)).collect();
            left[stream.index(left.len())]
        };
        chosen.push(pick);
        w[pick] = 0.0;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// `r = max(1, round(keep·p))`.
pub fn kernel_budget(keep_ratio: f64, p: usize) -> usize {
    ((keep_ratio * p as f64).round() as usize).clamp(1, p)
}

/// `r_out = min(N, round(out_factor·keep·N))`, at least 1.
pub fn output_budget(keep_ratio: f64, out_factor: f64, n: usize) -> usize {
    ((out_factor * keep_ratio * n as f64).round() as usize).clamp(1, n)
}

/// `⌈keep·N⌉` original kernels for the original-space baseline.
pub fn original_budget(keep_ratio: f64, n: usize) -> usize {
    ((keep_ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Channel width of every node given each weight node's output width.
pub(crate) fn propagate_widths(arch: &Architecture, out_width: impl Fn(usize) -> usize) -> Vec<usize> {
    let mut widths: Vec<usize> = Vec::with_capacity(arch.nodes.len());
    for (i, node) in arch.nodes.iter().enumerate() {
        let w = match &node.kind {
            NodeKind::Input => arch.input[0],
            NodeKind::Conv(_) | NodeKind::Dense { .. } => out_width(i),
            NodeKind::Add => node.inputs.iter().map(|&j| widths[j]).max().unwrap_or(0),
            _ => widths[node.inputs[0]],
        };
        widths.push(w);
    }
    widths
}

/// Kernel count `r` (`None` when the layer goes out in original space) and
/// output width of one weight layer.
pub(crate) fn layer_budget(
    ws: &WeightShape,
    head: bool,
    factorized: bool,
    method: Method,
    keep_ratio: f64,
    out_factor: f64,
) -> (Option<usize>, usize) {
    let n = ws.out;
    if !factorized || method == Method::OrigDrop {
        let out = if head { n } else { original_budget(keep_ratio, n) };
        return (None, out);
    }
    let (keep, out_factor) = match method {
        Method::FullFedAvg => (1.0, 1.0),
        _ => (keep_ratio, out_factor),
    };
    let r = kernel_budget(keep, ws.num_kernels());
    let r_out = if head { n } else { output_budget(keep, out_factor, n) };
    (Some(r), r_out)
}

fn choose(
    server: &ServerModel,
    method: Method,
    cfg: &SamplingConfig,
    node: usize,
    stream: Option<&mut RandomStream>,
) -> Result<(Vec<usize>, usize)> {
    let ws = server.weight_shape(node);
    let head = server.arch.is_head(node);
    let (r, r_out) = layer_budget(
        &ws,
        head,
        server.is_factorized(node),
        method,
        cfg.keep_ratio,
        cfg.out_factor,
    );
    let Some(r) = r else {
        return Ok((vec![], r_out));
    };
    let pks = server.kernels[node]
        .as_ref()
        .ok_or_else(|| Error::contract("server decomposition is not current"))?;
    let p = pks.num_kernels();
    let indices = match method {
        Method::FullFedAvg => (0..p).collect(),
        Method::OrthDrop => (0..r).collect(),
        _ => {
            let stream = stream.ok_or_else(|| Error::contract("sampling needs a random stream"))?;
            sample_kernels(&pks.sigma, cfg.kappa, r, stream)?
        }
    };
    Ok((indices, r_out))
}

/// Builds the dispatch record and the client network for `client` in
/// `round`. Layer `i` samples from stream `(round, client, i)`.
pub fn build_client_model(
    server: &ServerModel,
    method: Method,
    cfg: &SamplingConfig,
    seed: u64,
    round: u64,
    client: usize,
) -> Result<(SubModelSpec, Network)> {
    cfg.validate()?;
    let mut picks: Vec<Option<(Vec<usize>, usize)>> = vec![None; server.arch.nodes.len()];
    for node in server.arch.weight_nodes() {
        let mut stream = RandomStream::new(seed, StreamKey::new(round, client as u64, node as u64));
        picks[node] = Some(choose(server, method, cfg, node, Some(&mut stream))?);
    }
    assemble(server, method, cfg.keep_ratio, client, picks)
}

/// OrigDrop / OrthDrop sub-model. Both are deterministic.
pub fn build_baseline_model(
    server: &ServerModel,
    mode: Method,
    keep_ratio: f64,
    client: usize,
) -> Result<(SubModelSpec, Network)> {
    ensure(matches!(mode, Method::OrigDrop | Method::OrthDrop), || {
        format!("{mode} is not a fixed-selection baseline")
    })?;
    let cfg = SamplingConfig::new(0.0, keep_ratio, 1.0);
    cfg.validate()?;
    let mut picks: Vec<Option<(Vec<usize>, usize)>> = vec![None; server.arch.nodes.len()];
    for node in server.arch.weight_nodes() {
        picks[node] = Some(choose(server, mode, &cfg, node, None)?);
    }
    assemble(server, mode, keep_ratio, client, picks)
}

fn assemble(
    server: &ServerModel,
    method: Method,
    keep_ratio: f64,
    client: usize,
    picks: Vec<Option<(Vec<usize>, usize)>>,
) -> Result<(SubModelSpec, Network)> {
    let widths = propagate_widths(&server.arch, |i| picks[i].as_ref().map_or(0, |p| p.1));
    let mut layers = Vec::new();
    let network = compile(&server.arch, |i| {
        let kind = &server.arch.nodes[i].kind;
        let params = &server.params[i];
        if let Some((indices, out_w)) = &picks[i] {
            let ws = server.weight_shape(i);
            let in_width = widths[server.arch.nodes[i].inputs[0]];
            let cols = in_width * ws.block;
            let factorized = !indices.is_empty();
            let mut out = Vec::new();
            let mut op = None;
            let mut u_hat = None;
            if factorized {
                let pks = server.kernels[i].as_ref().expect("checked in choose");
                let merged = merge_sigma(pks, indices, *out_w)?;
                let v = merged.v_prime.top_left(indices.len(), cols)?;
                out.push(Param::new(ParamRole::FactorV, v));
                out.push(Param::new(ParamRole::FactorU, merged.u_prime));
                u_hat = Some(merged.u_hat);
                op = Some(Op::Factorized(ws.geometry));
            } else {
                out.push(Param::new(ParamRole::Weight, params[0].top_left(*out_w, cols)?));
            }
            if let Some(b) = params.get(1) {
                out.push(Param::new(ParamRole::Bias, b.top_left(1, *out_w)?));
            }
            layers.push(LayerSelection {
                node: i,
                indices: indices.clone(),
                out_width: *out_w,
                in_width,
                factorized,
                u_hat,
            });
            return Ok((op, out));
        }
        let roles = param_roles(kind, params.len());
        let w = widths[i];
        let ps = params
            .iter()
            .zip(roles)
            .map(|(m, r)| Ok(Param::new(r, m.top_left(1, w)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok((None, ps))
    })?;
    Ok((
        SubModelSpec {
            client,
            method,
            keep_ratio,
            layers,
            widths,
        },
        network,
    ))
}
