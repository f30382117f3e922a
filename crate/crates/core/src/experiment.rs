//! End-to-end runs: data preparation, the federated loop, and artifacts.
//!
//! A run directory holds:
//!
//! - `config.toml`: the resolved configuration
//! - `shards.jsonl`: one line per client with its sample indices
//! - `metrics.jsonl`: deterministic per-round records, one line per family
//! - `timings.jsonl`: wall-clock stage times per round
//! - `checkpoint.bin`: the final server model
//! - `summary.json`, `summary.txt`: final metrics, costs, ranks, timings

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::config::{DataKind, ExperimentConfig};
use crate::cost::{cost_of, original_cost, rank_trace, selection_profile, CostReport};
use crate::data::{
    load_cifar_bin, load_idx, partition, synth_blobs, write_shard_manifest, Dataset, PartitionConfig, SynthSpec,
};
use crate::error::{Error, Result};
use crate::federation::{Federation, RoundRecord, StageTimings};
use crate::model::ServerModel;
use crate::nn::by_name;
use crate::rng::{domain, RandomStream, StreamKey};

/// Training and test splits as configured.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let (mut train, mut test) = match d.kind {
        DataKind::Synthetic => {
            let s = &d.synthetic;
            let spec = SynthSpec {
                num_classes: s.classes,
                samples: s.train_samples + s.test_samples,
                shape: [s.channels, s.height, s.width],
                separation: s.separation,
                max_shift: s.max_shift,
                noise: s.noise,
            };
            let mut stream = RandomStream::new(cfg.fed.seed, StreamKey::new(0, domain::DATA, 0));
            let all = synth_blobs(&spec, &mut stream)?;
            let train: Vec<usize> = (0..s.train_samples).collect();
            let test: Vec<usize> = (s.train_samples..spec.samples).collect();
            (all.subset(&train), all.subset(&test))
        }
        DataKind::Idx => {
            let path = |p: &Option<PathBuf>| p.clone().expect("validated");
            (
                load_idx(path(&d.train_images), path(&d.train_labels))?,
                load_idx(path(&d.test_images), path(&d.test_labels))?,
            )
        }
        DataKind::Cifar => (load_cifar_bin(&d.cifar_train)?, load_cifar_bin(&d.cifar_test)?),
    };
    let classes = train.num_classes.max(test.num_classes);
    train.num_classes = classes;
    test.num_classes = classes;
    if d.standardize {
        let (mean, std) = train.channel_stats();
        train.standardize(&mean, &std);
        test.standardize(&mean, &std);
    }
    Ok((train, test))
}

/// Builds the federation for `cfg`; also returns the client shards.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Federation, Vec<Vec<usize>>)> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let per_client = match cfg.partition.samples_per_client {
        0 => train.len() / cfg.fed.num_clients,
        n => n,
    };
    if per_client == 0 {
        return Err(Error::config(
            "partition.samples_per_client",
            format!(
                "{} training samples cannot feed {} clients",
                train.len(),
                cfg.fed.num_clients
            ),
        ));
    }
    let pc = PartitionConfig {
        mode: cfg.partition.mode,
        alpha: cfg.partition.alpha,
        samples_per_client: per_client,
    };
    let mut stream = RandomStream::new(cfg.fed.seed, StreamKey::new(0, domain::DATA, 1));
    let shards = partition(&train, &pc, cfg.fed.num_clients, &mut stream).map_err(|e| match e {
        Error::Contract(m) => Error::config("partition.samples_per_client", m),
        e => e,
    })?;
    let arch = by_name(&cfg.model, train.shape(), train.num_classes, cfg.batchnorm)?;
    let server = ServerModel::init(arch, cfg.fed.seed, cfg.fed.factorize_head)?;
    let fed = Federation::new(cfg.fed.clone(), cfg.train, server, train, shards.clone(), test)?;
    Ok((fed, shards))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub keep_ratio: f64,
    pub cost: CostReport,
    /// Percent of the unfactorized model: params, MACs, memory.
    pub ratios: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub rounds: usize,
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub initial_accuracy: f64,
    pub initial_rank: BTreeMap<String, f64>,
    pub final_rank: BTreeMap<String, f64>,
    pub kernels: BTreeMap<String, usize>,
    pub selection_profile: BTreeMap<String, Vec<f64>>,
    pub full_cost: CostReport,
    pub client_costs: Vec<CostLine>,
    pub mean_timings: StageTimings,
    pub total_timings: StageTimings,
    /// Refresh time over local-training time.
    pub svd_to_training: f64,
    pub diverged_clients: usize,
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn line(w: &mut impl Write, path: &Path, value: serde_json::Value) -> Result<()> {
    writeln!(w, "{value}").map_err(|e| Error::io(path, e))
}

/// Deterministic metric lines for one round.
pub fn metric_lines(r: &RoundRecord) -> Vec<serde_json::Value> {
    let mut out = vec![json!({ "family": "train", "round": r.round, "clients": r.clients })];
    if let (Some(acc), Some(loss)) = (r.eval_accuracy, r.eval_loss) {
        out.push(json!({ "family": "eval", "round": r.round, "accuracy": acc, "loss": loss }));
    }
    out.push(json!({ "family": "rank", "round": r.round, "layers": r.effective_rank }));
    out.push(json!({ "family": "selection", "round": r.round, "layers": r.kernel_counts }));
    out
}

/// Runs the experiment, writing artifacts to `out_dir`. `progress` sees each
/// round as it completes.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, mut progress: impl FnMut(&RoundRecord)) -> Result<RunSummary> {
    let (mut fed, shards) = prepare(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    write_shard_manifest(out_dir.join("shards.jsonl"), &shards)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let timings_path = out_dir.join("timings.jsonl");
    let mut metrics = writer(&metrics_path)?;
    let mut timings = writer(&timings_path)?;

    let initial_rank: BTreeMap<String, f64> = rank_trace(&fed.server)?
        .into_iter()
        .map(|l| (l.node, l.effective_rank))
        .collect();
    let kernels: BTreeMap<String, usize> = rank_trace(&fed.server)?
        .into_iter()
        .map(|l| (l.node, l.kernels))
        .collect();
    let (initial_accuracy, initial_loss) = fed.evaluate()?;
    line(
        &mut metrics,
        &metrics_path,
        json!({ "family": "init", "accuracy": initial_accuracy, "loss": initial_loss, "layers": initial_rank }),
    )?;

    let records = fed.run(|r| {
        for v in metric_lines(r) {
            line(&mut metrics, &metrics_path, v)?;
        }
        line(
            &mut timings,
            &timings_path,
            json!({ "round": r.round, "timings": r.timings }),
        )?;
        progress(r);
        Ok(())
    });
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    timings.flush().map_err(|e| Error::io(&timings_path, e))?;
    let records = records?;
    checkpoint::save(out_dir.join("checkpoint.bin"), &fed.server, cfg.fed.seed)?;

    let last = records.iter().rev().find(|r| r.eval_accuracy.is_some());
    let (final_accuracy, final_loss) = match last {
        Some(r) => (r.eval_accuracy.unwrap_or(0.0), r.eval_loss.unwrap_or(0.0)),
        None => fed.evaluate()?,
    };
    let mut total = StageTimings::default();
    for r in &records {
        let t = r.timings;
        total.submodel += t.submodel;
        total.training += t.training;
        total.aggregation += t.aggregation;
        total.svd += t.svd;
        total.evaluation += t.evaluation;
    }
    let n = records.len().max(1) as f64;
    let mean = StageTimings {
        submodel: total.submodel / n,
        training: total.training / n,
        aggregation: total.aggregation / n,
        svd: total.svd / n,
        evaluation: total.evaluation / n,
    };
    let arch = &fed.server.arch;
    let full_cost = original_cost(arch, cfg.train.batch_size)?;
    let mut keeps: Vec<f64> = cfg.fed.client_keep_ratios();
    keeps.sort_by(f64::total_cmp);
    keeps.dedup();
    let client_costs = keeps
        .into_iter()
        .map(|k| {
            let cost = cost_of(
                arch,
                cfg.fed.method,
                k,
                cfg.fed.method.out_factor(),
                cfg.train.batch_size,
            )?;
            Ok(CostLine {
                keep_ratio: k,
                ratios: cost.ratios(&full_cost),
                cost,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let selection = kernels
        .keys()
        .filter_map(|name| selection_profile(&records, name).map(|p| (name.clone(), p)))
        .collect();
    let summary = RunSummary {
        method: cfg.fed.method.to_string(),
        rounds: records.len(),
        seed: cfg.fed.seed,
        final_accuracy,
        final_loss,
        initial_accuracy,
        initial_rank,
        final_rank: records.last().map(|r| r.effective_rank.clone()).unwrap_or_default(),
        kernels,
        selection_profile: selection,
        full_cost,
        client_costs,
        mean_timings: mean,
        total_timings: total,
        svd_to_training: if total.training > 0.0 {
            total.svd / total.training
        } else {
            0.0
        },
        diverged_clients: records.iter().map(|r| r.diverged().len()).sum(),
    };
    let p = out_dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(|e| Error::io(&p, e))?;
    let p = out_dir.join("summary.txt");
    fs::write(&p, render_summary(&summary)).map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}

pub fn render_summary(s: &RunSummary) -> String {
    let mut o = String::new();
    let mut w = |l: String| {
        o.push_str(&l);
        o.push('\n');
    };
    w(format!("method {}  seed {}  rounds {}", s.method, s.seed, s.rounds));
    w(format!(
        "accuracy {:.4} (initial {:.4})  loss {:.4}",
        s.final_accuracy, s.initial_accuracy, s.final_loss
    ));
    if s.diverged_clients > 0 {
        w(format!("diverged client updates dropped: {}", s.diverged_clients));
    }
    w(String::new());
    w(format!(
        "{:>6} {:>14} {:>8} {:>16} {:>8} {:>14} {:>8}",
        "keep", "params", "%", "MACs/batch", "%", "memory/batch", "%"
    ));
    w(format!(
        "{:>6} {:>14} {:>8.1} {:>16} {:>8.1} {:>14} {:>8.1}",
        "full", s.full_cost.params, 100.0, s.full_cost.macs, 100.0, s.full_cost.activation_mem, 100.0
    ));
    for c in &s.client_costs {
        w(format!(
            "{:>6.2} {:>14} {:>8.1} {:>16} {:>8.1} {:>14} {:>8.1}",
            c.keep_ratio, c.cost.params, c.ratios[0], c.cost.macs, c.ratios[1], c.cost.activation_mem, c.ratios[2]
        ));
    }
    w(String::new());
    w(format!(
        "{:<16} {:>8} {:>12} {:>12}",
        "layer", "kernels", "rank start", "rank end"
    ));
    for (name, p) in &s.kernels {
        let a = s.initial_rank.get(name).copied().unwrap_or(f64::NAN);
        let b = s.final_rank.get(name).copied().unwrap_or(f64::NAN);
        w(format!("{name:<16} {p:>8} {a:>12.2} {b:>12.2}"));
    }
    w(String::new());
    let t = &s.mean_timings;
    w("mean seconds per round".to_string());
    w(format!("  sub-model creation {:>10.4}", t.submodel));
    w(format!("  local training     {:>10.4}", t.training));
    w(format!("  aggregation        {:>10.4}", t.aggregation));
    w(format!("  SVD refresh        {:>10.4}", t.svd));
    w(format!("  evaluation         {:>10.4}", t.evaluation));
    w(format!("  SVD / training     {:>10.4}", s.svd_to_training));
    if !s.selection_profile.is_empty() {
        w(String::new());
        w("mean holders per kernel (sigma order)".to_string());
        for (name, p) in &s.selection_profile {
            let cells: Vec<String> = p.iter().map(|v| format!("{v:.2}")).collect();
            w(format!("  {name}: {}", cells.join(" ")));
        }
    }
    o
}
