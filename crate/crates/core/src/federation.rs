//! The federated training loop: client selection, dispatch, local training,
//! aggregation, refresh, evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate, refresh};
use crate::cost::rank_trace;
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::model::ServerModel;
use crate::nn::Network;
use crate::rng::{domain, RandomStream, StreamKey};
use crate::sampler::{build_client_model, Method, SamplingConfig, SubModelSpec};
use crate::trainer::{local_train, ClientUpdate, TrainerConfig};

/// Smallest batch evaluated at once; batch norm always normalizes with the
/// statistics of the batch it sees.
pub const MIN_EVAL_BATCH: usize = 8;

/// A share of the client population training sub-models of one size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityTier {
    pub fraction: f64,
    pub keep_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub active_per_round: usize,
    pub rounds: usize,
    pub method: Method,
    pub seed: u64,
    pub kappa: f64,
    /// Keep ratio of every client when `profile` is empty.
    pub keep_ratio: f64,
    /// Heterogeneous capacities; tiers take consecutive client ids.
    pub profile: Vec<CapacityTier>,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub workers: usize,
    pub factorize_head: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 100,
            active_per_round: 20,
            rounds: 100,
            method: Method::Prism,
            seed: 0,
            kappa: 2.5,
            keep_ratio: 0.2,
            profile: Vec::new(),
            eval_every: 1,
            eval_batch: 128,
            workers: 1,
            factorize_head: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.num_clients == 0 {
            return bad("num_clients", "must be at least 1".into());
        }
        if self.active_per_round == 0 || self.active_per_round > self.num_clients {
            return bad("active_per_round", format!("must lie in 1..={}", self.num_clients));
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        if self.eval_batch < MIN_EVAL_BATCH {
            return bad("eval_batch", format!("must be at least {MIN_EVAL_BATCH}"));
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1".into());
        }
        SamplingConfig::new(self.kappa, self.keep_ratio, 1.0)
            .validate()
            .map_err(|e| Error::config("keep_ratio", e.to_string()))?;
        if !self.profile.is_empty() {
            let total: f64 = self.profile.iter().map(|t| t.fraction).sum();
            if self.profile.iter().any(|t| t.fraction.is_nan() || t.fraction <= 0.0) || (total - 1.0).abs() > 1e-9 {
                return bad(
                    "profile",
                    format!("fractions must be positive and sum to 1, got {total}"),
                );
            }
            for t in &self.profile {
                if !(t.keep_ratio > 0.0 && t.keep_ratio <= 1.0) {
                    return bad("profile", format!("keep ratio {} outside (0, 1]", t.keep_ratio));
                }
            }
        }
        Ok(())
    }

    /// Keep ratio of every client id.
    pub fn client_keep_ratios(&self) -> Vec<f64> {
        if self.profile.is_empty() {
            return vec![self.keep_ratio; self.num_clients];
        }
        let mut out = Vec::with_capacity(self.num_clients);
        let mut cum = 0.0;
        for t in &self.profile {
            cum += t.fraction;
            let end = ((cum * self.num_clients as f64).round() as usize).min(self.num_clients);
            while out.len() < end {
                out.push(t.keep_ratio);
            }
        }
        let last = self.profile.last().map_or(self.keep_ratio, |t| t.keep_ratio);
        out.resize(self.num_clients, last);
        out
    }

    pub fn sampling_for(&self, keep_ratio: f64) -> SamplingConfig {
        SamplingConfig::new(self.kappa, keep_ratio, self.method.out_factor())
    }
}

/// Uniform subset of `active` client ids, ascending. Stream
/// `(round, CLIENT_SELECTION, 0)`.
pub fn select_clients(num_clients: usize, active: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut s = RandomStream::new(seed, StreamKey::new(round as u64, domain::CLIENT_SELECTION, 0));
    let mut ids = s.sample_indices(num_clients, active.min(num_clients));
    ids.sort_unstable();
    ids
}

/// Seconds spent in each phase of one round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub submodel: f64,
    pub training: f64,
    pub aggregation: f64,
    pub svd: f64,
    pub evaluation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub keep_ratio: f64,
    /// Final-epoch training loss; `None` if training diverged.
    pub loss: Option<f64>,
}

/// Everything recorded about one round. Timings are kept apart from the
/// deterministic fields and are not serialized with them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRecord>,
    pub eval_accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
    /// Per factorized layer, after the refresh.
    pub effective_rank: BTreeMap<String, f64>,
    /// Per factorized layer: holders of each σ-sorted kernel this round.
    pub kernel_counts: BTreeMap<String, Vec<usize>>,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl RoundRecord {
    pub fn diverged(&self) -> Vec<usize> {
        self.clients
            .iter()
            .filter(|c| c.loss.is_none())
            .map(|c| c.client)
            .collect()
    }
}

/// Top-1 accuracy and mean loss of `network` on `data`. The last batch
/// absorbs a remainder smaller than [`MIN_EVAL_BATCH`].
pub fn evaluate(network: &Network, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    ensure(data.len() >= MIN_EVAL_BATCH, || {
        format!("evaluation needs at least {MIN_EVAL_BATCH} samples, got {}", data.len())
    })?;
    let batch_size = batch_size.max(MIN_EVAL_BATCH);
    let mut start = 0;
    let (mut correct, mut loss) = (0usize, 0.0);
    while start < data.len() {
        let mut end = (start + batch_size).min(data.len());
        if data.len() - end < MIN_EVAL_BATCH {
            end = data.len();
        }
        let idx: Vec<usize> = (start..end).collect();
        let (x, labels) = data.batch(&idx);
        let (l, c) = network.evaluate_batch(&x, &labels)?;
        loss += l * idx.len() as f64;
        correct += c;
        start = end;
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

pub struct Federation {
    pub cfg: FederationConfig,
    pub trainer: TrainerConfig,
    pub server: ServerModel,
    train: Dataset,
    shards: Vec<Vec<usize>>,
    eval: Dataset,
    keep_ratios: Vec<f64>,
}

impl Federation {
    /// `trainer.total_rounds` is taken from `cfg.rounds`.
    pub fn new(
        cfg: FederationConfig,
        mut trainer: TrainerConfig,
        server: ServerModel,
        train: Dataset,
        shards: Vec<Vec<usize>>,
        eval: Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        trainer.total_rounds = cfg.rounds;
        trainer.validate()?;
        ensure(shards.len() == cfg.num_clients, || {
            format!("{} shards for {} clients", shards.len(), cfg.num_clients)
        })?;
        ensure(shards.iter().flatten().all(|&i| i < train.len()), || {
            "shard index outside the training set".to_string()
        })?;
        ensure(
            train.shape() == server.arch.input && eval.shape() == server.arch.input,
            || format!("data shape does not match the model input {:?}", server.arch.input),
        )?;
        let keep_ratios = cfg.client_keep_ratios();
        Ok(Federation {
            cfg,
            trainer,
            server,
            train,
            shards,
            eval,
            keep_ratios,
        })
    }

    /// Index of the next round.
    pub fn round(&self) -> usize {
        self.server.round as usize
    }

    pub fn is_done(&self) -> bool {
        self.round() >= self.cfg.rounds
    }

    fn train_clients(&self, jobs: Vec<(SubModelSpec, Network)>, round: usize) -> Vec<Result<ClientUpdate>> {
        let run = |spec: &SubModelSpec, net: Network| {
            local_train(
                net,
                &self.train,
                &self.shards[spec.client],
                &self.trainer,
                self.cfg.seed,
                round,
                spec.client,
            )
        };
        let workers = self.cfg.workers.min(jobs.len()).max(1);
        if workers == 1 {
            return jobs.into_iter().map(|(s, n)| run(&s, n)).collect();
        }
        let mut queues: Vec<Vec<(usize, SubModelSpec, Network)>> = (0..workers).map(|_| Vec::new()).collect();
        for (k, (s, n)) in jobs.into_iter().enumerate() {
            queues[k % workers].push((k, s, n));
        }
        let mut results: Vec<(usize, Result<ClientUpdate>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = queues
                .into_iter()
                .map(|q| scope.spawn(move || q.into_iter().map(|(k, s, n)| (k, run(&s, n))).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        });
        results.sort_by_key(|(k, _)| *k);
        results.into_iter().map(|(_, r)| r).collect()
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.round();
        let mut timings = StageTimings::default();
        let selected = select_clients(self.cfg.num_clients, self.cfg.active_per_round, self.cfg.seed, round);

        let t = Instant::now();
        let mut jobs = Vec::with_capacity(selected.len());
        for &c in &selected {
            let cfg = self.cfg.sampling_for(self.keep_ratios[c]);
            jobs.push(build_client_model(
                &self.server,
                self.cfg.method,
                &cfg,
                self.cfg.seed,
                round as u64,
                c,
            )?);
        }
        let dispatches: Vec<SubModelSpec> = jobs.iter().map(|(s, _)| s.clone()).collect();
        timings.submodel = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let results = self.train_clients(jobs, round);
        timings.training = t.elapsed().as_secs_f64();

        let mut updates = Vec::with_capacity(results.len());
        let mut clients = Vec::with_capacity(results.len());
        for (&c, r) in selected.iter().zip(results) {
            let loss = match r {
                Ok(u) => {
                    let l = u.final_loss;
                    updates.push(u);
                    Some(l)
                }
                Err(Error::Diverged { .. }) => None,
                Err(e) => return Err(e),
            };
            clients.push(ClientRecord {
                client: c,
                keep_ratio: self.keep_ratios[c],
                loss,
            });
        }

        let t = Instant::now();
        let state = aggregate(&mut self.server, &dispatches, &updates)?;
        timings.aggregation = t.elapsed().as_secs_f64();
        if !self.server.is_finite() {
            return Err(Error::Numerical {
                message: format!("non-finite server weights after round {round}"),
                residual: f64::NAN,
            });
        }

        let t = Instant::now();
        refresh(&mut self.server)?;
        timings.svd = t.elapsed().as_secs_f64();
        self.server.round += 1;

        let mut record = RoundRecord {
            round,
            clients,
            ..RoundRecord::default()
        };
        for l in rank_trace(&self.server)? {
            record.effective_rank.insert(l.node, l.effective_rank);
        }
        for l in state.layers {
            record
                .kernel_counts
                .insert(self.server.arch.nodes[l.node].name.clone(), l.kernel_counts);
        }
        if (round + 1).is_multiple_of(self.cfg.eval_every) || round + 1 == self.cfg.rounds {
            let t = Instant::now();
            let (acc, loss) = evaluate(&self.server.full_network()?, &self.eval, self.cfg.eval_batch)?;
            timings.evaluation = t.elapsed().as_secs_f64();
            record.eval_accuracy = Some(acc);
            record.eval_loss = Some(loss);
        }
        record.timings = timings;
        Ok(record)
    }

    /// Runs the remaining rounds, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&RoundRecord) -> Result<()>) -> Result<Vec<RoundRecord>> {
        let mut out = Vec::new();
        while !self.is_done() {
            let r = self.run_round()?;
            sink(&r)?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate(&self.server.full_network()?, &self.eval, self.cfg.eval_batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition, synth_blobs, PartitionConfig, PartitionMode, SynthSpec};
    use crate::nn::tiny_cnn;

    fn setup(cfg: FederationConfig, lr: f64, samples_per_client: usize) -> Federation {
        let mut s = RandomStream::new(1, StreamKey::new(0, domain::DATA, 0));
        let data = synth_blobs(&SynthSpec::new(4, 400, [1, 8, 8], 6.0), &mut s).unwrap();
        let train = data.subset(&(0..300).collect::<Vec<_>>());
        let eval = data.subset(&(300..400).collect::<Vec<_>>());
        let pc = PartitionConfig {
            mode: PartitionMode::Iid,
            alpha: 1.0,
            samples_per_client,
        };
        let shards = partition(&train, &pc, cfg.num_clients, &mut s).unwrap();
        let server = ServerModel::init(tiny_cnn([1, 8, 8], 4, true).unwrap(), cfg.seed, cfg.factorize_head).unwrap();
        let trainer = TrainerConfig {
            initial_lr: lr,
            batch_size: 16,
            local_epochs: 1,
            ..Default::default()
        };
        Federation::new(cfg, trainer, server, train, shards, eval).unwrap()
    }

    fn small(method: Method, keep: f64) -> FederationConfig {
        FederationConfig {
            num_clients: 4,
            active_per_round: 2,
            rounds: 3,
            method,
            keep_ratio: keep,
            eval_batch: 50,
            ..Default::default()
        }
    }

    #[test]
    fn selection_cases() {
        assert_eq!(select_clients(5, 5, 1, 0), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_clients(10, 1, 3, 7), select_clients(10, 1, 3, 7));
        let picks: std::collections::HashSet<Vec<usize>> = (0..20).map(|s| select_clients(10, 1, s, 0)).collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn selection_frequency_is_uniform() {
        let (n, k, rounds) = (10, 3, 10_000);
        let mut counts = vec![0usize; n];
        for t in 0..rounds {
            for c in select_clients(n, k, 5, t) {
                counts[c] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let se = (rounds as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - rounds as f64 * p).abs() < 3.0 * se + 1.0, "{c}");
        }
    }

    #[test]
    fn heterogeneous_profile_assigns_tiers() {
        let cfg = FederationConfig {
            num_clients: 10,
            active_per_round: 10,
            profile: vec![
                CapacityTier {
                    fraction: 0.4,
                    keep_ratio: 0.4,
                },
                CapacityTier {
                    fraction: 0.6,
                    keep_ratio: 0.2,
                },
            ],
            ..Default::default()
        };
        cfg.validate().unwrap();
        let k = cfg.client_keep_ratios();
        assert_eq!(k.iter().filter(|&&x| x == 0.4).count(), 4);
        assert_eq!(k.iter().filter(|&&x| x == 0.2).count(), 6);

        let mut f = setup(
            FederationConfig {
                rounds: 1,
                eval_batch: 50,
                ..cfg
            },
            0.01,
            30,
        );
        let r = f.run_round().unwrap();
        // 16 kernels: keep 0.4 → 6, keep 0.2 → 3 per holder
        assert_eq!(r.kernel_counts["conv1"].iter().sum::<usize>(), 4 * 6 + 6 * 3);
        let bad = FederationConfig {
            profile: vec![CapacityTier {
                fraction: 0.5,
                keep_ratio: 0.4,
            }],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_lr_round_keeps_eval_metrics() {
        let mut f = setup(small(Method::Prism, 0.5), 0.0, 50);
        let (acc0, loss0) = f.evaluate().unwrap();
        let before = f.server.clone();
        let r = f.run_round().unwrap();
        assert!((r.eval_accuracy.unwrap() - acc0).abs() <= 0.005);
        assert!((r.eval_loss.unwrap() - loss0).abs() <= 0.005 * loss0);
        for (a, b) in f.server.params.iter().flatten().zip(before.params.iter().flatten()) {
            assert!(a.max_abs_diff(b) < 1e-9);
        }
    }

    #[test]
    fn runs_are_deterministic_and_worker_independent() {
        let mut a = setup(small(Method::Prism, 0.5), 0.05, 50);
        let ra = a.run(|_| Ok(())).unwrap();
        let mut cfg = small(Method::Prism, 0.5);
        cfg.workers = 2;
        let mut b = setup(cfg, 0.05, 50);
        let rb = b.run(|_| Ok(())).unwrap();
        let strip = |rs: Vec<RoundRecord>| {
            rs.into_iter()
                .map(|r| RoundRecord {
                    timings: StageTimings::default(),
                    ..r
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(ra.clone()), strip(rb));
        assert_eq!(a.server.params, b.server.params);
        assert_eq!(ra.len(), 3);
        assert!(ra.iter().all(|r| r.eval_accuracy.is_some()));
    }

    #[test]
    fn keep_one_matches_full_training() {
        let run = |m| {
            let mut f = setup(small(m, 1.0), 0.05, 50);
            f.run(|_| Ok(())).unwrap();
            f.server
        };
        let full = run(Method::FullFedAvg);
        for m in [Method::Prism, Method::OrthDrop] {
            let s = run(m);
            for (a, b) in s.params.iter().flatten().zip(full.params.iter().flatten()) {
                assert!(a.max_abs_diff(b) < 1e-9, "{m}");
            }
        }
    }

    #[test]
    fn single_client_full_data_is_centralized_training() {
        let cfg = FederationConfig {
            num_clients: 1,
            active_per_round: 1,
            rounds: 1,
            method: Method::FullFedAvg,
            keep_ratio: 1.0,
            eval_batch: 50,
            ..Default::default()
        };
        let mut f = setup(cfg, 0.05, 300);
        let (spec, net) = build_client_model(&f.server, Method::FullFedAvg, &f.cfg.sampling_for(1.0), 0, 0, 0).unwrap();
        let direct = local_train(net, &f.train, &f.shards[0], &f.trainer, 0, 0, 0).unwrap();
        let mut reference = f.server.clone();
        aggregate(&mut reference, &[spec], &[direct]).unwrap();
        f.run_round().unwrap();
        for (a, b) in f.server.params.iter().flatten().zip(reference.params.iter().flatten()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn eval_batches_absorb_small_remainders() {
        let f = setup(small(Method::Prism, 0.5), 0.0, 50);
        let net = f.server.full_network().unwrap();
        let (acc, loss) = evaluate(&net, &f.eval, 48).unwrap();
        assert!((0.0..=1.0).contains(&acc) && loss.is_finite());
        // untrained model on balanced classes is near chance
        assert!((acc - 0.25).abs() <= 0.2, "{acc}");
        let tiny = f.eval.subset(&[0, 1, 2]);
        assert!(evaluate(&net, &tiny, 8).is_err());
    }

    #[test]
    fn divergence_is_recorded_not_fatal() {
        let mut f = setup(small(Method::Prism, 0.5), 0.05, 50);
        f.trainer.initial_lr = 1e300;
        let before = f.server.clone();
        let r = f.run_round().unwrap();
        assert_eq!(r.diverged().len(), r.clients.len());
        assert_eq!(f.server.params, before.params);
    }
}
