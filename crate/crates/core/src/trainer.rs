//! Client-side local training: momentum SGD with the factor regularizer.

use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset};
use crate::error::{ensure, Error, Result};
use crate::linalg::{gemm, MatRef, Matrix};
use crate::nn::{Network, Op, ParamRole};
use crate::rng::{domain, RandomStream, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub lambda: f64,
    pub initial_lr: f64,
    /// Set from the federation round count.
    #[serde(skip)]
    pub total_rounds: usize,
    /// Random flips and 4-pixel padded crops on each batch.
    pub augment: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            local_epochs: 2,
            batch_size: 32,
            momentum: 0.9,
            lambda: 2e-4,
            initial_lr: 0.1,
            total_rounds: 100,
            augment: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be a finite non-negative number");
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr", "must be a finite non-negative number");
        }
        if self.total_rounds == 0 {
            return bad("total_rounds", "must be at least 1");
        }
        Ok(())
    }
}

/// `0.5·lr₀·(1 + cos(πt/T))`; rounds past `T` stay at the final value.
pub fn cosine_lr(round: usize, cfg: &TrainerConfig) -> f64 {
    let t = round.min(cfg.total_rounds) as f64;
    0.5 * cfg.initial_lr * (1.0 + (std::f64::consts::PI * t / cfg.total_rounds as f64).cos())
}

/// Gradient of `(λ/2)‖u′v′‖²_F`: `(λ·S·v′ᵀ, λ·u′ᵀ·S)` with `S = u′v′`.
/// `u` is `N × r` (columns are the kernels), `v` is `r × M`.
pub fn regularization_grad(u: &Matrix, v: &Matrix, lambda: f64) -> Result<(Matrix, Matrix)> {
    ensure(u.cols() == v.rows(), || {
        format!("factor shapes {:?} and {:?} disagree", u.shape(), v.shape())
    })?;
    let (n, r, m) = (u.rows(), u.cols(), v.cols());
    let mut gu = Matrix::zeros(n, r);
    let mut gv = Matrix::zeros(r, m);
    if lambda == 0.0 || r == 0 {
        return Ok((gu, gv));
    }
    let s = u.matmul(v)?;
    gemm(
        n,
        r,
        m,
        lambda,
        MatRef::new(s.data(), m, false),
        MatRef::new(v.data(), m, true),
        0.0,
        gu.data_mut(),
    );
    gemm(
        r,
        m,
        n,
        lambda,
        MatRef::new(u.data(), r, true),
        MatRef::new(s.data(), m, false),
        0.0,
        gv.data_mut(),
    );
    Ok((gu, gv))
}

/// What a client returns after local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    /// The trained sub-model; its layout matches the dispatch record.
    pub network: Network,
    pub num_samples: usize,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    pub steps: usize,
}

fn add_regularization(network: &mut Network, lambda: f64) -> Result<()> {
    if lambda == 0.0 {
        return Ok(());
    }
    for layer in &mut network.layers {
        let factorized = matches!(layer.op, Op::Factorized(_));
        if factorized {
            let (gu, gv) = regularization_grad(&layer.params[1].value, &layer.params[0].value, lambda)?;
            add_into(&mut layer.params[0].grad, &gv);
            add_into(&mut layer.params[1].grad, &gu);
        }
        for p in &mut layer.params {
            if matches!(p.role, ParamRole::FactorU | ParamRole::FactorV) {
                continue;
            }
            for (g, v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                *g += lambda * v;
            }
        }
    }
    Ok(())
}

fn add_into(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Runs `local_epochs` passes of momentum SGD over `shard` (indices into
/// `data`). Batch order comes from stream `(round, client, SHUFFLE + epoch)`.
pub fn local_train(
    mut network: Network,
    data: &Dataset,
    shard: &[usize],
    cfg: &TrainerConfig,
    seed: u64,
    round: usize,
    client: usize,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    ensure(!shard.is_empty(), || format!("client {client} has an empty shard"))?;
    let lr = cosine_lr(round, cfg);
    let mut buffers: Vec<Vec<f64>> = network.params().map(|p| vec![0.0; p.value.data().len()]).collect();
    let mut order = shard.to_vec();
    let mut step = 0;
    let mut final_loss = 0.0;
    for epoch in 0..cfg.local_epochs {
        let key = |d: u64| StreamKey::new(round as u64, client as u64, d + epoch as u64);
        let mut shuffle = RandomStream::new(seed, key(domain::SHUFFLE));
        let mut aug = RandomStream::new(seed, key(domain::AUGMENT));
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut seen) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let (mut x, labels) = data.batch(batch);
            if cfg.augment {
                augment(&mut x, 4, &mut aug);
            }
            network.zero_grad();
            let (loss, _) = network.loss_and_grad(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            add_regularization(&mut network, cfg.lambda)?;
            for (p, buf) in network.params_mut().zip(&mut buffers) {
                for ((w, g), b) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.iter_mut()) {
                    *b = cfg.momentum * *b + g;
                    *w -= lr * *b;
                }
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        final_loss = loss_sum / seen as f64;
        // NaN can hide behind max-pooling while the loss stays finite.
        if !network.params().all(|p| p.value.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
    }
    network.zero_grad();
    Ok(ClientUpdate {
        client,
        network,
        num_samples: shard.len(),
        final_loss,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ConvGeometry;
    use crate::model::ServerModel;
    use crate::nn::{ArchBuilder, Architecture, Layer, Param};
    use crate::sampler::{build_client_model, Method, SamplingConfig};
    use proptest::prelude::*;

    fn reg_loss(u: &Matrix, v: &Matrix, lambda: f64) -> f64 {
        let s = u.matmul(v).unwrap();
        0.5 * lambda * s.data().iter().map(|x| x * x).sum::<f64>()
    }

    #[test]
    fn zero_lambda_gives_zero_gradient() {
        let u = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let v = Matrix::from_fn(2, 4, |i, j| (i * j) as f64 - 1.0);
        let (gu, gv) = regularization_grad(&u, &v, 0.0).unwrap();
        assert!(gu.data().iter().chain(gv.data()).all(|&x| x == 0.0));
        assert!(regularization_grad(&u, &Matrix::zeros(3, 4), 1.0).is_err());
    }

    #[test]
    fn rank_one_unit_factors() {
        let u = Matrix::from_vec(3, 1, vec![0.6, 0.8, 0.0]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let (gu, gv) = regularization_grad(&u, &v, 0.5).unwrap();
        assert!(
            gu.max_abs_diff(&{
                let mut x = u.clone();
                x.scale(0.5);
                x
            }) < 1e-15
        );
        // ‖u‖ = 1 as well, so the v gradient is λ·v
        assert!(gv.max_abs_diff(&Matrix::from_vec(1, 2, vec![0.0, 0.5]).unwrap()) < 1e-15);
    }

    proptest! {
        #[test]
        fn regularizer_matches_finite_differences(
            seed in 0u64..1000,
            n in 1usize..5, r in 1usize..4, m in 1usize..6,
        ) {
            let mut s = RandomStream::new(seed, StreamKey::new(0, 0, 0));
            let u = Matrix::from_fn(n, r, |_, _| s.normal());
            let v = Matrix::from_fn(r, m, |_, _| s.normal());
            let lambda = 0.3;
            let (gu, gv) = regularization_grad(&u, &v, lambda).unwrap();
            let h = 1e-6;
            let check = |analytic: &Matrix, perturb: &dyn Fn(usize, f64) -> f64| {
                for k in 0..analytic.data().len() {
                    let fd = (perturb(k, h) - perturb(k, -h)) / (2.0 * h);
                    let a = analytic.data()[k];
                    let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(rel < 1e-6, "{k}: {a} vs {fd}");
                }
            };
            check(&gu, &|k, d| {
                let mut x = u.clone();
                x.data_mut()[k] += d;
                reg_loss(&x, &v, lambda)
            });
            check(&gv, &|k, d| {
                let mut x = v.clone();
                x.data_mut()[k] += d;
                reg_loss(&u, &x, lambda)
            });
        }
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainerConfig {
            initial_lr: 0.1,
            total_rounds: 10,
            ..Default::default()
        };
        assert_eq!(cosine_lr(0, &cfg), 0.1);
        assert!((cosine_lr(5, &cfg) - 0.05).abs() < 1e-15);
        let lrs: Vec<f64> = (0..10).map(|t| cosine_lr(t, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn blobs(n: usize) -> Dataset {
        let mut s = RandomStream::new(11, StreamKey::new(0, 0, 0));
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = i % 2;
            let c = if l == 0 { -1.0 } else { 1.0 };
            for _ in 0..4 {
                images.push(c + 0.3 * s.normal());
            }
            labels.push(l);
        }
        Dataset::new([1, 2, 2], 2, images, labels).unwrap()
    }

    fn linear_arch() -> Architecture {
        let mut b = ArchBuilder::new("linear", [1, 2, 2], 2);
        b.head(0).unwrap();
        b.finish()
    }

    #[test]
    fn zero_lr_returns_dispatched_params() {
        let server = ServerModel::init(crate::nn::tiny_cnn([1, 8, 8], 2, false).unwrap(), 1, false).unwrap();
        let (_, net) =
            build_client_model(&server, Method::Prism, &SamplingConfig::new(1.0, 0.5, 1.0), 1, 0, 0).unwrap();
        let data = blobs(16);
        let data = {
            let mut images = Vec::new();
            for i in 0..16 {
                images.extend(std::iter::repeat_n(data.sample(i)[0], 64));
            }
            Dataset::new([1, 8, 8], 2, images, data.labels.clone()).unwrap()
        };
        let cfg = TrainerConfig {
            initial_lr: 0.0,
            batch_size: 8,
            ..Default::default()
        };
        let shard: Vec<usize> = (0..16).collect();
        let up = local_train(net.clone(), &data, &shard, &cfg, 5, 0, 0).unwrap();
        for (a, b) in up.network.params().zip(net.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(up.steps, 4);
        assert_eq!(up.num_samples, 16);
    }

    #[test]
    fn single_step_matches_closed_form() {
        // one dense layer z = W x + b on a single sample; softmax CE gradient
        // is (softmax(z) − e_y) xᵀ
        let w = Matrix::from_vec(2, 4, vec![0.1, -0.2, 0.3, 0.0, 0.05, 0.1, -0.1, 0.2]).unwrap();
        let b = vec![0.01, -0.02];
        let net = Network::new(vec![
            Layer {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
                params: vec![],
            },
            Layer {
                name: "flatten".into(),
                op: Op::Flatten,
                inputs: vec![0],
                params: vec![],
            },
            Layer {
                name: "classifier".into(),
                op: Op::Conv(ConvGeometry::new(1, 1, 0)),
                inputs: vec![1],
                params: vec![
                    Param::new(ParamRole::Weight, w.clone()),
                    Param::vector(ParamRole::Bias, b.clone()),
                ],
            },
        ])
        .unwrap();
        let data = Dataset::new([1, 2, 2], 2, vec![0.5, -1.0, 2.0, 0.25], vec![1]).unwrap();
        let cfg = TrainerConfig {
            local_epochs: 1,
            batch_size: 1,
            momentum: 0.0,
            lambda: 0.0,
            initial_lr: 0.3,
            total_rounds: 1,
            augment: false,
        };
        let up = local_train(net, &data, &[0], &cfg, 0, 0, 0).unwrap();
        let x = [0.5, -1.0, 2.0, 0.25];
        let z: Vec<f64> = (0..2)
            .map(|i| b[i] + (0..4).map(|j| w[(i, j)] * x[j]).sum::<f64>())
            .collect();
        let mx = z[0].max(z[1]);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let p: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
        let d = [p[0], p[1] - 1.0];
        let params: Vec<&Param> = up.network.params().collect();
        for i in 0..2 {
            for j in 0..4 {
                let expect = w[(i, j)] - 0.3 * d[i] * x[j];
                assert!((params[0].value[(i, j)] - expect).abs() < 1e-14);
            }
            assert!((params[1].value[(0, i)] - (b[i] - 0.3 * d[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_decreases_on_separable_shard() {
        let data = blobs(64);
        let server = ServerModel::init(linear_arch(), 2, false).unwrap();
        let net = server.full_network().unwrap();
        let shard: Vec<usize> = (0..64).collect();
        let cfg = TrainerConfig {
            initial_lr: 0.05,
            batch_size: 8,
            local_epochs: 1,
            ..Default::default()
        };
        let first = local_train(net.clone(), &data, &shard, &cfg, 1, 0, 0).unwrap();
        let two = TrainerConfig { local_epochs: 2, ..cfg };
        let second = local_train(net, &data, &shard, &two, 1, 0, 0).unwrap();
        assert!(
            second.final_loss < first.final_loss,
            "{} {}",
            second.final_loss,
            first.final_loss
        );

        let again = local_train(server.full_network().unwrap(), &data, &shard, &two, 1, 0, 0).unwrap();
        for (a, b) in again.network.params().zip(second.network.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn divergence_reports_step() {
        let data = blobs(32);
        let server = ServerModel::init(linear_arch(), 2, false).unwrap();
        let cfg = TrainerConfig {
            initial_lr: 1e200,
            batch_size: 4,
            momentum: 0.0,
            ..Default::default()
        };
        let shard: Vec<usize> = (0..32).collect();
        match local_train(server.full_network().unwrap(), &data, &shard, &cfg, 0, 0, 0) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("{other:?}"),
        }
    }
}
