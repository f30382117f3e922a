use super::layers::*;
use super::*;
use crate::linalg::{im2col, svd_thin, ConvGeometry, Matrix};
use crate::rng::{RandomStream, StreamKey};

fn random_tensor(s: &mut RandomStream, b: usize, c: usize, h: usize, w: usize) -> ActivationTensor {
    let data: Vec<f64> = (0..b * c * h * w).map(|_| s.normal()).collect();
    ActivationTensor::from_channel_major(b, c, h, w, data).unwrap()
}

fn random_matrix(s: &mut RandomStream, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| s.normal())
}

fn layer(name: &str, op: Op, inputs: Vec<usize>, params: Vec<Param>) -> Layer {
    Layer {
        name: name.into(),
        op,
        inputs,
        params,
    }
}

/// conv → bn → relu → maxpool → factorized conv (+ skip) → relu → avgpool → dense.
fn toy_net(s: &mut RandomStream) -> Network {
    let g3 = ConvGeometry::new(3, 1, 1);
    let scale = |mut m: Matrix, f: f64| {
        m.scale(f);
        m
    };
    let layers = vec![
        layer("input", Op::Input, vec![], vec![]),
        layer(
            "conv1",
            Op::Conv(g3),
            vec![0],
            vec![
                Param::new(ParamRole::Weight, scale(random_matrix(s, 4, 2 * 9), 0.4)),
                Param::new(ParamRole::Bias, random_matrix(s, 1, 4)),
            ],
        ),
        layer(
            "bn1",
            Op::BatchNorm,
            vec![1],
            vec![
                Param::new(ParamRole::Gamma, Matrix::from_fn(1, 4, |_, j| 1.0 + 0.1 * j as f64)),
                Param::new(ParamRole::Beta, random_matrix(s, 1, 4)),
            ],
        ),
        layer("relu1", Op::Relu, vec![2], vec![]),
        layer("pool1", Op::MaxPool { kernel: 2, stride: 2 }, vec![3], vec![]),
        layer(
            "conv2",
            Op::Factorized(g3),
            vec![4],
            vec![
                Param::new(ParamRole::FactorV, scale(random_matrix(s, 3, 4 * 9), 0.4)),
                Param::new(ParamRole::FactorU, scale(random_matrix(s, 4, 3), 0.6)),
                Param::new(ParamRole::Bias, random_matrix(s, 1, 4)),
            ],
        ),
        layer("add", Op::Add, vec![5, 4], vec![]),
        layer("relu2", Op::Relu, vec![6], vec![]),
        layer("gap", Op::GlobalAvgPool, vec![7], vec![]),
        layer("flat", Op::Flatten, vec![8], vec![]),
        layer(
            "fc",
            Op::Conv(ConvGeometry::new(1, 1, 0)),
            vec![9],
            vec![
                Param::new(ParamRole::Weight, random_matrix(s, 3, 4)),
                Param::new(ParamRole::Bias, random_matrix(s, 1, 3)),
            ],
        ),
    ];
    Network::new(layers).unwrap()
}

fn loss_of(net: &Network, x: &ActivationTensor, labels: &[usize]) -> f64 {
    net.evaluate_batch(x, labels).unwrap().0
}

/// Relative error with an absolute floor at the finite-difference noise level
/// (a bias feeding batch norm has an exactly zero gradient).
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    for seed in 0..3 {
        let mut s = RandomStream::new(seed, StreamKey::new(0, 0, 0));
        let mut net = toy_net(&mut s);
        let x = random_tensor(&mut s, 3, 2, 6, 6);
        let labels = [0, 2, 1];
        net.zero_grad();
        net.loss_and_grad(&x, &labels).unwrap();
        let analytic: Vec<Vec<f64>> = net.params().map(|p| p.grad.data().to_vec()).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut pi = 0;
        for li in 0..net.layers.len() {
            for k in 0..net.layers[li].params.len() {
                for e in 0..net.layers[li].params[k].value.data().len() {
                    let orig = net.layers[li].params[k].value.data()[e];
                    net.layers[li].params[k].value.data_mut()[e] = orig + h;
                    let lp = loss_of(&net, &x, &labels);
                    net.layers[li].params[k].value.data_mut()[e] = orig - h;
                    let lm = loss_of(&net, &x, &labels);
                    net.layers[li].params[k].value.data_mut()[e] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let r = rel_err(fd, analytic[pi][e]);
                    worst = worst.max(r);
                }
                pi += 1;
            }
        }
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    let mut s = RandomStream::new(11, StreamKey::new(0, 0, 0));
    let mut net = toy_net(&mut s);
    let mut x = random_tensor(&mut s, 2, 2, 6, 6);
    let labels = [1, 0];
    let tape = net.forward(&x).unwrap();
    let (_, g, _) = softmax_cross_entropy(tape.output(), &labels).unwrap();
    let dx = net.backward(&tape, &g).unwrap();
    let h = 1e-5;
    for e in (0..x.len()).step_by(5) {
        let orig = x.data[e];
        x.data[e] = orig + h;
        let lp = loss_of(&net, &x, &labels);
        x.data[e] = orig - h;
        let lm = loss_of(&net, &x, &labels);
        x.data[e] = orig;
        assert!(rel_err((lp - lm) / (2.0 * h), dx.data[e]) < 1e-4);
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradients() {
    let mut s = RandomStream::new(2, StreamKey::new(0, 0, 0));
    let mut net = toy_net(&mut s);
    let x = random_tensor(&mut s, 2, 2, 6, 6);
    let tape = net.forward(&x).unwrap();
    let zero = ActivationTensor::zeros(2, 3, 1, 1);
    net.zero_grad();
    net.backward(&tape, &zero).unwrap();
    assert!(net.params().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn stale_tape_is_rejected() {
    let mut s = RandomStream::new(3, StreamKey::new(0, 0, 0));
    let mut net = toy_net(&mut s);
    let x = random_tensor(&mut s, 2, 2, 6, 6);
    let tape = net.forward(&x).unwrap();
    for p in net.params_mut() {
        p.value.scale(0.5);
    }
    let g = ActivationTensor::zeros(2, 3, 1, 1);
    assert!(matches!(net.backward(&tape, &g), Err(crate::Error::Contract(_))));
}

#[test]
fn dense_gradient_is_outer_product() {
    // y = W x + b on one sample with 3 inputs and 2 outputs
    let w = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
    let mut net = Network::new(vec![
        layer("input", Op::Input, vec![], vec![]),
        layer(
            "fc",
            Op::Conv(ConvGeometry::new(1, 1, 0)),
            vec![0],
            vec![
                Param::new(ParamRole::Weight, w),
                Param::vector(ParamRole::Bias, vec![0.0, 0.0]),
            ],
        ),
    ])
    .unwrap();
    let x = ActivationTensor::from_nchw(1, 3, 1, 1, &[1.0, -1.0, 2.0]).unwrap();
    let tape = net.forward(&x).unwrap();
    assert_eq!(tape.output().data, vec![5.0, 11.0]);
    let dy = ActivationTensor::from_nchw(1, 2, 1, 1, &[0.5, -2.0]).unwrap();
    let dx = net.backward(&tape, &dy).unwrap();
    let gw = net.layers[1].params[0].grad.data().to_vec();
    assert_eq!(gw, vec![0.5, -0.5, 1.0, -2.0, 2.0, -4.0]);
    assert_eq!(net.layers[1].params[1].grad.data(), &[0.5, -2.0]);
    assert_eq!(dx.data, vec![0.5 - 8.0, 1.0 - 10.0, 1.5 - 12.0]);
}

fn direct_conv(w: &Matrix, x: &ActivationTensor, spec: &ConvLayerSpec) -> ActivationTensor {
    let g = spec.geometry();
    let (oh, ow) = g.output_dims(x.height, x.width).unwrap();
    let k = spec.kernel_size;
    let mut y = ActivationTensor::zeros(x.batch, spec.out_channels, oh, ow);
    for b in 0..x.batch {
        for n in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..x.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    acc += w[(n, (c * k + ky) * k + kx)] * x.at(b, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    y.data[((n * x.batch + b) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv_matches_nested_loops() {
    let mut s = RandomStream::new(5, StreamKey::new(0, 0, 0));
    for spec in [
        ConvLayerSpec::new(4, 3, 3),
        ConvLayerSpec::new(2, 2, 5).stride(2),
        ConvLayerSpec::new(3, 4, 1).stride(2).padding(0),
    ] {
        let x = random_tensor(&mut s, 2, spec.in_channels, 7, 7);
        let w = random_matrix(&mut s, spec.out_channels, spec.in_channels * spec.kernel_size.pow(2));
        let y = conv_forward(&spec, &w, &x).unwrap();
        let oracle = direct_conv(&w, &x, &spec);
        let diff = y
            .data
            .iter()
            .zip(&oracle.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{diff:e}");
    }
}

#[test]
fn conv_trivial_cases() {
    let spec = ConvLayerSpec::new(2, 2, 1).padding(0);
    let x = ActivationTensor::from_nchw(1, 2, 2, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let w = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
    let y = conv_forward(&spec, &w, &x).unwrap();
    assert_eq!(y.to_nchw(), vec![5.0, 6.0, 7.0, 8.0, 1.0, 2.0, 3.0, 4.0]);
    let y0 = conv_forward(&spec, &Matrix::zeros(2, 2), &x).unwrap();
    assert!(y0.data.iter().all(|&v| v == 0.0));
    assert!(conv_forward(&ConvLayerSpec::new(2, 3, 1), &w, &x).is_err());
}

#[test]
fn single_kernel_factorized_conv_selects_first_im2col_row() {
    let mut s = RandomStream::new(6, StreamKey::new(0, 0, 0));
    let x = random_tensor(&mut s, 1, 2, 5, 5);
    let g = ConvGeometry::new(3, 1, 1);
    let mut u = Matrix::zeros(3, 1);
    u[(0, 0)] = 1.0;
    let mut v = Matrix::zeros(1, 18);
    v[(0, 0)] = 1.0;
    let y = factorized_conv_forward(&u, &v, &x, g).unwrap();
    let cols = im2col(&x.to_nchw(), 2, 5, 5, g).unwrap();
    assert_eq!(y.channel(0), cols.row(0));
    assert!(y.channel(1).iter().chain(y.channel(2)).all(|&v| v == 0.0));
}

#[test]
fn full_factorization_matches_reconstructed_conv() {
    let mut s = RandomStream::new(7, StreamKey::new(0, 0, 0));
    let spec = ConvLayerSpec::new(6, 3, 3);
    let w = random_matrix(&mut s, 6, 27);
    let svd = svd_thin(&w).unwrap();
    let p = svd.sigma.len();
    let u = Matrix::from_fn(6, p, |i, j| svd.u[(i, j)] * svd.sigma[j].sqrt());
    let v = Matrix::from_fn(p, 27, |i, j| svd.vt[(i, j)] * svd.sigma[i].sqrt());
    let x = random_tensor(&mut s, 2, 3, 6, 6);
    let a = factorized_conv_forward(&u, &v, &x, spec.geometry()).unwrap();
    let b = conv_forward(&spec, &svd.reconstruct(), &x).unwrap();
    let scale = b.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-10 * scale, "{diff:e}");
}

#[test]
fn principal_kernel_outputs_are_orthogonal() {
    // Ȳ_i = σ_i u_i v_iᵀ X̄; the Frobenius inner product of two such maps is
    // σ_i σ_j (u_iᵀu_j)(v_iᵀ X̄ X̄ᵀ v_j) = 0 for i ≠ j.
    let mut s = RandomStream::new(8, StreamKey::new(0, 0, 0));
    let w = random_matrix(&mut s, 8, 18);
    let svd = svd_thin(&w).unwrap();
    let x = random_tensor(&mut s, 1, 2, 6, 6);
    let g = ConvGeometry::new(3, 1, 1);
    let outs: Vec<Vec<f64>> = (0..svd.sigma.len())
        .map(|i| {
            let u = Matrix::from_fn(8, 1, |r, _| svd.u[(r, i)] * svd.sigma[i]);
            let v = Matrix::from_fn(1, 18, |_, c| svd.vt[(i, c)]);
            factorized_conv_forward(&u, &v, &x, g).unwrap().data
        })
        .collect();
    for i in 0..outs.len() {
        for j in 0..i {
            let dot: f64 = outs[i].iter().zip(&outs[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = outs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nj: f64 = outs[j].iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(dot.abs() / (ni * nj) <= 1e-8);
        }
    }
}

#[test]
fn batchnorm_cases() {
    let x = ActivationTensor::from_nchw(2, 2, 1, 2, &[3.0, 3.0, -1.0, -1.0, 3.0, 3.0, -1.0, -1.0]).unwrap();
    let y = batchnorm_forward(&[1.0, 1.0], &[0.0, 0.0], &x).unwrap();
    assert!(y.data.iter().all(|&v| v == 0.0));

    let mut s = RandomStream::new(9, StreamKey::new(0, 0, 0));
    let x = random_tensor(&mut s, 4, 3, 3, 3);
    let y = batchnorm_forward(&[0.0; 3], &[0.5, -1.0, 2.0], &x).unwrap();
    for (c, b) in [0.5, -1.0, 2.0].iter().enumerate() {
        assert!(y.channel(c).iter().all(|v| v == b));
    }
    let y = batchnorm_forward(&[1.0; 3], &[0.0; 3], &x).unwrap();
    for c in 0..3 {
        let ch = y.channel(c);
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        // ε shrinks the variance slightly below one
        assert!((var - 1.0).abs() < 1e-4);
    }
    let one = random_tensor(&mut s, 1, 2, 1, 1);
    let y = batchnorm_forward(&[1.0, 1.0], &[0.0, 0.0], &one).unwrap();
    assert!(y.is_finite());
}

#[test]
fn uniform_logits_give_log_num_classes() {
    let logits = ActivationTensor::zeros(4, 10, 1, 1);
    let (loss, grad, _) = softmax_cross_entropy(&logits, &[0, 3, 9, 5]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-9);
    let total: f64 = grad.data.iter().sum();
    assert!(total.abs() < 1e-12);
}

#[test]
fn cross_entropy_is_nonnegative() {
    let mut s = RandomStream::new(10, StreamKey::new(0, 0, 0));
    for _ in 0..50 {
        let mut logits = random_tensor(&mut s, 3, 5, 1, 1);
        logits.data.iter_mut().for_each(|v| *v *= 20.0);
        let (loss, _, _) = softmax_cross_entropy(&logits, &[0, 1, 4]).unwrap();
        assert!(loss >= 0.0 && loss.is_finite());
    }
}

#[test]
fn narrow_residual_input_is_zero_extended() {
    let a = ActivationTensor::from_nchw(1, 2, 1, 1, &[1.0, 2.0]).unwrap();
    let b = ActivationTensor::from_nchw(1, 1, 1, 1, &[10.0]).unwrap();
    let y = add_fwd(&[&a, &b]).unwrap();
    assert_eq!(y.data, vec![11.0, 2.0]);
}

#[test]
fn relu_keeps_nan() {
    let x = ActivationTensor::from_nchw(1, 3, 1, 1, &[-1.0, f64::NAN, 2.0]).unwrap();
    let y = relu_fwd(&x);
    assert_eq!(y.data[0], 0.0);
    assert!(y.data[1].is_nan());
    assert_eq!(y.data[2], 2.0);
}
