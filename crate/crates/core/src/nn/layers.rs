//! Forward and backward kernels for the individual layer types.
//!
//! The `*_fwd` / `*_bwd` pairs are what [`Network`](super::Network) runs;
//! the `pub` wrappers expose single-layer forward passes on their own.

use super::arch::ConvLayerSpec;
use super::tensor::ActivationTensor;
use crate::error::{ensure, Error, Result};
use crate::linalg::{col2im_batch, gemm, im2col_batch, ConvGeometry, MatRef, Matrix};

/// Batch-norm variance epsilon.
pub const BN_EPSILON: f64 = 1e-5;

fn is_pointwise(geom: ConvGeometry) -> bool {
    geom.kernel == 1 && geom.stride == 1 && geom.padding == 0
}

/// Lowers `x` into the `(C·k²) × (B·H'·W')` column buffer.
pub(crate) fn lower(x: &ActivationTensor, geom: ConvGeometry) -> Result<(Vec<f64>, usize, usize)> {
    let (oh, ow) = geom.output_dims(x.height, x.width)?;
    if is_pointwise(geom) {
        return Ok((x.data.clone(), oh, ow));
    }
    let k2 = geom.kernel * geom.kernel;
    let mut cols = vec![0.0; x.channels * k2 * x.batch * oh * ow];
    im2col_batch(&x.data, x.channels, x.batch, x.height, x.width, geom, &mut cols);
    Ok((cols, oh, ow))
}

fn lift(dcols: Vec<f64>, in_shape: (usize, usize, usize, usize), geom: ConvGeometry) -> ActivationTensor {
    let (b, c, h, w) = in_shape;
    if is_pointwise(geom) {
        return ActivationTensor {
            batch: b,
            channels: c,
            height: h,
            width: w,
            data: dcols,
        };
    }
    let mut dx = ActivationTensor::zeros(b, c, h, w);
    col2im_batch(&dcols, c, b, h, w, geom, &mut dx.data);
    dx
}

fn add_bias(y: &mut ActivationTensor, bias: &[f64]) {
    for (c, &bv) in bias.iter().enumerate().take(y.channels) {
        y.channel_mut(c).iter_mut().for_each(|v| *v += bv);
    }
}

fn bias_grad(dy: &ActivationTensor, db: &mut [f64]) {
    for (c, g) in db.iter_mut().enumerate().take(dy.channels) {
        *g += dy.channel(c).iter().sum::<f64>();
    }
}

pub(crate) fn shape_of(x: &ActivationTensor) -> (usize, usize, usize, usize) {
    (x.batch, x.channels, x.height, x.width)
}

/// Plain convolution `Y = W·im2col(X) + b`. Returns the output and the
/// column buffer needed by the backward pass.
pub(crate) fn conv_fwd(
    w: &Matrix,
    bias: Option<&[f64]>,
    x: &ActivationTensor,
    geom: ConvGeometry,
) -> Result<(ActivationTensor, Vec<f64>)> {
    let k2 = geom.kernel * geom.kernel;
    ensure(w.cols() == x.channels * k2, || {
        format!(
            "kernel matrix has {} columns but input has {} channels with {}x{} kernels",
            w.cols(),
            x.channels,
            geom.kernel,
            geom.kernel
        )
    })?;
    let (cols, oh, ow) = lower(x, geom)?;
    let n = w.rows();
    let m = x.batch * oh * ow;
    let mut y = ActivationTensor::zeros(x.batch, n, oh, ow);
    gemm(
        n,
        m,
        w.cols(),
        1.0,
        MatRef::new(w.data(), w.cols(), false),
        MatRef::new(&cols, m, false),
        0.0,
        &mut y.data,
    );
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    Ok((y, cols))
}

/// Accumulates `dW`, `db` and returns `dX`.
pub(crate) fn conv_bwd(
    w: &Matrix,
    cols: &[f64],
    in_shape: (usize, usize, usize, usize),
    geom: ConvGeometry,
    dy: &ActivationTensor,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> ActivationTensor {
    let n = w.rows();
    let kc = w.cols();
    let m = dy.batch * dy.plane();
    gemm(
        n,
        kc,
        m,
        1.0,
        MatRef::new(&dy.data, m, false),
        MatRef::new(cols, m, true),
        1.0,
        dw,
    );
    if let Some(db) = db {
        bias_grad(dy, db);
    }
    let mut dcols = vec![0.0; kc * m];
    gemm(
        kc,
        m,
        n,
        1.0,
        MatRef::new(w.data(), kc, true),
        MatRef::new(&dy.data, m, false),
        0.0,
        &mut dcols,
    );
    lift(dcols, in_shape, geom)
}

/// Two-sublayer convolution: `Conv_V` (`r` kernels over the receptive field)
/// then `Conv_U` (a 1×1 convolution from `r` to `r_out` channels). Returns the
/// output, the column buffer, and the `r`-channel intermediate.
pub(crate) fn factor_fwd(
    u: &Matrix,
    v: &Matrix,
    bias: Option<&[f64]>,
    x: &ActivationTensor,
    geom: ConvGeometry,
) -> Result<(ActivationTensor, Vec<f64>, Vec<f64>)> {
    let k2 = geom.kernel * geom.kernel;
    ensure(u.cols() == v.rows(), || {
        format!(
            "factor widths disagree: u has {} columns, v has {} rows",
            u.cols(),
            v.rows()
        )
    })?;
    ensure(v.cols() == x.channels * k2, || {
        format!(
            "v factor has {} columns but input has {} channels with {}x{} kernels",
            v.cols(),
            x.channels,
            geom.kernel,
            geom.kernel
        )
    })?;
    let (cols, oh, ow) = lower(x, geom)?;
    let r = v.rows();
    let m = x.batch * oh * ow;
    let mut z = vec![0.0; r * m];
    gemm(
        r,
        m,
        v.cols(),
        1.0,
        MatRef::new(v.data(), v.cols(), false),
        MatRef::new(&cols, m, false),
        0.0,
        &mut z,
    );
    let mut y = ActivationTensor::zeros(x.batch, u.rows(), oh, ow);
    gemm(
        u.rows(),
        m,
        r,
        1.0,
        MatRef::new(u.data(), r, false),
        MatRef::new(&z, m, false),
        0.0,
        &mut y.data,
    );
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    Ok((y, cols, z))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn factor_bwd(
    u: &Matrix,
    v: &Matrix,
    cols: &[f64],
    z: &[f64],
    in_shape: (usize, usize, usize, usize),
    geom: ConvGeometry,
    dy: &ActivationTensor,
    du: &mut [f64],
    dv: &mut [f64],
    db: Option<&mut [f64]>,
) -> ActivationTensor {
    let r = v.rows();
    let kc = v.cols();
    let n = u.rows();
    let m = dy.batch * dy.plane();
    gemm(
        n,
        r,
        m,
        1.0,
        MatRef::new(&dy.data, m, false),
        MatRef::new(z, m, true),
        1.0,
        du,
    );
    if let Some(db) = db {
        bias_grad(dy, db);
    }
    let mut dz = vec![0.0; r * m];
    gemm(
        r,
        m,
        n,
        1.0,
        MatRef::new(u.data(), r, true),
        MatRef::new(&dy.data, m, false),
        0.0,
        &mut dz,
    );
    gemm(
        r,
        kc,
        m,
        1.0,
        MatRef::new(&dz, m, false),
        MatRef::new(cols, m, true),
        1.0,
        dv,
    );
    let mut dcols = vec![0.0; kc * m];
    gemm(
        kc,
        m,
        r,
        1.0,
        MatRef::new(v.data(), kc, true),
        MatRef::new(&dz, m, false),
        0.0,
        &mut dcols,
    );
    lift(dcols, in_shape, geom)
}

/// Batch norm over the current batch. Returns output, normalized input, and
/// per-channel `1/√(var+ε)`.
pub(crate) fn bn_fwd(
    gamma: &[f64],
    beta: &[f64],
    x: &ActivationTensor,
) -> Result<(ActivationTensor, Vec<f64>, Vec<f64>)> {
    ensure(gamma.len() >= x.channels && beta.len() >= x.channels, || {
        format!(
            "batch norm has {} parameters but input has {} channels",
            gamma.len().min(beta.len()),
            x.channels
        )
    })?;
    let n = (x.batch * x.plane()) as f64;
    let mut y = ActivationTensor::zeros(x.batch, x.channels, x.height, x.width);
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; x.channels];
    let len = x.batch * x.plane();
    for c in 0..x.channels {
        let xs = x.channel(c);
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + BN_EPSILON).sqrt();
        inv_std[c] = is;
        let xh = &mut xhat[c * len..(c + 1) * len];
        for (h, &v) in xh.iter_mut().zip(xs) {
            *h = (v - mean) * is;
        }
        for (o, &h) in y.channel_mut(c).iter_mut().zip(xh.iter()) {
            *o = gamma[c] * h + beta[c];
        }
    }
    Ok((y, xhat, inv_std))
}

pub(crate) fn bn_bwd(
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    dy: &ActivationTensor,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> ActivationTensor {
    let len = dy.batch * dy.plane();
    let n = len as f64;
    let mut dx = ActivationTensor::zeros(dy.batch, dy.channels, dy.height, dy.width);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let xh = &xhat[c * len..(c + 1) * len];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        let scale = gamma[c] * inv_std[c] / n;
        for ((d, &gi), &h) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
            *d = scale * (n * gi - sum_g - h * sum_gx);
        }
    }
    dx
}

pub(crate) fn relu_fwd(x: &ActivationTensor) -> ActivationTensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    y
}

/// `y` is the forward output; the derivative at 0 is taken as 0.
pub(crate) fn relu_bwd(y: &ActivationTensor, dy: &ActivationTensor) -> ActivationTensor {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Max pooling without padding. Returns output and the flat input index of
/// each output's maximum.
pub(crate) fn maxpool_fwd(
    x: &ActivationTensor,
    kernel: usize,
    stride: usize,
) -> Result<(ActivationTensor, Vec<usize>)> {
    let (oh, ow) = ConvGeometry::new(kernel, stride, 0).output_dims(x.height, x.width)?;
    let mut y = ActivationTensor::zeros(x.batch, x.channels, oh, ow);
    let mut arg = vec![0usize; y.len()];
    let (h, w) = (x.height, x.width);
    for plane in 0..x.channels * x.batch {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            at = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                y.data[o] = best;
                arg[o] = at;
            }
        }
    }
    Ok((y, arg))
}

pub(crate) fn maxpool_bwd(
    arg: &[usize],
    in_shape: (usize, usize, usize, usize),
    dy: &ActivationTensor,
) -> ActivationTensor {
    let (b, c, h, w) = in_shape;
    let mut dx = ActivationTensor::zeros(b, c, h, w);
    for (&i, &g) in arg.iter().zip(&dy.data) {
        dx.data[i] += g;
    }
    dx
}

pub(crate) fn avgpool_fwd(x: &ActivationTensor) -> ActivationTensor {
    let hw = x.plane();
    let mut y = ActivationTensor::zeros(x.batch, x.channels, 1, 1);
    for (o, plane) in y.data.iter_mut().zip(x.data.chunks_exact(hw)) {
        *o = plane.iter().sum::<f64>() / hw as f64;
    }
    y
}

pub(crate) fn avgpool_bwd(in_shape: (usize, usize, usize, usize), dy: &ActivationTensor) -> ActivationTensor {
    let (b, c, h, w) = in_shape;
    let hw = h * w;
    let mut dx = ActivationTensor::zeros(b, c, h, w);
    for (plane, &g) in dx.data.chunks_exact_mut(hw).zip(&dy.data) {
        plane.iter_mut().for_each(|v| *v = g / hw as f64);
    }
    dx
}

/// Elementwise sum of inputs that may differ in channel count; the output has
/// the widest input's channels and narrower inputs contribute zeros beyond
/// their width. Channel-major storage makes a narrower input a data prefix.
pub(crate) fn add_fwd(inputs: &[&ActivationTensor]) -> Result<ActivationTensor> {
    let widest = inputs
        .iter()
        .max_by_key(|t| t.channels)
        .ok_or_else(|| Error::contract("residual add needs at least one input"))?;
    let mut y = ActivationTensor::zeros(widest.batch, widest.channels, widest.height, widest.width);
    for t in inputs {
        ensure(t.batch == y.batch && t.height == y.height && t.width == y.width, || {
            "residual add inputs differ in batch or spatial size".to_string()
        })?;
        for (o, v) in y.data.iter_mut().zip(&t.data) {
            *o += v;
        }
    }
    Ok(y)
}

pub(crate) fn add_bwd(input_channels: usize, dy: &ActivationTensor) -> ActivationTensor {
    let n = input_channels * dy.batch * dy.plane();
    ActivationTensor {
        batch: dy.batch,
        channels: input_channels,
        height: dy.height,
        width: dy.width,
        data: dy.data[..n].to_vec(),
    }
}

/// `B×C×H×W → B×(C·H·W)×1×1`, features ordered channel, row, column.
pub(crate) fn flatten_fwd(x: &ActivationTensor) -> ActivationTensor {
    let hw = x.plane();
    let b = x.batch;
    let mut y = ActivationTensor::zeros(b, x.channels * hw, 1, 1);
    for c in 0..x.channels {
        for bi in 0..b {
            let src = &x.data[(c * b + bi) * hw..][..hw];
            for (s, &v) in src.iter().enumerate() {
                y.data[(c * hw + s) * b + bi] = v;
            }
        }
    }
    y
}

pub(crate) fn flatten_bwd(in_shape: (usize, usize, usize, usize), dy: &ActivationTensor) -> ActivationTensor {
    let (b, c, h, w) = in_shape;
    let hw = h * w;
    let mut dx = ActivationTensor::zeros(b, c, h, w);
    for ci in 0..c {
        for bi in 0..b {
            let dst = &mut dx.data[(ci * b + bi) * hw..][..hw];
            for (s, d) in dst.iter_mut().enumerate() {
                *d = dy.data[(ci * hw + s) * b + bi];
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy over the batch. `logits` has one channel per
/// class and 1×1 spatial size. Returns the loss, `∂loss/∂logits`, and the
/// number of correct top-1 predictions.
pub fn softmax_cross_entropy(logits: &ActivationTensor, labels: &[usize]) -> Result<(f64, ActivationTensor, usize)> {
    let b = logits.batch;
    let k = logits.channels;
    ensure(logits.plane() == 1, || "logits must have 1x1 spatial size".to_string())?;
    ensure(labels.len() == b, || {
        format!("{} labels for a batch of {b}", labels.len())
    })?;
    ensure(b > 0 && k > 0, || "empty logits".to_string())?;
    let mut grad = ActivationTensor::zeros(b, k, 1, 1);
    let mut loss = 0.0;
    let mut correct = 0;
    let mut z = vec![0.0; k];
    for (bi, &label) in labels.iter().enumerate() {
        ensure(label < k, || format!("label {label} out of range for {k} classes"))?;
        for (c, zc) in z.iter_mut().enumerate() {
            *zc = logits.data[c * b + bi];
        }
        let (mut arg, mut mx) = (0, f64::NEG_INFINITY);
        for (c, &v) in z.iter().enumerate() {
            if v > mx {
                mx = v;
                arg = c;
            }
        }
        if arg == label {
            correct += 1;
        }
        let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        let log_sum = sum.ln() + mx;
        loss += log_sum - z[label];
        for (c, &v) in z.iter().enumerate() {
            let p = (v - log_sum).exp();
            grad.data[c * b + bi] = (p - if c == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad, correct))
}

/// Convolution of `x` with the flattened `N × M·k²` kernel matrix.
pub fn conv_forward(spec: &ConvLayerSpec, kernels: &Matrix, x: &ActivationTensor) -> Result<ActivationTensor> {
    ensure(x.channels == spec.in_channels, || {
        format!("input has {} channels, layer expects {}", x.channels, spec.in_channels)
    })?;
    ensure(kernels.rows() == spec.out_channels, || {
        format!(
            "kernel matrix has {} rows, layer has {} output channels",
            kernels.rows(),
            spec.out_channels
        )
    })?;
    Ok(conv_fwd(kernels, None, x, spec.geometry())?.0)
}

/// `Conv_U ∘ Conv_V` with `u_set: r_out × r` and `v_set: r × M·k²`.
pub fn factorized_conv_forward(
    u_set: &Matrix,
    v_set: &Matrix,
    x: &ActivationTensor,
    geom: ConvGeometry,
) -> Result<ActivationTensor> {
    Ok(factor_fwd(u_set, v_set, None, x, geom)?.0)
}

pub fn batchnorm_forward(gamma: &[f64], beta: &[f64], x: &ActivationTensor) -> Result<ActivationTensor> {
    ensure(gamma.len() == x.channels && beta.len() == x.channels, || {
        format!(
            "batch norm parameter lengths ({}, {}) do not match {} channels",
            gamma.len(),
            beta.len(),
            x.channels
        )
    })?;
    Ok(bn_fwd(gamma, beta, x)?.0)
}
