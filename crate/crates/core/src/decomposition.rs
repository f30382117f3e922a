//! Moving layer weights between original space and principal kernels
//! `W̄ = Σ σ_i u_i v_iᵀ`.

use crate::error::{ensure, Error, Result};
use crate::linalg::{svd_thin, Matrix};

/// 4-D convolution weights `N × M × k × k`, row-major. Dense layers use
/// `k = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub data: Vec<f64>,
}

impl ConvWeights {
    pub fn new(out_channels: usize, in_channels: usize, kernel_size: usize, data: Vec<f64>) -> Result<Self> {
        ensure(
            data.len() == out_channels * in_channels * kernel_size * kernel_size,
            || {
                format!(
                    "weight length {} does not match {out_channels}x{in_channels}x{kernel_size}x{kernel_size}",
                    data.len()
                )
            },
        )?;
        Ok(ConvWeights {
            out_channels,
            in_channels,
            kernel_size,
            data,
        })
    }

    /// The flattened `N × M·k²` kernel matrix.
    pub fn as_matrix(&self) -> Matrix {
        let cols = self.in_channels * self.kernel_size * self.kernel_size;
        Matrix::from_vec(self.out_channels, cols, self.data.clone()).expect("shape checked")
    }

    pub fn from_matrix(w: &Matrix, in_channels: usize, kernel_size: usize) -> Result<Self> {
        ConvWeights::new(w.rows(), in_channels, kernel_size, w.data().to_vec())
    }
}

/// SVD factors of one layer: `p = min(N, M·k²)` principal kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalKernelSet {
    pub in_channels: usize,
    pub kernel_size: usize,
    /// Descending, nonnegative.
    pub sigma: Vec<f64>,
    /// `N × p`, orthonormal columns.
    pub u: Matrix,
    /// `p × M·k²`, orthonormal rows.
    pub v: Matrix,
}

/// Client-side factors with `√σ` folded into both sides, plus the rows of
/// each selected `u` that the client does not compute.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedFactors {
    /// `r_out × r`; column `j` is `√σ_i·u_i(1:r_out)` for the `j`-th selected `i`.
    pub u_prime: Matrix,
    /// `r × M·k²`; row `j` is `√σ_i·v_i`.
    pub v_prime: Matrix,
    /// `(N − r_out) × r`, the withheld rows `√σ_i·u_i(r_out+1:N)`.
    pub u_hat: Matrix,
}

impl PrincipalKernelSet {
    pub fn num_kernels(&self) -> usize {
        self.sigma.len()
    }

    pub fn out_channels(&self) -> usize {
        self.u.rows()
    }

    /// `√σ_j·u_j` as an `N × p` matrix.
    pub fn merged_u(&self) -> Matrix {
        let s: Vec<f64> = self.sigma.iter().map(|v| v.sqrt()).collect();
        Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| self.u[(i, j)] * s[j])
    }

    /// `√σ_i·v_i` as a `p × M·k²` matrix.
    pub fn merged_v(&self) -> Matrix {
        let s: Vec<f64> = self.sigma.iter().map(|v| v.sqrt()).collect();
        Matrix::from_fn(self.v.rows(), self.v.cols(), |i, j| self.v[(i, j)] * s[i])
    }

    /// `Σ σ_i u_i v_iᵀ` as the `N × M·k²` matrix.
    pub fn weight_matrix(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul(&self.v).expect("factor shapes agree")
    }
}

/// Decomposes an `N × M·k²` kernel matrix.
pub fn decompose_matrix(w: &Matrix, in_channels: usize, kernel_size: usize) -> Result<PrincipalKernelSet> {
    ensure(w.cols() == in_channels * kernel_size * kernel_size, || {
        format!(
            "kernel matrix has {} columns, expected {in_channels}·{kernel_size}²",
            w.cols()
        )
    })?;
    let svd = svd_thin(w)?;
    Ok(PrincipalKernelSet {
        in_channels,
        kernel_size,
        sigma: svd.sigma,
        u: svd.u,
        v: svd.vt,
    })
}

pub fn decompose_conv(w: &ConvWeights) -> Result<PrincipalKernelSet> {
    decompose_matrix(&w.as_matrix(), w.in_channels, w.kernel_size)
}

pub fn reconstruct_conv(pks: &PrincipalKernelSet) -> ConvWeights {
    ConvWeights {
        out_channels: pks.out_channels(),
        in_channels: pks.in_channels,
        kernel_size: pks.kernel_size,
        data: pks.weight_matrix().into_vec(),
    }
}

/// `2^H` where `H` is the Shannon entropy (bits) of `σ_i / Σσ_j`.
pub fn effective_rank(sigma: &[f64]) -> Result<f64> {
    ensure(sigma.iter().all(|s| s.is_finite() && *s >= 0.0), || {
        "singular values must be finite and nonnegative".to_string()
    })?;
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("effective rank of an all-zero spectrum"));
    }
    let h: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.log2()
        })
        .sum();
    let nonzero = sigma.iter().filter(|&&s| s > 0.0).count() as f64;
    Ok(h.exp2().clamp(1.0, nonzero))
}

/// Merged factors for kernels `indices` (in that order) keeping the first
/// `r_out` output channels.
pub fn merge_sigma(pks: &PrincipalKernelSet, indices: &[usize], r_out: usize) -> Result<MergedFactors> {
    ensure(!indices.is_empty(), || "empty kernel selection".to_string())?;
    let p = pks.num_kernels();
    let n = pks.out_channels();
    ensure(indices.iter().all(|&i| i < p), || {
        format!("kernel index out of range for {p} kernels")
    })?;
    ensure((1..=n).contains(&r_out), || format!("r_out {r_out} outside 1..={n}"))?;
    let roots: Vec<f64> = indices.iter().map(|&i| pks.sigma[i].sqrt()).collect();
    let r = indices.len();
    let u_prime = Matrix::from_fn(r_out, r, |row, j| pks.u[(row, indices[j])] * roots[j]);
    let u_hat = Matrix::from_fn(n - r_out, r, |row, j| pks.u[(r_out + row, indices[j])] * roots[j]);
    let v_prime = Matrix::from_fn(r, pks.v.cols(), |j, col| pks.v[(indices[j], col)] * roots[j]);
    Ok(MergedFactors {
        u_prime,
        v_prime,
        u_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RandomStream, StreamKey};
    use proptest::prelude::*;

    fn random_weights(seed: u64, n: usize, m: usize, k: usize) -> ConvWeights {
        let mut s = RandomStream::new(seed, StreamKey::new(0, 0, 0));
        ConvWeights::new(n, m, k, (0..n * m * k * k).map(|_| s.normal()).collect()).unwrap()
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn single_output_channel_has_frobenius_singular_value() {
        let w = random_weights(1, 1, 3, 3);
        let pks = decompose_conv(&w).unwrap();
        assert_eq!(pks.num_kernels(), 1);
        let norm = w.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((pks.sigma[0] - norm).abs() < 1e-12 * norm);
    }

    #[test]
    fn orthogonal_rows_of_equal_norm() {
        let c = 2.5;
        let mut data = vec![0.0; 3 * 4];
        for i in 0..3 {
            data[i * 4 + (i + 1) % 4] = if i == 1 { -c } else { c };
        }
        let pks = decompose_conv(&ConvWeights::new(3, 4, 1, data).unwrap()).unwrap();
        assert!(pks.sigma.iter().all(|s| (s - c).abs() < 1e-12));
    }

    #[test]
    fn wide_layer_round_trip() {
        let w = random_weights(2, 64, 3, 3);
        let pks = decompose_conv(&w).unwrap();
        assert_eq!(pks.num_kernels(), 27);
        assert!(rel_diff(&w.data, &reconstruct_conv(&pks).data) <= 1e-8);
    }

    #[test]
    fn rank_one_reconstruction_and_zero_tail() {
        let u = [0.6, 0.8];
        let v = [1.0, 0.0, 0.0, 0.0];
        let data: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| 3.0 * a * b)).collect();
        let w = ConvWeights::new(2, 1, 2, data.clone()).unwrap();
        let pks = decompose_conv(&w).unwrap();
        assert!(pks.sigma[1].abs() < 1e-12);
        let rebuilt = reconstruct_conv(&pks);
        assert!(rel_diff(&data, &rebuilt.data) < 1e-12);
        let mut truncated = pks.clone();
        truncated.sigma[1] = 0.0;
        assert!(rel_diff(&data, &reconstruct_conv(&truncated).data) < 1e-12);
    }

    #[test]
    fn effective_rank_cases() {
        assert!((effective_rank(&[2.0; 5]).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(effective_rank(&[3.0, 0.0, 0.0]).unwrap(), 1.0);
        let p = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        let h = -(p[0] * f64::log2(p[0]) + p[1] * f64::log2(p[1]) + p[2] * f64::log2(p[2]));
        assert!((effective_rank(&[4.0, 2.0, 1.0]).unwrap() - 2f64.powf(h)).abs() < 1e-12);
        assert!(effective_rank(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn merge_with_unit_sigma_is_raw_factors() {
        let pks = PrincipalKernelSet {
            in_channels: 2,
            kernel_size: 1,
            sigma: vec![1.0, 1.0],
            u: Matrix::identity(2),
            v: Matrix::identity(2),
        };
        let m = merge_sigma(&pks, &[1, 0], 2).unwrap();
        assert_eq!(m.u_prime, Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(m.v_prime, Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(m.u_hat.rows(), 0);
        assert!(merge_sigma(&pks, &[], 2).is_err());
        assert!(merge_sigma(&pks, &[2], 2).is_err());
    }

    #[test]
    fn merged_products_sum_to_weights() {
        let w = random_weights(3, 6, 2, 3);
        let pks = decompose_conv(&w).unwrap();
        let all: Vec<usize> = (0..pks.num_kernels()).collect();
        let m = merge_sigma(&pks, &all, 6).unwrap();
        let mut sum = Matrix::zeros(6, 18);
        for (j, &i) in all.iter().enumerate() {
            for a in 0..6 {
                for b in 0..18 {
                    sum[(a, b)] += m.u_prime[(a, j)] * m.v_prime[(j, b)];
                }
            }
            // direct Σ σ_i u_i v_iᵀ oracle
            for a in 0..6 {
                for b in 0..18 {
                    sum[(a, b)] -= pks.sigma[i] * pks.u[(a, i)] * pks.v[(i, b)];
                }
            }
        }
        assert!(sum.data().iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn u_hat_holds_withheld_rows() {
        let w = random_weights(4, 5, 3, 1);
        let pks = decompose_conv(&w).unwrap();
        let m = merge_sigma(&pks, &[2, 0], 3).unwrap();
        assert_eq!(m.u_hat.shape(), (2, 2));
        let s = pks.sigma[2].sqrt();
        assert_eq!(m.u_hat[(1, 0)], pks.u[(4, 2)] * s);
        assert_eq!(m.u_prime[(2, 0)], pks.u[(2, 2)] * s);
    }

    proptest! {
        #[test]
        fn effective_rank_is_scale_invariant_and_bounded(
            sigma in proptest::collection::vec(0.0f64..10.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(sigma.iter().any(|&s| s > 1e-6));
            let a = effective_rank(&sigma).unwrap();
            let scaled: Vec<f64> = sigma.iter().map(|s| s * c).collect();
            let b = effective_rank(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
            let nonzero = sigma.iter().filter(|&&s| s > 0.0).count() as f64;
            prop_assert!(a >= 1.0 && a <= nonzero + 1e-12);
        }
    }
}
