//! Dense linear algebra: matrices, thin SVD, and convolution lowering.

mod im2col;
mod matrix;
mod svd;

pub use im2col::{im2col, ConvGeometry};
pub use matrix::{frobenius_norm, matmul, Matrix};
pub use svd::{svd_thin, SvdResult, JACOBI_TOLERANCE, MAX_SWEEPS};

pub(crate) use im2col::{col2im_batch, im2col_batch};
pub(crate) use matrix::{gemm, MatRef};
