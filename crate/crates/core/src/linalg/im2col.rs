use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// Output spatial size `(⌊(H+2p−k)/s⌋+1, ⌊(W+2p−k)/s⌋+1)`.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::contract("kernel size and stride must be positive"));
        }
        let ph = height + 2 * self.padding;
        let pw = width + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::contract(format!(
                "padded input {ph}x{pw} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

/// Lowers one `channels × height × width` sample to a `(channels·k²) × (H'·W')`
/// matrix whose column `j` is the receptive field of output position `j`.
/// Rows are ordered channel-major, then kernel row, then kernel column.
pub fn im2col(x: &[f64], channels: usize, height: usize, width: usize, geom: ConvGeometry) -> Result<Matrix> {
    if x.len() != channels * height * width {
        return Err(Error::contract(format!(
            "input length {} does not match {channels}x{height}x{width}",
            x.len()
        )));
    }
    let (oh, ow) = geom.output_dims(height, width)?;
    let k = geom.kernel;
    let mut out = Matrix::zeros(channels * k * k, oh * ow);
    im2col_batch(x, channels, 1, height, width, geom, out.data_mut());
    debug_assert_eq!(out.cols(), oh * ow);
    Ok(out)
}

/// Batched lowering over a channel-major `C × B × H × W` buffer into
/// `(C·k²) × (B·H'·W')`. Geometry must already be validated.
pub(crate) fn im2col_batch(
    x: &[f64],
    channels: usize,
    batch: usize,
    height: usize,
    width: usize,
    geom: ConvGeometry,
    out: &mut [f64],
) {
    let (oh, ow) = geom.output_dims(height, width).expect("geometry validated by caller");
    let k = geom.kernel;
    let s = geom.stride;
    let p = geom.padding as isize;
    let ncols = batch * oh * ow;
    assert!(out.len() >= channels * k * k * ncols);
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let plane = &x[(c * batch + b) * height * width..][..height * width];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let d = &mut dst[(b * oh + oy) * ow..][..ow];
                        if iy < 0 || iy >= height as isize {
                            d.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * width..][..width];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_batch`]: scatters column gradients back onto a
/// `C × B × H × W` buffer, accumulating overlaps.
pub(crate) fn col2im_batch(
    cols: &[f64],
    channels: usize,
    batch: usize,
    height: usize,
    width: usize,
    geom: ConvGeometry,
    dx: &mut [f64],
) {
    let (oh, ow) = geom.output_dims(height, width).expect("geometry validated by caller");
    let k = geom.kernel;
    let s = geom.stride;
    let p = geom.padding as isize;
    let ncols = batch * oh * ow;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let plane = &mut dx[(c * batch + b) * height * width..][..height * width];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let srow = &src[(b * oh + oy) * ow..][..ow];
                        let drow = &mut plane[iy as usize * width..][..width];
                        for (ox, v) in srow.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < width as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
