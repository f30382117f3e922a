use crate::error::{ensure, Result};

/// A batch of feature maps.
///
/// Storage is channel-major (`C × B × H × W`): every channel's values for the
/// whole batch are contiguous, so a convolution over the batch is a single
/// matrix product and batch-norm statistics are taken over one slice.
/// Use [`ActivationTensor::from_nchw`] / [`ActivationTensor::to_nchw`] to
/// exchange data in the usual sample-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ActivationTensor {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        ActivationTensor {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    /// Wraps channel-major data.
    pub fn from_channel_major(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        ensure(data.len() == batch * channels * height * width, || {
            format!(
                "activation data length {} does not match {batch}x{channels}x{height}x{width}",
                data.len()
            )
        })?;
        Ok(ActivationTensor {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds from sample-major (`B × C × H × W`) data.
    pub fn from_nchw(batch: usize, channels: usize, height: usize, width: usize, data: &[f64]) -> Result<Self> {
        ensure(data.len() == batch * channels * height * width, || {
            format!(
                "activation data length {} does not match {batch}x{channels}x{height}x{width}",
                data.len()
            )
        })?;
        let hw = height * width;
        let mut out = vec![0.0; data.len()];
        for b in 0..batch {
            for c in 0..channels {
                out[(c * batch + b) * hw..][..hw].copy_from_slice(&data[(b * channels + c) * hw..][..hw]);
            }
        }
        Ok(ActivationTensor {
            batch,
            channels,
            height,
            width,
            data: out,
        })
    }

    pub fn to_nchw(&self) -> Vec<f64> {
        let hw = self.plane();
        let mut out = vec![0.0; self.data.len()];
        for b in 0..self.batch {
            for c in 0..self.channels {
                out[(b * self.channels + c) * hw..][..hw]
                    .copy_from_slice(&self.data[(c * self.batch + b) * hw..][..hw]);
            }
        }
        out
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// All values of channel `c` across the batch.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.batch * self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.batch * self.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Value at sample `b`, channel `c`, row `y`, column `x`.
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((c * self.batch + b) * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ActivationTensor) -> bool {
        self.batch == other.batch
            && self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|v| v as f64).collect();
        let t = ActivationTensor::from_nchw(2, 3, 2, 2, &data).unwrap();
        assert_eq!(t.at(1, 2, 1, 0), data[((3 + 2) * 2 + 1) * 2]);
        assert_eq!(t.to_nchw(), data);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(ActivationTensor::from_nchw(1, 1, 2, 2, &[0.0; 3]).is_err());
    }
}
