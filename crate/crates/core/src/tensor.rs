//! Dense rank-3 tensors used for network activations.

use crate::error::{Error, Result};

/// Channel-major (`C × H × W`) dense tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Input(format!(
                "feature map of shape {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f32) {
        self.data[(c * self.height + h) * self.width + w] = value;
    }

    /// Spatial plane of one channel, row-major.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies channels `[start, end)` into a new map.
    pub fn slice_channels(&self, start: usize, end: usize) -> FeatureMap {
        assert!(
            start <= end && end <= self.channels,
            "channel range out of bounds"
        );
        let n = self.plane_len();
        FeatureMap {
            channels: end - start,
            height: self.height,
            width: self.width,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Stacks maps of equal spatial size along the channel axis.
    pub fn concat_channels(maps: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Input("cannot concatenate zero feature maps".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(Error::Input(format!(
                    "spatial size mismatch: expected {h}x{w}, got {}x{}",
                    m.height, m.width
                )));
            }
            channels += m.channels;
            data.extend_from_slice(&m.data);
        }
        Ok(FeatureMap {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
