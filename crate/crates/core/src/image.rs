use crate::error::{DidError, Result};

/// An RGB image stored row-major and channel-last, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DidError::InvalidTensor(format!(
                "image extents must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(DidError::InvalidTensor(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DidError::InvalidTensor("image has non-finite values".into()));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        assert!(height > 0 && width > 0);
        let data = std::iter::repeat_n(rgb, height * width).flatten().collect();
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// One colour plane as a row-major `height x width` buffer.
    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data.iter().skip(channel).step_by(3).copied().collect()
    }

    pub(crate) fn from_planes(height: usize, width: usize, planes: [&[f64]; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height * width {
            data.extend(planes.iter().map(|p| p[i]));
        }
        Image { height, width, data }
    }

    /// Reorders colour channels: output channel `c` takes input channel `perm[c]`.
    pub fn permute_channels(&self, perm: [usize; 3]) -> Self {
        let data = self
            .data
            .chunks(3)
            .flat_map(|px| perm.map(|c| px[c]))
            .collect();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }
}
