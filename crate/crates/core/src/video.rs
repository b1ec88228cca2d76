use ndgrad::{Grid, Real};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `F x H x W x C` pixel array with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    dims: VideoDims,
    data: Vec<f32>,
    pub fps: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoDims {
    pub fn len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

pub const DEFAULT_FPS: f32 = 8.0;

impl VideoTensor {
    pub fn new(dims: VideoDims, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.shape().contains(&0) {
            return Err(Error::Data(format!("video extents must be positive: {dims:?}")));
        }
        if data.len() != dims.len() {
            return Err(Error::Data(format!(
                "video {dims:?} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            dims,
            data,
            fps: DEFAULT_FPS,
        })
    }

    pub fn dims(&self) -> VideoDims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let per = self.dims.height * self.dims.width * self.dims.channels;
        &self.data[f * per..][..per]
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> &[f32] {
        let d = self.dims;
        &self.data[((f * d.height + y) * d.width + x) * d.channels..][..d.channels]
    }

    /// Maps pixels to the model's `[-1, 1]` space.
    pub fn to_latent<T: Real>(&self) -> Grid<T> {
        Grid::from_vec(
            &self.dims.shape(),
            self.data.iter().map(|&v| T::from_f64(2.0 * v as f64 - 1.0)).collect(),
        )
        .expect("dims validated on construction")
    }

    /// Decodes a model-space grid: clamp to `[-1, 1]`, then map to `[0, 1]`.
    pub fn from_latent<T: Real>(x: &Grid<T>) -> Result<Self> {
        let [f, h, w, c] = *x.shape() else {
            return Err(Error::Data(format!("latent must be [F,H,W,C], got {:?}", x.shape())));
        };
        if !x.is_finite() {
            return Err(Error::Numeric {
                step: 0,
                msg: "non-finite latent at decode".into(),
            });
        }
        let data = x
            .data()
            .iter()
            .map(|v| ((v.as_f64().clamp(-1.0, 1.0) + 1.0) * 0.5) as f32)
            .collect();
        Self::new(
            VideoDims {
                frames: f,
                height: h,
                width: w,
                channels: c,
            },
            data,
        )
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Data("videos differ in size".into()));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        Ok(s / self.data.len() as f64)
    }
}
