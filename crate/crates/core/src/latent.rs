use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A stack of per-frame latents laid out `frames × channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo(Tensor);

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::contract(format!(
                "latent video must be rank 4 (n, c, h, w), got {:?}",
                tensor.shape()
            )));
        }
        Ok(LatentVideo(tensor))
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        LatentVideo::new(Tensor::zeros(&[frames, channels, height, width])?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn mse(&self, other: &LatentVideo) -> Result<f64> {
        self.0.mean_squared_error(&other.0)
    }
}
