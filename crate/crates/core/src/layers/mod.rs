//! Recurrent and convolutional building blocks. Each layer owns the
//! [`ParamId`](crate::tensor::ParamId)s of its weights; `forward` returns the
//! output plus a cache, and `backward` consumes that cache, accumulates weight
//! gradients into a [`GradStore`](crate::tensor::GradStore) and returns the
//! gradient with respect to the layer input.

mod conv;
mod encoder;
mod linear;
mod lstm;
mod mdlstm;
mod tile;

pub use conv::{Conv, ConvCache};
pub use encoder::{Encoder, EncoderCache, EncoderConfig, Window};
pub use linear::Linear;
pub use lstm::{Blstm, BlstmCache, Lstm, LstmCache};
pub use mdlstm::{Direction, MdLstm, MdLstmBlock, MdLstmCache};
pub(crate) use mdlstm::sum_directions;
pub use tile::tile;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H×W×C` image. Values are raw intensities until normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    values: Tensor,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim("image", format!("empty image {height}x{width}x{channels}")));
        }
        Ok(ImagePlane { values: Tensor::new(vec![height, width, channels], data)? })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values.data()[(y * self.width() + x) * self.channels() + c]
    }

    /// Copies rows `top..=bottom` and columns `left..=right`, clamped to the image.
    pub fn crop(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Self> {
        let bottom = bottom.min(self.height() - 1);
        let right = right.min(self.width() - 1);
        if top > bottom || left > right {
            return Err(Error::dim("crop", format!("empty crop {top}..={bottom} x {left}..={right}")));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity((bottom - top + 1) * (right - left + 1) * c);
        for y in top..=bottom {
            let row = (y * self.width() + left) * c;
            data.extend_from_slice(&self.data()[row..row + (right - left + 1) * c]);
        }
        Self::new(bottom - top + 1, right - left + 1, c, data)
    }
}

/// An `H×W×D` feature map stored row-major as `[y][x][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        Ok(FeatureMap { values: Tensor::new(vec![height, width, depth], data)? })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        FeatureMap { values: Tensor::zeros(&[height, width, depth]) }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let d = self.depth();
        let p = (y * self.width() + x) * d;
        &self.values.data()[p..p + d]
    }

    /// Mirrors rows and/or columns.
    pub fn flipped(&self, rows: bool, cols: bool) -> FeatureMap {
        let (h, w, d) = (self.height(), self.width(), self.depth());
        let mut data = Vec::with_capacity(self.data().len());
        for y in 0..h {
            let sy = if rows { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if cols { w - 1 - x } else { x };
                data.extend_from_slice(self.at(sy, sx));
            }
        }
        FeatureMap { values: Tensor::new(vec![h, w, d], data).expect("same shape") }
    }
}

pub(crate) fn check_finite(v: &[f64], op: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}
