//! Float RGB image buffer used throughout the pipeline.
//!
//! Values live in `[0, 1]` linear space at 64-bit precision; quantization to
//! 8-bit happens only at file boundaries.

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 channels interleaved.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: Vector3<f64>) -> Self {
        let mut img = Image::new(width, height);
        for p in 0..width * height {
            img.data[p * 3] = color.x;
            img.data[p * 3 + 1] = color.y;
            img.data[p * 3 + 2] = color.z;
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = (y * self.width + x) * 3;
        Vector3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Vector3<f64>) {
        let i = (y * self.width + x) * 3;
        self.data[i] = c.x;
        self.data[i + 1] = c.y;
        self.data[i + 2] = c.z;
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Bilinear sample at continuous pixel coordinates (texel centers at
    /// integer + 0.5). Returns `None` outside the image bounds.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<Vector3<f64>> {
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        let fx = (u - 0.5).clamp(0.0, self.width as f64 - 1.0);
        let fy = (v - 0.5).clamp(0.0, self.height as f64 - 1.0);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let c00 = self.get(x0, y0);
        let c10 = self.get(x1, y0);
        let c01 = self.get(x0, y1);
        let c11 = self.get(x1, y1);
        Some(c00 * (1.0 - tx) * (1.0 - ty) + c10 * tx * (1.0 - ty) + c01 * (1.0 - tx) * ty + c11 * tx * ty)
    }
}
