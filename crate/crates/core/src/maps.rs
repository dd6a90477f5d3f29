//! Host-side image and depth containers.

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Error, Result};
use crate::nn;

/// Per-pixel depth in meters with a validity mask. Row-major, `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
    pub min_depth: f32,
    pub max_depth: f32,
}

impl DepthMap {
    /// Build from raw values; non-positive or non-finite entries are invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return shape_err(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            ));
        }
        let valid: Vec<bool> = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        let (mut lo, mut hi) = (f32::INFINITY, 0f32);
        for (v, ok) in values.iter().zip(&valid) {
            if *ok {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        if !lo.is_finite() {
            lo = 0.0;
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
            min_depth: lo,
            max_depth: hi,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f32) -> Self {
        Self::from_values(width, height, vec![depth; width * height]).expect("sized")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Values with invalid pixels forced to zero.
    pub fn masked_values(&self) -> Vec<f32> {
        self.values
            .iter()
            .zip(&self.valid)
            .map(|(v, ok)| if *ok { *v } else { 0.0 })
            .collect()
    }

    /// Multiply every valid value by `s`.
    pub fn scaled(&self, s: f32) -> DepthMap {
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(v, ok)| if *ok { v * s } else { *v })
            .collect();
        DepthMap {
            values,
            min_depth: self.min_depth * s,
            max_depth: self.max_depth * s,
            ..self.clone()
        }
    }

    /// `(1, 1, H, W)` tensor with invalid pixels set to zero.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.masked_values(), (1, 1, self.height, self.width), &Device::Cpu)?
            .to_dtype(dtype)?)
    }

    /// Read a `(1, 1, H, W)` or `(H, W)` tensor; every pixel is marked valid
    /// when it is finite and positive.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = match dims {
            [h, w] => (*h, *w),
            [1, 1, h, w] => (*h, *w),
            _ => return shape_err(format!("cannot read depth map from shape {dims:?}")),
        };
        let v = nn::to_vec_f64(t)?.into_iter().map(|x| x as f32).collect();
        Self::from_values(w, h, v)
    }

    pub fn check_same_shape(&self, other: &DepthMap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "depth maps differ in size: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Median of the valid values.
    pub fn median(&self) -> Option<f32> {
        let mut v: Vec<f32> = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .map(|(v, _)| *v)
            .collect();
        median_in_place(&mut v)
    }
}

pub(crate) fn median_in_place(v: &mut [f32]) -> Option<f32> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Planar RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[c * H * W + y * W + x]`.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let i = c * self.width * self.height + y * self.width + x;
        self.data[i] = v;
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.data.clone(), (1, 3, self.height, self.width), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = RgbImage::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, x as usize, y as usize, p[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Per-pixel integer labels (object ids), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    /// `(1, H, W)` u32 tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let v: Vec<u32> = self.labels.iter().map(|l| *l as u32).collect();
        Ok(Tensor::from_vec(v, (1, self.height, self.width), &Device::Cpu)?)
    }
}

/// Stack `(1, C, H, W)` tensors into a batch.
pub fn batch(items: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(items, 0)?)
}
