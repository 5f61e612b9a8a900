//! Single-channel floating point images.

use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale image with intensities on the 8-bit scale `[0, 255]`, stored
/// row-major as `data[y * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::shape(format!(
                "{width}x{height} plane needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&p| p as f64).collect(),
        }
    }

    /// Rounds to the nearest 8-bit value, saturating outside `[0, 255]`.
    pub fn to_gray(&self) -> GrayImage {
        let raw = self
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("dims match")
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Plane> {
        if self.is_empty() || width == 0 || height == 0 {
            return Err(Error::arg("cannot resize an empty image"));
        }
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |o: usize, scale: f64, len: usize| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, pos - i0 as f64)
        };
        let cols: Vec<_> = (0..width).map(|x| axis(x, sx, self.width)).collect();
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for &(x0, x1, fx) in &cols {
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Plane::new(width, height, out)
    }

    /// Network input: `H x W x 3` with the grey level replicated across the
    /// three channels and scaled to `[0, 1]`.
    pub fn to_rgb_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &v in &self.data {
            let s = v / 255.0;
            data.extend_from_slice(&[s, s, s]);
        }
        Tensor::new(vec![self.height, self.width, 3], data).expect("dims match")
    }

    pub fn load_png(path: &Path) -> Result<Plane> {
        Ok(Self::from_gray(&load_gray(path)?))
    }
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    Ok(img.to_luma8())
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}
