//! RGB images in `[0, 1]` and their conversion to feature maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{apply_separable, Resample1d};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    #[default]
    Srgb,
}

/// `H×W×3` interleaved RGB samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
    color_space: ColorSpace,
}

impl<T: Scalar> Image<T> {
    /// Validates size (`H, W >= 8`) and that samples are finite and in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{}x{}x3 image needs {} samples, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Sizing {
                height,
                width,
                min_height: MIN_IMAGE_SIDE,
                min_width: MIN_IMAGE_SIDE,
            });
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one())) {
            return Err(Error::Data(format!("image sample {} outside [0, 1]", bad)));
        }
        Ok(Self {
            height,
            width,
            data,
            color_space: ColorSpace::Srgb,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c).max(T::zero()).min(T::one()));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// `(1, 3, H, W)` planar feature map.
    pub fn to_feature_map(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![T::zero(); 3 * h * w];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + i] = px[c];
            }
        }
        Tensor::from_parts(vec![1, 3, h, w], out)
    }

    /// Converts a `(1, 3, H, W)` map, clamping samples into `[0, 1]`.
    pub fn from_feature_map(t: &Tensor<T>) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || c != 3 {
            return Err(Error::shape(format!(
                "expected a (1, 3, H, W) map, got {:?}",
                t.shape()
            )));
        }
        let src = t.data();
        if !t.all_finite() {
            return Err(Error::Data("feature map contains non-finite values".into()));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for ch in 0..3 {
                data.push(src[ch * h * w + i].max(T::zero()).min(T::one()));
            }
        }
        Self::new(h, w, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                height, width, top, left, self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Self::new(height, width, data)
    }

    /// Bilinear resize (half-pixel centres, no antialiasing).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let rows = Resample1d::bilinear(self.height, height);
        let cols = Resample1d::bilinear(self.width, width);
        let t = apply_separable(&self.to_feature_map(), &rows, &cols)?;
        Self::from_feature_map(&t)
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
            color_space: self.color_space,
        }
    }

    /// Quantises to 8-bit RGB with round-to-nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let inv = 1.0 / 255.0;
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| T::lit(b as f64 * inv)).collect(),
        )
    }

    /// Reads any 8- or 16-bit PNG/JPEG as RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageRgb16(_) | image::DynamicImage::ImageRgba16(_) => {
                let buf = img.to_rgb16();
                let inv = 1.0 / 65535.0;
                Self::new(h, w, buf.as_raw().iter().map(|&v| T::lit(v as f64 * inv)).collect())
            }
            other => Self::from_rgb8(h, w, other.to_rgb8().as_raw()),
        }
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::shape("image buffer size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Places images left to right on one canvas (heights must match).
    pub fn hstack(images: &[&Self]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("nothing to stack"))?;
        let h = first.height;
        if images.iter().any(|im| im.height != h) {
            return Err(Error::shape("hstack needs equal heights"));
        }
        let w: usize = images.iter().map(|im| im.width).sum();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for im in images {
                let row = y * im.width * 3;
                data.extend_from_slice(&im.data[row..row + im.width * 3]);
            }
        }
        Self::new(h, w, data)
    }
}
