use std::path::Path;

use ::image::{imageops, ImageBuffer, Rgb, RgbImage};
use ndarray::{Array3, ArrayView3};

use super::Manifest;
use crate::error::{Error, Result};

/// Per-channel normalisation (ImageNet statistics) applied to `[0,1]` pixels.
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A normalised `3×H×W` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::Shape(format!(
                "image tensor must have 3 channels, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image tensor".into()));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_array_unchecked(data: Array3<f32>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            let v = img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
            (v - NORM_MEAN[c]) / NORM_STD[c]
        });
        Self { data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height() as u32, self.width() as u32);
        RgbImage::from_fn(w, h, |x, y| {
            let px = |c: usize| {
                let v = self.data[[c, y as usize, x as usize]] * NORM_STD[c] + NORM_MEAN[c];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// Bilinear resize; returns an exact copy when the size already matches.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if (height, width) == (self.height(), self.width()) {
            return self.clone();
        }
        let (h, w) = (self.height() as u32, self.width() as u32);
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                self.data[[0, y, x]],
                self.data[[1, y, x]],
                self.data[[2, y, x]],
            ])
        });
        let out = imageops::resize(
            &buf,
            width as u32,
            height as u32,
            imageops::FilterType::Triangle,
        );
        let data = Array3::from_shape_fn((3, height, width), |(c, y, x)| {
            out.get_pixel(x as u32, y as u32)[c]
        });
        Self { data }
    }
}

/// Decode an image file and bring it to `height × width`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<ImageTensor> {
    let img = ::image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let img = if img.dimensions() == (width as u32, height as u32) {
        img
    } else {
        imageops::resize(
            &img,
            width as u32,
            height as u32,
            imageops::FilterType::Triangle,
        )
    };
    Ok(ImageTensor::from_rgb8(&img))
}

/// Every image of a manifest decoded once, indexed like `manifest.records`.
#[derive(Debug, Clone)]
pub struct ImageCache {
    pub images: Vec<ImageTensor>,
}

impl ImageCache {
    pub fn load(manifest: &Manifest, height: usize, width: usize) -> Result<Self> {
        let images = manifest
            .records
            .iter()
            .map(|r| load_image(&r.image_path, height, width))
            .collect::<Result<_>>()?;
        Ok(Self { images })
    }
}
