//! 8-bit raster images and their conversion to network input.

use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Real, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("unsupported channel count {0}")]
    Channels(usize),
}

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        assert_eq!(pixels.len(), width * height * channels, "pixel buffer size");
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Image {
            width,
            height,
            channels,
            pixels: vec![value; width * height * channels],
        }
    }

    /// Loads a PNG (or any format the `image` crate decodes) as gray or RGB.
    pub fn load(path: &Path, channels: usize) -> Result<Self, ImageError> {
        let decoded = image::open(path).map_err(|source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        let (w, h, pixels) = match channels {
            1 => {
                let g = decoded.to_luma8();
                (g.width(), g.height(), g.into_raw())
            }
            3 => {
                let c = decoded.to_rgb8();
                (c.width(), c.height(), c.into_raw())
            }
            n => return Err(ImageError::Channels(n)),
        };
        Image::new(w as usize, h as usize, channels, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImageError::Encode {
            path: path.display().to_string(),
            source,
        })
    }

    /// Writes this image as planar `[channels, H, W]` values in `[-1, 1]`
    /// (0 maps to -1, 255 to 1), replicating gray into every requested channel.
    pub fn write_planar<T: Real>(&self, channels: usize, out: &mut Vec<T>) {
        let plane = self.width * self.height;
        let scale = T::from_f64_lossy(2.0 / 255.0);
        let one = T::one();
        for c in 0..channels {
            let src = if self.channels == 1 { 0 } else { c.min(self.channels - 1) };
            out.extend(
                (0..plane).map(|i| T::from_u8(self.pixels[i * self.channels + src]).expect("u8 fits") * scale - one),
            );
        }
    }
}

/// Stacks images into an `[N, channels, H, W]` tensor.
pub fn batch_tensor<T: Real>(images: &[&Image], channels: usize) -> Tensor<T> {
    let (h, w) = images.first().map_or((0, 0), |im| (im.height, im.width));
    let mut data = Vec::with_capacity(images.len() * channels * h * w);
    for im in images {
        im.write_planar(channels, &mut data);
    }
    Tensor::new(vec![images.len(), channels, h, w], data).expect("consistent image sizes")
}
