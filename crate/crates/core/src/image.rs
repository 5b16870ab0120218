//! In-memory images with `f64` samples in [0, 1], codecs, and bilinear resampling.

use std::path::Path;

use image::{ColorType, DynamicImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `height x width x channels` image. Channels is 1 (gray) or 3 (RGB).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image extents must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.data.clone(),
        )
        .expect("image extents are positive")
    }

    /// Builds an image from an `H x W x C` tensor, clamping into [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Image::new(h, w, c, t.data().to_vec()),
            _ => Err(Error::invalid(format!(
                "image tensors are HxWxC, got {:?}",
                t.shape()
            ))),
        }
    }

    /// Replicates a gray image into three channels; RGB images are returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            channels: 3,
            data,
            ..*self
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at integers).
    /// Rows clamp to the border; columns clamp too unless `wrap_x`.
    pub fn sample(&self, y: f64, x: f64, c: usize, wrap_x: bool) -> f64 {
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let y0 = yc.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let ty = yc - y0 as f64;
        let (x0, x1, tx) = if wrap_x {
            let w = self.width as f64;
            let xw = x.rem_euclid(w);
            let x0 = (xw.floor() as usize).min(self.width - 1);
            (x0, (x0 + 1) % self.width, xw - x0 as f64)
        } else {
            let xc = x.clamp(0.0, (self.width - 1) as f64);
            let x0 = xc.floor() as usize;
            (x0, (x0 + 1).min(self.width - 1), xc - x0 as f64)
        };
        let top = lerp(self.get(y0, x0, c), self.get(y0, x1, c), tx);
        let bottom = lerp(self.get(y1, x0, c), self.get(y1, x1, c), tx);
        lerp(top, bottom, ty)
    }

    /// Bilinear resize with half-pixel centre alignment.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "resize target must be positive, got {height}x{width}"
            )));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(height, width, self.channels, |y, x, c| {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            self.sample(src_y, src_x, c, false)
        })
    }

    /// Resize whose target must be a positive multiple of the backbone factor.
    pub fn resize_for_backbone(&self, height: usize, width: usize, factor: usize) -> Result<Image> {
        if factor == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "resize target {height}x{width} is not a multiple of {factor}"
            )));
        }
        self.resize(height, width)
    }

    /// Extents rounded to the nearest positive multiple of `factor`, with the image
    /// resized to them; `None` when the image already fits.
    pub fn fit_to_multiple(&self, factor: usize) -> Result<Option<Image>> {
        if factor == 0 {
            return Err(Error::invalid("backbone factor must be positive"));
        }
        let round = |e: usize| ((e + factor / 2) / factor).max(1) * factor;
        let (h, w) = (round(self.height), round(self.width));
        if (h, w) == (self.height, self.width) {
            return Ok(None);
        }
        Ok(Some(self.resize(h, w)?))
    }

    /// Rotates columns right by `shift` (column `x` moves to `x + shift mod W`).
    pub fn roll_columns(&self, shift: usize) -> Image {
        let w = self.width;
        let s = shift % w;
        Image::from_fn(self.height, w, self.channels, |y, x, c| {
            self.get(y, (x + w - s) % w, c)
        })
        .expect("same extents")
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::invalid("image extents differ"));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// 8-bit samples, scaled by 255 and rounded half-up.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Loads PNM (PPM/PGM) or PNG. Gray files stay single-channel; alpha is dropped.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let decode_err = |message: String| Error::Decode {
            path: path.to_path_buf(),
            message,
        };
        let reader = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?;
        let img = reader.decode().map_err(|e| decode_err(e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let gray = matches!(
            img.color(),
            ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
        );
        let wide = matches!(
            img.color(),
            ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16
        );
        let (channels, data): (usize, Vec<f64>) = match (gray, wide) {
            (true, false) => (1, raw8(img.to_luma8().into_raw())),
            (true, true) => (1, raw16(img.to_luma16().into_raw())),
            (false, false) => (3, raw8(img.to_rgb8().into_raw())),
            (false, true) => (3, raw16(img.to_rgb16().into_raw())),
        };
        Image::new(h, w, channels, data).map_err(|e| decode_err(e.to_string()))
    }

    /// Saves as 8-bit; the format follows the extension (`.ppm`, `.pgm`, `.png`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_bytes();
        let dynamic = if self.channels == 1 {
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, bytes).expect("buffer sized from extents"),
            )
        } else {
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, bytes).expect("buffer sized from extents"),
            )
        };
        dynamic.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::invalid(format!("cannot save {}: {other}", path.display())),
        })
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn raw8(v: Vec<u8>) -> Vec<f64> {
    v.into_iter().map(|b| f64::from(b) / 255.0).collect()
}

fn raw16(v: Vec<u16>) -> Vec<f64> {
    v.into_iter().map(|b| f64::from(b) / 65535.0).collect()
}
