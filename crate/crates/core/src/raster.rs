//! Channels-first real-valued raster used throughout the pipeline.

use std::path::Path;

use candle::{DType, Device, Tensor};

use crate::error::{FotError, IoContext, Result};

/// A `channels x height x width` image stored row-major per channel.
///
/// Pixel values are nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(FotError::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(FotError::Shape(format!(
                "buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty image");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Copies the rectangle `[top, top+height) x [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(FotError::Shape(format!(
                "crop ({top},{left},{height},{width}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = self.index(c, y, left);
                out.extend_from_slice(&self.data[row..row + width]);
            }
        }
        Self::new(self.channels, height, width, out)
    }

    /// Pads the shorter side with zeros so the image becomes square,
    /// keeping the content centred (extra row/column goes bottom/right).
    pub fn pad_to_square(&self) -> Self {
        let side = self.height.max(self.width);
        if self.height == self.width {
            return self.clone();
        }
        let top = (side - self.height) / 2;
        let left = (side - self.width) / 2;
        let mut out = Self::zeros(self.channels, side, side);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = self.index(c, y, 0);
                let dst = out.index(c, y + top, left);
                out.data[dst..dst + self.width].copy_from_slice(&self.data[src..src + self.width]);
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    ///
    /// Resizing to the current size returns the values unchanged.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FotError::Shape(format!(
                "resize target must be positive, got {height}x{width}"
            )));
        }
        let ys = sample_positions(self.height, height);
        let xs = sample_positions(self.width, width);
        let mut out = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for &(y0, y1, wy) in &ys {
                for &(x0, x1, wx) in &xs {
                    let v00 = self.get(c, y0, x0) as f64;
                    let v01 = self.get(c, y0, x1) as f64;
                    let v10 = self.get(c, y1, x0) as f64;
                    let v11 = self.get(c, y1, x1) as f64;
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bottom = v10 * (1.0 - wx) + v11 * wx;
                    out.push((top * (1.0 - wy) + bottom * wy) as f32);
                }
            }
        }
        Self::new(self.channels, height, width, out)
    }

    /// Batched `1 x C x H x W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Stacks equally sized images into an `N x C x H x W` tensor.
    pub fn stack(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| FotError::Invalid("cannot stack zero images".into()))?;
        let dims = first.dims();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != dims {
                return Err(FotError::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    img.dims(),
                    dims
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(
            Tensor::from_vec(data, (images.len(), dims.0, dims.1, dims.2), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Inverse of [`Image::to_tensor`] for a `C x H x W` or `1 x C x H x W` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Self::from_dynamic(&img)
    }

    /// Writes an 8-bit PNG: grey for one channel, RGB for three.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => {
                let buf = image::GrayImage::from_fn(w, h, |x, y| {
                    image::Luma([quantize(self.get(0, y as usize, x as usize))])
                });
                buf.save(path)?;
            }
            3 => {
                let buf = image::RgbImage::from_fn(w, h, |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    image::Rgb([
                        quantize(self.get(0, y, x)),
                        quantize(self.get(1, y, x)),
                        quantize(self.get(2, y, x)),
                    ])
                });
                buf.save(path)?;
            }
            c => {
                return Err(FotError::Shape(format!(
                    "cannot encode {c}-channel image as png"
                )))
            }
        }
        Ok(())
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Source taps `(i0, i1, weight_of_i1)` for every output coordinate.
fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_is_exact() {
        let data: Vec<f32> = (0..3 * 5 * 7).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let img = Image::new(3, 5, 7, data).unwrap();
        assert_eq!(img.resize_bilinear(5, 7).unwrap(), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(2, 3, 5, 0.25);
        let r = img.resize_bilinear(11, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_two_by_two_to_two_by_four() {
        // Half-pixel centres: source x = (o + 0.5) * 0.5 - 0.5 -> [-0.25, 0.25, 0.75, 1.25],
        // clamped to [0, 1] -> values 0, 0.25, 0.75, 1 along every row.
        let img = Image::new(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = img.resize_bilinear(2, 4).unwrap();
        for y in 0..2 {
            let row: Vec<f32> = (0..4).map(|x| r.get(0, y, x)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn pad_to_square_centres_content() {
        let img = Image::filled(1, 10, 20, 1.0);
        let p = img.pad_to_square();
        assert_eq!(p.dims(), (1, 20, 20));
        assert_eq!(p.get(0, 4, 0), 0.0);
        assert_eq!(p.get(0, 5, 0), 1.0);
        assert_eq!(p.get(0, 14, 19), 1.0);
        assert_eq!(p.get(0, 15, 19), 0.0);
    }

    #[test]
    fn crop_out_of_bounds_is_rejected() {
        let img = Image::zeros(1, 4, 4);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert_eq!(img.crop(1, 1, 3, 3).unwrap().dims(), (1, 3, 3));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 4 * 6).map(|i| i as f32 / 71.0).collect();
        let img = Image::new(3, 4, 6, data).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
