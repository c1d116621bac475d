//! Foreground object extraction: threshold the saliency map, black out the
//! background, crop the salient bounding box and zoom it to a fixed size.

use std::sync::Arc;

use crate::datamodel::{ImageSample, SampleStage};
use crate::error::{FotError, Result};
use crate::raster::Image;
use crate::saliency::SaliencyMap;

/// Slack on the 0-255 scale when comparing against the threshold, so maps
/// decoded from 8-bit files hit exact levels despite float rounding.
const THRESHOLD_SLACK: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(FotError::Shape(format!(
                "mask of {} bits does not match {height}x{width}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(FotError::Invalid("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, bit: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![bit as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmptyMaskPolicy {
    /// Fall back to the full frame.
    #[default]
    WholeImage,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    /// Threshold on the 0-255 scale.
    pub beta: f32,
    pub output_size: (usize, usize),
    pub empty_mask_policy: EmptyMaskPolicy,
    pub pad_to_square: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            beta: 40.0,
            output_size: (84, 84),
            empty_mask_policy: EmptyMaskPolicy::WholeImage,
            pad_to_square: true,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=255.0).contains(&self.beta) {
            return Err(FotError::Config(format!("beta {} outside [0, 255]", self.beta)));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(FotError::Config("output_size must be positive".into()));
        }
        Ok(())
    }
}

/// Pixel `i` is foreground iff its channel-mean saliency, on the 0-255
/// scale, is at least `beta`.
pub fn threshold_saliency(map: &SaliencyMap, beta: f32) -> BinaryMask {
    let beta = beta as f64 - THRESHOLD_SLACK;
    let v = &map.values;
    let channels = v.channels();
    let mut bits = Vec::with_capacity(v.height() * v.width());
    for y in 0..v.height() {
        for x in 0..v.width() {
            let mean = (0..channels).map(|c| v.get(c, y, x) as f64).sum::<f64>() / channels as f64;
            bits.push((mean * 255.0 >= beta) as u8);
        }
    }
    BinaryMask {
        height: v.height(),
        width: v.width(),
        bits,
    }
}

/// Zeroes every pixel whose mask bit is 0, across all channels.
pub fn apply_mask(image: &Image, mask: &BinaryMask) -> Result<Image> {
    if image.height() != mask.height || image.width() != mask.width {
        return Err(FotError::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height,
            mask.width,
            image.height(),
            image.width()
        )));
    }
    let mut out = image.clone();
    let plane = mask.height * mask.width;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.bits[i % plane] == 0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Tightest axis-aligned box around the set bits.
pub fn mask_bounding_box(mask: &BinaryMask, policy: EmptyMaskPolicy) -> Result<BoundingBox> {
    let mut top = usize::MAX;
    let mut bottom = 0;
    let mut left = usize::MAX;
    let mut right = 0;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                top = top.min(y);
                bottom = bottom.max(y);
                left = left.min(x);
                right = right.max(x);
            }
        }
    }
    if top == usize::MAX {
        return match policy {
            EmptyMaskPolicy::WholeImage => Ok(BoundingBox {
                top: 0,
                left: 0,
                height: mask.height,
                width: mask.width,
            }),
            EmptyMaskPolicy::Error => Err(FotError::NoSalientRegion("empty mask".into())),
        };
    }
    Ok(BoundingBox {
        top,
        left,
        height: bottom - top + 1,
        width: right - left + 1,
    })
}

pub fn crop(image: &Image, bbox: BoundingBox) -> Result<Image> {
    image.crop(bbox.top, bbox.left, bbox.height, bbox.width)
}

/// Enlarges (or shrinks) a crop to `output_size`, optionally padding it to a
/// square first so the object's aspect ratio survives.
pub fn zoom_in(cropped: &Image, output_size: (usize, usize), pad_to_square: bool) -> Result<Image> {
    let (h, w) = output_size;
    if pad_to_square {
        cropped.pad_to_square().resize_bilinear(h, w)
    } else {
        cropped.resize_bilinear(h, w)
    }
}

/// The full extractor: `zoom(crop(mask(image), bbox(mask)))`.
pub fn extract_foreground(
    sample: &ImageSample,
    map: &SaliencyMap,
    cfg: &ExtractorConfig,
) -> Result<ImageSample> {
    let pixels = extract_pixels(&sample.pixels, map, cfg)
        .map_err(|e| match e {
            FotError::NoSalientRegion(_) => FotError::NoSalientRegion(sample.id.clone()),
            e => e,
        })?;
    Ok(ImageSample {
        pixels: Arc::new(pixels),
        stage: SampleStage::Extracted,
        ..sample.clone()
    })
}

fn extract_pixels(image: &Image, map: &SaliencyMap, cfg: &ExtractorConfig) -> Result<Image> {
    let mask = threshold_saliency(map, cfg.beta);
    let masked = apply_mask(image, &mask)?;
    let bbox = mask_bounding_box(&mask, cfg.empty_mask_policy)?;
    zoom_in(&crop(&masked, bbox)?, cfg.output_size, cfg.pad_to_square)
}

/// Runs the saliency map through the same geometry as its image (mask,
/// crop, zoom), giving a map aligned with the extracted sample.
pub fn extract_aligned_map(map: &SaliencyMap, cfg: &ExtractorConfig) -> Result<SaliencyMap> {
    let values = extract_pixels(&map.values, map, cfg)?.map(|v| v.clamp(0.0, 1.0));
    Ok(SaliencyMap {
        values,
        source_id: map.source_id.clone(),
    })
}

/// How much of the extractor a pipeline variant applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preprocess {
    /// Whole image resized to the output size; the extractor is bypassed.
    Resize,
    /// Background blacked out, whole frame resized.
    RemoveBackground,
    /// Background removed, salient box cropped and zoomed.
    Foreground,
}

impl Preprocess {
    pub fn tag(self) -> &'static str {
        match self {
            Preprocess::Resize => "raw",
            Preprocess::RemoveBackground => "rb",
            Preprocess::Foreground => "rbrf",
        }
    }
}

/// Produces the pixels a sample is fed to the networks with.
pub fn prepare(image: &Image, map: &SaliencyMap, mode: Preprocess, cfg: &ExtractorConfig) -> Result<Image> {
    let (h, w) = cfg.output_size;
    match mode {
        Preprocess::Resize => image.resize_bilinear(h, w),
        Preprocess::RemoveBackground => {
            apply_mask(image, &threshold_saliency(map, cfg.beta))?.resize_bilinear(h, w)
        }
        Preprocess::Foreground => extract_pixels(image, map, cfg),
    }
}

/// Map counterpart of [`prepare`], used for posture matching.
pub fn prepare_map(map: &SaliencyMap, mode: Preprocess, cfg: &ExtractorConfig) -> Result<SaliencyMap> {
    let (h, w) = cfg.output_size;
    let values = match mode {
        Preprocess::Foreground => return extract_aligned_map(map, cfg),
        Preprocess::Resize => map.values.resize_bilinear(h, w)?,
        Preprocess::RemoveBackground => {
            apply_mask(&map.values, &threshold_saliency(map, cfg.beta))?.resize_bilinear(h, w)?
        }
    };
    Ok(SaliencyMap {
        values: values.map(|v| v.clamp(0.0, 1.0)),
        source_id: map.source_id.clone(),
    })
}
