use std::collections::BTreeMap;

use candle::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Network, ParamSet};
use crate::error::{FotError, Result};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub image_channels: usize,
    /// Encoder widths; the decoder mirrors them.
    pub widths: [usize; 3],
    pub res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            widths: [64, 128, 256],
            res_blocks: 1,
        }
    }
}

/// Posture transformation generator `G(eps)`.
///
/// Encoder: three convolutional stages (stride 1, 2, 2), each followed by
/// residual blocks. Decoder: three transposed convolutions (stride 2, 2, 1)
/// and a sigmoid. Input is the channel-wise concatenation `[A1, A2, B1]`.
/// Spatial dimensions must be multiples of 4.
#[derive(Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamSet,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        if cfg.image_channels == 0 || cfg.widths.contains(&0) {
            return Err(FotError::Config("generator widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new(dtype, device);
        let [w0, w1, w2] = cfg.widths;
        let c = cfg.image_channels;
        p.add_conv("enc0", w0, 3 * c, 3, true, &mut rng)?;
        p.add_conv("enc1", w1, w0, 4, true, &mut rng)?;
        p.add_conv("enc2", w2, w1, 4, true, &mut rng)?;
        for (s, w) in cfg.widths.iter().enumerate() {
            for r in 0..cfg.res_blocks {
                p.add_conv(&format!("res{s}.{r}.conv1"), *w, *w, 3, true, &mut rng)?;
                p.add_conv(&format!("res{s}.{r}.conv2"), *w, *w, 3, true, &mut rng)?;
            }
        }
        p.add_deconv("dec2", w2, w1, 4, &mut rng)?;
        p.add_deconv("dec1", w1, w0, 4, &mut rng)?;
        p.add_deconv("dec0", w0, c, 3, &mut rng)?;
        Ok(Self { cfg, params: p })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn res_stage(&self, stage: usize, mut x: Tensor) -> Result<Tensor> {
        let p = &self.params;
        for r in 0..self.cfg.res_blocks {
            let y = p.conv2d(&format!("res{stage}.{r}.conv1"), &x, 1, 1)?.relu()?;
            let y = p.conv2d(&format!("res{stage}.{r}.conv2"), &y, 1, 1)?;
            x = (x + y)?.relu()?;
        }
        Ok(x)
    }

    /// Batched forward pass on `N x C x H x W` tensors.
    pub fn forward(&self, a1: &Tensor, a2: &Tensor, b1: &Tensor) -> Result<Tensor> {
        let dims = a1.dims4()?;
        if a2.dims4()? != dims || b1.dims4()? != dims {
            return Err(FotError::Shape("generator inputs must share one shape".into()));
        }
        let (_, c, h, w) = dims;
        if c != self.cfg.image_channels {
            return Err(FotError::Shape(format!(
                "generator expects {}-channel images, got {c}",
                self.cfg.image_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(FotError::Shape(format!(
                "generator needs spatial dimensions divisible by 4, got {h}x{w}"
            )));
        }
        let p = &self.params;
        let x = Tensor::cat(&[a1, a2, b1], 1)?;
        let x = self.res_stage(0, p.conv2d("enc0", &x, 1, 1)?.relu()?)?;
        let x = self.res_stage(1, p.conv2d("enc1", &x, 1, 2)?.relu()?)?;
        let x = self.res_stage(2, p.conv2d("enc2", &x, 1, 2)?.relu()?)?;
        let x = p.conv_transpose2d("dec2", &x, 1, 2)?.relu()?;
        let x = p.conv_transpose2d("dec1", &x, 1, 2)?.relu()?;
        let x = p.conv_transpose2d("dec0", &x, 1, 1)?;
        sigmoid(&x)
    }

    /// Single-triple convenience wrapper: `G([a1, a2, z1])`.
    pub fn generate(&self, a1: &Image, a2: &Image, z1: &Image) -> Result<Image> {
        if a1.dims() != a2.dims() || a1.dims() != z1.dims() {
            return Err(FotError::Shape(format!(
                "generator inputs differ in shape: {:?} {:?} {:?}",
                a1.dims(),
                a2.dims(),
                z1.dims()
            )));
        }
        let (dt, dev) = (self.params.dtype(), self.params.device());
        let out = self.forward(
            &a1.to_tensor(dt, dev)?,
            &a2.to_tensor(dt, dev)?,
            &z1.to_tensor(dt, dev)?,
        )?;
        Image::from_tensor(&out.detach())
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>, params: ParamSet) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| FotError::Checkpoint(format!("generator metadata lacks '{k}'")))
        };
        let cfg = GeneratorConfig {
            image_channels: num("image_channels")?,
            widths: [num("width0")?, num("width1")?, num("width2")?],
            res_blocks: num("res_blocks")?,
        };
        Ok(Self { cfg, params })
    }
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

impl Network for Generator {
    fn kind(&self) -> &'static str {
        "generator"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("image_channels".into(), self.cfg.image_channels.to_string()),
            ("width0".into(), self.cfg.widths[0].to_string()),
            ("width1".into(), self.cfg.widths[1].to_string()),
            ("width2".into(), self.cfg.widths[2].to_string()),
            ("res_blocks".into(), self.cfg.res_blocks.to_string()),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Generator {
        let cfg = GeneratorConfig {
            image_channels: 3,
            widths: [4, 6, 8],
            res_blocks: 1,
        };
        Generator::new(cfg, DType::F32, &Device::Cpu, 5).unwrap()
    }

    fn noise(h: usize, w: usize, k: u32) -> Image {
        let data = (0..3 * h * w)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(k) % 1000) as f32 / 1000.0)
            .collect();
        Image::new(3, h, w, data).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let g = tiny();
        for (h, w) in [(8, 8), (12, 16), (32, 32)] {
            let out = g.generate(&noise(h, w, 1), &noise(h, w, 2), &noise(h, w, 3)).unwrap();
            assert_eq!(out.dims(), (3, h, w));
        }
    }

    #[test]
    fn output_in_unit_range() {
        let g = tiny();
        let out = g.generate(&noise(16, 16, 7), &noise(16, 16, 8), &noise(16, 16, 9)).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mismatched_or_unsupported_shapes() {
        let g = tiny();
        assert!(g.generate(&noise(8, 8, 1), &noise(8, 8, 2), &noise(12, 8, 3)).is_err());
        assert!(g.generate(&noise(10, 10, 1), &noise(10, 10, 2), &noise(10, 10, 3)).is_err());
    }
}
