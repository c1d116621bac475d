use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{max_pool2, Network, ParamSet};
use crate::error::{FotError, Result};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Conv4,
    ResNet18,
    ResNet34,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Conv4 => "conv4",
            Architecture::ResNet18 => "resnet18",
            Architecture::ResNet34 => "resnet34",
        })
    }
}

impl FromStr for Architecture {
    type Err = FotError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv4" => Ok(Architecture::Conv4),
            "resnet18" => Ok(Architecture::ResNet18),
            "resnet34" => Ok(Architecture::ResNet34),
            other => Err(FotError::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub arch: Architecture,
    pub in_channels: usize,
    /// Channel width of conv4 blocks, or of the first ResNet stage.
    pub width: usize,
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Conv4,
            in_channels: 3,
            width: 64,
            input_size: (84, 84),
        }
    }
}

impl BackboneConfig {
    fn stage_blocks(&self) -> &'static [usize] {
        match self.arch {
            Architecture::Conv4 => &[],
            Architecture::ResNet18 => &[2, 2, 2, 2],
            Architecture::ResNet34 => &[3, 4, 6, 3],
        }
    }

    /// Dimension of the flattened feature vector.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Architecture::Conv4 => {
                let (mut h, mut w) = self.input_size;
                for _ in 0..4 {
                    if h >= 2 && w >= 2 {
                        h /= 2;
                        w /= 2;
                    }
                }
                self.width * h * w
            }
            _ => self.width * 8,
        }
    }
}

/// The feature extractor `F(theta)`.
#[derive(Debug)]
pub struct FeatureExtractor {
    cfg: BackboneConfig,
    params: ParamSet,
}

impl FeatureExtractor {
    pub fn new(cfg: BackboneConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.width == 0 || cfg.input_size.0 == 0 || cfg.input_size.1 == 0 {
            return Err(FotError::Config("backbone dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new(dtype, device);
        match cfg.arch {
            Architecture::Conv4 => {
                let mut c_in = cfg.in_channels;
                for b in 0..4 {
                    p.add_conv(&format!("block{b}.conv"), cfg.width, c_in, 3, true, &mut rng)?;
                    p.add_batch_norm(&format!("block{b}.bn"), cfg.width)?;
                    c_in = cfg.width;
                }
            }
            Architecture::ResNet18 | Architecture::ResNet34 => {
                p.add_conv("stem.conv", cfg.width, cfg.in_channels, 7, false, &mut rng)?;
                p.add_batch_norm("stem.bn", cfg.width)?;
                let mut c_in = cfg.width;
                for (s, &n) in cfg.stage_blocks().iter().enumerate() {
                    let c_out = cfg.width << s;
                    for b in 0..n {
                        let name = format!("stage{s}.block{b}");
                        p.add_conv(&format!("{name}.conv1"), c_out, c_in, 3, false, &mut rng)?;
                        p.add_batch_norm(&format!("{name}.bn1"), c_out)?;
                        p.add_conv(&format!("{name}.conv2"), c_out, c_out, 3, false, &mut rng)?;
                        p.add_batch_norm(&format!("{name}.bn2"), c_out)?;
                        if b == 0 && (s > 0 || c_in != c_out) {
                            p.add_conv(&format!("{name}.down"), c_out, c_in, 1, false, &mut rng)?;
                            p.add_batch_norm(&format!("{name}.down_bn"), c_out)?;
                        }
                        c_in = c_out;
                    }
                }
            }
        }
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: BackboneConfig, params: ParamSet) -> Self {
        Self { cfg, params }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// Stages the transductive "last block only" mode may update.
    pub fn last_block_prefixes(&self) -> Vec<String> {
        match self.cfg.arch {
            Architecture::Conv4 => vec!["block3.".into()],
            _ => vec!["stage3.".into()],
        }
    }

    /// `N x C x H x W` images to `N x d` features.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels || (h, w) != self.cfg.input_size {
            return Err(FotError::Shape(format!(
                "backbone expects {}x{}x{}, got {c}x{h}x{w}",
                self.cfg.in_channels, self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        let p = &self.params;
        let feats = match self.cfg.arch {
            Architecture::Conv4 => {
                let mut x = x.clone();
                for b in 0..4 {
                    x = p.conv2d(&format!("block{b}.conv"), &x, 1, 1)?;
                    x = p.batch_norm(&format!("block{b}.bn"), &x, train)?.relu()?;
                    let (_, _, h, w) = x.dims4()?;
                    if h >= 2 && w >= 2 {
                        x = max_pool2(&x)?;
                    }
                }
                x.flatten_from(1)?
            }
            Architecture::ResNet18 | Architecture::ResNet34 => {
                let mut x = p.conv2d("stem.conv", x, 3, 2)?;
                x = p.batch_norm("stem.bn", &x, train)?.relu()?;
                let (_, _, h, w) = x.dims4()?;
                if h >= 2 && w >= 2 {
                    x = max_pool2(&x)?;
                }
                for (s, &n) in self.cfg.stage_blocks().iter().enumerate() {
                    for b in 0..n {
                        let name = format!("stage{s}.block{b}");
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let mut y = p.conv2d(&format!("{name}.conv1"), &x, 1, stride)?;
                        y = p.batch_norm(&format!("{name}.bn1"), &y, train)?.relu()?;
                        y = p.conv2d(&format!("{name}.conv2"), &y, 1, 1)?;
                        y = p.batch_norm(&format!("{name}.bn2"), &y, train)?;
                        let shortcut = if p.contains(&format!("{name}.down.weight")) {
                            let s = p.conv2d(&format!("{name}.down"), &x, 0, stride)?;
                            p.batch_norm(&format!("{name}.down_bn"), &s, train)?
                        } else {
                            x.clone()
                        };
                        x = (y + shortcut)?.relu()?;
                    }
                }
                x.mean(3)?.mean(2)?
            }
        };
        Ok(feats)
    }

    /// Features of one image in evaluation mode.
    pub fn extract_features(&self, image: &Image) -> Result<Vec<f32>> {
        let x = image.to_tensor(self.params.dtype(), self.params.device())?;
        let f = self.forward(&x, false)?;
        Ok(f.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }

    /// Evaluation-mode features for a batch, as an `N x d` tensor.
    pub fn extract_batch(&self, images: &[&Image]) -> Result<Tensor> {
        let x = Image::stack(images, self.params.dtype(), self.params.device())?;
        self.forward(&x, false)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            params: self.params.deep_clone()?,
        })
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>, params: ParamSet) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| FotError::Checkpoint(format!("backbone metadata lacks '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| FotError::Checkpoint(format!("bad backbone metadata '{k}'")))
        };
        let cfg = BackboneConfig {
            arch: get("arch")?.parse()?,
            in_channels: num("in_channels")?,
            width: num("width")?,
            input_size: (num("input_height")?, num("input_width")?),
        };
        Ok(Self::from_params(cfg, params))
    }
}

impl Network for FeatureExtractor {
    fn kind(&self) -> &'static str {
        "feature_extractor"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("arch".into(), self.cfg.arch.to_string()),
            ("in_channels".into(), self.cfg.in_channels.to_string()),
            ("width".into(), self.cfg.width.to_string()),
            ("input_height".into(), self.cfg.input_size.0.to_string()),
            ("input_width".into(), self.cfg.input_size.1.to_string()),
        ])
    }
}
