use std::collections::BTreeMap;

use candle::{DType, Device, Tensor, D};
use candle_nn::ops::softmax;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{l2_normalize, Network, ParamSet};
use crate::error::{FotError, Result};

/// Norm stabiliser for zero-length features or weights.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleMode {
    Fixed(f64),
    /// Trainable scale starting from the given value.
    Learnable(f64),
}

impl ScaleMode {
    pub fn initial(self) -> f64 {
        match self {
            ScaleMode::Fixed(s) | ScaleMode::Learnable(s) => s,
        }
    }
}

/// Scaled cosine-similarity classifier: `logit_c = s * cos(f, w_c)`.
#[derive(Debug)]
pub struct CosineClassifier {
    num_classes: usize,
    feature_dim: usize,
    scale: ScaleMode,
    params: ParamSet,
}

impl CosineClassifier {
    pub fn new(
        num_classes: usize,
        feature_dim: usize,
        scale: ScaleMode,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(FotError::Config("classifier dimensions must be positive".into()));
        }
        if scale.initial() <= 0.0 {
            return Err(FotError::Config("cosine scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new(dtype, device);
        params.insert_uniform(
            "weight",
            &[num_classes, feature_dim],
            1.0 / (feature_dim as f64).sqrt(),
            &mut rng,
        )?;
        if let ScaleMode::Learnable(s) = scale {
            params.insert_const("scale", &[1], s)?;
        }
        Ok(Self {
            num_classes,
            feature_dim,
            scale,
            params,
        })
    }

    /// Builds a classifier around explicit class weights (`C x d`).
    pub fn from_weights(weight: Tensor, scale: f64) -> Result<Self> {
        let (num_classes, feature_dim) = weight.dims2()?;
        let mut params = ParamSet::new(weight.dtype(), weight.device());
        params.insert("weight", weight)?;
        Ok(Self {
            num_classes,
            feature_dim,
            scale: ScaleMode::Fixed(scale),
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn scale_mode(&self) -> ScaleMode {
        self.scale
    }

    /// `N x d` features to `N x C` logits.
    pub fn logits(&self, feats: &Tensor) -> Result<Tensor> {
        let (_, d) = feats.dims2()?;
        if d != self.feature_dim {
            return Err(FotError::Shape(format!(
                "classifier expects {}-dim features, got {d}",
                self.feature_dim
            )));
        }
        let f = l2_normalize(feats, COSINE_EPS)?;
        let w = l2_normalize(&self.params.get("weight")?, COSINE_EPS)?;
        let cos = f.matmul(&w.t()?)?;
        Ok(match self.scale {
            ScaleMode::Fixed(s) => (cos * s)?,
            ScaleMode::Learnable(_) => cos.broadcast_mul(&self.params.get("scale")?)?,
        })
    }

    pub fn probs(&self, feats: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.logits(feats)?, D::Minus1)?)
    }

    /// Class probabilities for a single feature vector.
    pub fn classify(&self, feature: &[f32]) -> Result<Vec<f32>> {
        let t = Tensor::from_slice(feature, (1, feature.len()), self.params.device())?
            .to_dtype(self.params.dtype())?;
        Ok(self
            .probs(&t)?
            .squeeze(0)?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?)
    }

    pub fn predict(&self, feats: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .logits(feats)?
            .argmax(1)?
            .to_dtype(DType::U32)?
            .to_vec1::<u32>()?
            .into_iter()
            .map(|v| v as usize)
            .collect())
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>, params: ParamSet) -> Result<Self> {
        let weight = params.get("weight")?;
        let (num_classes, feature_dim) = weight.dims2()?;
        let s: f64 = meta
            .get("scale")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FotError::Checkpoint("classifier metadata lacks 'scale'".into()))?;
        let scale = match meta.get("scale_mode").map(String::as_str) {
            Some("learnable") => ScaleMode::Learnable(s),
            _ => ScaleMode::Fixed(s),
        };
        Ok(Self {
            num_classes,
            feature_dim,
            scale,
            params,
        })
    }
}

impl Network for CosineClassifier {
    fn kind(&self) -> &'static str {
        "cosine_classifier"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let (mode, s) = match self.scale {
            ScaleMode::Fixed(s) => ("fixed", s),
            ScaleMode::Learnable(s) => ("learnable", s),
        };
        BTreeMap::from([
            ("scale_mode".into(), mode.into()),
            ("scale".into(), s.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("feature_dim".into(), self.feature_dim.to_string()),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(data, (rows.len(), d), &Device::Cpu).unwrap()
    }

    #[test]
    fn two_class_closed_form() {
        // cos sims 1 and 0 at s = 2 -> softmax([2, 0]) = [0.8808, 0.1192]
        let c = CosineClassifier::from_weights(t(&[&[1.0, 0.0], &[0.0, 1.0]]), 2.0).unwrap();
        let p = c.probs(&t(&[&[3.0, 0.0]])).unwrap().to_vec2::<f64>().unwrap();
        let e = 2f64.exp();
        assert!((p[0][0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0][0] - 0.881).abs() < 5e-4);
        assert!((p[0][1] - 0.119).abs() < 5e-4);
    }

    #[test]
    fn identical_weights_give_uniform() {
        let c = CosineClassifier::from_weights(t(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]), 10.0).unwrap();
        let p = c.probs(&t(&[&[0.3, -4.0]])).unwrap().to_vec2::<f64>().unwrap();
        for v in &p[0] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn large_scale_parallel_feature_wins() {
        let c = CosineClassifier::from_weights(t(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]), 50.0)
            .unwrap();
        let p = c.probs(&t(&[&[2.0, 0.0, 0.0]])).unwrap().to_vec2::<f64>().unwrap();
        assert!(p[0][1] > 1.0 - 1e-9);
    }

    #[test]
    fn zero_feature_is_uniform_and_finite() {
        let c = CosineClassifier::from_weights(t(&[&[1.0, 0.0], &[0.0, 1.0]]), 2.0).unwrap();
        let p = c.probs(&t(&[&[0.0, 0.0]])).unwrap().to_vec2::<f64>().unwrap();
        assert!((p[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let c = CosineClassifier::new(3, 4, ScaleMode::Fixed(2.0), DType::F32, &Device::Cpu, 0).unwrap();
        assert!(c.classify(&[1.0, 2.0]).is_err());
        let p = c.classify(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
