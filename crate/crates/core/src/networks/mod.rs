//! Learnable functions: feature extractor, cosine classifier and the
//! posture transformation generator.

mod backbone;
pub mod checkpoint;
mod classifier;
mod generator;

use std::collections::BTreeMap;

use candle::{DType, Device, Tensor, Var, D};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{FotError, Result};

pub use backbone::{Architecture, BackboneConfig, FeatureExtractor};
pub use classifier::{CosineClassifier, ScaleMode};
pub use generator::{Generator, GeneratorConfig};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named parameters and buffers of one network, in deterministic order.
///
/// Buffers (batch-norm running statistics) are never handed to optimizers.
#[derive(Debug)]
pub struct ParamSet {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    frozen: bool,
    dtype: DType,
    device: Device,
}

impl ParamSet {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            frozen: false,
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?)?;
        self.params.insert(name.to_string(), var);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor) -> Result<()> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?)?;
        self.buffers.insert(name.to_string(), var);
        Ok(())
    }

    /// Uniform initialisation in `[-bound, bound]` from a seeded generator.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(value, shape, &self.device)?)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| FotError::Checkpoint(format!("missing parameter {name}")))?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn buffer(&self, name: &str) -> Result<&Var> {
        self.buffers
            .get(name)
            .ok_or_else(|| FotError::Checkpoint(format!("missing buffer {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// When frozen, parameters are returned detached so no gradient reaches them.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    /// Trainable parameters whose names start with one of `prefixes`.
    pub fn trainable_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every tensor, parameters first, keyed by name; buffers carry a `buffer.` prefix.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .chain(
                self.buffers
                    .iter()
                    .map(|(k, v)| (format!("buffer.{k}"), v.as_tensor().clone())),
            )
            .collect()
    }

    pub fn from_named_tensors(
        tensors: Vec<(String, Tensor)>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut set = Self::new(dtype, device);
        for (name, t) in tensors {
            match name.strip_prefix("buffer.") {
                Some(b) => set.insert_buffer(b, t)?,
                None => set.insert(&name, t)?,
            }
        }
        Ok(set)
    }

    /// Independent copy: updates to the clone never reach `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype, &self.device);
        for (k, v) in &self.params {
            out.insert(k, v.as_tensor().clone())?;
        }
        for (k, v) in &self.buffers {
            out.insert_buffer(k, v.as_tensor().clone())?;
        }
        out.frozen = self.frozen;
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype, &self.device);
        for (k, v) in &self.params {
            out.insert(k, v.as_tensor().clone())?;
        }
        for (k, v) in &self.buffers {
            out.insert_buffer(k, v.as_tensor().clone())?;
        }
        out.frozen = self.frozen;
        Ok(out)
    }

    /// SHA-256 over names and values of all parameters and buffers.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }

    /// 3x3 / KxK convolution weight and bias with He-uniform weights.
    pub(crate) fn add_conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let fan_in = (c_in * k * k) as f64;
        self.insert_uniform(
            &format!("{name}.weight"),
            &[c_out, c_in, k, k],
            (6.0 / fan_in).sqrt(),
            rng,
        )?;
        if bias {
            self.insert_uniform(&format!("{name}.bias"), &[c_out], 1.0 / fan_in.sqrt(), rng)?;
        }
        Ok(())
    }

    /// Transposed-convolution weight (`c_in x c_out x k x k`) and bias.
    pub(crate) fn add_deconv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let fan_in = (c_in * k * k) as f64;
        self.insert_uniform(
            &format!("{name}.weight"),
            &[c_in, c_out, k, k],
            (6.0 / fan_in).sqrt(),
            rng,
        )?;
        self.insert_uniform(&format!("{name}.bias"), &[c_out], 1.0 / fan_in.sqrt(), rng)
    }

    pub(crate) fn add_batch_norm(&mut self, name: &str, channels: usize) -> Result<()> {
        self.insert_const(&format!("{name}.gamma"), &[channels], 1.0)?;
        self.insert_const(&format!("{name}.beta"), &[channels], 0.0)?;
        self.insert_buffer(
            &format!("{name}.running_mean"),
            Tensor::zeros(channels, self.dtype, &self.device)?,
        )?;
        self.insert_buffer(
            &format!("{name}.running_var"),
            Tensor::ones(channels, self.dtype, &self.device)?,
        )
    }

    pub(crate) fn conv2d(
        &self,
        name: &str,
        x: &Tensor,
        padding: usize,
        stride: usize,
    ) -> Result<Tensor> {
        let y = x.conv2d(&self.get(&format!("{name}.weight"))?, padding, stride, 1, 1)?;
        let bias = format!("{name}.bias");
        if self.contains(&bias) {
            Ok(y.broadcast_add(&self.get(&bias)?.reshape((1, (), 1, 1))?)?)
        } else {
            Ok(y)
        }
    }

    pub(crate) fn conv_transpose2d(
        &self,
        name: &str,
        x: &Tensor,
        padding: usize,
        stride: usize,
    ) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.get(&format!("{name}.weight"))?, padding, 0, stride, 1)?;
        Ok(y.broadcast_add(&self.get(&format!("{name}.bias"))?.reshape((1, (), 1, 1))?)?)
    }

    /// Batch normalisation over `N, H, W`. Training mode normalises with
    /// batch statistics and updates the running averages.
    pub(crate) fn batch_norm(&self, name: &str, x: &Tensor, train: bool) -> Result<Tensor> {
        let gamma = self.get(&format!("{name}.gamma"))?.reshape((1, (), 1, 1))?;
        let beta = self.get(&format!("{name}.beta"))?.reshape((1, (), 1, 1))?;
        let running_mean = self.buffer(&format!("{name}.running_mean"))?;
        let running_var = self.buffer(&format!("{name}.running_var"))?;
        let (mean, var) = if train {
            let (n, c, h, w) = x.dims4()?;
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let centred = flat.broadcast_sub(&mean)?;
            let var = centred.sqr()?.mean_keepdim(1)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            running_mean.set(
                &((running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                    + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?,
            )?;
            running_var.set(
                &((running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                    + (unbiased.flatten_all()? * BN_MOMENTUM)?)?,
            )?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                running_mean.as_tensor().detach().reshape((1, (), 1, 1))?,
                running_var.as_tensor().detach().reshape((1, (), 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// 2x2 max pooling; an odd trailing row/column is dropped first. Built from
/// reshape and max reductions so the full gradient reaches the arg-max.
pub(crate) fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * h2)?.narrow(3, 0, 2 * w2)?.contiguous()?;
    Ok(x.reshape((n, c, h2, 2, w2, 2))?.max(5)?.max(3)?)
}

/// Row-wise L2 normalisation with `sqrt(|x|^2 + eps^2)` as the norm.
pub(crate) fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + eps * eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Common surface of the three networks for checkpointing and freezing.
pub trait Network {
    fn kind(&self) -> &'static str;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Architecture description stored alongside the weights.
    fn metadata(&self) -> BTreeMap<String, String>;
}
