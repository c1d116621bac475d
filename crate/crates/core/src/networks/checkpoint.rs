//! Self-describing safetensors checkpoints: tensors are stored as f32 and
//! the header metadata carries the network kind, its architecture fields
//! and the hash of the configuration that produced it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle::safetensors::Load;
use candle::{DType, Device, Tensor};
use safetensors::SafeTensors;

use super::{CosineClassifier, FeatureExtractor, Generator, Network, ParamSet};
use crate::error::{FotError, IoContext, Result};

pub const KIND_KEY: &str = "kind";
pub const HASH_KEY: &str = "config_hash";

pub fn save(net: &dyn Network, config_hash: &str, path: &Path) -> Result<()> {
    let mut meta: HashMap<String, String> = net.metadata().into_iter().collect();
    meta.insert(KIND_KEY.into(), net.kind().into());
    meta.insert(HASH_KEY.into(), config_hash.into());
    let tensors = net
        .params()
        .named_tensors()
        .into_iter()
        .map(|(k, t)| Ok((k, t.to_dtype(DType::F32)?)))
        .collect::<Result<Vec<(String, Tensor)>>>()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

/// Raw checkpoint contents: metadata and a parameter set in `dtype`.
pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(BTreeMap<String, String>, ParamSet)> {
    let bytes = std::fs::read(path).at(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let st = SafeTensors::deserialize(&bytes)?;
    let mut tensors = st
        .tensors()
        .into_iter()
        .map(|(name, view)| Ok((name, view.load(device)?)))
        .collect::<Result<Vec<_>>>()?;
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((meta, ParamSet::from_named_tensors(tensors, dtype, device)?))
}

fn expect_kind(meta: &BTreeMap<String, String>, kind: &str, path: &Path) -> Result<()> {
    match meta.get(KIND_KEY) {
        Some(k) if k == kind => Ok(()),
        other => Err(FotError::Checkpoint(format!(
            "{} holds {:?}, expected {kind}",
            path.display(),
            other
        ))),
    }
}

pub fn config_hash(path: &Path) -> Result<Option<String>> {
    let bytes = std::fs::read(path).at(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    Ok(header.metadata().as_ref().and_then(|m| m.get(HASH_KEY).cloned()))
}

pub fn load_backbone(path: &Path, dtype: DType, device: &Device) -> Result<FeatureExtractor> {
    let (meta, params) = load(path, dtype, device)?;
    expect_kind(&meta, "feature_extractor", path)?;
    FeatureExtractor::from_metadata(&meta, params)
}

pub fn load_classifier(path: &Path, dtype: DType, device: &Device) -> Result<CosineClassifier> {
    let (meta, params) = load(path, dtype, device)?;
    expect_kind(&meta, "cosine_classifier", path)?;
    CosineClassifier::from_metadata(&meta, params)
}

pub fn load_generator(path: &Path, dtype: DType, device: &Device) -> Result<Generator> {
    let (meta, params) = load(path, dtype, device)?;
    expect_kind(&meta, "generator", path)?;
    Generator::from_metadata(&meta, params)
}
