//! Flat `key = value` configuration and its typed view.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::datamodel::SplitCounts;
use crate::error::{FotError, IoContext, Result};
use crate::eval::VariantFlags;
use crate::extractor::{EmptyMaskPolicy, ExtractorConfig};
use crate::miner::MinerConfig;
use crate::networks::{Architecture, BackboneConfig, GeneratorConfig, ScaleMode};
use crate::training::FotConfig;

/// Ordered key/value pairs. Later assignments override earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FotError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(FotError::Config(format!("line {}: empty key", n + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), value.into());
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| FotError::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.0.iter()
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Every recognised key with its default; `None` means "unset".
const KEYS: &[(&str, Option<&str>)] = &[
    ("data", None),
    ("saliency", None),
    ("split", None),
    ("dataset", Some("custom")),
    ("split_counts", None),
    ("split_seed", Some("0")),
    ("seed", Some("0")),
    ("arch", Some("conv4")),
    ("width", Some("64")),
    ("image_size", Some("84")),
    ("beta", Some("40")),
    ("pad_to_square", Some("true")),
    ("empty_mask_policy", Some("whole_image")),
    ("base_epochs", Some("100")),
    ("base_batch", Some("64")),
    ("base_lr", Some("0.001")),
    ("scale", None),
    ("scale_learnable", None),
    ("top_m", Some("5")),
    ("match_size", Some("64")),
    ("target_count", Some("50000")),
    ("pairs_per_class", Some("100")),
    ("gen_widths", Some("64,128,256")),
    ("gen_res_blocks", Some("1")),
    ("gen_epochs", Some("1000")),
    ("gen_batch", Some("32")),
    ("gen_lr", Some("0.001")),
    ("lambda_mse", Some("1.0")),
    ("k_generated", None),
    ("finetune_iters", Some("100")),
    ("original_only_iters", Some("40")),
    ("finetune_lr", Some("0.001")),
    ("entropy_sign", Some("minimize_entropy")),
    ("entropy_weight", Some("1.0")),
    ("transductive_scope", Some("all")),
    ("remove_background", Some("true")),
    ("resize_foreground", Some("true")),
    ("use_generator", Some("true")),
    ("transductive", Some("false")),
    ("variants", None),
    ("n_way", Some("5")),
    ("shots", Some("1,5")),
    ("n_query", Some("16")),
    ("n_episodes", Some("600")),
    ("eval_seed", Some("0")),
];

pub fn known_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|(k, _)| *k)
}

/// Typed run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub data: Option<PathBuf>,
    pub saliency: Option<PathBuf>,
    pub split_file: Option<PathBuf>,
    pub dataset: String,
    pub split_counts: Option<SplitCounts>,
    pub split_seed: u64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub extractor: ExtractorConfig,
    pub miner: MinerConfig,
    pub generator: GeneratorConfig,
    pub fot: FotConfig,
    /// Explicit generated-sample budget; otherwise 3 for 1-shot, 5 beyond.
    pub k_generated: Option<usize>,
    pub variants: Vec<VariantFlags>,
    pub n_way: usize,
    pub shots: Vec<usize>,
    pub n_query: usize,
    pub n_episodes: usize,
    pub eval_seed: u64,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| FotError::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(FotError::Config(format!("invalid boolean '{v}' for '{key}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_size(key: &str, v: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(key, &v.replace('x', ","))?.as_slice() {
        [s] => Ok((*s, *s)),
        [h, w] => Ok((*h, *w)),
        _ => Err(FotError::Config(format!("invalid size '{v}' for '{key}'"))),
    }
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        for (k, _) in map.iter() {
            if !KEYS.iter().any(|(known, _)| known == k) {
                return Err(FotError::Config(format!("unknown key '{k}'")));
            }
        }
        let mut values = BTreeMap::new();
        for (k, default) in KEYS {
            if let Some(v) = map.get(k).or(*default) {
                values.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| values.get(k).map(String::as_str);
        let req = |k: &str| get(k).expect("key has a default");
        let path = |k: &str| get(k).map(PathBuf::from);

        let arch: Architecture = req("arch").parse()?;
        let image_size = parse_size("image_size", req("image_size"))?;
        let backbone = BackboneConfig {
            arch,
            in_channels: 3,
            width: parse("width", req("width"))?,
            input_size: image_size,
        };
        let extractor = ExtractorConfig {
            beta: parse("beta", req("beta"))?,
            output_size: image_size,
            empty_mask_policy: match req("empty_mask_policy") {
                "whole_image" => EmptyMaskPolicy::WholeImage,
                "error" => EmptyMaskPolicy::Error,
                other => return Err(FotError::Config(format!("unknown empty_mask_policy '{other}'"))),
            },
            pad_to_square: parse_bool("pad_to_square", req("pad_to_square"))?,
        };
        extractor.validate()?;
        let seed: u64 = parse("seed", req("seed"))?;
        let miner = MinerConfig {
            top_m: parse("top_m", req("top_m"))?,
            match_size: parse_size("match_size", req("match_size"))?,
            target_count: parse("target_count", req("target_count"))?,
            pairs_per_class: parse("pairs_per_class", req("pairs_per_class"))?,
            seed,
        };
        miner.validate()?;
        let widths: Vec<usize> = parse_list("gen_widths", req("gen_widths"))?;
        let widths: [usize; 3] = widths
            .try_into()
            .map_err(|_| FotError::Config("gen_widths needs exactly three values".into()))?;
        let generator = GeneratorConfig {
            image_channels: 3,
            widths,
            res_blocks: parse("gen_res_blocks", req("gen_res_blocks"))?,
        };
        // Fixed scale 2 for conv4, learnable starting at 10 for deeper nets.
        let learnable = match get("scale_learnable") {
            Some(v) => parse_bool("scale_learnable", v)?,
            None => arch != Architecture::Conv4,
        };
        let s = match get("scale") {
            Some(v) => parse("scale", v)?,
            None if learnable => 10.0,
            None => 2.0,
        };
        let k_generated = get("k_generated").map(|v| parse("k_generated", v)).transpose()?;
        let fot = FotConfig {
            lambda_mse: parse("lambda_mse", req("lambda_mse"))?,
            k_generated: k_generated.unwrap_or(3),
            finetune_iters: parse("finetune_iters", req("finetune_iters"))?,
            original_only_iters: parse("original_only_iters", req("original_only_iters"))?,
            gen_epochs: parse("gen_epochs", req("gen_epochs"))?,
            gen_batch: parse("gen_batch", req("gen_batch"))?,
            base_epochs: parse("base_epochs", req("base_epochs"))?,
            base_batch: parse("base_batch", req("base_batch"))?,
            base_lr: parse("base_lr", req("base_lr"))?,
            gen_lr: parse("gen_lr", req("gen_lr"))?,
            finetune_lr: parse("finetune_lr", req("finetune_lr"))?,
            scale: if learnable { ScaleMode::Learnable(s) } else { ScaleMode::Fixed(s) },
            transductive: parse_bool("transductive", req("transductive"))?,
            entropy_sign: req("entropy_sign").parse()?,
            entropy_weight: parse("entropy_weight", req("entropy_weight"))?,
            transductive_scope: req("transductive_scope").parse()?,
            seed,
        };
        fot.validate()?;
        let variants = match get("variants") {
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<Vec<VariantFlags>>>()?,
            None => {
                let flags = VariantFlags {
                    remove_background: parse_bool("remove_background", req("remove_background"))?,
                    resize_foreground: parse_bool("resize_foreground", req("resize_foreground"))?,
                    use_generator: parse_bool("use_generator", req("use_generator"))?,
                    transductive: fot.transductive,
                };
                flags.validate()?;
                vec![flags]
            }
        };
        let split_counts = match get("split_counts") {
            Some(v) => match parse_list::<usize>("split_counts", v)?.as_slice() {
                [b, v, n] => Some(SplitCounts::new(*b, *v, *n)),
                _ => return Err(FotError::Config("split_counts needs base,val,novel".into())),
            },
            None => SplitCounts::preset(req("dataset")),
        };
        let shots: Vec<usize> = parse_list("shots", req("shots"))?;
        if shots.is_empty() || shots.contains(&0) {
            return Err(FotError::Config("shots must list positive values".into()));
        }
        Ok(Self {
            data: path("data"),
            saliency: path("saliency"),
            split_file: path("split"),
            dataset: req("dataset").to_string(),
            split_counts,
            split_seed: parse("split_seed", req("split_seed"))?,
            seed,
            backbone,
            extractor,
            miner,
            generator,
            fot,
            k_generated,
            variants,
            n_way: parse("n_way", req("n_way"))?,
            shots,
            n_query: parse("n_query", req("n_query"))?,
            n_episodes: parse("n_episodes", req("n_episodes"))?,
            eval_seed: parse("eval_seed", req("eval_seed"))?,
            values,
        })
    }

    /// Effective value of `key` after defaults.
    pub fn value(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Fine-tuning configuration for a `k_shot` task.
    pub fn fot_for_shot(&self, k_shot: usize) -> FotConfig {
        FotConfig {
            k_generated: self.k_generated.unwrap_or(if k_shot <= 1 { 3 } else { 5 }),
            ..self.fot.clone()
        }
    }

    /// Digest of the listed keys' effective values and upstream digests.
    pub fn stage_hash(&self, stage: &str, keys: &[&str], upstream: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update(b"\n");
        for k in keys {
            h.update(format!("{k}={}\n", self.value(k).unwrap_or("")).as_bytes());
        }
        for u in upstream {
            h.update(format!("upstream={u}\n").as_bytes());
        }
        crate::networks::hex(&h.finalize())
    }

    /// Canonical text of all effective values.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_with_comments_and_overrides() {
        let mut m = ConfigMap::parse("# header\nbeta = 30  # inline\n\nshots=1\n").unwrap();
        m.apply("beta=50").unwrap();
        let c = RunConfig::from_map(&m).unwrap();
        assert_eq!(c.extractor.beta, 50.0);
        assert_eq!(c.shots, vec![1]);
        assert_eq!(c.fot.scale, ScaleMode::Fixed(2.0));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_map(&ConfigMap::parse("betta = 3").unwrap()).is_err());
        assert!(ConfigMap::parse("novalue").is_err());
    }

    #[test]
    fn k_budget_follows_shots() {
        let c = RunConfig::from_map(&ConfigMap::default()).unwrap();
        assert_eq!(c.fot_for_shot(1).k_generated, 3);
        assert_eq!(c.fot_for_shot(5).k_generated, 5);
    }

    #[test]
    fn stage_hash_tracks_relevant_keys_only() {
        let a = RunConfig::from_map(&ConfigMap::parse("beta = 40").unwrap()).unwrap();
        let b = RunConfig::from_map(&ConfigMap::parse("beta = 41\nn_episodes = 3").unwrap()).unwrap();
        assert_ne!(a.stage_hash("x", &["beta"], &[]), b.stage_hash("x", &["beta"], &[]));
        assert_eq!(a.stage_hash("x", &["seed"], &[]), b.stage_hash("x", &["seed"], &[]));
        assert_ne!(a.stage_hash("x", &["seed"], &["u1"]), a.stage_hash("x", &["seed"], &["u2"]));
    }

    #[test]
    fn resnet_defaults_to_learnable_scale() {
        let c = RunConfig::from_map(&ConfigMap::parse("arch = resnet18").unwrap()).unwrap();
        assert_eq!(c.fot.scale, ScaleMode::Learnable(10.0));
    }

    #[test]
    fn variants_list() {
        let c = RunConfig::from_map(&ConfigMap::parse("variants = baseline, rb, rb_rf, fot").unwrap()).unwrap();
        assert_eq!(c.variants, VariantFlags::standard_grid());
    }
}
