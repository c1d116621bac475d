//! Stage orchestration. Each stage writes into `<out>/<stage>-<hash16>/`,
//! where the hash covers the stage's configuration keys and the hashes of
//! the stages it consumes. A `.done` marker holding the full hash makes a
//! directory reusable; anything else is rebuilt or refused.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle::{DType, Device};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::datamodel::{list_class_dirs, load_dataset, make_split, Registry, SplitConfig, SplitRole};
use crate::error::{FotError, IoContext, Result};
use crate::eval::{ablate, append_results, format_table, EvalReport, FotLearner, GeneratorBundle, ModeAssets, TaskSpec};
use crate::extractor::{prepare, prepare_map, Preprocess};
use crate::miner::{mine_quadruplets, read_manifest, write_manifest, MatchIndex};
use crate::networks::{checkpoint, CosineClassifier, FeatureExtractor, Generator};
use crate::raster::Image;
use crate::saliency::{compute_saliency, SaliencyCache, SaliencyMap};
use crate::training::{accuracy, train_base, train_generator, GenExample};

pub const DONE_MARKER: &str = ".done";
pub const BACKBONE_FILE: &str = "backbone.safetensors";
pub const CLASSIFIER_FILE: &str = "classifier.safetensors";
pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const MANIFEST_FILE: &str = "dg.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const RESULTS_FILE: &str = "results.csv";

const EXTRACT_KEYS: &[&str] = &["data", "saliency", "beta", "image_size", "pad_to_square", "empty_mask_policy"];
const BASE_KEYS: &[&str] = &[
    "arch",
    "width",
    "base_epochs",
    "base_batch",
    "base_lr",
    "scale",
    "scale_learnable",
    "seed",
];
const MINE_KEYS: &[&str] = &["top_m", "match_size", "target_count", "pairs_per_class", "seed"];
const GEN_KEYS: &[&str] = &[
    "gen_widths",
    "gen_res_blocks",
    "gen_epochs",
    "gen_batch",
    "gen_lr",
    "lambda_mse",
    "seed",
];
const EVAL_KEYS: &[&str] = &[
    "variants",
    "remove_background",
    "resize_foreground",
    "use_generator",
    "transductive",
    "n_way",
    "shots",
    "n_query",
    "n_episodes",
    "eval_seed",
    "k_generated",
    "finetune_iters",
    "original_only_iters",
    "finetune_lr",
    "entropy_sign",
    "entropy_weight",
    "transductive_scope",
    "scale",
    "scale_learnable",
    "seed",
    "dataset",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageRecord {
    pub name: String,
    pub hash: String,
    pub status: StageStatus,
    pub dir: PathBuf,
}

impl fmt::Display for StageRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.status {
            StageStatus::Ran => "ran",
            StageStatus::Skipped => "skipped",
        };
        write!(f, "{:<20} {:<8} {}", self.name, status, &self.hash[..16])
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub stages: Vec<StageRecord>,
    pub reports: Vec<EvalReport>,
    pub report_text: String,
}

fn stage_err(stage: &str) -> impl Fn(FotError) -> FotError + '_ {
    move |e| match e {
        e @ FotError::Stage { .. } => e,
        e => FotError::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        },
    }
}

/// Runs `build` into a fresh directory unless a completed one with the same
/// hash exists.
pub fn run_stage(
    out: &Path,
    name: &str,
    hash: &str,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<StageRecord> {
    let dir = out.join(format!("{name}-{}", &hash[..16]));
    let marker = dir.join(DONE_MARKER);
    if marker.is_file() {
        let recorded = std::fs::read_to_string(&marker).at(&marker)?;
        if recorded.trim() != hash {
            return Err(FotError::Stage {
                stage: name.to_string(),
                source: Box::new(FotError::Config(format!(
                    "{} was produced under a different configuration hash; refusing to reuse it",
                    dir.display()
                ))),
            });
        }
        log::info!("stage {name}: up to date ({})", &hash[..16]);
        return Ok(StageRecord {
            name: name.into(),
            hash: hash.into(),
            status: StageStatus::Skipped,
            dir,
        });
    }
    let tmp = out.join(format!("{name}-{}.partial", &hash[..16]));
    for d in [&dir, &tmp] {
        if d.exists() {
            std::fs::remove_dir_all(d).at(d)?;
        }
    }
    std::fs::create_dir_all(&tmp).at(&tmp)?;
    log::info!("stage {name}: running ({})", &hash[..16]);
    build(&tmp).map_err(stage_err(name))?;
    std::fs::write(tmp.join(DONE_MARKER), format!("{hash}\n")).at(&tmp)?;
    std::fs::rename(&tmp, &dir).at(&dir)?;
    Ok(StageRecord {
        name: name.into(),
        hash: hash.into(),
        status: StageStatus::Ran,
        dir,
    })
}

/// The split named in the config, or one drawn from the class directories.
pub fn resolve_split(cfg: &RunConfig) -> Result<SplitConfig> {
    if let Some(path) = &cfg.split_file {
        return SplitConfig::read(path);
    }
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| FotError::Config("'data' is not set".into()))?;
    let names = list_class_dirs(data)?;
    let counts = cfg.split_counts.ok_or_else(|| {
        FotError::Config("set 'split', 'split_counts' or a known 'dataset' to define the class split".into())
    })?;
    make_split(&names, counts, cfg.split_seed)
}

/// Every class assigned to the base role.
pub fn all_base_split(root: &Path) -> Result<SplitConfig> {
    let mut split = SplitConfig::default();
    for name in list_class_dirs(root)? {
        split.assign(&name, SplitRole::Base)?;
    }
    Ok(split)
}

fn sample_path(root: &Path, id: &str) -> PathBuf {
    let mut p = root.to_path_buf();
    for part in id.split('/') {
        p.push(part);
    }
    p.set_extension("png");
    p
}

/// Writes prepared images to `dest/images` and, when a saliency cache is
/// given, prepared maps to `dest/maps`, mirroring the dataset layout.
pub fn extract_to(
    raw: &Registry,
    saliency: Option<&SaliencyCache>,
    mode: Preprocess,
    cfg: &RunConfig,
    dest: &Path,
) -> Result<usize> {
    let images = dest.join("images");
    let maps = saliency.map(|_| SaliencyCache::new(dest.join("maps")));
    let (h, w) = cfg.extractor.output_size;
    (0..raw.len()).into_par_iter().try_for_each(|i| -> Result<()> {
        let sample = raw.sample(i)?;
        let map = match saliency {
            Some(cache) => Some(compute_saliency(&sample, None, Some(cache))?),
            None if mode == Preprocess::Resize => None,
            None => return Err(FotError::SaliencyUnavailable(sample.id.clone())),
        };
        let pixels = match &map {
            Some(m) => prepare(&sample.pixels, m, mode, &cfg.extractor)?,
            None => sample.pixels.resize_bilinear(h, w)?,
        };
        pixels.save_png(&sample_path(&images, &sample.id))?;
        if let (Some(m), Some(out)) = (&map, &maps) {
            out.put(&prepare_map(m, mode, &cfg.extractor)?)?;
        }
        Ok(())
    })?;
    Ok(raw.len())
}

/// Base-class training images and labels (position in the sorted list of
/// base class ids).
pub fn base_training_set(reg: &Registry) -> (Vec<Arc<Image>>, Vec<usize>, Vec<usize>) {
    let classes = reg.class_ids(SplitRole::Base);
    let label: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(l, &c)| (c, l)).collect();
    let idx = reg.indices_with_role(SplitRole::Base);
    let images = idx.iter().map(|&i| reg.pixels(i).expect("in-memory registry")).collect();
    let labels = idx.iter().map(|&i| label[&reg.entry(i).class_id]).collect();
    (images, labels, classes)
}

fn dtype() -> DType {
    DType::F32
}

/// Trains a backbone and base classifier; writes both checkpoints and the
/// loss history to `dest`.
pub fn train_base_to(reg: &Registry, cfg: &RunConfig, hash: &str, dest: &Path) -> Result<()> {
    let (images, labels, classes) = base_training_set(reg);
    let dev = Device::Cpu;
    let mut f = FeatureExtractor::new(cfg.backbone.clone(), dtype(), &dev, cfg.seed)?;
    let mut c = CosineClassifier::new(
        classes.len(),
        f.feature_dim(),
        cfg.fot.scale,
        dtype(),
        &dev,
        cfg.seed.wrapping_add(1),
    )?;
    let history = train_base(&images, &labels, &mut f, &mut c, &cfg.fot)?;
    let acc = accuracy(&f, &c, &images, &labels)?;
    log::info!("base training accuracy {:.2}%", acc * 100.0);
    checkpoint::save(&f, hash, &dest.join(BACKBONE_FILE))?;
    checkpoint::save(&c, hash, &dest.join(CLASSIFIER_FILE))?;
    let mut text: String = history.iter().map(|l| format!("{l}\n")).collect();
    text.push_str(&format!("# train_accuracy {acc}\n"));
    std::fs::write(dest.join("history.txt"), text).at(dest)?;
    Ok(())
}

/// Posture index over the prepared maps of base samples.
pub fn base_match_index(reg: &Registry, maps: &SaliencyCache, cfg: &RunConfig) -> Result<MatchIndex> {
    let items = reg
        .indices_with_role(SplitRole::Base)
        .into_par_iter()
        .map(|i| {
            let e = reg.entry(i);
            let map = maps
                .get(&e.id)?
                .ok_or_else(|| FotError::SaliencyUnavailable(e.id.clone()))?;
            Ok((e.id.clone(), e.class_id, map))
        })
        .collect::<Result<Vec<_>>>()?;
    MatchIndex::new(items, cfg.miner.match_size)
}

pub fn mine_to(reg: &Registry, maps: &SaliencyCache, cfg: &RunConfig, dest_file: &Path) -> Result<usize> {
    let index = base_match_index(reg, maps, cfg)?;
    let quads = mine_quadruplets(&index, &cfg.miner)?;
    if let Some(dir) = dest_file.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(dest_file, write_manifest(&quads)?).at(dest_file)?;
    Ok(quads.len())
}

/// Trains the generator on a mined manifest with the given base networks.
pub fn train_gen_to(
    reg: &Registry,
    manifest: &Path,
    base_dir: &Path,
    cfg: &RunConfig,
    hash: &str,
    dest: &Path,
) -> Result<()> {
    let text = std::fs::read_to_string(manifest).at(manifest)?;
    let quads = read_manifest(&text, reg)?;
    if quads.is_empty() {
        return Err(FotError::EmptyManifest);
    }
    let label: BTreeMap<usize, usize> = reg
        .class_ids(SplitRole::Base)
        .into_iter()
        .enumerate()
        .map(|(l, c)| (c, l))
        .collect();
    let px = |id: &str| -> Result<Arc<Image>> {
        let i = reg
            .index_of(id)
            .ok_or_else(|| FotError::Config(format!("manifest references unknown sample {id}")))?;
        reg.pixels(i)
    };
    let examples = quads
        .iter()
        .map(|q| {
            Ok(GenExample {
                a1: px(&q.a1)?,
                a2: px(&q.a2)?,
                b1: px(&q.b1)?,
                b2: px(&q.b2)?,
                label: *label.get(&q.class_b).ok_or_else(|| {
                    FotError::Config(format!("manifest sample {} is not in a base class", q.b2))
                })?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dev = Device::Cpu;
    let mut f = checkpoint::load_backbone(&base_dir.join(BACKBONE_FILE), dtype(), &dev)?;
    let mut c = checkpoint::load_classifier(&base_dir.join(CLASSIFIER_FILE), dtype(), &dev)?;
    let mut g = Generator::new(cfg.generator.clone(), dtype(), &dev, cfg.seed.wrapping_add(2))?;
    let history = train_generator(&examples, &mut f, &mut c, &mut g, &cfg.fot)?;
    checkpoint::save(&g, hash, &dest.join(GENERATOR_FILE))?;
    let text: String = history.iter().map(|e| format!("{} {}\n", e.loss, e.mse)).collect();
    std::fs::write(dest.join("history.txt"), text).at(dest)?;
    Ok(())
}

/// Loads a prepared-image directory into memory.
pub fn load_prepared(dir: &Path, split: &SplitConfig) -> Result<Registry> {
    load_dataset(&dir.join("images"), split)?.into_memory()
}

fn split_text_hash(split: &SplitConfig) -> String {
    crate::networks::hex(&Sha256::digest(split.to_text().as_bytes()))
}

struct ModeStages {
    extract: StageRecord,
    base: StageRecord,
    gen: Option<(StageRecord, StageRecord)>,
}

/// The full pipeline rooted at `out`.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self { cfg, out: out.into() }
    }

    fn modes(&self) -> (BTreeSet<Preprocess>, BTreeSet<Preprocess>) {
        let all = self.cfg.variants.iter().map(|v| v.preprocess()).collect();
        let gen = self
            .cfg
            .variants
            .iter()
            .filter(|v| v.use_generator)
            .map(|v| v.preprocess())
            .collect();
        (all, gen)
    }

    /// extract, train-base, mine, train-gen, eval; completed stages with a
    /// matching hash are skipped.
    pub fn run(&self) -> Result<RunSummary> {
        let cfg = &self.cfg;
        std::fs::create_dir_all(&self.out).at(&self.out)?;
        let split = resolve_split(cfg).map_err(stage_err("split"))?;
        split.write(&self.out.join("split.txt"))?;
        let split_hash = split_text_hash(&split);
        let data = cfg
            .data
            .clone()
            .ok_or_else(|| stage_err("extract")(FotError::Config("'data' is not set".into())))?;
        let saliency = cfg.saliency.as_ref().map(SaliencyCache::new);
        let (modes, gen_modes) = self.modes();

        let mut stages = Vec::new();
        let mut per_mode: BTreeMap<Preprocess, ModeStages> = BTreeMap::new();
        let mut raw: Option<Registry> = None;
        for &mode in &modes {
            let name = format!("extract-{}", mode.tag());
            let hash = cfg.stage_hash(&name, EXTRACT_KEYS, &[&split_hash]);
            let extract = run_stage(&self.out, &name, &hash, |dest| {
                if raw.is_none() {
                    raw = Some(load_dataset(&data, &split)?);
                }
                let reg = raw.as_ref().expect("loaded above");
                if reg.skipped() > 0 {
                    log::warn!("{} unreadable images skipped", reg.skipped());
                }
                extract_to(reg, saliency.as_ref(), mode, cfg, dest).map(|_| ())
            })?;
            stages.push(extract.clone());

            let mut prepared: Option<Registry> = None;
            let load = |prepared: &mut Option<Registry>| -> Result<()> {
                if prepared.is_none() {
                    *prepared = Some(load_prepared(&extract.dir, &split)?);
                }
                Ok(())
            };

            let name = format!("train-base-{}", mode.tag());
            let hash = cfg.stage_hash(&name, BASE_KEYS, &[&extract.hash]);
            let base = run_stage(&self.out, &name, &hash, |dest| {
                load(&mut prepared)?;
                train_base_to(prepared.as_ref().expect("loaded"), cfg, &hash, dest)
            })?;
            stages.push(base.clone());

            let gen = if gen_modes.contains(&mode) {
                let name = format!("mine-{}", mode.tag());
                let hash = cfg.stage_hash(&name, MINE_KEYS, &[&extract.hash]);
                let mine = run_stage(&self.out, &name, &hash, |dest| {
                    load(&mut prepared)?;
                    let maps = SaliencyCache::new(extract.dir.join("maps"));
                    let n = mine_to(prepared.as_ref().expect("loaded"), &maps, cfg, &dest.join(MANIFEST_FILE))?;
                    log::info!("mined {n} quadruplets");
                    Ok(())
                })?;
                stages.push(mine.clone());

                let name = format!("train-gen-{}", mode.tag());
                let hash = cfg.stage_hash(&name, GEN_KEYS, &[&mine.hash, &base.hash]);
                let gen = run_stage(&self.out, &name, &hash, |dest| {
                    load(&mut prepared)?;
                    train_gen_to(
                        prepared.as_ref().expect("loaded"),
                        &mine.dir.join(MANIFEST_FILE),
                        &base.dir,
                        cfg,
                        &hash,
                        dest,
                    )
                })?;
                stages.push(gen.clone());
                Some((mine, gen))
            } else {
                None
            };
            per_mode.insert(mode, ModeStages { extract, base, gen });
        }

        let upstream: Vec<&str> = stages.iter().map(|s| s.hash.as_str()).collect();
        let eval_hash = cfg.stage_hash("eval", EVAL_KEYS, &upstream);
        let mut reports = Vec::new();
        let eval = run_stage(&self.out, "eval", &eval_hash, |dest| {
            reports = self.evaluate(&split, &per_mode)?;
            std::fs::write(dest.join(REPORT_FILE), format_table(&reports)).at(dest)?;
            let lines: String = reports.iter().map(|r| format!("{}\n", r.result_line())).collect();
            std::fs::write(dest.join(RESULTS_FILE), lines).at(dest)?;
            Ok(())
        })?;
        if eval.status == StageStatus::Ran {
            append_results(&self.out.join(RESULTS_FILE), &reports)?;
        }
        let report_text = std::fs::read_to_string(eval.dir.join(REPORT_FILE)).at(&eval.dir)?;
        stages.push(eval);
        Ok(RunSummary {
            stages,
            reports,
            report_text,
        })
    }

    fn evaluate(&self, split: &SplitConfig, per_mode: &BTreeMap<Preprocess, ModeStages>) -> Result<Vec<EvalReport>> {
        let cfg = &self.cfg;
        let mut learner = FotLearner::new(cfg.fot.clone());
        let mut episode_registry: Option<Registry> = None;
        for (&mode, st) in per_mode {
            let reg = load_prepared(&st.extract.dir, split)?;
            let gen = st
                .gen
                .as_ref()
                .map(|(mine, gen)| (mine.dir.join(MANIFEST_FILE), gen.dir.join(GENERATOR_FILE)));
            let assets = load_mode_assets(
                &reg,
                &st.extract.dir.join("maps"),
                &st.base.dir.join(BACKBONE_FILE),
                gen.as_ref().map(|(m, g)| (m.as_path(), g.as_path())),
                cfg,
            )?;
            learner.insert(mode, assets);
            if episode_registry.is_none() {
                episode_registry = Some(reg);
            }
        }
        let reg = episode_registry.ok_or_else(|| FotError::Config("no variants to evaluate".into()))?;
        let mut reports = Vec::new();
        for &k in &cfg.shots {
            learner.cfg = cfg.fot_for_shot(k);
            let task = TaskSpec {
                dataset: cfg.dataset.clone(),
                n_way: cfg.n_way,
                k_shot: k,
                n_query: cfg.n_query,
            };
            reports.extend(ablate(&reg, &learner, &cfg.variants, &task, cfg.n_episodes, cfg.eval_seed)?);
        }
        Ok(reports)
    }
}

/// Backbone features for novel samples plus, when `gen` names a manifest and
/// generator checkpoint, everything augmentation needs.
pub fn load_mode_assets(
    reg: &Registry,
    maps_root: &Path,
    backbone: &Path,
    gen: Option<(&Path, &Path)>,
    cfg: &RunConfig,
) -> Result<ModeAssets> {
    let dev = Device::Cpu;
    let maps = SaliencyCache::new(maps_root);
    let novel = reg.indices_with_role(SplitRole::Novel);
    let images: BTreeMap<String, Arc<Image>> = novel
        .iter()
        .map(|&i| Ok((reg.entry(i).id.clone(), reg.pixels(i)?)))
        .collect::<Result<_>>()?;
    let novel_maps: BTreeMap<String, SaliencyMap> = if gen.is_some() {
        novel
            .par_iter()
            .map(|&i| {
                let id = &reg.entry(i).id;
                let m = maps.get(id)?.ok_or_else(|| FotError::SaliencyUnavailable(id.clone()))?;
                Ok((id.clone(), m))
            })
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };
    let backbone = checkpoint::load_backbone(backbone, dtype(), &dev)?;
    let mut assets = ModeAssets::new(backbone, images, novel_maps)?;
    if let Some((manifest, generator)) = gen {
        let text = std::fs::read_to_string(manifest).at(manifest)?;
        let d_g = read_manifest(&text, reg)?;
        let index = base_match_index(reg, &maps, cfg)?;
        let base_images = reg
            .indices_with_role(SplitRole::Base)
            .into_iter()
            .map(|i| Ok((reg.entry(i).id.clone(), reg.pixels(i)?)))
            .collect::<Result<_>>()?;
        let generator = checkpoint::load_generator(generator, dtype(), &dev)?;
        assets = assets.with_generator(GeneratorBundle {
            generator,
            d_g,
            index,
            base_images,
        });
    }
    Ok(assets)
}

/// Stage names in execution order, for display.
pub fn describe(stages: &[StageRecord]) -> String {
    stages.iter().map(|s| format!("{s}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HASH: &str = "00112233445566778899aabbccddeeff00112233445566778899aabbccddeeff";

    #[test]
    fn completed_stage_is_skipped() {
        let out = tempfile::tempdir().unwrap();
        let mut runs = 0;
        for _ in 0..2 {
            run_stage(out.path(), "s", HASH, |d| {
                runs += 1;
                std::fs::write(d.join("x"), "1").map_err(|e| FotError::Invalid(e.to_string()))
            })
            .unwrap();
        }
        assert_eq!(runs, 1);
        assert!(out.path().join("s-0011223344556677").join("x").is_file());
    }

    #[test]
    fn foreign_marker_is_refused() {
        let out = tempfile::tempdir().unwrap();
        let dir = out.path().join("s-0011223344556677");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join(DONE_MARKER), "ffff\n").unwrap();
        let err = run_stage(out.path(), "s", HASH, |_| Ok(())).unwrap_err();
        assert!(matches!(err, FotError::Stage { ref stage, .. } if stage == "s"));
    }

    #[test]
    fn failed_stage_leaves_no_marker() {
        let out = tempfile::tempdir().unwrap();
        let err = run_stage(out.path(), "s", HASH, |_| Err(FotError::EmptyManifest)).unwrap_err();
        assert!(matches!(err, FotError::Stage { .. }));
        assert!(!out.path().join("s-0011223344556677").join(DONE_MARKER).exists());
        let mut ran = false;
        run_stage(out.path(), "s", HASH, |_| {
            ran = true;
            Ok(())
        })
        .unwrap();
        assert!(ran);
    }
}
