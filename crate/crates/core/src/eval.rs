//! Episodic evaluation and the ablation grid.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use candle::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::datamodel::{sample_episode, Episode, ImageSample, Registry, SampleStage};
use crate::error::{FotError, IoContext, Result};
use crate::extractor::Preprocess;
use crate::miner::{MatchIndex, Quadruplet};
use crate::networks::{FeatureExtractor, Generator, Network};
use crate::raster::Image;
use crate::saliency::SaliencyMap;
use crate::training::{augment_support, finetune, finetune_features, AugmentContext, FotConfig};

/// Which pipeline stages a variant enables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct VariantFlags {
    pub remove_background: bool,
    /// Crop and zoom the salient box; requires `remove_background`.
    pub resize_foreground: bool,
    pub use_generator: bool,
    pub transductive: bool,
}

impl VariantFlags {
    pub const BASELINE: Self = Self::new(false, false, false, false);
    pub const RB: Self = Self::new(true, false, false, false);
    pub const RB_RF: Self = Self::new(true, true, false, false);
    pub const FOT: Self = Self::new(true, true, true, false);
    pub const FOT_STAR: Self = Self::new(true, true, true, true);

    pub const fn new(rb: bool, rf: bool, gen: bool, trans: bool) -> Self {
        Self {
            remove_background: rb,
            resize_foreground: rf,
            use_generator: gen,
            transductive: trans,
        }
    }

    /// The four-way grid: baseline, RB, RB&RF, full inductive pipeline.
    pub fn standard_grid() -> Vec<Self> {
        vec![Self::BASELINE, Self::RB, Self::RB_RF, Self::FOT]
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_foreground && !self.remove_background {
            return Err(FotError::Config(
                "resize_foreground requires remove_background".into(),
            ));
        }
        Ok(())
    }

    pub fn preprocess(&self) -> Preprocess {
        match (self.remove_background, self.resize_foreground) {
            (true, true) => Preprocess::Foreground,
            (true, false) => Preprocess::RemoveBackground,
            _ => Preprocess::Resize,
        }
    }
}

impl fmt::Display for VariantFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::FOT {
            return f.write_str("fot");
        }
        if *self == Self::FOT_STAR {
            return f.write_str("fot_star");
        }
        let mut parts = Vec::new();
        match (self.remove_background, self.resize_foreground) {
            (true, true) => parts.push("rb_rf"),
            (true, false) => parts.push("rb"),
            (false, true) => parts.push("rf"),
            (false, false) => {}
        }
        if self.use_generator {
            parts.push("gen");
        }
        if self.transductive {
            parts.push("trans");
        }
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for VariantFlags {
    type Err = FotError;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Self::default();
        for part in s.split('+').map(str::trim) {
            match part {
                "baseline" => {}
                "rb" => flags.remove_background = true,
                "rb_rf" => {
                    flags.remove_background = true;
                    flags.resize_foreground = true;
                }
                "gen" => flags.use_generator = true,
                "trans" => flags.transductive = true,
                "fot" => flags = Self { transductive: flags.transductive, ..Self::FOT },
                "fot_star" => flags = Self::FOT_STAR,
                other => return Err(FotError::Config(format!("unknown variant component '{other}'"))),
            }
        }
        flags.validate()?;
        Ok(flags)
    }
}

/// Produces episode-label predictions for the query set of an episode.
pub trait EpisodeLearner: Sync {
    fn predict(&self, episode: &Episode, flags: &VariantFlags, seed: u64) -> Result<Vec<usize>>;
}

/// Test stub returning the true labels.
pub struct OracleLearner;

impl EpisodeLearner for OracleLearner {
    fn predict(&self, episode: &Episode, _: &VariantFlags, _: u64) -> Result<Vec<usize>> {
        Ok(episode.query_labels.clone())
    }
}

/// Test stub drawing each prediction uniformly from the episode labels.
pub struct RandomLearner;

impl EpisodeLearner for RandomLearner {
    fn predict(&self, episode: &Episode, _: &VariantFlags, seed: u64) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..episode.query.len())
            .map(|_| rng.random_range(0..episode.n_way))
            .collect())
    }
}

/// Generator, mined set and posture index for one preprocessing mode.
pub struct GeneratorBundle {
    pub generator: Generator,
    pub d_g: Vec<Quadruplet>,
    pub index: MatchIndex,
    pub base_images: BTreeMap<String, Arc<Image>>,
}

/// Trained components and prepared data for one preprocessing mode.
pub struct ModeAssets {
    pub backbone: FeatureExtractor,
    /// Prepared pixels by sample id.
    pub images: BTreeMap<String, Arc<Image>>,
    /// Prepared saliency maps by sample id; needed for partner search.
    pub maps: BTreeMap<String, SaliencyMap>,
    features: BTreeMap<String, Vec<f32>>,
    pub generator: Option<GeneratorBundle>,
}

impl ModeAssets {
    /// Caches evaluation-mode features of every image.
    pub fn new(
        backbone: FeatureExtractor,
        images: BTreeMap<String, Arc<Image>>,
        maps: BTreeMap<String, SaliencyMap>,
    ) -> Result<Self> {
        let ids: Vec<&String> = images.keys().collect();
        let chunks: Vec<Vec<(String, Vec<f32>)>> = ids
            .par_chunks(64)
            .map(|chunk| {
                let refs: Vec<&Image> = chunk.iter().map(|id| images[*id].as_ref()).collect();
                let f = backbone.extract_batch(&refs)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
                Ok(chunk.iter().map(|id| (*id).clone()).zip(f).collect())
            })
            .collect::<Result<_>>()?;
        let features = chunks.into_iter().flatten().collect();
        Ok(Self {
            backbone,
            images,
            maps,
            features,
            generator: None,
        })
    }

    pub fn with_generator(mut self, bundle: GeneratorBundle) -> Self {
        self.generator = Some(bundle);
        self
    }

    fn image(&self, id: &str) -> Result<Arc<Image>> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| FotError::Component(format!("no prepared image for {id}")))
    }

    fn feature_rows(&self, samples: &[ImageSample]) -> Result<Tensor> {
        let p = self.backbone.params();
        let d = self.backbone.feature_dim();
        let cached: Vec<Option<&Vec<f32>>> = samples
            .iter()
            .map(|s| if s.synthetic { None } else { self.features.get(&s.id) })
            .collect();
        let fresh: Vec<&Image> = samples
            .iter()
            .zip(&cached)
            .filter(|(_, c)| c.is_none())
            .map(|(s, _)| s.pixels.as_ref())
            .collect();
        let fresh = if fresh.is_empty() {
            Vec::new()
        } else {
            self.backbone
                .extract_batch(&fresh)?
                .to_dtype(DType::F32)?
                .to_vec2::<f32>()?
        };
        let mut fresh = fresh.into_iter();
        let mut flat = Vec::with_capacity(samples.len() * d);
        for c in cached {
            match c {
                Some(v) => flat.extend_from_slice(v),
                None => flat.extend(fresh.next().expect("one fresh row per uncached sample")),
            }
        }
        Ok(Tensor::from_vec(flat, (samples.len(), d), p.device())?.to_dtype(p.dtype())?)
    }
}

/// The full pipeline as an episode learner: preprocess, optionally augment,
/// fine-tune a fresh classifier, predict the queries.
pub struct FotLearner {
    pub cfg: FotConfig,
    modes: BTreeMap<Preprocess, ModeAssets>,
}

impl FotLearner {
    pub fn new(cfg: FotConfig) -> Self {
        Self {
            cfg,
            modes: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, mode: Preprocess, assets: ModeAssets) {
        self.modes.insert(mode, assets);
    }

    pub fn assets(&self, mode: Preprocess) -> Option<&ModeAssets> {
        self.modes.get(&mode)
    }

    /// Swaps raw pixels for the mode's prepared pixels.
    pub fn route(&self, samples: &[ImageSample], mode: Preprocess) -> Result<Vec<ImageSample>> {
        let assets = self.mode(mode)?;
        samples
            .iter()
            .map(|s| {
                Ok(ImageSample {
                    pixels: assets.image(&s.id)?,
                    stage: if mode == Preprocess::Resize {
                        s.stage
                    } else {
                        SampleStage::Extracted
                    },
                    ..s.clone()
                })
            })
            .collect()
    }

    fn mode(&self, mode: Preprocess) -> Result<&ModeAssets> {
        self.modes.get(&mode).ok_or_else(|| {
            FotError::Component(format!("no components prepared for preprocessing '{}'", mode.tag()))
        })
    }
}

impl EpisodeLearner for FotLearner {
    fn predict(&self, episode: &Episode, flags: &VariantFlags, seed: u64) -> Result<Vec<usize>> {
        flags.validate()?;
        let mode = flags.preprocess();
        let assets = self.mode(mode)?;
        let mut support = self.route(&episode.support, mode)?;
        let mut labels = episode.support_labels.clone();
        let query = self.route(&episode.query, mode)?;
        if flags.use_generator {
            let bundle = assets.generator.as_ref().ok_or_else(|| {
                FotError::Component(format!("generator requested but absent for '{}'", mode.tag()))
            })?;
            self.cfg.check_k_budget(episode.k_shot);
            let maps = support
                .iter()
                .map(|s| {
                    assets
                        .maps
                        .get(&s.id)
                        .cloned()
                        .ok_or_else(|| FotError::Component(format!("no saliency map for {}", s.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let ctx = AugmentContext {
                generator: &bundle.generator,
                d_g: &bundle.d_g,
                index: &bundle.index,
                base_images: &bundle.base_images,
            };
            (support, labels) = augment_support(&support, &labels, &maps, &ctx, self.cfg.k_generated, seed)?;
        }
        let cfg = FotConfig {
            transductive: flags.transductive,
            seed,
            ..self.cfg.clone()
        };
        if flags.transductive {
            let tuned = finetune(&support, &labels, &query, &assets.backbone, episode.n_way, &cfg, None)?;
            let q: Vec<&Image> = query.iter().map(|s| s.pixels.as_ref()).collect();
            return tuned.predict(&assets.backbone, &q);
        }
        let feats = assets.feature_rows(&support)?;
        let synthetic: Vec<bool> = support.iter().map(|s| s.synthetic).collect();
        let (classifier, _) = finetune_features(&feats, &synthetic, &labels, episode.n_way, &cfg, None)?;
        classifier.predict(&assets.feature_rows(&query)?)
    }
}

/// Fraction of query predictions equal to the episode labels.
pub fn run_episode(episode: &Episode, learner: &dyn EpisodeLearner, flags: &VariantFlags) -> Result<f64> {
    let pred = learner.predict(episode, flags, episode.seed)?;
    if pred.len() != episode.query_labels.len() {
        return Err(FotError::Component(format!(
            "learner returned {} predictions for {} queries",
            pred.len(),
            episode.query_labels.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let correct = pred.iter().zip(&episode.query_labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub dataset: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}way{}shot", self.dataset, self.n_way, self.k_shot)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: TaskSpec,
    pub flags: VariantFlags,
    pub n_episodes: usize,
    /// Percent.
    pub mean_accuracy: f64,
    /// Half-width of the 95% interval, percent.
    pub ci95: f64,
    /// Percent, one per episode.
    pub per_episode: Vec<f64>,
    /// Digest of each episode's support and query ids.
    pub episode_ids: Vec<String>,
    pub seed: u64,
}

impl EvalReport {
    /// `task,variant,n_episodes,mean,ci95,seed`
    pub fn result_line(&self) -> String {
        format!(
            "{},{},{},{:.2},{:.2},{}",
            self.task, self.flags, self.n_episodes, self.mean_accuracy, self.ci95, self.seed
        )
    }
}

/// Mean and 95% half-width (`1.96 * s / sqrt(n)` with the sample standard
/// deviation; 0 for a single value).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

fn episode_digest(ep: &Episode) -> String {
    let mut h = Sha256::new();
    for id in ep.support_ids() {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    h.update(b"|");
    for id in ep.query_ids() {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    crate::networks::hex(&h.finalize())[..16].to_string()
}

fn sample_episodes(registry: &Registry, task: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..n as u64)
        .map(|i| sample_episode(registry, task.n_way, task.k_shot, task.n_query, seed.wrapping_add(i)))
        .collect()
}

fn report_on(
    episodes: &[Episode],
    learner: &dyn EpisodeLearner,
    flags: VariantFlags,
    task: &TaskSpec,
    seed: u64,
) -> Result<EvalReport> {
    flags.validate()?;
    let acc: Vec<f64> = episodes
        .par_iter()
        .map(|ep| run_episode(ep, learner, &flags).map(|a| a * 100.0))
        .collect::<Result<_>>()?;
    let (mean, ci95) = mean_ci95(&acc);
    Ok(EvalReport {
        task: task.clone(),
        flags,
        n_episodes: episodes.len(),
        mean_accuracy: mean,
        ci95,
        per_episode: acc,
        episode_ids: episodes.iter().map(episode_digest).collect(),
        seed,
    })
}

/// Evaluates one variant on episodes seeded `seed..seed + n_episodes`.
pub fn evaluate(
    registry: &Registry,
    learner: &dyn EpisodeLearner,
    flags: VariantFlags,
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(FotError::Invalid("n_episodes must be at least 1".into()));
    }
    let episodes = sample_episodes(registry, task, n_episodes, seed)?;
    report_on(&episodes, learner, flags, task, seed)
}

/// One report per grid entry, all on the same episodes.
pub fn ablate(
    registry: &Registry,
    learner: &dyn EpisodeLearner,
    grid: &[VariantFlags],
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    if n_episodes == 0 {
        return Err(FotError::Invalid("n_episodes must be at least 1".into()));
    }
    let episodes = sample_episodes(registry, task, n_episodes, seed)?;
    grid.iter()
        .map(|&flags| {
            log::info!("evaluating {flags} on {n_episodes} episodes");
            report_on(&episodes, learner, flags, task, seed)
        })
        .collect()
}

/// Console table of reports.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<24} {:<14} {:>9} {:>16}\n",
        "task", "variant", "episodes", "accuracy (%)"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<24} {:<14} {:>9} {:>9.2} ± {:<5.2}\n",
            r.task.to_string(),
            r.flags.to_string(),
            r.n_episodes,
            r.mean_accuracy,
            r.ci95
        ));
    }
    out
}

pub fn append_results(path: &Path, reports: &[EvalReport]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .at(path)?;
    for r in reports {
        writeln!(file, "{}", r.result_line()).at(path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{SplitConfig, SplitRole};

    fn registry() -> Registry {
        let mut split = SplitConfig::default();
        let mut samples = Vec::new();
        for c in 0..6 {
            let name = format!("n{c}");
            split.assign(&name, SplitRole::Novel).unwrap();
            for i in 0..20 {
                samples.push((name.clone(), format!("{i:02}"), Image::filled(1, 2, 2, c as f32 / 10.0)));
            }
        }
        Registry::from_memory(&split, samples).unwrap()
    }

    fn task() -> TaskSpec {
        TaskSpec {
            dataset: "toy".into(),
            n_way: 5,
            k_shot: 1,
            n_query: 16,
        }
    }

    #[test]
    fn perfect_stub() {
        let r = evaluate(&registry(), &OracleLearner, VariantFlags::BASELINE, &task(), 20, 3).unwrap();
        assert_eq!(r.mean_accuracy, 100.0);
        assert_eq!(r.ci95, 0.0);
        assert_eq!(r.per_episode.len(), 20);
    }

    #[test]
    fn single_episode_has_zero_ci() {
        let r = evaluate(&registry(), &RandomLearner, VariantFlags::BASELINE, &task(), 1, 0).unwrap();
        assert_eq!(r.ci95, 0.0);
    }

    #[test]
    fn mean_ci_hand_values() {
        let (m, ci) = mean_ci95(&[10.0, 20.0, 30.0]);
        assert_eq!(m, 20.0);
        // sample std 10
        assert!((ci - 1.96 * 10.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ablation_shares_episodes() {
        let reports = ablate(&registry(), &RandomLearner, &VariantFlags::standard_grid(), &task(), 10, 7).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports[1..] {
            assert_eq!(r.episode_ids, reports[0].episode_ids);
        }
        assert!(ablate(&registry(), &RandomLearner, &[], &task(), 10, 7).unwrap().is_empty());
    }

    #[test]
    fn variant_names_round_trip() {
        for f in [
            VariantFlags::BASELINE,
            VariantFlags::RB,
            VariantFlags::RB_RF,
            VariantFlags::FOT,
            VariantFlags::FOT_STAR,
            VariantFlags::new(false, false, true, true),
        ] {
            assert_eq!(f.to_string().parse::<VariantFlags>().unwrap(), f);
        }
        assert!("rf".parse::<VariantFlags>().is_err());
        assert!(VariantFlags::new(false, true, false, false).validate().is_err());
    }

    #[test]
    fn missing_generator_is_a_component_error() {
        let learner = FotLearner::new(FotConfig::default());
        let ep = sample_episode(&registry(), 5, 1, 2, 0).unwrap();
        assert!(matches!(
            learner.predict(&ep, &VariantFlags::FOT, 0),
            Err(FotError::Component(_))
        ));
    }
}
