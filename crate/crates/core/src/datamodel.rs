//! Dataset registry, class splits and episode sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{FotError, IoContext, Result};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitRole {
    Base,
    Val,
    Novel,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitRole::Base => "base",
            SplitRole::Val => "val",
            SplitRole::Novel => "novel",
        })
    }
}

impl FromStr for SplitRole {
    type Err = FotError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "base" => Ok(SplitRole::Base),
            "val" => Ok(SplitRole::Val),
            "novel" => Ok(SplitRole::Novel),
            other => Err(FotError::Config(format!("unknown split role '{other}'"))),
        }
    }
}

/// Processing stage a sample's pixels come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleStage {
    Raw,
    Extracted,
    Generated,
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    pub class_id: usize,
    pub pixels: Arc<Image>,
    pub role: SplitRole,
    pub synthetic: bool,
    pub stage: SampleStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub base: usize,
    pub val: usize,
    pub novel: usize,
}

impl SplitCounts {
    pub const fn new(base: usize, val: usize, novel: usize) -> Self {
        Self { base, val, novel }
    }

    pub fn total(&self) -> usize {
        self.base + self.val + self.novel
    }

    /// Published class splits for the standard benchmarks.
    pub fn preset(dataset: &str) -> Option<Self> {
        match dataset.to_ascii_lowercase().as_str() {
            "cub" => Some(Self::new(120, 30, 50)),
            "dogs" => Some(Self::new(70, 20, 30)),
            "cars" => Some(Self::new(130, 17, 49)),
            "miniimagenet" | "mini-imagenet" => Some(Self::new(64, 16, 20)),
            _ => None,
        }
    }
}

/// Assignment of class names to base / val / novel partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitConfig {
    pub base: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub novel: BTreeSet<String>,
}

impl SplitConfig {
    pub fn role_of(&self, class_name: &str) -> Option<SplitRole> {
        if self.base.contains(class_name) {
            Some(SplitRole::Base)
        } else if self.val.contains(class_name) {
            Some(SplitRole::Val)
        } else if self.novel.contains(class_name) {
            Some(SplitRole::Novel)
        } else {
            None
        }
    }

    pub fn assign(&mut self, class_name: &str, role: SplitRole) -> Result<()> {
        if let Some(prev) = self.role_of(class_name) {
            return Err(FotError::Config(format!(
                "class '{class_name}' assigned to both {prev} and {role}"
            )));
        }
        let set = match role {
            SplitRole::Base => &mut self.base,
            SplitRole::Val => &mut self.val,
            SplitRole::Novel => &mut self.novel,
        };
        set.insert(class_name.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.val.len() + self.novel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts::new(self.base.len(), self.val.len(), self.novel.len())
    }

    /// Reads the `<class_name>,<base|val|novel>` split file.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, role) = line.rsplit_once(',').ok_or_else(|| {
                FotError::Config(format!("split line {}: expected 'class,role'", lineno + 1))
            })?;
            split.assign(name.trim(), role.parse()?)?;
        }
        Ok(split)
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<(&String, SplitRole)> = self
            .base
            .iter()
            .map(|c| (c, SplitRole::Base))
            .chain(self.val.iter().map(|c| (c, SplitRole::Val)))
            .chain(self.novel.iter().map(|c| (c, SplitRole::Novel)))
            .collect();
        rows.sort();
        rows.iter().map(|(c, r)| format!("{c},{r}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        std::fs::write(path, self.to_text()).at(path)
    }
}

/// Randomly partitions `class_names` into base / val / novel sets.
pub fn make_split(class_names: &[String], counts: SplitCounts, seed: u64) -> Result<SplitConfig> {
    if counts.total() != class_names.len() {
        return Err(FotError::Config(format!(
            "split counts {}+{}+{} do not add up to {} classes",
            counts.base,
            counts.val,
            counts.novel,
            class_names.len()
        )));
    }
    let mut order: Vec<&String> = class_names.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = SplitConfig::default();
    for (i, name) in order.into_iter().enumerate() {
        let role = if i < counts.base {
            SplitRole::Base
        } else if i < counts.base + counts.val {
            SplitRole::Val
        } else {
            SplitRole::Novel
        };
        split.assign(name, role)?;
    }
    Ok(split)
}

#[derive(Clone, Debug)]
pub enum PixelSource {
    File(PathBuf),
    Memory(Arc<Image>),
}

#[derive(Clone, Debug)]
pub struct SampleEntry {
    pub id: String,
    pub class_id: usize,
    /// File stem; keys the saliency cache and processed outputs.
    pub stem: String,
    pub source: PixelSource,
}

#[derive(Clone, Debug)]
pub struct ClassInfo {
    pub name: String,
    pub role: SplitRole,
}

/// Immutable set of registered samples, ordered by (class name, file name).
#[derive(Clone, Debug)]
pub struct Registry {
    classes: Vec<ClassInfo>,
    entries: Vec<SampleEntry>,
    by_class: Vec<Vec<usize>>,
    by_id: HashMap<String, usize>,
    skipped: usize,
}

pub fn sample_id(class_name: &str, stem: &str) -> String {
    format!("{class_name}/{stem}")
}

impl Registry {
    fn build(classes: Vec<ClassInfo>, entries: Vec<SampleEntry>, skipped: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); classes.len()];
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.class_id >= classes.len() {
                return Err(FotError::Invalid(format!(
                    "sample {} has unknown class id {}",
                    e.id, e.class_id
                )));
            }
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(FotError::Invalid(format!("duplicate sample id {}", e.id)));
            }
            by_class[e.class_id].push(i);
        }
        Ok(Self {
            classes,
            entries,
            by_class,
            by_id,
            skipped,
        })
    }

    /// Builds a registry from in-memory images. Classes are sorted by name to
    /// assign ids; samples within a class are sorted by stem.
    pub fn from_memory(split: &SplitConfig, samples: Vec<(String, String, Image)>) -> Result<Self> {
        let mut names: Vec<String> = samples.iter().map(|(c, _, _)| c.clone()).collect();
        names.extend(split.base.iter().chain(&split.val).chain(&split.novel).cloned());
        names.sort();
        names.dedup();
        let classes = names
            .iter()
            .map(|n| {
                split
                    .role_of(n)
                    .map(|role| ClassInfo {
                        name: n.clone(),
                        role,
                    })
                    .ok_or_else(|| FotError::UnassignedClass(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let class_index: HashMap<&str, usize> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut entries: Vec<SampleEntry> = samples
            .into_iter()
            .map(|(class, stem, img)| SampleEntry {
                id: sample_id(&class, &stem),
                class_id: class_index[class.as_str()],
                stem,
                source: PixelSource::Memory(Arc::new(img)),
            })
            .collect();
        entries.sort_by(|a, b| (a.class_id, &a.stem).cmp(&(b.class_id, &b.stem)));
        Self::build(classes, entries, 0)
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn entries(&self) -> &[SampleEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of files that failed to decode during loading.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn class_name(&self, class_id: usize) -> &str {
        &self.classes[class_id].name
    }

    pub fn class_role(&self, class_id: usize) -> SplitRole {
        self.classes[class_id].role
    }

    pub fn class_by_name(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn samples_of_class(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    pub fn class_ids(&self, role: SplitRole) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.classes[c].role == role)
            .collect()
    }

    pub fn indices_with_role(&self, role: SplitRole) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.classes[self.entries[i].class_id].role == role)
            .collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn entry(&self, idx: usize) -> &SampleEntry {
        &self.entries[idx]
    }

    pub fn pixels(&self, idx: usize) -> Result<Arc<Image>> {
        match &self.entries[idx].source {
            PixelSource::Memory(img) => Ok(img.clone()),
            PixelSource::File(path) => Ok(Arc::new(Image::load(path)?)),
        }
    }

    pub fn sample(&self, idx: usize) -> Result<ImageSample> {
        let e = &self.entries[idx];
        Ok(ImageSample {
            id: e.id.clone(),
            class_id: e.class_id,
            pixels: self.pixels(idx)?,
            role: self.class_role(e.class_id),
            synthetic: false,
            stage: SampleStage::Raw,
        })
    }

    /// Replaces every sample's pixels, keeping ids, classes and order.
    pub fn with_pixels(&self, f: impl Fn(usize) -> Result<Image> + Sync) -> Result<Self> {
        let images: Vec<Image> = (0..self.entries.len())
            .into_par_iter()
            .map(&f)
            .collect::<Result<_>>()?;
        let entries = self
            .entries
            .iter()
            .zip(images)
            .map(|(e, img)| SampleEntry {
                source: PixelSource::Memory(Arc::new(img)),
                ..e.clone()
            })
            .collect();
        Self::build(self.classes.clone(), entries, self.skipped)
    }

    /// Decodes file-backed samples into memory.
    pub fn into_memory(self) -> Result<Self> {
        self.with_pixels(|i| Ok((*self.pixels(i)?).clone()))
    }
}

/// Lists the class subdirectories of a dataset root in lexicographic order.
pub fn list_class_dirs(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(FotError::MissingDirectory(root.to_path_buf()));
    }
    let mut names = Vec::new();
    for entry in std::fs::read_dir(root).at(root)? {
        let entry = entry.at(root)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !name.starts_with('.') {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Registers every image under `root/<class_name>/<file>`.
///
/// Files that fail to decode are skipped with a warning and counted in
/// [`Registry::skipped`].
pub fn load_dataset(root: &Path, split: &SplitConfig) -> Result<Registry> {
    let names = list_class_dirs(root)?;
    for name in &names {
        if split.role_of(name).is_none() {
            return Err(FotError::UnassignedClass(name.clone()));
        }
    }
    let on_disk: BTreeSet<&String> = names.iter().collect();
    for name in split.base.iter().chain(&split.val).chain(&split.novel) {
        if !on_disk.contains(name) {
            return Err(FotError::Config(format!(
                "class '{name}' listed in split but missing under {}",
                root.display()
            )));
        }
    }

    let mut candidates = Vec::new();
    for (class_id, name) in names.iter().enumerate() {
        let dir = root.join(name);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .at(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && !p
                        .file_name()
                        .map(|n| n.to_string_lossy().starts_with('.'))
                        .unwrap_or(true)
            })
            .collect();
        files.sort();
        for path in files {
            candidates.push((class_id, path));
        }
    }

    let decoded: Vec<bool> = candidates
        .par_iter()
        .map(|(_, path)| match image::open(path) {
            Ok(_) => true,
            Err(err) => {
                log::warn!("skipping unreadable image {}: {err}", path.display());
                false
            }
        })
        .collect();

    let mut skipped = 0;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for ((class_id, path), ok) in candidates.into_iter().zip(decoded) {
        if !ok {
            skipped += 1;
            continue;
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let id = sample_id(&names[class_id], &stem);
        if !seen.insert(id.clone()) {
            log::warn!("skipping {}: duplicate stem in class", path.display());
            skipped += 1;
            continue;
        }
        entries.push(SampleEntry {
            id,
            class_id,
            stem,
            source: PixelSource::File(path),
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} image(s) skipped while loading {}", root.display());
    }
    let classes = names
        .iter()
        .map(|n| ClassInfo {
            name: n.clone(),
            role: split.role_of(n).expect("checked above"),
        })
        .collect();
    Registry::build(classes, entries, skipped)
}

/// One N-way K-shot task drawn from the novel classes.
#[derive(Clone, Debug)]
pub struct Episode {
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Class ids in episode-label order.
    pub classes: Vec<usize>,
    pub support: Vec<ImageSample>,
    pub support_labels: Vec<usize>,
    pub query: Vec<ImageSample>,
    pub query_labels: Vec<usize>,
    pub label_map: BTreeMap<usize, usize>,
}

impl Episode {
    pub fn support_ids(&self) -> Vec<&str> {
        self.support.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn query_ids(&self) -> Vec<&str> {
        self.query.iter().map(|s| s.id.as_str()).collect()
    }
}

pub fn sample_episode(
    registry: &Registry,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(FotError::Invalid("n_way and k_shot must be positive".into()));
    }
    let novel = registry.class_ids(SplitRole::Novel);
    if novel.len() < n_way {
        return Err(FotError::Insufficient(format!(
            "{n_way}-way episode needs {n_way} novel classes, registry has {}",
            novel.len()
        )));
    }
    let need = k_shot + n_query;
    let (mut eligible, deficient): (Vec<usize>, Vec<usize>) = novel
        .into_iter()
        .partition(|&c| registry.samples_of_class(c).len() >= need);
    if eligible.len() < n_way {
        let c = deficient[0];
        return Err(FotError::Insufficient(format!(
            "class '{}' has {} samples, needs {need} ({k_shot} support + {n_query} query)",
            registry.class_name(c),
            registry.samples_of_class(c).len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(n_way);

    let mut ep = Episode {
        seed,
        n_way,
        k_shot,
        n_query,
        classes: eligible.clone(),
        support: Vec::with_capacity(n_way * k_shot),
        support_labels: Vec::with_capacity(n_way * k_shot),
        query: Vec::with_capacity(n_way * n_query),
        query_labels: Vec::with_capacity(n_way * n_query),
        label_map: BTreeMap::new(),
    };
    for (label, &class_id) in eligible.iter().enumerate() {
        ep.label_map.insert(class_id, label);
        let mut members = registry.samples_of_class(class_id).to_vec();
        members.shuffle(&mut rng);
        for &idx in &members[..k_shot] {
            ep.support.push(registry.sample(idx)?);
            ep.support_labels.push(label);
        }
        for &idx in &members[k_shot..need] {
            ep.query.push(registry.sample(idx)?);
            ep.query_labels.push(label);
        }
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class_{i:03}")).collect()
    }

    fn toy_registry(n_classes: usize, per_class: usize, novel: usize) -> Registry {
        let all = names(n_classes);
        let split = make_split(&all, SplitCounts::new(n_classes - novel, 0, novel), 3).unwrap();
        let samples = all
            .iter()
            .flat_map(|c| {
                (0..per_class).map(move |i| (c.clone(), format!("img{i:02}"), Image::zeros(3, 2, 2)))
            })
            .collect();
        Registry::from_memory(&split, samples).unwrap()
    }

    #[test]
    fn split_table_one_sizes() {
        let split = make_split(&names(200), SplitCounts::preset("cub").unwrap(), 0).unwrap();
        assert_eq!(split.counts(), SplitCounts::new(120, 30, 50));
        assert!(split.base.is_disjoint(&split.val));
        assert!(split.base.is_disjoint(&split.novel));
        assert!(split.val.is_disjoint(&split.novel));
        assert_eq!(split.len(), 200);
    }

    #[test]
    fn split_presets() {
        assert_eq!(SplitCounts::preset("dogs"), Some(SplitCounts::new(70, 20, 30)));
        assert_eq!(SplitCounts::preset("cars"), Some(SplitCounts::new(130, 17, 49)));
        assert_eq!(SplitCounts::preset("miniImagenet"), Some(SplitCounts::new(64, 16, 20)));
        assert_eq!(SplitCounts::preset("dogs").unwrap().total(), 120);
        assert_eq!(SplitCounts::preset("cars").unwrap().total(), 196);
    }

    #[test]
    fn split_degenerate_and_deterministic() {
        let all = names(7);
        let split = make_split(&all, SplitCounts::new(7, 0, 0), 1).unwrap();
        assert_eq!(split.base.len(), 7);
        assert_eq!(
            make_split(&all, SplitCounts::new(3, 2, 2), 9).unwrap(),
            make_split(&all, SplitCounts::new(3, 2, 2), 9).unwrap()
        );
        assert!(make_split(&all, SplitCounts::new(3, 2, 1), 9).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let split = make_split(&names(10), SplitCounts::new(5, 2, 3), 4).unwrap();
        assert_eq!(SplitConfig::parse(&split.to_text()).unwrap(), split);
        assert!(SplitConfig::parse("a,base\na,novel\n").is_err());
        assert!(SplitConfig::parse("a,train\n").is_err());
    }

    #[test]
    fn episode_sizes_and_labels() {
        let reg = toy_registry(10, 20, 6);
        let ep = sample_episode(&reg, 5, 1, 16, 7).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 80);
        for label in 0..5 {
            assert_eq!(ep.support_labels.iter().filter(|&&l| l == label).count(), 1);
            assert_eq!(ep.query_labels.iter().filter(|&&l| l == label).count(), 16);
        }
        let s: BTreeSet<_> = ep.support_ids().into_iter().collect();
        assert!(ep.query_ids().iter().all(|id| !s.contains(id)));
        for (sample, &label) in ep.support.iter().zip(&ep.support_labels) {
            assert_eq!(ep.label_map[&sample.class_id], label);
            assert_eq!(reg.class_role(sample.class_id), SplitRole::Novel);
        }
    }

    #[test]
    fn episode_is_deterministic() {
        let reg = toy_registry(10, 20, 6);
        let a = sample_episode(&reg, 5, 5, 15, 11).unwrap();
        let b = sample_episode(&reg, 5, 5, 15, 11).unwrap();
        assert_eq!(a.support_ids(), b.support_ids());
        assert_eq!(a.query_ids(), b.query_ids());
    }

    #[test]
    fn episode_preconditions() {
        let reg = toy_registry(10, 20, 4);
        assert!(matches!(
            sample_episode(&reg, 5, 1, 16, 0),
            Err(FotError::Insufficient(_))
        ));
        let reg = toy_registry(10, 10, 6);
        let err = sample_episode(&reg, 5, 1, 16, 0).unwrap_err().to_string();
        assert!(err.contains("class_"), "{err}");
    }

    #[test]
    fn episodes_cover_every_class() {
        let reg = toy_registry(12, 20, 8);
        let mut seen = BTreeSet::new();
        for seed in 0..1000 {
            seen.extend(sample_episode(&reg, 5, 1, 1, seed).unwrap().classes);
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn load_dataset_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["b_cls", "a_cls"] {
            for i in 0..3 {
                Image::filled(3, 4, 4, 0.5)
                    .save_png(&dir.path().join(class).join(format!("{i}.png")))
                    .unwrap();
            }
        }
        std::fs::write(dir.path().join("a_cls").join("broken.png"), b"not a png").unwrap();
        let split = SplitConfig::parse("a_cls,base\nb_cls,base\n").unwrap();
        let reg = load_dataset(dir.path(), &split).unwrap();
        assert_eq!(reg.len(), 6);
        assert_eq!(reg.skipped(), 1);
        assert_eq!(reg.class_name(0), "a_cls");
        assert_eq!(reg.indices_with_role(SplitRole::Base).len(), 6);
        assert_eq!(reg.entry(0).id, "a_cls/0");
        assert_eq!(reg.sample(5).unwrap().pixels.dims(), (3, 4, 4));

        let partial = SplitConfig::parse("a_cls,base\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), &partial),
            Err(FotError::UnassignedClass(c)) if c == "b_cls"
        ));
        assert!(matches!(
            load_dataset(&dir.path().join("nope"), &split),
            Err(FotError::MissingDirectory(_))
        ));
    }
}
