//! Saliency maps: pluggable backends and an on-disk cache.
//!
//! The cache mirrors the dataset layout as `cache/<class_name>/<stem>.png`
//! holding 8-bit greyscale maps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::datamodel::ImageSample;
use crate::error::{FotError, IoContext, Result};
use crate::raster::Image;

/// One-channel relevance map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Image,
    pub source_id: String,
}

impl SaliencyMap {
    pub fn new(values: Image, source_id: impl Into<String>) -> Result<Self> {
        if values.channels() != 1 {
            return Err(FotError::Shape(format!(
                "saliency map must have one channel, got {}",
                values.channels()
            )));
        }
        if !values.is_finite() {
            return Err(FotError::Invalid("saliency map has non-finite values".into()));
        }
        Ok(Self {
            values: values.map(|v| v.clamp(0.0, 1.0)),
            source_id: source_id.into(),
        })
    }

    /// Reduces a multi-channel map to one channel by averaging channels.
    pub fn from_channel_mean(img: &Image, source_id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = img.dims();
        let mut out = Image::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                let sum: f32 = (0..c).map(|ch| img.get(ch, y, x)).sum();
                out.set(0, y, x, sum / c as f32);
            }
        }
        Self::new(out, source_id)
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }
}

/// Bilinear resize, clamped to `[0, 1]`.
pub fn resize_map(map: &SaliencyMap, height: usize, width: usize) -> Result<SaliencyMap> {
    let values = map
        .values
        .resize_bilinear(height, width)?
        .map(|v| v.clamp(0.0, 1.0));
    Ok(SaliencyMap {
        values,
        source_id: map.source_id.clone(),
    })
}

/// A salient-object-detection model producing maps for samples.
pub trait SaliencyBackend: Send + Sync {
    fn name(&self) -> &str;
    fn compute(&self, sample: &ImageSample) -> Result<SaliencyMap>;
}

/// Returns a constant map; `0.0` gives the all-background stub.
#[derive(Clone, Debug)]
pub struct ConstantBackend(pub f32);

impl SaliencyBackend for ConstantBackend {
    fn name(&self) -> &str {
        "constant"
    }

    fn compute(&self, sample: &ImageSample) -> Result<SaliencyMap> {
        let (_, h, w) = sample.pixels.dims();
        SaliencyMap::new(Image::filled(1, h, w, self.0), sample.id.clone())
    }
}

/// Serves known ground-truth masks by sample id.
#[derive(Clone, Debug, Default)]
pub struct OracleBackend {
    masks: HashMap<String, Image>,
}

impl OracleBackend {
    pub fn new(masks: HashMap<String, Image>) -> Self {
        Self { masks }
    }

    pub fn insert(&mut self, id: impl Into<String>, mask: Image) {
        self.masks.insert(id.into(), mask);
    }
}

impl SaliencyBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn compute(&self, sample: &ImageSample) -> Result<SaliencyMap> {
        let mask = self
            .masks
            .get(&sample.id)
            .ok_or_else(|| FotError::SaliencyUnavailable(sample.id.clone()))?;
        SaliencyMap::new(mask.clone(), sample.id.clone())
    }
}

/// Reads maps from a directory of precomputed images laid out like the cache.
#[derive(Clone, Debug)]
pub struct PrecomputedDir {
    root: PathBuf,
}

impl PrecomputedDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl SaliencyBackend for PrecomputedDir {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn compute(&self, sample: &ImageSample) -> Result<SaliencyMap> {
        let path = cache_path(&self.root, &sample.id);
        if !path.is_file() {
            return Err(FotError::SaliencyUnavailable(sample.id.clone()));
        }
        read_map_file(&path, &sample.id)
    }
}

fn cache_path(root: &Path, id: &str) -> PathBuf {
    let mut p = root.to_path_buf();
    for part in id.split('/') {
        p.push(part);
    }
    p.set_extension("png");
    p
}

fn read_map_file(path: &Path, id: &str) -> Result<SaliencyMap> {
    let img = image::open(path)?;
    if img.color().has_color() {
        return SaliencyMap::from_channel_mean(&Image::from_dynamic(&img)?, id);
    }
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let data = luma.pixels().map(|p| p[0] as f32 / 255.0).collect();
    SaliencyMap::new(Image::new(1, h as usize, w as usize, data)?, id)
}

/// Disk cache keyed by sample id. Writes go to a temporary file that is
/// renamed into place.
#[derive(Debug)]
pub struct SaliencyCache {
    root: PathBuf,
    writes: AtomicUsize,
}

impl SaliencyCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            writes: AtomicUsize::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        cache_path(&self.root, id)
    }

    pub fn get(&self, id: &str) -> Result<Option<SaliencyMap>> {
        let path = self.path_for(id);
        if !path.is_file() {
            return Ok(None);
        }
        read_map_file(&path, id).map(Some)
    }

    pub fn put(&self, map: &SaliencyMap) -> Result<()> {
        let path = self.path_for(&map.source_id);
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).at(dir)?;
        let n = self.writes.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(
            ".{}.{}.{n}.tmp.png",
            path.file_stem().unwrap_or_default().to_string_lossy(),
            std::process::id()
        ));
        map.values.save_png(&tmp)?;
        std::fs::rename(&tmp, &path).at(&path)
    }
}

/// Returns the saliency map for `sample`, consulting the cache first.
///
/// On a miss the backend is run and the result stored. Maps whose size does
/// not match the sample are resized with a warning.
pub fn compute_saliency(
    sample: &ImageSample,
    backend: Option<&dyn SaliencyBackend>,
    cache: Option<&SaliencyCache>,
) -> Result<SaliencyMap> {
    let (_, h, w) = sample.pixels.dims();
    let cached = match cache {
        Some(c) => c.get(&sample.id)?,
        None => None,
    };
    let map = match (cached, backend) {
        (Some(map), _) => map,
        (None, Some(backend)) => {
            let map = backend.compute(sample)?;
            let map = fit_to(map, h, w)?;
            if let Some(c) = cache {
                c.put(&map)?;
            }
            map
        }
        (None, None) => return Err(FotError::SaliencyUnavailable(sample.id.clone())),
    };
    fit_to(map, h, w)
}

fn fit_to(map: SaliencyMap, h: usize, w: usize) -> Result<SaliencyMap> {
    if map.height() == h && map.width() == w {
        return Ok(map);
    }
    log::warn!(
        "saliency map for {} is {}x{}, resizing to {h}x{w}",
        map.source_id,
        map.height(),
        map.width()
    );
    resize_map(&map, h, w)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::datamodel::{SampleStage, SplitRole};

    fn sample(id: &str, h: usize, w: usize) -> ImageSample {
        ImageSample {
            id: id.into(),
            class_id: 0,
            pixels: Arc::new(Image::filled(3, h, w, 0.3)),
            role: SplitRole::Base,
            synthetic: false,
            stage: SampleStage::Raw,
        }
    }

    struct Counting {
        calls: AtomicUsize,
    }

    impl SaliencyBackend for Counting {
        fn name(&self) -> &str {
            "counting"
        }

        fn compute(&self, s: &ImageSample) -> Result<SaliencyMap> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            ConstantBackend(0.6).compute(s)
        }
    }

    #[test]
    fn cache_hit_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SaliencyCache::new(dir.path());
        let backend = Counting {
            calls: AtomicUsize::new(0),
        };
        let s = sample("birds/0001", 5, 6);
        let first = compute_saliency(&s, Some(&backend), Some(&cache)).unwrap();
        let second = compute_saliency(&s, Some(&backend), Some(&cache)).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert!(dir.path().join("birds").join("0001.png").is_file());
        for (a, b) in first.values.data().iter().zip(second.values.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn zero_stub_gives_zero_map() {
        let m = compute_saliency(&sample("a/b", 4, 4), Some(&ConstantBackend(0.0)), None).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn miss_without_backend_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SaliencyCache::new(dir.path());
        assert!(matches!(
            compute_saliency(&sample("a/b", 4, 4), None, Some(&cache)),
            Err(FotError::SaliencyUnavailable(_))
        ));
    }

    #[test]
    fn mismatched_cache_resolution_is_resized() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SaliencyCache::new(dir.path());
        cache
            .put(&SaliencyMap::new(Image::filled(1, 2, 2, 1.0), "a/b").unwrap())
            .unwrap();
        let m = compute_saliency(&sample("a/b", 6, 8), None, Some(&cache)).unwrap();
        assert_eq!((m.height(), m.width()), (6, 8));
        assert!(m.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn oracle_backend_returns_mask() {
        let mut mask = Image::zeros(1, 3, 3);
        mask.set(0, 1, 1, 1.0);
        let mut oracle = OracleBackend::default();
        oracle.insert("c/x", mask.clone());
        let m = compute_saliency(&sample("c/x", 3, 3), Some(&oracle), None).unwrap();
        assert_eq!(m.values, mask);
    }

    #[test]
    fn resize_map_clamps_and_keeps_identity() {
        let m = SaliencyMap::new(Image::new(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap(), "x").unwrap();
        assert_eq!(resize_map(&m, 2, 2).unwrap(), m);
        let r = resize_map(&m, 2, 4).unwrap();
        for y in 0..2 {
            for x in 1..4 {
                assert!(r.values.get(0, y, x) >= r.values.get(0, y, x - 1));
            }
        }
        let c = SaliencyMap::new(Image::filled(1, 3, 3, 0.4), "c").unwrap();
        let rc = resize_map(&c, 7, 5).unwrap();
        assert!(rc.values.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn channel_mean_reduction() {
        let img = Image::new(3, 1, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let m = SaliencyMap::from_channel_mean(&img, "x").unwrap();
        assert!((m.values.get(0, 0, 0) - 0.5).abs() < 1e-7);
    }
}
