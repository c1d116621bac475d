//! Saliency-map matching: mining posture-matched quadruplets from base
//! classes, and finding base partners for novel samples.
//!
//! For a same-class pair `(A1, A2)` the `top_m` samples of other classes
//! whose maps are closest to `A1` become `B1` candidates; for each, `B2` is
//! the sample of `B1`'s class (other than `B1`) closest to `A2`. Ties are
//! broken by ascending sample id everywhere.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::Registry;
use crate::error::{FotError, Result};
use crate::saliency::{resize_map, SaliencyMap};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadruplet {
    pub a1: String,
    pub a2: String,
    pub b1: String,
    pub b2: String,
    pub class_a: usize,
    pub class_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinerConfig {
    pub top_m: usize,
    pub match_size: (usize, usize),
    pub target_count: usize,
    /// Upper bound on ordered `(A1, A2)` pairs drawn per class.
    pub pairs_per_class: usize,
    pub seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            top_m: 5,
            match_size: (64, 64),
            target_count: 50_000,
            pairs_per_class: 100,
            seed: 0,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_m == 0 || self.target_count == 0 || self.pairs_per_class == 0 {
            return Err(FotError::Config(
                "top_m, target_count and pairs_per_class must be at least 1".into(),
            ));
        }
        if self.match_size.0 == 0 || self.match_size.1 == 0 {
            return Err(FotError::Config("match_size must be positive".into()));
        }
        Ok(())
    }
}

/// Sum of squared differences accumulated in `f64`, then square-rooted.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between two maps after resizing both to `match_size`.
pub fn saliency_distance(m1: &SaliencyMap, m2: &SaliencyMap, match_size: (usize, usize)) -> Result<f64> {
    let (h, w) = match_size;
    let a = resize_map(m1, h, w)?;
    let b = resize_map(m2, h, w)?;
    Ok(euclidean(a.values.data(), b.values.data()))
}

/// Base-class saliency maps resized to a common matching resolution.
#[derive(Clone, Debug)]
pub struct MatchIndex {
    match_size: (usize, usize),
    ids: Vec<String>,
    classes: Vec<usize>,
    maps: Vec<Vec<f32>>,
    by_id: BTreeMap<String, usize>,
}

impl MatchIndex {
    /// `items` are `(sample id, class id, map)` triples.
    pub fn new(items: Vec<(String, usize, SaliencyMap)>, match_size: (usize, usize)) -> Result<Self> {
        let (h, w) = match_size;
        let resized: Vec<Vec<f32>> = items
            .par_iter()
            .map(|(_, _, m)| Ok(resize_map(m, h, w)?.values.into_data()))
            .collect::<Result<_>>()?;
        let mut by_id = BTreeMap::new();
        for (i, (id, _, _)) in items.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(FotError::Invalid(format!("duplicate sample id {id}")));
            }
        }
        Ok(Self {
            match_size,
            ids: items.iter().map(|(id, _, _)| id.clone()).collect(),
            classes: items.iter().map(|(_, c, _)| *c).collect(),
            maps: resized,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn match_size(&self) -> (usize, usize) {
        self.match_size
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.classes[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn resized(&self, i: usize) -> &[f32] {
        &self.maps[i]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(&self.maps[i], &self.maps[j])
    }

    /// Sample indices grouped by class, each group in index order.
    pub fn class_members(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.classes.iter().enumerate() {
            out.entry(c).or_default().push(i);
        }
        out
    }

    fn cmp_ranked(&self, a: (f64, usize), b: (f64, usize)) -> Ordering {
        a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
    }
}

/// Ordered same-class pairs drawn for each class with at least two samples.
fn sample_pairs(members: &BTreeMap<usize, Vec<usize>>, cfg: &MinerConfig) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (&class, idx) in members {
        if idx.len() < 2 {
            continue;
        }
        let all: Vec<(usize, usize)> = idx
            .iter()
            .flat_map(|&a| idx.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
            .collect();
        if all.len() <= cfg.pairs_per_class {
            pairs.extend(all);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut chosen = index::sample(&mut rng, all.len(), cfg.pairs_per_class).into_vec();
            chosen.sort_unstable();
            pairs.extend(chosen.into_iter().map(|k| all[k]));
        }
    }
    pairs
}

/// Builds the generator training set.
pub fn mine_quadruplets(index: &MatchIndex, cfg: &MinerConfig) -> Result<Vec<Quadruplet>> {
    cfg.validate()?;
    let members = index.class_members();
    let eligible: Vec<usize> = members
        .values()
        .filter(|m| m.len() >= 2)
        .flatten()
        .copied()
        .collect();
    let eligible_classes = members.values().filter(|m| m.len() >= 2).count();
    if eligible_classes < 2 {
        return Err(FotError::Insufficient(
            "mining needs at least two base classes with two or more samples".into(),
        ));
    }

    let pairs = sample_pairs(&members, cfg);
    let per_pair: Vec<Vec<Quadruplet>> = pairs
        .par_iter()
        .map(|&(a1, a2)| {
            let class_a = index.class_of(a1);
            let mut cands: Vec<(f64, usize)> = eligible
                .iter()
                .filter(|&&j| index.class_of(j) != class_a)
                .map(|&j| (index.distance(a1, j), j))
                .collect();
            cands.sort_by(|&x, &y| index.cmp_ranked(x, y));
            cands.truncate(cfg.top_m);
            cands
                .into_iter()
                .map(|(_, b1)| {
                    let class_b = index.class_of(b1);
                    let b2 = members[&class_b]
                        .iter()
                        .filter(|&&j| j != b1)
                        .map(|&j| (index.distance(a2, j), j))
                        .min_by(|&x, &y| index.cmp_ranked(x, y))
                        .expect("eligible classes have two members")
                        .1;
                    Quadruplet {
                        a1: index.id(a1).to_string(),
                        a2: index.id(a2).to_string(),
                        b1: index.id(b1).to_string(),
                        b2: index.id(b2).to_string(),
                        class_a,
                        class_b,
                    }
                })
                .collect()
        })
        .collect();
    let all: Vec<Quadruplet> = per_pair.into_iter().flatten().collect();
    if all.len() <= cfg.target_count {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut keep = index::sample(&mut rng, all.len(), cfg.target_count).into_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|k| all[k].clone()).collect())
}

/// Picks `count` base pairs `(X1, X2)` for a novel sample: `X1` ranges over
/// the `a1` entries of `d_g` nearest to `novel_map`, and each `X2` is drawn
/// uniformly among the `a2` partners recorded for that `X1`.
pub fn find_posture_partners(
    novel_map: &SaliencyMap,
    index: &MatchIndex,
    d_g: &[Quadruplet],
    count: usize,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    let mut partners: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for q in d_g {
        if index.index_of(&q.a1).is_some() {
            partners.entry(&q.a1).or_default().push(&q.a2);
        }
    }
    if partners.is_empty() {
        return Err(FotError::EmptyManifest);
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let (h, w) = index.match_size();
    let probe = resize_map(novel_map, h, w)?;
    let mut ranked: Vec<(f64, &str)> = partners
        .keys()
        .map(|&id| {
            let i = index.index_of(id).expect("filtered above");
            (euclidean(probe.values.data(), index.resized(i)), id)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|k| {
            let x1 = ranked[k % ranked.len()].1;
            let options = &partners[x1];
            let x2 = options[rng.random_range(0..options.len())];
            (x1.to_string(), x2.to_string())
        })
        .collect())
}

/// One `a1,a2,b1,b2` line per quadruplet.
pub fn write_manifest(quads: &[Quadruplet]) -> Result<String> {
    let mut out = String::new();
    for q in quads {
        for id in [&q.a1, &q.a2, &q.b1, &q.b2] {
            if id.contains(',') || id.contains('\n') {
                return Err(FotError::Invalid(format!("sample id '{id}' cannot be written to a manifest")));
            }
        }
        out.push_str(&format!("{},{},{},{}\n", q.a1, q.a2, q.b1, q.b2));
    }
    Ok(out)
}

/// Parses a manifest, resolving classes through `registry`.
pub fn read_manifest(text: &str, registry: &Registry) -> Result<Vec<Quadruplet>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ids: Vec<&str> = line.split(',').collect();
        if ids.len() != 4 {
            return Err(FotError::Config(format!(
                "manifest line {}: expected 4 ids, got {}",
                lineno + 1,
                ids.len()
            )));
        }
        let class = |id: &str| {
            registry
                .index_of(id)
                .map(|i| registry.entry(i).class_id)
                .ok_or_else(|| FotError::Config(format!("manifest references unknown sample {id}")))
        };
        let q = Quadruplet {
            a1: ids[0].into(),
            a2: ids[1].into(),
            b1: ids[2].into(),
            b2: ids[3].into(),
            class_a: class(ids[0])?,
            class_b: class(ids[2])?,
        };
        if class(ids[1])? != q.class_a || class(ids[3])? != q.class_b {
            return Err(FotError::Config(format!(
                "manifest line {}: pair members from different classes",
                lineno + 1
            )));
        }
        out.push(q);
    }
    Ok(out)
}

/// Structural constraints every mined quadruplet must satisfy.
pub fn check_quadruplet(q: &Quadruplet, class_of: impl Fn(&str) -> Option<usize>) -> bool {
    q.class_a != q.class_b
        && q.a1 != q.a2
        && q.b1 != q.b2
        && class_of(&q.a1) == Some(q.class_a)
        && class_of(&q.a2) == Some(q.class_a)
        && class_of(&q.b1) == Some(q.class_b)
        && class_of(&q.b2) == Some(q.class_b)
}
