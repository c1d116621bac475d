//! One line per acceptance criterion. Set `FOT_ACCEPTANCE_ONLY=1,4,9` to run
//! a subset; `FOT_CUB_ROOT` plus `FOT_CUB_SALIENCY` switch criterion 11 from
//! the synthetic stand-in to a real dataset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use candle::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fot::config::{ConfigMap, RunConfig};
use fot::datamodel::{ImageSample, Registry, SampleStage, SplitConfig, SplitCounts, SplitRole};
use fot::eval::{evaluate, format_table, EvalReport, OracleLearner, RandomLearner, TaskSpec, VariantFlags};
use fot::extractor::{extract_foreground, threshold_saliency, EmptyMaskPolicy, ExtractorConfig};
use fot::miner::{mine_quadruplets, MatchIndex, MinerConfig, Quadruplet};
use fot::networks::{
    Architecture, BackboneConfig, CosineClassifier, FeatureExtractor, Generator, GeneratorConfig, Network,
    ScaleMode,
};
use fot::pipeline::Pipeline;
use fot::raster::Image;
use fot::saliency::{SaliencyCache, SaliencyMap};
use fot::synth::{gen_synthetic, render, SyntheticSpec};
use fot::training::{
    augment_support, base_loss, finetune, finetune_loss, generator_loss, mean_entropy, train_generator,
    AugmentContext, EntropySign, FotConfig, GenExample,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn cpu() -> Device {
    Device::Cpu
}

// ---------------------------------------------------------------------------
// 1. extractor oracle

/// Reference extractor written as a single pass over output pixels: each
/// output pixel is traced back through resize, padding and crop to the
/// masked source pixel.
fn reference_extract(img: &Image, map: &Image, beta: f32, out: (usize, usize)) -> Image {
    let (c, h, w) = img.dims();
    let on = |y: usize, x: usize| map.get(0, y, x) as f64 * 255.0 >= beta as f64 - 1e-3;
    let ys: Vec<usize> = (0..h).filter(|&y| (0..w).any(|x| on(y, x))).collect();
    let xs: Vec<usize> = (0..w).filter(|&x| (0..h).any(|y| on(y, x))).collect();
    let (top, left, bh, bw) = match (ys.first(), ys.last(), xs.first(), xs.last()) {
        (Some(&t), Some(&b), Some(&l), Some(&r)) => (t, l, b - t + 1, r - l + 1),
        _ => (0, 0, h, w),
    };
    let side = bh.max(bw);
    let (pad_y, pad_x) = ((side - bh) / 2, (side - bw) / 2);
    let padded = |ch: usize, y: usize, x: usize| -> f64 {
        if y < pad_y || y >= pad_y + bh || x < pad_x || x >= pad_x + bw {
            return 0.0;
        }
        let (sy, sx) = (top + y - pad_y, left + x - pad_x);
        if on(sy, sx) {
            img.get(ch, sy, sx) as f64
        } else {
            0.0
        }
    };
    let axis = |o: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * (side as f64 / n_out as f64) - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(side - 1);
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, if i0 == i1 { 0.0 } else { src - i0 as f64 })
    };
    let mut data = Vec::with_capacity(c * out.0 * out.1);
    for ch in 0..c {
        for oy in 0..out.0 {
            let (y0, y1, wy) = axis(oy, out.0);
            for ox in 0..out.1 {
                let (x0, x1, wx) = axis(ox, out.1);
                let t = padded(ch, y0, x0) * (1.0 - wx) + padded(ch, y0, x1) * wx;
                let b = padded(ch, y1, x0) * (1.0 - wx) + padded(ch, y1, x1) * wx;
                data.push((t * (1.0 - wy) + b * wy) as f32);
            }
        }
    }
    Image::new(c, out.0, out.1, data).unwrap()
}

fn random_pair(rng: &mut ChaCha8Rng) -> (Image, Image) {
    let (h, w) = (rng.random_range(3..40), rng.random_range(3..40));
    let img = Image::new(3, h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
    // Blob saliency keeps most masks non-empty while leaving ragged edges.
    let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
    let r = rng.random_range(1.0..(h.max(w) as f32));
    let noise = rng.random_range(0.0..0.5f32);
    let map = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / r;
            ((1.0 - d) + noise * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)
        })
        .collect();
    (img, Image::new(1, h, w, map).unwrap())
}

fn c1_extractor_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut empty = 0;
    for case in 0..100 {
        let (img, map_img) = random_pair(&mut rng);
        let beta = rng.random_range(0..=255) as f32;
        let out = (rng.random_range(4..48), rng.random_range(4..48));
        let map = SaliencyMap::new(map_img.clone(), "m").map_err(e)?;
        let cfg = ExtractorConfig {
            beta,
            output_size: out,
            empty_mask_policy: EmptyMaskPolicy::WholeImage,
            pad_to_square: true,
        };
        if threshold_saliency(&map, beta).count_ones() == 0 {
            empty += 1;
        }
        let sample = ImageSample {
            id: format!("c/{case}"),
            class_id: 0,
            pixels: Arc::new(img.clone()),
            role: SplitRole::Base,
            synthetic: false,
            stage: SampleStage::Raw,
        };
        let got = extract_foreground(&sample, &map, &cfg).map_err(e)?;
        let want = reference_extract(&img, &map.values, beta, out);
        ensure!(
            got.pixels.data().iter().map(|v| v.to_bits()).eq(want.data().iter().map(|v| v.to_bits())),
            "case {case}: output differs from reference"
        );
    }
    Ok(format!("100/100 bit-exact ({empty} empty masks)"))
}

// ---------------------------------------------------------------------------
// 2. threshold semantics

fn c2_threshold() -> Outcome {
    for beta in 0..=255u32 {
        let at = SaliencyMap::new(Image::filled(1, 1, 1, beta as f32 / 255.0), "m").map_err(e)?;
        ensure!(threshold_saliency(&at, beta as f32).count_ones() == 1, "beta {beta}: equal value excluded");
        let mixed = Image::new(
            3,
            1,
            1,
            vec![beta.saturating_sub(7) as f32 / 255.0, beta as f32 / 255.0, (beta + 7).min(255) as f32 / 255.0],
        )
        .map_err(e)?;
        let mean = SaliencyMap::from_channel_mean(&mixed, "m").map_err(e)?;
        if (7..=248).contains(&beta) {
            ensure!(threshold_saliency(&mean, beta as f32).count_ones() == 1, "beta {beta}: channel mean excluded");
        }
        if beta > 0 {
            let below = SaliencyMap::new(Image::filled(1, 1, 1, (beta - 1) as f32 / 255.0), "m").map_err(e)?;
            ensure!(threshold_saliency(&below, beta as f32).count_ones() == 0, "beta {beta}: lower value included");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let map = SaliencyMap::new(
            Image::new(1, h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap(),
            "m",
        )
        .map_err(e)?;
        let (a, b) = (rng.random_range(0.0..=255.0f32), rng.random_range(0.0..=255.0f32));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (m_lo, m_hi) = (threshold_saliency(&map, lo), threshold_saliency(&map, hi));
        ensure!(m_hi.is_subset_of(&m_lo), "case {case}: mask at {hi} not inside mask at {lo}");
    }
    Ok("inclusive at every integer beta; monotone on 1000 maps".into())
}

// ---------------------------------------------------------------------------
// 3. miner oracle

fn c3_miner_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for trial in 0..6 {
        let n_classes = rng.random_range(3..10);
        let mut items = Vec::new();
        for c in 0..n_classes {
            // One class stays a singleton to exercise the eligibility rule.
            let n = if c == 0 { 1 } else { rng.random_range(2..24) };
            for k in 0..n {
                // Eighth steps keep distances exact, so ties are real ties.
                let v: Vec<f32> = (0..36).map(|_| rng.random_range(0..3) as f32 / 8.0).collect();
                items.push((format!("c{c}/s{k:02}"), c, Image::new(1, 6, 6, v).unwrap()));
            }
        }
        if items.len() > 200 {
            items.truncate(200);
        }
        let maps: Vec<_> = items
            .iter()
            .map(|(id, c, img)| (id.clone(), *c, SaliencyMap::new(img.clone(), id.clone()).unwrap()))
            .collect();
        let index = MatchIndex::new(maps, (6, 6)).map_err(e)?;
        let cfg = MinerConfig {
            top_m: 5,
            match_size: (6, 6),
            target_count: usize::MAX,
            pairs_per_class: usize::MAX,
            seed: trial,
        };
        let mined: BTreeSet<Quadruplet> = mine_quadruplets(&index, &cfg).map_err(e)?.into_iter().collect();
        let want = brute_force(&items, 5);
        ensure!(mined == want, "trial {trial}: {} mined vs {} expected", mined.len(), want.len());
        checked += want.len();
    }
    Ok(format!("{checked} quadruplets equal the exhaustive search"))
}

fn brute_force(items: &[(String, usize, Image)], top_m: usize) -> BTreeSet<Quadruplet> {
    let dist = |a: &Image, b: &Image| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
    };
    let mut size: HashMap<usize, usize> = HashMap::new();
    for (_, c, _) in items {
        *size.entry(*c).or_default() += 1;
    }
    let mut out = BTreeSet::new();
    for (a1, ca, ma1) in items {
        for (a2, ca2, ma2) in items {
            if ca2 != ca || a1 == a2 || size[ca] < 2 {
                continue;
            }
            let mut b1s: Vec<(f64, &String, usize)> = items
                .iter()
                .filter(|(_, c, _)| c != ca && size[c] >= 2)
                .map(|(id, c, m)| (dist(ma1, m), id, *c))
                .collect();
            b1s.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(y.1)));
            for &(_, b1, cb) in b1s.iter().take(top_m) {
                let b2 = items
                    .iter()
                    .filter(|(id, c, _)| *c == cb && id != b1)
                    .map(|(id, _, m)| (dist(ma2, m), id))
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(y.1)))
                    .unwrap()
                    .1;
                out.insert(Quadruplet {
                    a1: a1.clone(),
                    a2: a2.clone(),
                    b1: b1.clone(),
                    b2: b2.clone(),
                    class_a: *ca,
                    class_b: cb,
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 4. loss closed forms

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn probs(rows: Vec<Vec<f64>>) -> Tensor {
    let (n, d) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.into_iter().flatten().collect::<Vec<_>>(), (n, d), &cpu()).unwrap()
}

fn c4_closed_forms() -> Outcome {
    let ln5 = 5f64.ln();
    let uniform = probs(vec![vec![0.2; 5]; 4]);
    let ce = scalar(&base_loss(&uniform, &[0, 1, 2, 3]).map_err(e)?);
    ensure!((ce - ln5).abs() <= 1e-6, "uniform CE {ce}");
    ensure!((ce - 1.6094).abs() <= 1e-4, "uniform CE {ce} vs 1.6094");
    let onehot = probs(vec![vec![0.0, 0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0, 0.0]]);
    let ce1 = scalar(&base_loss(&onehot, &[2, 0]).map_err(e)?);
    ensure!(ce1 == 0.0, "one-hot CE {ce1}");
    let h = scalar(&mean_entropy(&uniform).map_err(e)?);
    ensure!((h - ln5).abs() <= 1e-9, "uniform entropy {h}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut random_probs = |n: usize| {
        probs(
            (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect(),
        )
    };
    for _ in 0..20 {
        let (ps, pq) = (random_probs(5), random_probs(8));
        let y = [0, 1, 2, 3, 4];
        let ce = scalar(&base_loss(&ps, &y).map_err(e)?);
        let lmin = scalar(&finetune_loss(&ps, &y, Some(&pq), EntropySign::MinimizeEntropy, 1.0).map_err(e)?);
        let llit = scalar(&finetune_loss(&ps, &y, Some(&pq), EntropySign::Literal, 1.0).map_err(e)?);
        ensure!((lmin + llit - 2.0 * ce).abs() <= 1e-9, "L_min + L_lit - 2CE = {}", lmin + llit - 2.0 * ce);
    }
    Ok(format!("CE(uniform) = {ce:.7}, H(uniform) = {h:.7}"))
}

// ---------------------------------------------------------------------------
// 5. gradient checks

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

/// Largest relative error between backprop and central differences over a
/// spread of coordinates from every variable.
fn grad_check(vars: &[Var], loss: &dyn Fn() -> Tensor, per_var: usize) -> Result<f64, String> {
    let grads = loss().backward().map_err(e)?;
    let mut worst: f64 = 0.0;
    for (vi, var) in vars.iter().enumerate() {
        let g = grads.get(var.as_tensor()).ok_or_else(|| format!("variable {vi} received no gradient"))?;
        let g: Vec<f64> = g.flatten_all().and_then(|t| t.to_vec1()).map_err(e)?;
        let base: Vec<f64> = var.flatten_all().and_then(|t| t.to_vec1()).map_err(e)?;
        let shape = var.shape().clone();
        let n = base.len();
        let picks = per_var.min(n);
        for k in 0..picks {
            let i = k * n / picks;
            let eval_at = |delta: f64| -> Result<f64, String> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &cpu()).map_err(e)?).map_err(e)?;
                Ok(scalar(&loss()))
            };
            let numeric = (eval_at(FD_STEP)? - eval_at(-FD_STEP)?) / (2.0 * FD_STEP);
            let denom = g[i].abs().max(numeric.abs());
            if denom > 1e-7 {
                worst = worst.max((g[i] - numeric).abs() / denom);
            }
        }
        var.set(&Tensor::from_vec(base, shape, &cpu()).map_err(e)?).map_err(e)?;
    }
    Ok(worst)
}

fn toy_backbone(seed: u64) -> FeatureExtractor {
    let cfg = BackboneConfig {
        arch: Architecture::Conv4,
        in_channels: 3,
        width: 3,
        input_size: (8, 8),
    };
    FeatureExtractor::new(cfg, DType::F64, &cpu(), seed).unwrap()
}

fn toy_batch(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec((0..n * 3 * 64).map(|_| rng.random::<f64>()).collect::<Vec<_>>(), (n, 3, 8, 8), &cpu())
        .unwrap()
}

fn c5_gradients() -> Outcome {
    let x = toy_batch(6, 50);
    let y = [0, 1, 2, 0, 1, 2];

    let f = toy_backbone(51);
    let c = CosineClassifier::new(3, f.feature_dim(), ScaleMode::Learnable(3.0), DType::F64, &cpu(), 52).map_err(e)?;
    let mut vars = f.params().trainable();
    vars.extend(c.params().trainable());
    let base = grad_check(&vars, &|| base_loss(&c.probs(&f.forward(&x, true).unwrap()).unwrap(), &y).unwrap(), 12)?;
    ensure!(base <= FD_TOL, "base_loss relative error {base:e}");

    let gcfg = GeneratorConfig {
        image_channels: 3,
        widths: [3, 4, 5],
        res_blocks: 1,
    };
    let g = Generator::new(gcfg, DType::F64, &cpu(), 53).map_err(e)?;
    let (a1, a2, b1, b2) = (toy_batch(3, 54), toy_batch(3, 55), toy_batch(3, 56), toy_batch(3, 57));
    let mut f_frozen = toy_backbone(58);
    let mut c_frozen =
        CosineClassifier::new(3, f_frozen.feature_dim(), ScaleMode::Fixed(2.0), DType::F64, &cpu(), 59).map_err(e)?;
    f_frozen.params_mut().set_frozen(true);
    c_frozen.params_mut().set_frozen(true);
    let mut gen_worst: f64 = 0.0;
    for lambda in [0.0, 0.5, 3.0] {
        let err = grad_check(
            &g.params().trainable(),
            &|| {
                let pred = g.forward(&a1, &a2, &b1).unwrap();
                generator_loss(&pred, &b2, &f_frozen, &c_frozen, &[0, 1, 2], lambda).unwrap().0
            },
            6,
        )?;
        ensure!(err <= FD_TOL, "generator_loss (lambda {lambda}) relative error {err:e}");
        gen_worst = gen_worst.max(err);
    }

    let (xs, xq) = (toy_batch(3, 60), toy_batch(6, 61));
    let ft = toy_backbone(62);
    let ct = CosineClassifier::new(3, ft.feature_dim(), ScaleMode::Fixed(2.0), DType::F64, &cpu(), 63).map_err(e)?;
    let mut vars = ft.params().trainable();
    vars.extend(ct.params().trainable());
    let mut trans_worst: f64 = 0.0;
    for sign in [EntropySign::MinimizeEntropy, EntropySign::Literal] {
        let err = grad_check(
            &vars,
            &|| {
                let ps = ct.probs(&ft.forward(&xs, false).unwrap()).unwrap();
                let pq = ct.probs(&ft.forward(&xq, false).unwrap()).unwrap();
                finetune_loss(&ps, &[0, 1, 2], Some(&pq), sign, 0.7).unwrap()
            },
            10,
        )?;
        ensure!(err <= FD_TOL, "transductive loss ({sign}) relative error {err:e}");
        trans_worst = trans_worst.max(err);
    }
    Ok(format!(
        "max relative error: base {base:.1e}, generator {gen_worst:.1e}, transductive {trans_worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Shared fixtures for criteria 6-8: a small world of rendered shapes.

struct World {
    spec: SyntheticSpec,
    base: Vec<(String, usize, Arc<Image>, SaliencyMap)>,
    novel: Vec<(String, usize, Arc<Image>, SaliencyMap)>,
}

fn world() -> World {
    let spec = SyntheticSpec {
        n_classes: 10,
        samples_per_class: 4,
        image_size: 8,
        ..SyntheticSpec::default()
    };
    let mut base = Vec::new();
    let mut novel = Vec::new();
    for c in 0..spec.n_classes {
        for k in 0..spec.samples_per_class {
            let r = render(&spec, c, k);
            let id = format!("{}/{k:04}", spec.class_name(c));
            let map = SaliencyMap::new(r.mask, id.clone()).unwrap();
            let entry = (id, c, Arc::new(r.image), map);
            if c < 5 {
                base.push(entry);
            } else {
                novel.push(entry);
            }
        }
    }
    World { spec, base, novel }
}

fn f32_backbone(seed: u64) -> FeatureExtractor {
    let cfg = BackboneConfig {
        arch: Architecture::Conv4,
        in_channels: 3,
        width: 4,
        input_size: (8, 8),
    };
    FeatureExtractor::new(cfg, DType::F32, &cpu(), seed).unwrap()
}

fn small_generator(seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        image_channels: 3,
        widths: [4, 6, 8],
        res_blocks: 1,
    };
    Generator::new(cfg, DType::F32, &cpu(), seed).unwrap()
}

fn one_shot_augmented(w: &World, k: usize) -> Result<(Vec<ImageSample>, Vec<usize>, Vec<String>), String> {
    let index = MatchIndex::new(
        w.base.iter().map(|(id, c, _, m)| (id.clone(), *c, m.clone())).collect(),
        (8, 8),
    )
    .map_err(e)?;
    let d_g = mine_quadruplets(
        &index,
        &MinerConfig {
            top_m: 3,
            match_size: (8, 8),
            target_count: 200,
            pairs_per_class: 12,
            seed: 0,
        },
    )
    .map_err(e)?;
    let base_images: BTreeMap<String, Arc<Image>> =
        w.base.iter().map(|(id, _, img, _)| (id.clone(), img.clone())).collect();
    let g = small_generator(7);
    let ctx = AugmentContext {
        generator: &g,
        d_g: &d_g,
        index: &index,
        base_images: &base_images,
    };
    let mut support = Vec::new();
    let mut labels = Vec::new();
    let mut maps = Vec::new();
    for (label, c) in (5..10).enumerate() {
        let (id, class_id, img, map) = w.novel.iter().find(|s| s.1 == c).unwrap();
        support.push(ImageSample {
            id: id.clone(),
            class_id: *class_id,
            pixels: img.clone(),
            role: SplitRole::Novel,
            synthetic: false,
            stage: SampleStage::Raw,
        });
        labels.push(label);
        maps.push(map.clone());
    }
    let ids = support.iter().map(|s| s.id.clone()).collect();
    let (samples, out_labels) = augment_support(&support, &labels, &maps, &ctx, k, 5).map_err(e)?;
    Ok((samples, out_labels, ids))
}

// ---------------------------------------------------------------------------
// 6. freezing contracts

fn c6_freezing() -> Outcome {
    let w = world();
    let mut f = f32_backbone(1);
    let mut c = CosineClassifier::new(5, f.feature_dim(), ScaleMode::Fixed(2.0), DType::F32, &cpu(), 2).map_err(e)?;
    let mut g = small_generator(3);
    let px = |i: usize| w.base[i % w.base.len()].2.clone();
    let examples: Vec<GenExample> = (0..12)
        .map(|i| GenExample {
            a1: px(i),
            a2: px(i + 1),
            b1: px(i + 5),
            b2: px(i + 6),
            label: w.base[(i + 6) % w.base.len()].1,
        })
        .collect();
    let cfg = FotConfig {
        gen_epochs: 1,
        gen_batch: 4,
        ..FotConfig::default()
    };
    let before = (f.params().checksum().map_err(e)?, c.params().checksum().map_err(e)?, g.params().checksum().map_err(e)?);
    train_generator(&examples, &mut f, &mut c, &mut g, &cfg).map_err(e)?;
    ensure!(f.params().checksum().map_err(e)? == before.0, "backbone changed during generator training");
    ensure!(c.params().checksum().map_err(e)? == before.1, "base classifier changed during generator training");
    ensure!(g.params().checksum().map_err(e)? != before.2, "generator did not train");
    ensure!(!f.params().is_frozen() && !c.params().is_frozen(), "freeze flags not restored");

    let (support, labels, _) = one_shot_augmented(&w, 3)?;
    let query: Vec<ImageSample> = support.iter().take(5).cloned().collect();
    let theta = f.params().checksum().map_err(e)?;
    let ft_cfg = FotConfig {
        finetune_iters: 10,
        original_only_iters: 4,
        ..FotConfig::default()
    };
    let tuned = finetune(&support, &labels, &query, &f, 5, &ft_cfg, None).map_err(e)?;
    ensure!(f.params().checksum().map_err(e)? == theta, "backbone changed during inductive fine-tuning");
    ensure!(tuned.backbone.is_none(), "inductive fine-tuning returned a backbone");
    Ok("F and C_b fixed through a generator epoch; theta fixed through fine-tuning".into())
}

// ---------------------------------------------------------------------------
// 7. schedule contract

fn c7_schedule() -> Outcome {
    let w = world();
    let (support, labels, _) = one_shot_augmented(&w, 3)?;
    let f = f32_backbone(4);
    let cfg = FotConfig {
        finetune_iters: 100,
        original_only_iters: 40,
        ..FotConfig::default()
    };
    let mut seen: Vec<usize> = Vec::new();
    let mut observer = |_: usize, synthetic: &[bool]| seen.push(synthetic.iter().filter(|&&s| s).count());
    finetune(&support, &labels, &[], &f, 5, &cfg, Some(&mut observer)).map_err(e)?;
    ensure!(seen.len() == 100, "{} iterations observed", seen.len());
    ensure!(seen[..40].iter().all(|&n| n == 0), "synthetic samples before iteration 40");
    let total: usize = seen.iter().sum();
    ensure!(total >= 1, "no synthetic samples after iteration 40");
    Ok(format!("iterations 0-39 synthetic-free; {total} synthetic sample-visits in 40-99"))
}

// ---------------------------------------------------------------------------
// 8. augmentation arithmetic

fn c8_augmentation() -> Outcome {
    let w = world();
    let (samples, labels, ids) = one_shot_augmented(&w, 3)?;
    ensure!(samples.len() == 20, "{} support samples", samples.len());
    ensure!(samples.iter().filter(|s| s.synthetic).count() == 15, "expected 15 generated samples");
    for (s, &l) in samples.iter().zip(&labels) {
        if s.synthetic {
            let source = s.id.split('#').next().unwrap();
            let src_pos = ids.iter().position(|id| id == source).ok_or(format!("{} has no source", s.id))?;
            ensure!(l == src_pos, "{} labelled {l}, source class label {src_pos}", s.id);
            ensure!(s.stage == SampleStage::Generated, "{} not marked generated", s.id);
        }
    }
    let _ = &w.spec;
    Ok("20 samples, every generated one carries its source label".into())
}

// ---------------------------------------------------------------------------
// 9. desk-scale directional experiment

const DESK_CONFIG: &str = "
split_counts = 24,4,12
image_size = 32
width = 32
base_epochs = 20
base_batch = 32
base_lr = 0.003
gen_widths = 8,16,32
gen_epochs = 10
gen_batch = 32
lambda_mse = 100
target_count = 1500
pairs_per_class = 80
match_size = 16
finetune_lr = 0.01
n_episodes = 300
n_query = 16
shots = 1
variants = baseline,rb,rb_rf,fot
";

fn paired_diff(a: &EvalReport, b: &EvalReport) -> f64 {
    a.per_episode.iter().zip(&b.per_episode).map(|(x, y)| x - y).sum::<f64>() / a.per_episode.len() as f64
}

fn c9_desk_experiment() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let data = dir.path().join("synth");
    gen_synthetic(&SyntheticSpec::default(), &data, false).map_err(e)?;
    let mut map = ConfigMap::parse(DESK_CONFIG).map_err(e)?;
    map.set("data", data.join("images").display().to_string());
    map.set("saliency", data.join("saliency").display().to_string());
    let cfg = RunConfig::from_map(&map).map_err(e)?;
    let summary = Pipeline::new(cfg, dir.path().join("work")).run().map_err(e)?;
    let by_name: BTreeMap<String, &EvalReport> = summary.reports.iter().map(|r| (r.flags.to_string(), r)).collect();
    let get = |n: &str| by_name.get(n).copied().ok_or(format!("no report for {n}"));
    let (base, rb, fot) = (get("baseline")?, get("rb")?, get("fot")?);
    ensure!(base.episode_ids == fot.episode_ids && base.episode_ids == rb.episode_ids, "episodes not shared");
    ensure!(base.n_episodes >= 300, "only {} episodes", base.n_episodes);
    let (d_rb, d_fot) = (paired_diff(rb, base), paired_diff(fot, base));
    let detail = format!(
        "baseline {:.2}%, rb {:.2}% ({d_rb:+.2}), rb_rf {:.2}%, fot {:.2}% ({d_fot:+.2})",
        base.mean_accuracy,
        rb.mean_accuracy,
        get("rb_rf")?.mean_accuracy,
        fot.mean_accuracy
    );
    ensure!(base.mean_accuracy > 25.0, "baseline at chance: {detail}");
    ensure!(d_rb >= 0.0, "rb below baseline: {detail}");
    ensure!(d_fot >= 2.0, "fot gain under 2 points: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 10. evaluation statistics

fn stub_registry() -> Registry {
    let names: Vec<String> = (0..10).map(|c| format!("class{c}")).collect();
    let mut split = SplitConfig::default();
    for (i, n) in names.iter().enumerate() {
        split.assign(n, if i < 2 { SplitRole::Base } else { SplitRole::Novel }).unwrap();
    }
    let samples = names
        .iter()
        .flat_map(|n| (0..20).map(move |i| (n.clone(), format!("{i:02}"), Image::zeros(3, 2, 2))))
        .collect();
    Registry::from_memory(&split, samples).unwrap()
}

fn c10_statistics() -> Outcome {
    let reg = stub_registry();
    let task = TaskSpec {
        dataset: "stub".into(),
        n_way: 5,
        k_shot: 1,
        n_query: 16,
    };
    let random = evaluate(&reg, &RandomLearner, VariantFlags::BASELINE, &task, 1000, 9).map_err(e)?;
    ensure!((18.0..=22.0).contains(&random.mean_accuracy), "random stub mean {}", random.mean_accuracy);
    let perfect = evaluate(&reg, &OracleLearner, VariantFlags::BASELINE, &task, 1000, 9).map_err(e)?;
    ensure!(
        perfect.mean_accuracy == 100.0 && perfect.ci95 == 0.0,
        "perfect stub {} ± {}",
        perfect.mean_accuracy,
        perfect.ci95
    );
    let again = evaluate(&reg, &RandomLearner, VariantFlags::BASELINE, &task, 1000, 9).map_err(e)?;
    let render = |r: &EvalReport| format!("{}{}", format_table(std::slice::from_ref(r)), r.result_line());
    ensure!(render(&random) == render(&again), "rerun differs");
    Ok(format!(
        "random {:.2} ± {:.2}, perfect {:.1} ± {:.1}, rerun identical",
        random.mean_accuracy, random.ci95, perfect.mean_accuracy, perfect.ci95
    ))
}

// ---------------------------------------------------------------------------
// 11. protocol fidelity

const PROTOCOL_CONFIG: &str = "
dataset = cub
image_size = 16
width = 8
base_epochs = 1
base_batch = 64
gen_widths = 4,8,8
gen_epochs = 1
gen_batch = 32
target_count = 200
pairs_per_class = 4
match_size = 8
finetune_iters = 10
original_only_iters = 4
n_query = 5
n_episodes = 10
shots = 1,5
variants = baseline,fot
";

/// 200 class directories shaped like the bird dataset, with a matching
/// grayscale saliency cache.
fn cub_standin(root: &Path) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let cache = SaliencyCache::new(root.join("saliency"));
    for c in 0..200 {
        let class = format!("{:03}.Species_{c}", c + 1);
        let tint: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        for k in 0..12 {
            let stem = format!("Species_{c}_{k:04}");
            let (h, w) = (rng.random_range(14..24), rng.random_range(14..24));
            let (cy, cx) = (rng.random_range(4..h - 4), rng.random_range(4..w - 4));
            let mut img = Image::zeros(3, h, w);
            let mut mask = Image::zeros(1, h, w);
            for y in 0..h {
                for x in 0..w {
                    let inside = y.abs_diff(cy) <= 3 && x.abs_diff(cx) <= 3;
                    mask.set(0, y, x, inside as u8 as f32);
                    for ch in 0..3 {
                        let v = if inside { tint[ch] } else { rng.random::<f32>() * 0.5 };
                        img.set(ch, y, x, v);
                    }
                }
            }
            img.save_png(&root.join("images").join(&class).join(format!("{stem}.png")))
                .map_err(e)?;
            cache
                .put(&SaliencyMap::new(mask, format!("{class}/{stem}")).map_err(e)?)
                .map_err(e)?;
        }
    }
    Ok(())
}

fn c11_protocol() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut map = ConfigMap::parse(PROTOCOL_CONFIG).map_err(e)?;
    let real = std::env::var_os("FOT_CUB_ROOT").zip(std::env::var_os("FOT_CUB_SALIENCY"));
    let source = match &real {
        Some((images, saliency)) => {
            map.set("data", images.to_string_lossy());
            map.set("saliency", saliency.to_string_lossy());
            "user-supplied images"
        }
        None => {
            cub_standin(dir.path())?;
            map.set("data", dir.path().join("images").display().to_string());
            map.set("saliency", dir.path().join("saliency").display().to_string());
            "synthetic 200-class stand-in"
        }
    };
    let cfg = RunConfig::from_map(&map).map_err(e)?;
    let counts = cfg.split_counts.ok_or("cub preset missing")?;
    ensure!(counts == SplitCounts::new(120, 30, 50), "split {counts:?}");
    let summary = Pipeline::new(cfg, dir.path().join("work")).run().map_err(e)?;
    let tasks: BTreeSet<String> = summary.reports.iter().map(|r| r.task.to_string()).collect();
    ensure!(
        tasks.contains("cub-5way1shot") && tasks.contains("cub-5way5shot"),
        "tasks run: {tasks:?}"
    );
    let split = SplitConfig::read(&dir.path().join("work").join("split.txt")).map_err(e)?;
    ensure!(split.counts() == counts, "written split {:?}", split.counts());
    Ok(format!("{source}: 120/30/50 split, {} reports", summary.reports.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "extractor oracle equivalence", c1_extractor_oracle),
        (2, "threshold semantics", c2_threshold),
        (3, "quadruplet miner oracle", c3_miner_oracle),
        (4, "loss closed forms", c4_closed_forms),
        (5, "gradient checks", c5_gradients),
        (6, "freezing contracts", c6_freezing),
        (7, "schedule contract", c7_schedule),
        (8, "augmentation arithmetic", c8_augmentation),
        (9, "desk-scale directional experiment", c9_desk_experiment),
        (10, "evaluation statistics", c10_statistics),
        (11, "protocol fidelity", c11_protocol),
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("FOT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {name} [{secs:.1}s] {detail}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
