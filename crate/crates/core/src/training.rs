//! Optimisation procedures: base-class training, generator training and
//! novel-class fine-tuning (inductive or transductive).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use candle::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{ImageSample, SampleStage};
use crate::error::{FotError, Result};
use crate::miner::{find_posture_partners, MatchIndex, Quadruplet};
use crate::networks::{CosineClassifier, FeatureExtractor, Generator, Network, ScaleMode};
use crate::raster::Image;
use crate::saliency::SaliencyMap;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropySign {
    /// `CE + w * H(p)`: confident query predictions are rewarded.
    MinimizeEntropy,
    /// `CE + w * sum p log p`, the opposite sign.
    Literal,
}

impl fmt::Display for EntropySign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntropySign::MinimizeEntropy => "minimize_entropy",
            EntropySign::Literal => "literal",
        })
    }
}

impl FromStr for EntropySign {
    type Err = FotError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimize_entropy" => Ok(EntropySign::MinimizeEntropy),
            "literal" => Ok(EntropySign::Literal),
            other => Err(FotError::Config(format!("unknown entropy_sign '{other}'"))),
        }
    }
}

/// Which backbone parameters transductive fine-tuning may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransductiveScope {
    All,
    LastBlock,
}

impl fmt::Display for TransductiveScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransductiveScope::All => "all",
            TransductiveScope::LastBlock => "last_block",
        })
    }
}

impl FromStr for TransductiveScope {
    type Err = FotError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TransductiveScope::All),
            "last_block" => Ok(TransductiveScope::LastBlock),
            other => Err(FotError::Config(format!("unknown transductive_scope '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FotConfig {
    pub lambda_mse: f64,
    /// Generated samples added per novel class.
    pub k_generated: usize,
    pub finetune_iters: usize,
    /// Leading fine-tuning iterations restricted to original samples.
    pub original_only_iters: usize,
    pub gen_epochs: usize,
    pub gen_batch: usize,
    pub base_epochs: usize,
    pub base_batch: usize,
    pub base_lr: f64,
    pub gen_lr: f64,
    pub finetune_lr: f64,
    pub scale: ScaleMode,
    pub transductive: bool,
    pub entropy_sign: EntropySign,
    pub entropy_weight: f64,
    pub transductive_scope: TransductiveScope,
    pub seed: u64,
}

impl Default for FotConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            k_generated: 3,
            finetune_iters: 100,
            original_only_iters: 40,
            gen_epochs: 1000,
            gen_batch: 32,
            base_epochs: 100,
            base_batch: 64,
            base_lr: 1e-3,
            gen_lr: 1e-3,
            finetune_lr: 1e-3,
            scale: ScaleMode::Fixed(2.0),
            transductive: false,
            entropy_sign: EntropySign::MinimizeEntropy,
            entropy_weight: 1.0,
            transductive_scope: TransductiveScope::All,
            seed: 0,
        }
    }
}

impl FotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.original_only_iters > self.finetune_iters {
            return Err(FotError::Config(format!(
                "original_only_iters ({}) exceeds finetune_iters ({})",
                self.original_only_iters, self.finetune_iters
            )));
        }
        if self.lambda_mse < 0.0 || !self.lambda_mse.is_finite() {
            return Err(FotError::Config("lambda_mse must be finite and non-negative".into()));
        }
        if self.gen_batch == 0 || self.base_batch == 0 {
            return Err(FotError::Config("batch sizes must be positive".into()));
        }
        for (name, lr) in [
            ("base_lr", self.base_lr),
            ("gen_lr", self.gen_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(FotError::Config(format!("{name} must be positive")));
            }
        }
        if self.scale.initial() <= 0.0 {
            return Err(FotError::Config("classifier scale must be positive".into()));
        }
        Ok(())
    }

    /// Warns when `k_generated` exceeds the recommended per-class budget.
    pub fn check_k_budget(&self, k_shot: usize) {
        let bound = if k_shot <= 1 { 3 } else { 5 };
        if self.k_generated > bound {
            log::warn!(
                "k_generated={} exceeds the recommended budget of {bound} for {k_shot}-shot tasks",
                self.k_generated
            );
        }
    }
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

fn one_hot(labels: &[usize], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(FotError::Invalid(format!("label {y} out of range for {classes} classes")));
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), classes), device)?.to_dtype(dtype)?)
}

/// Mean cross-entropy `-(1/N) sum log p[y]` of probability rows `p`.
pub fn base_loss(p: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = p.dims2()?;
    if n == 0 || n != labels.len() {
        return Err(FotError::Invalid(format!(
            "{n} probability rows for {} labels",
            labels.len()
        )));
    }
    let picked = (p * one_hot(labels, c, p.dtype(), p.device())?)?.sum(1)?;
    Ok(picked.maximum(LOG_FLOOR)?.log()?.mean_all()?.neg()?)
}

/// Mean Shannon entropy of probability rows.
pub fn mean_entropy(p: &Tensor) -> Result<Tensor> {
    let (n, _) = p.dims2()?;
    if n == 0 {
        return Err(FotError::Invalid("entropy of an empty batch".into()));
    }
    let plogp = (p * p.maximum(LOG_FLOOR)?.log()?)?;
    Ok(plogp.sum(1)?.mean_all()?.neg()?)
}

/// Support cross-entropy, plus the weighted query entropy term when
/// `p_query` is given.
pub fn finetune_loss(
    p_support: &Tensor,
    y_support: &[usize],
    p_query: Option<&Tensor>,
    sign: EntropySign,
    weight: f64,
) -> Result<Tensor> {
    let ce = base_loss(p_support, y_support)?;
    let Some(q) = p_query else {
        return Ok(ce);
    };
    if q.dims2()?.0 == 0 {
        return Err(FotError::Invalid("transductive loss needs query samples".into()));
    }
    let h = mean_entropy(q)?;
    let term = match sign {
        EntropySign::MinimizeEntropy => (h * weight)?,
        EntropySign::Literal => (h * -weight)?,
    };
    Ok((ce + term)?)
}

/// `lambda * MSE(pred, target) + CE(C_b(F(pred)), y)`, returned with the
/// unweighted MSE term. `f` and `c` are used in evaluation mode.
pub fn generator_loss(
    pred: &Tensor,
    target: &Tensor,
    f: &FeatureExtractor,
    c: &CosineClassifier,
    labels: &[usize],
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    if pred.dims() != target.dims() {
        return Err(FotError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let mse = (pred - target)?.sqr()?.mean_all()?;
    let ce = base_loss(&c.probs(&f.forward(pred, false)?)?, labels)?;
    Ok((((&mse * lambda)? + ce)?, mse))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Trains `f` and `c` on labelled images; returns the mean loss per epoch.
pub fn train_base(
    images: &[Arc<Image>],
    labels: &[usize],
    f: &mut FeatureExtractor,
    c: &mut CosineClassifier,
    cfg: &FotConfig,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(FotError::Insufficient("base split is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(FotError::Invalid("images and labels differ in length".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c.num_classes()) {
        return Err(FotError::Invalid(format!("label {y} out of range")));
    }
    if c.feature_dim() != f.feature_dim() {
        return Err(FotError::Shape("classifier and backbone dimensions differ".into()));
    }
    let mut vars = f.params().trainable();
    vars.extend(c.params().trainable());
    let mut opt = adam(vars, cfg.base_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dt, dev) = (f.params().dtype(), f.params().device().clone());
    let mut history = Vec::with_capacity(cfg.base_epochs);
    for epoch in 0..cfg.base_epochs {
        let mut total = 0.0;
        for idx in batches(images.len(), cfg.base_batch, &mut rng) {
            // Single-sample batches give degenerate batch statistics.
            if idx.len() < 2 && images.len() >= 2 {
                continue;
            }
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i].as_ref()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let x = Image::stack(&batch, dt, &dev)?;
            let loss = base_loss(&c.probs(&f.forward(&x, true)?)?, &y)?;
            opt.backward_step(&loss)?;
            total += scalar(&loss)? * idx.len() as f64;
        }
        let mean = total / images.len() as f64;
        log::debug!("base epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

/// Fraction of images whose argmax prediction equals the label.
pub fn accuracy(
    f: &FeatureExtractor,
    c: &CosineClassifier,
    images: &[Arc<Image>],
    labels: &[usize],
) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (chunk, ys) in images.chunks(128).zip(labels.chunks(128)) {
        let refs: Vec<&Image> = chunk.iter().map(Arc::as_ref).collect();
        let pred = c.predict(&f.extract_batch(&refs)?)?;
        correct += pred.iter().zip(ys).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// One generator training example; `label` is the base-class label of `b2`.
#[derive(Clone, Debug)]
pub struct GenExample {
    pub a1: Arc<Image>,
    pub a2: Arc<Image>,
    pub b1: Arc<Image>,
    pub b2: Arc<Image>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenEpoch {
    pub loss: f64,
    pub mse: f64,
}

/// Trains `g` with `f` and `c` frozen; only the generator's parameters are
/// handed to the optimiser.
pub fn train_generator(
    examples: &[GenExample],
    f: &mut FeatureExtractor,
    c: &mut CosineClassifier,
    g: &mut Generator,
    cfg: &FotConfig,
) -> Result<Vec<GenEpoch>> {
    if examples.is_empty() {
        return Err(FotError::EmptyManifest);
    }
    let was = (f.params().is_frozen(), c.params().is_frozen());
    f.params_mut().set_frozen(true);
    c.params_mut().set_frozen(true);
    let out = generator_epochs(examples, f, c, g, cfg);
    f.params_mut().set_frozen(was.0);
    c.params_mut().set_frozen(was.1);
    out
}

fn generator_epochs(
    examples: &[GenExample],
    f: &FeatureExtractor,
    c: &CosineClassifier,
    g: &Generator,
    cfg: &FotConfig,
) -> Result<Vec<GenEpoch>> {
    let mut opt = adam(g.params().trainable(), cfg.gen_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dt, dev) = (g.params().dtype(), g.params().device().clone());
    let stack = |idx: &[usize], pick: fn(&GenExample) -> &Image| {
        let imgs: Vec<&Image> = idx.iter().map(|&i| pick(&examples[i])).collect();
        Image::stack(&imgs, dt, &dev)
    };
    let mut history = Vec::with_capacity(cfg.gen_epochs);
    for epoch in 0..cfg.gen_epochs {
        let (mut loss_sum, mut mse_sum) = (0.0, 0.0);
        for idx in batches(examples.len(), cfg.gen_batch, &mut rng) {
            let pred = g.forward(
                &stack(&idx, |e| &e.a1)?,
                &stack(&idx, |e| &e.a2)?,
                &stack(&idx, |e| &e.b1)?,
            )?;
            let y: Vec<usize> = idx.iter().map(|&i| examples[i].label).collect();
            let (loss, mse) = generator_loss(&pred, &stack(&idx, |e| &e.b2)?, f, c, &y, cfg.lambda_mse)?;
            opt.backward_step(&loss)?;
            loss_sum += scalar(&loss)? * idx.len() as f64;
            mse_sum += scalar(&mse)? * idx.len() as f64;
        }
        let n = examples.len() as f64;
        let e = GenEpoch {
            loss: loss_sum / n,
            mse: mse_sum / n,
        };
        log::debug!("generator epoch {epoch}: loss {:.5} mse {:.5}", e.loss, e.mse);
        history.push(e);
    }
    Ok(history)
}

/// Everything needed to synthesise novel-class samples.
pub struct AugmentContext<'a> {
    pub generator: &'a Generator,
    pub d_g: &'a [Quadruplet],
    /// Posture index over base samples, keyed by sample id.
    pub index: &'a MatchIndex,
    /// Base images in the same preprocessing as the support set.
    pub base_images: &'a BTreeMap<String, Arc<Image>>,
}

/// Adds `k` generated samples per class. Support samples of a class take
/// turns as `Z1`; each is paired with the posture partners nearest to its
/// own saliency map. Originals come first, in their input order.
pub fn augment_support(
    support: &[ImageSample],
    labels: &[usize],
    maps: &[SaliencyMap],
    ctx: &AugmentContext<'_>,
    k: usize,
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<usize>)> {
    if support.len() != labels.len() || support.len() != maps.len() {
        return Err(FotError::Invalid("support, labels and maps differ in length".into()));
    }
    let mut samples = support.to_vec();
    let mut out_labels = labels.to_vec();
    if k == 0 {
        return Ok((samples, out_labels));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    let image_of = |id: &str| {
        ctx.base_images
            .get(id)
            .cloned()
            .ok_or_else(|| FotError::Invalid(format!("base image {id} not loaded")))
    };
    for (&label, members) in &by_label {
        let mut uses = vec![0usize; members.len()];
        for j in 0..k {
            uses[j % members.len()] += 1;
        }
        let mut partners = Vec::with_capacity(members.len());
        for (m, &i) in members.iter().enumerate() {
            let s = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            partners.push(find_posture_partners(&maps[i], ctx.index, ctx.d_g, uses[m], s)?);
        }
        for j in 0..k {
            let m = j % members.len();
            let z1 = &support[members[m]];
            let (x1, x2) = &partners[m][j / members.len()];
            let pixels = ctx.generator.generate(&*image_of(x1)?, &*image_of(x2)?, &z1.pixels)?;
            samples.push(ImageSample {
                id: format!("{}#gen{j}", z1.id),
                class_id: z1.class_id,
                pixels: Arc::new(pixels),
                role: z1.role,
                synthetic: true,
                stage: SampleStage::Generated,
            });
            out_labels.push(label);
        }
    }
    Ok((samples, out_labels))
}

/// Result of fine-tuning on one episode.
pub struct Finetuned {
    pub classifier: CosineClassifier,
    /// The episode-local backbone in transductive mode.
    pub backbone: Option<FeatureExtractor>,
    pub losses: Vec<f64>,
}

impl Finetuned {
    /// Predicted episode labels for `images`, using `base` unless the
    /// backbone was fine-tuned.
    pub fn predict(&self, base: &FeatureExtractor, images: &[&Image]) -> Result<Vec<usize>> {
        let f = self.backbone.as_ref().unwrap_or(base);
        self.classifier.predict(&f.extract_batch(images)?)
    }
}

/// Receives the iteration number and the `synthetic` flag of every sample
/// used in that iteration.
pub type IterationObserver<'a> = &'a mut dyn FnMut(usize, &[bool]);

/// Trains a fresh classifier for `n_way` classes on `support`. Iterations
/// below `original_only_iters` use original samples only, later ones the
/// whole (possibly augmented) set. In transductive mode an episode-local
/// copy of `f` is updated as well, with the query entropy term added.
pub fn finetune(
    support: &[ImageSample],
    labels: &[usize],
    query: &[ImageSample],
    f: &FeatureExtractor,
    n_way: usize,
    cfg: &FotConfig,
    mut observer: Option<IterationObserver<'_>>,
) -> Result<Finetuned> {
    cfg.validate()?;
    if support.len() != labels.len() {
        return Err(FotError::Invalid("support and labels differ in length".into()));
    }
    let images: Vec<&Image> = support.iter().map(|s| s.pixels.as_ref()).collect();
    if !cfg.transductive {
        let feats = f.extract_batch(&images)?.detach();
        let synthetic: Vec<bool> = support.iter().map(|s| s.synthetic).collect();
        let (classifier, losses) = finetune_features(&feats, &synthetic, labels, n_way, cfg, observer)?;
        return Ok(Finetuned {
            classifier,
            backbone: None,
            losses,
        });
    }

    let (dt, dev) = (f.params().dtype(), f.params().device().clone());
    let classifier = CosineClassifier::new(n_way, f.feature_dim(), cfg.scale, dt, &dev, cfg.seed)?;
    let original: Vec<usize> = (0..support.len()).filter(|&i| !support[i].synthetic).collect();
    let everything: Vec<usize> = (0..support.len()).collect();
    if original.is_empty() {
        return Err(FotError::Insufficient("support has no original samples".into()));
    }
    let active = |it: usize| {
        if it < cfg.original_only_iters {
            &original
        } else {
            &everything
        }
    };
    let flags = |idx: &[usize]| -> Vec<bool> { idx.iter().map(|&i| support[i].synthetic).collect() };
    let mut losses = Vec::with_capacity(cfg.finetune_iters);
    if query.is_empty() {
        return Err(FotError::Invalid("transductive fine-tuning needs query samples".into()));
    }
    let mut local = f.deep_clone()?;
    local.params_mut().set_frozen(false);
    let mut vars = match cfg.transductive_scope {
        TransductiveScope::All => local.params().trainable(),
        TransductiveScope::LastBlock => {
            let prefixes = local.last_block_prefixes();
            let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
            local.params().trainable_with_prefix(&refs)
        }
    };
    vars.extend(classifier.params().trainable());
    let mut opt = adam(vars, cfg.finetune_lr)?;
    let xs = Image::stack(&images, dt, &dev)?;
    let qrefs: Vec<&Image> = query.iter().map(|s| s.pixels.as_ref()).collect();
    let xq = Image::stack(&qrefs, dt, &dev)?;
    for it in 0..cfg.finetune_iters {
        let idx = active(it);
        if let Some(obs) = observer.as_mut() {
            obs(it, &flags(idx));
        }
        let sel = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &dev)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        // Batch-norm layers stay in evaluation mode so running statistics
        // learned on base classes are kept.
        let ps = classifier.probs(&local.forward(&xs.index_select(&sel, 0)?, false)?)?;
        let pq = classifier.probs(&local.forward(&xq, false)?)?;
        let loss = finetune_loss(&ps, &y, Some(&pq), cfg.entropy_sign, cfg.entropy_weight)?;
        opt.backward_step(&loss)?;
        losses.push(scalar(&loss)?);
    }
    Ok(Finetuned {
        classifier,
        backbone: Some(local),
        losses,
    })
}

/// Inductive fine-tuning on precomputed support features (`N x d`).
pub fn finetune_features(
    feats: &Tensor,
    synthetic: &[bool],
    labels: &[usize],
    n_way: usize,
    cfg: &FotConfig,
    mut observer: Option<IterationObserver<'_>>,
) -> Result<(CosineClassifier, Vec<f64>)> {
    cfg.validate()?;
    let (n, d) = feats.dims2()?;
    if n != labels.len() || n != synthetic.len() {
        return Err(FotError::Invalid("features, flags and labels differ in length".into()));
    }
    let dev = feats.device().clone();
    let classifier = CosineClassifier::new(n_way, d, cfg.scale, feats.dtype(), &dev, cfg.seed)?;
    let original: Vec<u32> = (0..n as u32).filter(|&i| !synthetic[i as usize]).collect();
    let everything: Vec<u32> = (0..n as u32).collect();
    if original.is_empty() {
        return Err(FotError::Insufficient("support has no original samples".into()));
    }
    let sel_orig = Tensor::from_slice(&original, original.len(), &dev)?;
    let sel_all = Tensor::from_slice(&everything, n, &dev)?;
    let y_orig: Vec<usize> = original.iter().map(|&i| labels[i as usize]).collect();
    let flags_orig = vec![false; original.len()];
    let mut opt = adam(classifier.params().trainable(), cfg.finetune_lr)?;
    let mut losses = Vec::with_capacity(cfg.finetune_iters);
    for it in 0..cfg.finetune_iters {
        let (sel, y, flags) = if it < cfg.original_only_iters {
            (&sel_orig, y_orig.as_slice(), flags_orig.as_slice())
        } else {
            (&sel_all, labels, synthetic)
        };
        if let Some(obs) = observer.as_mut() {
            obs(it, flags);
        }
        let p = classifier.probs(&feats.index_select(sel, 0)?)?;
        let loss = finetune_loss(&p, y, None, cfg.entropy_sign, cfg.entropy_weight)?;
        opt.backward_step(&loss)?;
        losses.push(scalar(&loss)?);
    }
    Ok((classifier, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(data, (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn base_loss_closed_forms() {
        assert_eq!(val(&base_loss(&probs(&[&[0.0, 1.0, 0.0]]), &[1]).unwrap()), 0.0);
        let u = probs(&[&[0.2; 5]]);
        assert!((val(&base_loss(&u, &[3]).unwrap()) - 5f64.ln()).abs() < 1e-12);
        let p = probs(&[&[0.5, 0.5], &[0.75, 0.25]]);
        let l = val(&base_loss(&p, &[0, 1]).unwrap());
        assert!((l - 1.0397).abs() < 5e-5);
        assert!((l + (0.5f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn base_loss_rejects_bad_labels() {
        assert!(base_loss(&probs(&[&[0.5, 0.5]]), &[2]).is_err());
        assert!(base_loss(&probs(&[&[0.5, 0.5]]), &[0, 1]).is_err());
    }

    #[test]
    fn zero_probability_is_floored() {
        let l = val(&base_loss(&probs(&[&[1.0, 0.0]]), &[1]).unwrap());
        assert!((l + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(val(&mean_entropy(&probs(&[&[0.0, 1.0]])).unwrap()), 0.0);
        assert!((val(&mean_entropy(&probs(&[&[0.2; 5]])).unwrap()) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_signs_are_mirror_images() {
        let ps = probs(&[&[0.7, 0.2, 0.1], &[0.1, 0.3, 0.6]]);
        let pq = probs(&[&[0.4, 0.4, 0.2], &[0.9, 0.05, 0.05]]);
        let y = [0, 2];
        let ce = val(&base_loss(&ps, &y).unwrap());
        let lmin = val(&finetune_loss(&ps, &y, Some(&pq), EntropySign::MinimizeEntropy, 1.0).unwrap());
        let llit = val(&finetune_loss(&ps, &y, Some(&pq), EntropySign::Literal, 1.0).unwrap());
        assert!((lmin + llit - 2.0 * ce).abs() < 1e-12);
        assert!(lmin >= 0.0);
    }

    #[test]
    fn transductive_loss_needs_queries() {
        let ps = probs(&[&[0.5, 0.5]]);
        let empty = Tensor::zeros((0, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(finetune_loss(&ps, &[0], Some(&empty), EntropySign::MinimizeEntropy, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FotConfig::default().validate().is_ok());
        let bad = FotConfig {
            original_only_iters: 101,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
