//! Head-only training with the Dice objective.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{EmbeddingBackend, EmbeddingGrid};
use crate::container::TensorContainer;
use crate::dataset::{effective_mask, LabelPolicy, Sample};
use crate::error::{Error, Result};
use crate::heads::{dice_loss_grad_blocks, Head, HeadVariant};
use crate::metrics::score_masks;
use crate::perturb::{execute, sample_plan, validation_plan, AugmentPlan, AugmentationPolicy, GeometricOp};
use crate::plane::{BinaryMask, ImagePlane, PatchGridGeometry};

/// Environment variable naming the embedding cache directory.
pub const CACHE_DIR_ENV: &str = "PATCHLOC_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before the rate is cut.
    pub patience: usize,
    pub lr_factor: f64,
    /// Training stops once the rate falls below this.
    pub stop_lr: f64,
    pub dice_eps: f64,
    pub seed: u64,
    /// Cap on optimizer steps over the whole run.
    pub max_steps: Option<usize>,
    /// Cap on training images drawn per epoch.
    pub images_per_epoch: Option<usize>,
    pub label_policy: LabelPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            max_epochs: 100,
            patience: 4,
            lr_factor: 0.5,
            stop_lr: 1e-6,
            dice_eps: 1.0,
            seed: 0,
            max_steps: None,
            images_per_epoch: None,
            label_policy: LabelPolicy::Pristine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.adam_eps, self.lr_factor, self.stop_lr, self.dice_eps];
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || positive.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("training sizes, rates and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return Err(Error::Config("betas must lie in [0, 1) and weight decay must be >= 0".into()));
        }
        if self.lr_factor >= 1.0 {
            return Err(Error::Config("lr_factor must be below 1".into()));
        }
        Ok(())
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *p *= 1.0 - lr * self.weight_decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Multiplies the rate by `factor` after `patience` epochs without a strictly
/// lower loss than the best seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's loss; returns whether it improved on the best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return true;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
        }
        false
    }
}

/// Indexed training or validation examples.
pub trait ExampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, i: usize) -> String;

    /// Image and its training target.
    fn load(&self, i: usize) -> Result<(ImagePlane, BinaryMask)>;
}

#[derive(Clone, Debug, Default)]
pub struct InMemorySource {
    pub items: Vec<(String, ImagePlane, BinaryMask)>,
}

impl ExampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn id(&self, i: usize) -> String {
        self.items[i].0.clone()
    }

    fn load(&self, i: usize) -> Result<(ImagePlane, BinaryMask)> {
        let (_, img, mask) = &self.items[i];
        Ok((img.clone(), mask.clone()))
    }
}

/// Dataset samples read from disk, masks adjusted by the label policy.
#[derive(Clone, Debug)]
pub struct SampleSource {
    pub samples: Vec<Sample>,
    pub policy: LabelPolicy,
}

impl ExampleSource for SampleSource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn id(&self, i: usize) -> String {
        format!("{}/{}", self.samples[i].dataset, self.samples[i].id)
    }

    fn load(&self, i: usize) -> Result<(ImagePlane, BinaryMask)> {
        let s = &self.samples[i];
        let (img, mask) = s.load()?;
        let target = effective_mask(&mask, s.background, self.policy).map_err(|e| e.with_path(&s.image))?;
        Ok((img, target))
    }
}

/// Content-addressed on-disk store of embedding grids.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::from(e).with_path(&dir))?;
        Ok(Self { dir })
    }

    /// Cache under `$PATCHLOC_CACHE_DIR`, when set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) if !d.is_empty() => Self::new(PathBuf::from(d)).map(Some),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Key over the backend identity, source image, crop and photometric tag.
    pub fn key(backend: &str, image_hash: &str, rect: (usize, usize, usize, usize), tag: &str, attention: bool) -> String {
        let mut h = Sha256::new();
        for part in [backend, image_hash, tag] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        for v in [rect.0, rect.1, rect.2, rect.3] {
            h.update((v as u64).to_le_bytes());
        }
        h.update([attention as u8]);
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.emb"))
    }

    pub fn get(&self, key: &str) -> Option<EmbeddingGrid> {
        let p = self.path(key);
        if !p.exists() {
            return None;
        }
        match TensorContainer::open(&p).and_then(|c| EmbeddingGrid::from_container(&c)) {
            Ok(g) => Some(g),
            Err(e) => {
                log::warn!("discarding corrupt cache entry {}: {e}", p.display());
                None
            }
        }
    }

    pub fn put(&self, key: &str, grid: &EmbeddingGrid) -> Result<()> {
        let p = self.path(key);
        let parent = p.parent().expect("two-level layout");
        std::fs::create_dir_all(parent).map_err(|e| Error::from(e).with_path(parent))?;
        let tmp = p.with_extension(format!("tmp{}", std::process::id()));
        grid.to_container().save(&tmp)?;
        std::fs::rename(&tmp, &p).map_err(|e| Error::from(e).with_path(&p))
    }

    pub fn get_or_compute(&self, key: &str, compute: impl FnOnce() -> Result<EmbeddingGrid>) -> Result<EmbeddingGrid> {
        if let Some(g) = self.get(key) {
            return Ok(g);
        }
        let g = compute()?;
        self.put(key, &g)?;
        Ok(g)
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_iou: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LearningRate,
    MaxEpochs,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss (training
    /// loss when there is no validation set).
    pub head: Head,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub epoch_times: Vec<Duration>,
    pub stop: StopReason,
}

/// Mixes two integers into a seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forged-pixel count in every patch of a window-sized mask.
pub fn forged_per_patch(mask: &BinaryMask, g: PatchGridGeometry) -> Result<Vec<usize>> {
    if mask.dims() != (g.window_h(), g.window_w()) {
        return Err(Error::structural(format!(
            "mask {:?} does not match a {}x{} window",
            mask.dims(),
            g.window_h(),
            g.window_w()
        )));
    }
    let p = g.patch_size;
    let mut counts = vec![0usize; g.num_patches()];
    for y in 0..g.window_h() {
        let row = &mask.data()[y * g.window_w()..(y + 1) * g.window_w()];
        let base = (y / p) * g.grid_w;
        for (x, &b) in row.iter().enumerate() {
            counts[base + x / p] += b as usize;
        }
    }
    Ok(counts)
}

/// Dice loss of one window and its parameter gradient.
pub fn example_loss_grad(head: &Head, grid: &EmbeddingGrid, mask: &BinaryMask, eps: f64) -> Result<(f64, Vec<f64>)> {
    let forged = forged_per_patch(mask, grid.geometry)?;
    let (probs, cache) = head.forward_probs(grid)?;
    let area = grid.geometry.patch_size * grid.geometry.patch_size;
    let (loss, dl_dp) = dice_loss_grad_blocks(&probs, &forged, area, eps)?;
    let grad = head.backward(grid, &probs, &cache, &dl_dp)?;
    Ok((loss, grad))
}

/// Batch-mean Dice loss and gradient. Examples are evaluated in parallel and
/// reduced in index order.
pub fn batch_loss_grad(head: &Head, batch: &[(EmbeddingGrid, BinaryMask)], eps: f64) -> Result<(f64, Vec<f64>)> {
    let parts = batch
        .par_iter()
        .map(|(g, m)| example_loss_grad(head, g, m, eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_mean(parts, head.param_count()))
}

fn reduce_mean(parts: Vec<(f64, Vec<f64>)>, n: usize) -> (f64, Vec<f64>) {
    let k = parts.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= k);
    (loss / k, grad)
}

fn crop_rect(plan: &AugmentPlan, dims: (usize, usize)) -> (usize, usize, usize, usize) {
    match plan.geometric {
        GeometricOp::Crop { top, left } => (top, left, plan.size, plan.size),
        _ => (0, 0, dims.0, dims.1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationResult {
    pub loss: f64,
    pub iou: f64,
}

/// Validation pass: fixed centre crops with seeded JPEG, mean Dice loss and
/// mean pixel IoU of the thresholded patch predictions.
pub fn validate<B: EmbeddingBackend + ?Sized>(
    head: &Head,
    backend: &B,
    source: &dyn ExampleSource,
    seed: u64,
    eps: f64,
    cache: Option<&EmbeddingCache>,
) -> Result<Option<ValidationResult>> {
    if source.is_empty() {
        return Ok(None);
    }
    let desc = backend.descriptor();
    let backend_id = serde_json::to_string(&desc).expect("serializable descriptor");
    let rows = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let (img, mask) = source.load(i)?;
            let plan = validation_plan(mix_seed(seed, i as u64), img.dims(), desc.window);
            let (win, target) = execute(&plan, &img, &mask)?;
            let embed = || backend.embed(&win, head.needs_attention());
            let grid = match cache {
                Some(c) => {
                    let tag = plan.jpeg.map(|q| format!("jpeg{q}")).unwrap_or_else(|| "none".into());
                    let key = EmbeddingCache::key(
                        &backend_id,
                        &img.content_hash(),
                        crop_rect(&plan, img.dims()),
                        &tag,
                        head.needs_attention(),
                    );
                    c.get_or_compute(&key, embed)?
                }
                None => embed()?,
            };
            let (loss, _) = example_loss_grad(head, &grid, &target, eps)?;
            let pred = head.logits(&grid)?.upsample().threshold(0.0);
            Ok((loss, score_masks(&pred, &target)?.iou))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(Some(ValidationResult {
        loss: rows.iter().map(|r| r.0).sum::<f64>() / n,
        iou: rows.iter().map(|r| r.1).sum::<f64>() / n,
    }))
}

/// Optimizes the head's parameters; the backend is only read.
pub fn train_head<B: EmbeddingBackend + ?Sized>(
    initial: Head,
    backend: &B,
    train: &dyn ExampleSource,
    val: &dyn ExampleSource,
    cfg: &TrainConfig,
    policy: &AugmentationPolicy,
    cache: Option<&EmbeddingCache>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    policy.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let desc = backend.descriptor();
    if policy.size != desc.window {
        return Err(Error::Config(format!(
            "augmentation output {} does not match backend window {}",
            policy.size, desc.window
        )));
    }

    let mut head = initial;
    let mut params: Vec<f64> = head.params().iter().map(|&p| p as f64).collect();
    let mut opt = AdamW::new(params.len(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.patience);
    let mut best = (head.clone(), 0usize);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut epoch_times = Vec::new();
    let val_seed = mix_seed(cfg.seed, 0x5641_4c49_4441_5445);
    let per_epoch = cfg.images_per_epoch.unwrap_or(usize::MAX).min(train.len());
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = sched.lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        order.truncate(per_epoch);

        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
                stop = StopReason::MaxSteps;
                break;
            }
            let parts = chunk
                .par_iter()
                .map(|&i| {
                    let (img, mask) = train.load(i)?;
                    let s = mix_seed(mix_seed(cfg.seed, epoch as u64 + 1), i as u64);
                    let plan = sample_plan(policy, s, img.dims())?;
                    let (win, target) = execute(&plan, &img, &mask)?;
                    let grid = backend.embed(&win, head.needs_attention())?;
                    example_loss_grad(&head, &grid, &target, cfg.dice_eps)
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = reduce_mean(parts, params.len());
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step_losses.len(),
                    last_good: best.0.params(),
                });
            }
            opt.step(&mut params, &grad, lr);
            let p32: Vec<f32> = params.iter().map(|&p| p as f32).collect();
            head.set_params(&p32)?;
            step_losses.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            break;
        }
        let train_loss = epoch_loss / epoch_steps as f64;
        let v = validate(&head, backend, val, val_seed, cfg.dice_eps, cache)?;
        let monitored = v.map(|v| v.loss).unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: step_losses.len(),
                last_good: best.0.params(),
            });
        }
        if sched.observe(monitored) {
            best = (head.clone(), epoch);
        }
        history.push(EpochRecord {
            epoch,
            lr,
            steps: epoch_steps,
            train_loss,
            val_loss: v.map(|v| v.loss),
            val_iou: v.map(|v| v.iou),
        });
        epoch_times.push(started.elapsed());
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train {train_loss:.5} val {}",
            v.map(|v| format!("{:.5} (iou {:.4})", v.loss, v.iou)).unwrap_or_else(|| "-".into())
        );
        if stop == StopReason::MaxSteps || cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
            stop = StopReason::MaxSteps;
            break;
        }
        if sched.lr < cfg.stop_lr {
            stop = StopReason::LearningRate;
            break;
        }
    }
    Ok(TrainOutcome {
        head: best.0,
        best_epoch: best.1,
        history,
        step_losses,
        epoch_times,
        stop,
    })
}

/// Fresh head of `variant` trained on the given sources. The averaged
/// attention variant has no parameters to learn and is returned as is.
pub fn train_variant<B: EmbeddingBackend + ?Sized>(
    variant: HeadVariant,
    backend: &B,
    train: &dyn ExampleSource,
    val: &dyn ExampleSource,
    cfg: &TrainConfig,
    policy: &AugmentationPolicy,
    cache: Option<&EmbeddingCache>,
) -> Result<TrainOutcome> {
    let desc = backend.descriptor();
    let initial = Head::init(variant, desc.embed_dim, desc.heads, cfg.seed);
    if variant == HeadVariant::AttentionAverage {
        return Ok(TrainOutcome {
            head: initial,
            best_epoch: 0,
            history: Vec::new(),
            step_losses: Vec::new(),
            epoch_times: Vec::new(),
            stop: StopReason::MaxEpochs,
        });
    }
    train_head(initial, backend, train, val, cfg, policy, cache)
}

/// Subset of at most `limit` examples chosen by a seeded shuffle.
pub struct Subset<'a> {
    inner: &'a dyn ExampleSource,
    indices: Vec<usize>,
}

impl<'a> Subset<'a> {
    pub fn new(inner: &'a dyn ExampleSource, limit: usize, seed: u64) -> Self {
        let mut indices: Vec<usize> = (0..inner.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        indices.truncate(limit);
        indices.sort_unstable();
        Self { inner, indices }
    }
}

impl ExampleSource for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn id(&self, i: usize) -> String {
        self.inner.id(self.indices[i])
    }

    fn load(&self, i: usize) -> Result<(ImagePlane, BinaryMask)> {
        self.inner.load(self.indices[i])
    }
}

/// Learns per-head attention weights from at most 100 training images.
pub fn train_attention_weights<B: EmbeddingBackend + ?Sized>(
    backend: &B,
    train: &dyn ExampleSource,
    val: &dyn ExampleSource,
    cfg: &TrainConfig,
    policy: &AugmentationPolicy,
) -> Result<TrainOutcome> {
    let subset = Subset::new(train, 100, cfg.seed);
    train_variant(HeadVariant::AttentionWeighted, backend, &subset, val, cfg, policy, None)
}
