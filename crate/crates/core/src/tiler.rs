//! Sliding-window localization: planning, per-window evaluation and logit fusion.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingBackend;
use crate::error::{Error, Result};
use crate::heads::{Head, PatchLogitGrid};
use crate::plane::{BinaryMask, FloatPlane, ImagePlane};
use crate::resample::Kernel;
use crate::vit::ImageClassifier;

pub const DEFAULT_WINDOW: usize = 504;
pub const DEFAULT_STRIDE: usize = 128;
pub const DEFAULT_MIN_SIZE: usize = 1016;

/// Kernel used to upscale small inputs before tiling.
pub const UPSCALE_KERNEL: Kernel = Kernel::Lanczos;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilerConfig {
    pub window: usize,
    pub stride: usize,
    pub min_size: usize,
    /// Logit-space decision threshold.
    pub threshold: f32,
}

impl Default for TilerConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            min_size: DEFAULT_MIN_SIZE,
            threshold: 0.0,
        }
    }
}

impl TilerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::invalid("window and stride must be positive"));
        }
        if self.stride > self.window {
            return Err(Error::invalid(format!(
                "stride {} exceeds window {}; pixels would go uncovered",
                self.stride, self.window
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub source: (usize, usize),
    /// Exact upscale factor as `num / den` (1/1 when no upscaling happens).
    pub scale: (usize, usize),
    /// Dimensions after upscaling, before padding.
    pub scaled: (usize, usize),
    pub padded: (usize, usize),
    pub window: usize,
    pub stride: usize,
    /// Row-major `(top, left)` window origins.
    pub origins: Vec<(usize, usize)>,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn is_upscaled(&self) -> bool {
        self.scaled != self.source
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale.0 as f64 / self.scale.1 as f64
    }

    /// Single window at the origin of an exactly window-sized image.
    pub fn single(window: usize) -> Self {
        Self {
            source: (window, window),
            scale: (1, 1),
            scaled: (window, window),
            padded: (window, window),
            window,
            stride: window,
            origins: vec![(0, 0)],
        }
    }

    /// Number of windows covering each padded pixel, by direct enumeration.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w) = self.padded;
        let mut count = vec![0u32; h * w];
        for &(t, l) in &self.origins {
            for y in t..t + self.window {
                for c in &mut count[y * w + l..y * w + l + self.window] {
                    *c += 1;
                }
            }
        }
        count
    }
}

fn padded_len(n: usize, window: usize, stride: usize) -> usize {
    if n <= window {
        window
    } else {
        window + (n - window).div_ceil(stride) * stride
    }
}

/// Builds the window lattice for an `h x w` image.
///
/// If the short side is below `min_size` the image is scaled uniformly by
/// `min_size / min(h, w)` with each side rounded up. Each side is then padded
/// to `window + k * stride`. A `min_size` smaller than the window is raised
/// to the window.
pub fn plan_windows(h: usize, w: usize, cfg: &TilerConfig) -> Result<WindowPlan> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("image {h}x{w} has no pixels")));
    }
    let min_size = cfg.min_size.max(cfg.window);
    let short = h.min(w);
    let (scale, scaled) = if short < min_size {
        let up = |n: usize| (n * min_size).div_ceil(short);
        ((min_size, short), (up(h), up(w)))
    } else {
        ((1, 1), (h, w))
    };
    let padded = (
        padded_len(scaled.0, cfg.window, cfg.stride),
        padded_len(scaled.1, cfg.window, cfg.stride),
    );
    let tops = (0..=(padded.0 - cfg.window)).step_by(cfg.stride);
    let lefts: Vec<usize> = (0..=(padded.1 - cfg.window)).step_by(cfg.stride).collect();
    let origins = tops.flat_map(|t| lefts.iter().map(move |&l| (t, l))).collect();
    Ok(WindowPlan {
        source: (h, w),
        scale,
        scaled,
        padded,
        window: cfg.window,
        stride: cfg.stride,
        origins,
    })
}

/// Per-pixel logit sums and window counts at padded resolution.
#[derive(Clone, Debug)]
pub struct LogitAccumulator {
    height: usize,
    width: usize,
    sum: Vec<f32>,
    count: Vec<u32>,
}

impl LogitAccumulator {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            sum: vec![0.0; height * width],
            count: vec![0; height * width],
        }
    }

    /// Adds a window's upsampled logits with its top-left corner at `(top, left)`.
    pub fn add(&mut self, top: usize, left: usize, logits: &FloatPlane) -> Result<()> {
        let (h, w) = logits.dims();
        if top + h > self.height || left + w > self.width {
            return Err(Error::structural(format!(
                "window {h}x{w} at ({top},{left}) exceeds accumulator {}x{}",
                self.height, self.width
            )));
        }
        for y in 0..h {
            let dst = (top + y) * self.width + left;
            let src = &logits.data()[y * w..(y + 1) * w];
            for ((s, c), &v) in self.sum[dst..dst + w].iter_mut().zip(&mut self.count[dst..dst + w]).zip(src) {
                *s += v;
                *c += 1;
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn counts(&self) -> &[u32] {
        &self.count
    }

    pub fn sums(&self) -> &[f32] {
        &self.sum
    }

    pub fn sum_plane(&self) -> FloatPlane {
        FloatPlane::new(self.height, self.width, self.sum.clone()).expect("finite sums")
    }

    /// Mean logit per pixel. Fails when some pixel was never covered.
    pub fn mean_plane(&self) -> Result<FloatPlane> {
        if let Some(i) = self.count.iter().position(|&c| c == 0) {
            return Err(Error::structural(format!(
                "pixel ({}, {}) not covered by any window",
                i / self.width,
                i % self.width
            )));
        }
        let data = self
            .sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &c)| (s as f64 / c as f64) as f32)
            .collect();
        FloatPlane::new(self.height, self.width, data)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub prepare: Duration,
    pub embed: Duration,
    pub fuse: Duration,
    pub finish: Duration,
}

#[derive(Clone, Debug)]
pub struct LocalizationResult {
    /// Mean logit per pixel at the input resolution.
    pub heatmap: FloatPlane,
    pub mask: BinaryMask,
    pub plan: WindowPlan,
    pub timing: StageTimings,
}

fn check_compat<B: EmbeddingBackend + ?Sized>(backend: &B, head: &Head, window: usize) -> Result<()> {
    let d = backend.descriptor();
    if d.window != window {
        return Err(Error::structural(format!(
            "plan window {window} does not match backend window {}",
            d.window
        )));
    }
    if let Some(dim) = head.input_dim() {
        if dim != d.embed_dim {
            return Err(Error::structural(format!(
                "head expects {dim}-dimensional embeddings, backend produces {}",
                d.embed_dim
            )));
        }
    }
    if let Head::Attention(a) = head {
        if a.weights.len() != d.heads {
            return Err(Error::structural(format!(
                "attention head has {} weights, backend has {} heads",
                a.weights.len(),
                d.heads
            )));
        }
    }
    Ok(())
}

/// Embeds one window and evaluates the head on it.
pub fn window_logits<B: EmbeddingBackend + ?Sized>(backend: &B, head: &Head, window: &ImagePlane) -> Result<PatchLogitGrid> {
    let grid = backend.embed(window, head.needs_attention())?;
    head.logits(&grid)
}

/// Upscales and mirror-pads `img` as the plan prescribes.
pub fn prepare_canvas(img: &ImagePlane, plan: &WindowPlan) -> Result<ImagePlane> {
    if img.dims() != plan.source {
        return Err(Error::invalid(format!(
            "image is {:?}, plan was made for {:?}",
            img.dims(),
            plan.source
        )));
    }
    let scaled = if plan.is_upscaled() {
        img.resize(plan.scaled.0, plan.scaled.1, UPSCALE_KERNEL)?
    } else {
        img.clone()
    };
    scaled.mirror_pad(plan.padded.1 - plan.scaled.1, plan.padded.0 - plan.scaled.0)
}

/// Runs every window of `plan` and returns the filled accumulator.
/// Windows are evaluated in parallel and summed in plan order.
pub fn accumulate<B: EmbeddingBackend + ?Sized>(
    canvas: &ImagePlane,
    backend: &B,
    head: &Head,
    plan: &WindowPlan,
    timing: &mut StageTimings,
) -> Result<LogitAccumulator> {
    check_compat(backend, head, plan.window)?;
    if canvas.dims() != plan.padded {
        return Err(Error::structural(format!(
            "canvas {:?} does not match padded plan {:?}",
            canvas.dims(),
            plan.padded
        )));
    }
    let t = Instant::now();
    let grids: Vec<PatchLogitGrid> = plan
        .origins
        .par_iter()
        .map(|&(top, left)| {
            canvas
                .crop(top, left, plan.window, plan.window)
                .and_then(|win| window_logits(backend, head, &win))
                .map_err(|e| Error::Backend {
                    top,
                    left,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    timing.embed += t.elapsed();

    let t = Instant::now();
    let mut acc = LogitAccumulator::new(plan.padded.0, plan.padded.1);
    for (&(top, left), g) in plan.origins.iter().zip(&grids) {
        acc.add(top, left, &g.upsample())?;
    }
    timing.fuse += t.elapsed();
    Ok(acc)
}

/// Full localization of an arbitrary-size image.
pub fn localize<B: EmbeddingBackend + ?Sized>(
    img: &ImagePlane,
    backend: &B,
    head: &Head,
    cfg: &TilerConfig,
) -> Result<LocalizationResult> {
    let plan = plan_windows(img.height(), img.width(), cfg)?;
    localize_with_plan(img, backend, head, plan, cfg.threshold)
}

pub fn localize_with_plan<B: EmbeddingBackend + ?Sized>(
    img: &ImagePlane,
    backend: &B,
    head: &Head,
    plan: WindowPlan,
    threshold: f32,
) -> Result<LocalizationResult> {
    let mut timing = StageTimings::default();
    let t = Instant::now();
    let canvas = prepare_canvas(img, &plan)?;
    timing.prepare = t.elapsed();

    let acc = accumulate(&canvas, backend, head, &plan, &mut timing)?;

    let t = Instant::now();
    let heatmap = crop_back(&acc.mean_plane()?, &plan)?;
    let mask = heatmap.threshold(threshold);
    timing.finish = t.elapsed();
    Ok(LocalizationResult {
        heatmap,
        mask,
        plan,
        timing,
    })
}

/// Maps a padded-resolution plane back to the source image: drops the
/// padding, then undoes any upscaling.
pub fn crop_back(padded: &FloatPlane, plan: &WindowPlan) -> Result<FloatPlane> {
    if padded.dims() != plan.padded {
        return Err(Error::structural(format!(
            "plane {:?} does not match padded plan {:?}",
            padded.dims(),
            plan.padded
        )));
    }
    let cropped = padded.crop(0, 0, plan.scaled.0, plan.scaled.1)?;
    if plan.is_upscaled() {
        cropped.resize(plan.source.0, plan.source.1, Kernel::Bilinear)
    } else {
        Ok(cropped)
    }
}

/// One window over an image that is exactly window-sized.
pub fn localize_single_window<B: EmbeddingBackend + ?Sized>(
    img: &ImagePlane,
    backend: &B,
    head: &Head,
    threshold: f32,
) -> Result<LocalizationResult> {
    let window = backend.descriptor().window;
    if img.dims() != (window, window) {
        return Err(Error::invalid(format!(
            "single-window mode needs a {window}x{window} image, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    localize_with_plan(img, backend, head, WindowPlan::single(window), threshold)
}

/// Origins of the four corner crops and the centre crop.
pub fn five_crop_origins(h: usize, w: usize, window: usize) -> [(usize, usize); 5] {
    let (b, r) = (h - window, w - window);
    [(0, 0), (0, r), (b, 0), (b, r), (b / 2, r / 2)]
}

/// Image-level probability of class `positive`, averaged over five crops.
/// Inputs smaller than the window are first upscaled so the short side fits.
pub fn detect_five_crop<B: EmbeddingBackend + ?Sized>(
    img: &ImagePlane,
    backend: &B,
    classifier: Option<&ImageClassifier>,
    positive: usize,
) -> Result<f64> {
    let classifier =
        classifier.ok_or_else(|| Error::Unsupported("backbone weights carry no image classifier".into()))?;
    if positive >= classifier.classes() {
        return Err(Error::invalid(format!(
            "class {positive} out of range for a {}-class classifier",
            classifier.classes()
        )));
    }
    let window = backend.descriptor().window;
    let (h, w) = img.dims();
    let short = h.min(w);
    let img = if short < window {
        let up = |n: usize| (n * window).div_ceil(short);
        img.resize(up(h), up(w), UPSCALE_KERNEL)?
    } else {
        img.clone()
    };
    let crops = five_crop_origins(img.height(), img.width(), window);
    let probs = crops
        .par_iter()
        .map(|&(top, left)| {
            let win = img.crop(top, left, window, window)?;
            let grid = backend.embed(&win, false)?;
            Ok(classifier.probabilities(&grid.cls)?[positive] as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}
