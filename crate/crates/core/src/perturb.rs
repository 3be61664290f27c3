//! Seeded image degradations: the robustness grid and the training augmentation pipeline.

use std::io::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{reflect101, BinaryMask, ImagePlane};
use crate::resample::Kernel;

/// Quality factors at or above this use 4:4:4 chroma; below, 4:2:0.
pub const JPEG_FULL_CHROMA_QF: u8 = 95;

/// Identifies the JPEG codec in reports.
pub const JPEG_CODEC: &str = "jpeg-encoder 0.6 / zune-jpeg";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    None,
    Jpeg { qf: u8 },
    DoubleJpeg { qf1: u8, qf2: u8 },
    Resize { percent: u32, kernel: Kernel },
    /// Standard deviation on the 8-bit scale.
    GaussNoise { sigma: f64 },
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let qf_ok = |q: u8| (1..=100).contains(&q);
        match *self {
            PerturbationSpec::None => Ok(()),
            PerturbationSpec::Jpeg { qf } if qf_ok(qf) => Ok(()),
            PerturbationSpec::DoubleJpeg { qf1, qf2 } if qf_ok(qf1) && qf_ok(qf2) => Ok(()),
            PerturbationSpec::Resize { percent, .. } if percent > 0 => Ok(()),
            PerturbationSpec::GaussNoise { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            other => Err(Error::invalid(format!("invalid perturbation {other:?}"))),
        }
    }

    /// Short stable tag used in file names and reports.
    pub fn tag(&self) -> String {
        match *self {
            PerturbationSpec::None => "none".into(),
            PerturbationSpec::Jpeg { qf } => format!("jpeg{qf}"),
            PerturbationSpec::DoubleJpeg { qf1, qf2 } => format!("djpeg{qf1}-{qf2}"),
            PerturbationSpec::Resize { percent, kernel } => match kernel {
                Kernel::Bicubic => format!("resize{percent}"),
                k => format!("resize{percent}-{}", format!("{k:?}").to_lowercase()),
            },
            PerturbationSpec::GaussNoise { sigma } => format!("noise{sigma}"),
        }
    }

    /// Family name and severity, for robustness curves.
    pub fn family(&self) -> (&'static str, f64) {
        match *self {
            PerturbationSpec::None => ("none", 0.0),
            PerturbationSpec::Jpeg { qf } => ("jpeg", qf as f64),
            PerturbationSpec::DoubleJpeg { qf2, .. } => ("double_jpeg", qf2 as f64),
            PerturbationSpec::Resize { percent, .. } => ("resize", percent as f64),
            PerturbationSpec::GaussNoise { sigma } => ("gauss_noise", sigma),
        }
    }

    /// Resizes change image dimensions; the mask must follow.
    pub fn is_geometric(&self) -> bool {
        matches!(self, PerturbationSpec::Resize { .. })
    }
}

impl std::str::FromStr for PerturbationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown perturbation tag {s:?}"));
        let num = |t: &str| t.parse::<u32>().map_err(|_| bad());
        let spec = if s == "none" {
            PerturbationSpec::None
        } else if let Some(r) = s.strip_prefix("djpeg") {
            let (a, b) = r.split_once('-').ok_or_else(bad)?;
            PerturbationSpec::DoubleJpeg {
                qf1: u8::try_from(num(a)?).map_err(|_| bad())?,
                qf2: u8::try_from(num(b)?).map_err(|_| bad())?,
            }
        } else if let Some(r) = s.strip_prefix("jpeg") {
            PerturbationSpec::Jpeg {
                qf: u8::try_from(num(r)?).map_err(|_| bad())?,
            }
        } else if let Some(r) = s.strip_prefix("resize") {
            let (p, k) = match r.split_once('-') {
                Some((p, k)) => (p, k.parse()?),
                None => (r, Kernel::Bicubic),
            };
            PerturbationSpec::Resize {
                percent: num(p)?,
                kernel: k,
            }
        } else if let Some(r) = s.strip_prefix("noise") {
            PerturbationSpec::GaussNoise {
                sigma: r.parse().map_err(|_| bad())?,
            }
        } else {
            return Err(bad());
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// The fifteen evaluation conditions: no change, four JPEG qualities, three
/// double-JPEG pairs, three bicubic rescalings and four noise levels.
pub fn robustness_grid() -> Vec<PerturbationSpec> {
    let mut v = vec![PerturbationSpec::None];
    v.extend([100, 80, 60, 40].map(|qf| PerturbationSpec::Jpeg { qf }));
    v.extend([90, 60, 40].map(|qf2| PerturbationSpec::DoubleJpeg { qf1: 90, qf2 }));
    v.extend([50, 150, 200].map(|percent| PerturbationSpec::Resize {
        percent,
        kernel: Kernel::Bicubic,
    }));
    v.extend([3.0, 7.0, 15.0, 19.0].map(|sigma| PerturbationSpec::GaussNoise { sigma }));
    v
}

/// Applies `spec`. Only noise consumes the seed.
pub fn apply(img: &ImagePlane, spec: &PerturbationSpec, seed: u64) -> Result<ImagePlane> {
    spec.validate()?;
    match *spec {
        PerturbationSpec::None => Ok(img.clone()),
        PerturbationSpec::Jpeg { qf } => jpeg_roundtrip(img, qf),
        PerturbationSpec::DoubleJpeg { qf1, qf2 } => jpeg_roundtrip(&jpeg_roundtrip(img, qf1)?, qf2),
        PerturbationSpec::Resize { percent, kernel } => {
            let (h, w) = resized_dims(img.dims(), percent);
            img.resize(h, w, kernel)
        }
        PerturbationSpec::GaussNoise { sigma } => Ok(gauss_noise(img, sigma, seed)),
    }
}

/// Dimensions after a percentage rescale, rounded to nearest, at least 1.
pub fn resized_dims((h, w): (usize, usize), percent: u32) -> (usize, usize) {
    let f = |n: usize| ((n as u64 * percent as u64 + 50) / 100).max(1) as usize;
    (f(h), f(w))
}

/// Ground truth matched to a perturbed image (nearest-neighbour for resizes).
pub fn apply_to_mask(mask: &BinaryMask, spec: &PerturbationSpec) -> Result<BinaryMask> {
    match *spec {
        PerturbationSpec::Resize { percent, .. } => {
            let (h, w) = resized_dims(mask.dims(), percent);
            mask.resize_nearest(h, w)
        }
        _ => Ok(mask.clone()),
    }
}

pub fn jpeg_encode(img: &ImagePlane, qf: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&qf) {
        return Err(Error::invalid(format!("JPEG quality {qf} outside 1..=100")));
    }
    let (h, w) = img.dims();
    let (h16, w16) = (
        u16::try_from(h).map_err(|_| Error::Unsupported(format!("JPEG height {h} too large")))?,
        u16::try_from(w).map_err(|_| Error::Unsupported(format!("JPEG width {w} too large")))?,
    );
    let color = match img.channels() {
        1 => jpeg_encoder::ColorType::Luma,
        3 => jpeg_encoder::ColorType::Rgb,
        c => return Err(Error::Unsupported(format!("JPEG of {c}-channel image"))),
    };
    let mut buf = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut buf, qf);
    enc.set_sampling_factor(if qf >= JPEG_FULL_CHROMA_QF {
        jpeg_encoder::SamplingFactor::R_4_4_4
    } else {
        jpeg_encoder::SamplingFactor::R_4_2_0
    });
    enc.encode(&img.to_u8(), w16, h16, color)
        .map_err(|e| Error::Jpeg(e.to_string()))?;
    Ok(buf)
}

pub fn jpeg_decode(bytes: &[u8]) -> Result<ImagePlane> {
    let mut reader = image::ImageReader::new(Cursor::new(bytes));
    reader.set_format(image::ImageFormat::Jpeg);
    ImagePlane::from_dynamic(&reader.decode()?)
}

pub fn jpeg_roundtrip(img: &ImagePlane, qf: u8) -> Result<ImagePlane> {
    jpeg_decode(&jpeg_encode(img, qf)?)
}

/// Adds `N(0, (sigma / 255)^2)` per sample and clamps to `[0, 1]`.
pub fn gauss_noise(img: &ImagePlane, sigma: f64, seed: u64) -> ImagePlane {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma / 255.0).expect("finite sigma");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Uniform `k x k` mean filter with mirrored borders. Even kernels extend one
/// pixel further up/left than down/right.
pub fn box_blur(img: &ImagePlane, k: usize) -> Result<ImagePlane> {
    if k == 0 {
        return Err(Error::invalid("box blur kernel must be positive"));
    }
    let (h, w) = img.dims();
    let c = img.channels();
    let lo = (k / 2) as isize;
    let norm = 1.0 / k as f32;
    let src = img.data();
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0f32;
                for d in 0..k as isize {
                    let sx = reflect101(x as isize + d - lo, w);
                    s += src[(y * w + sx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = s * norm;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for d in 0..k as isize {
            let sy = reflect101(y as isize + d - lo, h);
            let (dst, row) = (&mut out[y * w * c..(y + 1) * w * c], &tmp[sy * w * c..(sy + 1) * w * c]);
            for (o, &v) in dst.iter_mut().zip(row) {
                *o += v * norm;
            }
        }
    }
    ImagePlane::new(h, w, c, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Fraction of the hue circle.
    pub hue: f32,
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast, saturation and hue adjustments, in that order.
/// Saturation and hue are skipped on single-channel images.
pub fn color_jitter(img: &ImagePlane, j: &ColorJitter) -> ImagePlane {
    let mut out = img.clone();
    let c = out.channels();
    let data = out.data_mut();
    for v in data.iter_mut() {
        *v = (*v * j.brightness).clamp(0.0, 1.0);
    }
    let mean = if c == 3 {
        data.chunks(3).map(|p| luma(p[0], p[1], p[2]) as f64).sum::<f64>() / (data.len() / 3) as f64
    } else {
        data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64
    } as f32;
    for v in data.iter_mut() {
        *v = ((*v - mean) * j.contrast + mean).clamp(0.0, 1.0);
    }
    if c == 3 {
        for p in data.chunks_mut(3) {
            let g = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = ((*v - g) * j.saturation + g).clamp(0.0, 1.0);
            }
            if j.hue != 0.0 {
                let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
                let (r, g, b) = hsv_to_rgb((h + j.hue).rem_euclid(1.0), s, v);
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Probabilities of the four geometric branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricBranches {
    pub resized_crop: f64,
    pub crop: f64,
    pub resize: f64,
    pub upscale_crop: f64,
    /// Area fraction range of the resized crop.
    pub resized_crop_scale: (f64, f64),
    pub upscale_factors: Vec<usize>,
}

impl Default for GeometricBranches {
    fn default() -> Self {
        Self {
            resized_crop: 0.25,
            crop: 0.25,
            resize: 0.25,
            upscale_crop: 0.25,
            resized_crop_scale: (0.1, 1.0),
            upscale_factors: vec![2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub size: usize,
    pub hflip_p: f64,
    pub rotate90_p: f64,
    pub geometric: GeometricBranches,
    pub blur_p: f64,
    pub blur_kernels: Vec<usize>,
    pub noise_p: f64,
    /// Standard deviation range on the 8-bit scale.
    pub noise_sigma: (f64, f64),
    pub jitter_p: f64,
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub saturation: (f32, f32),
    pub hue: f32,
    pub jpeg_p: f64,
    pub jpeg_qf: (u8, u8),
    /// Probability of a second JPEG pass given that the first happened.
    pub second_jpeg_p: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            size: 504,
            hflip_p: 0.5,
            rotate90_p: 1.0,
            geometric: GeometricBranches::default(),
            blur_p: 0.1,
            blur_kernels: vec![3, 4, 5],
            noise_p: 0.1,
            noise_sigma: (0.2, 0.44),
            jitter_p: 0.1,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
            hue: 0.02,
            jpeg_p: 0.5,
            jpeg_qf: (40, 100),
            second_jpeg_p: 0.1,
        }
    }
}

impl AugmentationPolicy {
    /// Only a direct resize to `size`.
    pub fn resize_only(size: usize) -> Self {
        Self {
            size,
            hflip_p: 0.0,
            rotate90_p: 0.0,
            geometric: GeometricBranches {
                resized_crop: 0.0,
                crop: 0.0,
                resize: 1.0,
                upscale_crop: 0.0,
                ..GeometricBranches::default()
            },
            blur_p: 0.0,
            noise_p: 0.0,
            jitter_p: 0.0,
            jpeg_p: 0.0,
            second_jpeg_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.hflip_p,
            self.rotate90_p,
            self.blur_p,
            self.noise_p,
            self.jitter_p,
            self.jpeg_p,
            self.second_jpeg_p,
            self.geometric.resized_crop,
            self.geometric.crop,
            self.geometric.resize,
            self.geometric.upscale_crop,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let g = &self.geometric;
        let total = g.resized_crop + g.crop + g.resize + g.upscale_crop;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("geometric branch probabilities sum to {total}, not 1")));
        }
        let (s0, s1) = g.resized_crop_scale;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::Config("resized_crop_scale must satisfy 0 < lo <= hi <= 1".into()));
        }
        if g.upscale_crop > 0.0 && (g.upscale_factors.is_empty() || g.upscale_factors.contains(&0)) {
            return Err(Error::Config("upscale_factors must be non-empty and positive".into()));
        }
        if self.blur_p > 0.0 && (self.blur_kernels.is_empty() || self.blur_kernels.contains(&0)) {
            return Err(Error::Config("blur_kernels must be non-empty and positive".into()));
        }
        let (q0, q1) = self.jpeg_qf;
        if !(1 <= q0 && q0 <= q1 && q1 <= 100) {
            return Err(Error::Config("jpeg_qf must satisfy 1 <= lo <= hi <= 100".into()));
        }
        if self.size == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    ResizedCrop,
    Crop,
    Resize,
    UpscaleCrop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GeometricOp {
    /// Square crop of `side` at `(top, left)` resized to the output size.
    ResizedCrop { top: usize, left: usize, side: usize },
    Crop { top: usize, left: usize },
    Resize,
    /// Integer upscale, then an output-size crop at `(top, left)` in upscaled coordinates.
    UpscaleCrop { factor: usize, top: usize, left: usize },
}

/// Every random choice of one augmentation draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub size: usize,
    pub flip: bool,
    pub quarter_turns: u8,
    /// Branch drawn from the policy.
    pub branch: Branch,
    /// Operation executed; differs from `branch` when the source was too small.
    pub geometric: GeometricOp,
    pub blur: Option<usize>,
    pub noise: Option<(f64, u64)>,
    pub jitter: Option<ColorJitter>,
    pub jpeg: Option<u8>,
    pub jpeg2: Option<u8>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws an [`AugmentPlan`] for a source of size `dims`.
pub fn sample_plan(policy: &AugmentationPolicy, seed: u64, dims: (usize, usize)) -> Result<AugmentPlan> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = policy.size;
    let flip = rng.random_bool(policy.hflip_p);
    let quarter_turns = if rng.random_bool(policy.rotate90_p) {
        rng.random_range(0..4u8)
    } else {
        0
    };
    let (h, w) = if quarter_turns % 2 == 1 { (dims.1, dims.0) } else { dims };

    let g = &policy.geometric;
    let u: f64 = rng.random();
    let branch = if u < g.resized_crop {
        Branch::ResizedCrop
    } else if u < g.resized_crop + g.crop {
        Branch::Crop
    } else if u < g.resized_crop + g.crop + g.resize {
        Branch::Resize
    } else {
        Branch::UpscaleCrop
    };
    let geometric = match branch {
        Branch::ResizedCrop => {
            let (s0, s1) = g.resized_crop_scale;
            let scale = if s0 < s1 { rng.random_range(s0..s1) } else { s0 };
            let side = ((scale * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
            GeometricOp::ResizedCrop {
                top: rng.random_range(0..=h - side),
                left: rng.random_range(0..=w - side),
                side,
            }
        }
        Branch::Crop if h >= size && w >= size => GeometricOp::Crop {
            top: rng.random_range(0..=h - size),
            left: rng.random_range(0..=w - size),
        },
        Branch::UpscaleCrop => {
            let factor = g.upscale_factors[rng.random_range(0..g.upscale_factors.len())];
            if h * factor >= size && w * factor >= size {
                GeometricOp::UpscaleCrop {
                    factor,
                    top: rng.random_range(0..=h * factor - size),
                    left: rng.random_range(0..=w * factor - size),
                }
            } else {
                GeometricOp::Resize
            }
        }
        _ => GeometricOp::Resize,
    };
    if branch != Branch::Resize && geometric == GeometricOp::Resize {
        log::debug!("augment: {h}x{w} source too small for {branch:?}, resizing instead");
    }

    let blur = rng
        .random_bool(policy.blur_p)
        .then(|| policy.blur_kernels[rng.random_range(0..policy.blur_kernels.len())]);
    let noise = rng.random_bool(policy.noise_p).then(|| {
        let (a, b) = policy.noise_sigma;
        let sigma = if a < b { rng.random_range(a..b) } else { a };
        (sigma, rng.random())
    });
    let jitter = rng.random_bool(policy.jitter_p).then(|| ColorJitter {
        brightness: uniform(&mut rng, policy.brightness),
        contrast: uniform(&mut rng, policy.contrast),
        saturation: uniform(&mut rng, policy.saturation),
        hue: uniform(&mut rng, (-policy.hue, policy.hue)),
    });
    let (q0, q1) = policy.jpeg_qf;
    let jpeg = rng.random_bool(policy.jpeg_p).then(|| rng.random_range(q0..=q1));
    let jpeg2 = match jpeg {
        Some(_) if rng.random_bool(policy.second_jpeg_p) => Some(rng.random_range(q0..=q1)),
        _ => None,
    };
    Ok(AugmentPlan {
        size,
        flip,
        quarter_turns,
        branch,
        geometric,
        blur,
        noise,
        jitter,
        jpeg,
        jpeg2,
    })
}

/// Validation transform: centre crop (after upscaling sources whose short
/// side is below `size`), then JPEG at a uniform quality in 40..=100 with p=0.5.
pub fn validation_plan(seed: u64, dims: (usize, usize), size: usize) -> AugmentPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = dims;
    let geometric = if h >= size && w >= size {
        GeometricOp::Crop {
            top: (h - size) / 2,
            left: (w - size) / 2,
        }
    } else {
        GeometricOp::Resize
    };
    let jpeg = rng.random_bool(0.5).then(|| rng.random_range(40..=100u8));
    AugmentPlan {
        size,
        flip: false,
        quarter_turns: 0,
        branch: Branch::Crop,
        geometric,
        blur: None,
        noise: None,
        jitter: None,
        jpeg,
        jpeg2: None,
    }
}

impl AugmentPlan {
    /// Runs only the geometric part on an image, as [`execute`] would.
    pub fn geometry_image(&self, img: &ImagePlane) -> Result<ImagePlane> {
        let mut x = if self.flip { img.flip_horizontal() } else { img.clone() };
        if self.quarter_turns > 0 {
            x = x.rotate90(self.quarter_turns);
        }
        let s = self.size;
        match self.geometric {
            GeometricOp::ResizedCrop { top, left, side } => x.crop(top, left, side, side)?.resize(s, s, Kernel::Lanczos),
            GeometricOp::Crop { top, left } => x.crop(top, left, s, s),
            GeometricOp::Resize => x.resize(s, s, Kernel::Lanczos),
            GeometricOp::UpscaleCrop { factor, top, left } => {
                // Only the source region feeding the crop is upscaled. Integer
                // factors keep sample positions aligned with the full upscale.
                let (h, w) = x.dims();
                let margin = 4;
                let (y0, y1) = (top / factor, (top + s).div_ceil(factor));
                let (x0, x1) = (left / factor, (left + s).div_ceil(factor));
                let (ry0, ry1) = (y0.saturating_sub(margin), (y1 + margin).min(h));
                let (rx0, rx1) = (x0.saturating_sub(margin), (x1 + margin).min(w));
                let region = x.crop(ry0, rx0, ry1 - ry0, rx1 - rx0)?;
                let up = region.resize(region.height() * factor, region.width() * factor, Kernel::Lanczos)?;
                up.crop(top - ry0 * factor, left - rx0 * factor, s, s)
            }
        }
    }

    pub fn geometry_mask(&self, mask: &BinaryMask) -> Result<BinaryMask> {
        let mut m = if self.flip { mask.flip_horizontal() } else { mask.clone() };
        if self.quarter_turns > 0 {
            m = m.rotate90(self.quarter_turns);
        }
        let s = self.size;
        match self.geometric {
            GeometricOp::ResizedCrop { top, left, side } => m.crop(top, left, side, side)?.resize_nearest(s, s),
            GeometricOp::Crop { top, left } => m.crop(top, left, s, s),
            GeometricOp::Resize => m.resize_nearest(s, s),
            GeometricOp::UpscaleCrop { factor, top, left } => {
                let src = &m;
                Ok(BinaryMask::from_fn(s, s, |y, x| src.get((top + y) / factor, (left + x) / factor)))
            }
        }
    }
}

/// Executes a plan. Photometric stages touch only the image.
pub fn execute(plan: &AugmentPlan, img: &ImagePlane, mask: &BinaryMask) -> Result<(ImagePlane, BinaryMask)> {
    if img.dims() != mask.dims() {
        return Err(Error::structural(format!(
            "image {:?} and mask {:?} differ in size",
            img.dims(),
            mask.dims()
        )));
    }
    let mut x = plan.geometry_image(img)?;
    let m = plan.geometry_mask(mask)?;
    if let Some(k) = plan.blur {
        x = box_blur(&x, k)?;
    }
    if let Some((sigma, seed)) = plan.noise {
        x = gauss_noise(&x, sigma, seed);
    }
    if let Some(j) = &plan.jitter {
        x = color_jitter(&x, j);
    }
    if let Some(q) = plan.jpeg {
        x = jpeg_roundtrip(&x, q)?;
    }
    if let Some(q) = plan.jpeg2 {
        x = jpeg_roundtrip(&x, q)?;
    }
    Ok((x, m))
}

/// Samples and executes one augmentation draw.
pub fn augment(
    img: &ImagePlane,
    mask: &BinaryMask,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<(ImagePlane, BinaryMask)> {
    let plan = sample_plan(policy, seed, img.dims())?;
    execute(&plan, img, mask)
}

/// Peak signal-to-noise ratio in dB on the 8-bit scale.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::structural("psnr: image shapes differ"));
    }
    let (ua, ub) = (a.to_u8(), b.to_u8());
    let mse = ua
        .iter()
        .zip(&ub)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / ua.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    })
}
