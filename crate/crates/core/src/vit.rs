//! Reference Vision Transformer forward pass.
//!
//! Token layout is `[cls; registers; patches]`. Blocks are pre-norm:
//!
//! ```text
//! Z' = MSA(LN1(Z)) + Z
//! Z  = MLP(LN2(Z')) + Z'
//! ```
//!
//! Positional encodings are added to patch tokens only, before the first
//! block. All linear maps store weights as `(out, in)` row-major matrices and
//! compute `y = W x + b`.

use serde::{Deserialize, Serialize};

use crate::backend::{AttentionMaps, BackendDescriptor, EmbeddingBackend, EmbeddingGrid};
use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, FormatError, Result};
use crate::plane::{ImagePlane, PatchGridGeometry};

/// Architecture hyperparameters of a ViT backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub registers: usize,
    pub window: usize,
    pub mlp_hidden: usize,
    pub channels: usize,
    pub layer_norm_eps: f32,
}

impl ViTConfig {
    /// ViT-B/14 with four registers on 504 px windows.
    pub fn vit_b14_reg4() -> Self {
        Self {
            patch_size: 14,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            registers: 4,
            window: 504,
            mlp_hidden: 4 * 768,
            channels: 3,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn geometry(&self) -> PatchGridGeometry {
        PatchGridGeometry {
            patch_size: self.patch_size,
            grid_h: self.window / self.patch_size,
            grid_w: self.window / self.patch_size,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.geometry().num_patches()
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.registers + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.window == 0 || self.window % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "window {} not a multiple of patch size {}",
                self.window, self.patch_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {}", self.channels)));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::invalid("mlp hidden width must be positive"));
        }
        Ok(())
    }

    fn write_meta(&self, c: &mut TensorContainer) {
        c.set_meta("patch_size", self.patch_size);
        c.set_meta("embed_dim", self.embed_dim);
        c.set_meta("depth", self.depth);
        c.set_meta("heads", self.heads);
        c.set_meta("registers", self.registers);
        c.set_meta("window", self.window);
        c.set_meta("mlp_hidden", self.mlp_hidden);
        c.set_meta("channels", self.channels);
        c.set_meta("layer_norm_eps", self.layer_norm_eps as f64);
    }

    fn read_meta(c: &TensorContainer) -> Result<Self> {
        let eps = c
            .metadata
            .get("layer_norm_eps")
            .and_then(|v| v.as_f64())
            .unwrap_or(1e-6) as f32;
        let cfg = Self {
            patch_size: c.meta_usize("patch_size")?,
            embed_dim: c.meta_usize("embed_dim")?,
            depth: c.meta_usize("depth")?,
            heads: c.meta_usize("heads")?,
            registers: c.meta_usize("registers")?,
            window: c.meta_usize("window")?,
            mlp_hidden: c.meta_usize("mlp_hidden")?,
            channels: c.meta_usize("channels").unwrap_or(3),
            layer_norm_eps: eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Image-level classifier applied to the final CLS token.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageClassifier {
    /// `classes x D`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ImageClassifier {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Softmax class probabilities for a CLS embedding.
    pub fn probabilities(&self, cls: &[f32]) -> Result<Vec<f32>> {
        let k = self.classes();
        if k == 0 || self.weight.len() != k * cls.len() {
            return Err(Error::structural(format!(
                "classifier {}x? does not match CLS dimension {}",
                k,
                cls.len()
            )));
        }
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                let row = &self.weight[j * cls.len()..(j + 1) * cls.len()];
                row.iter().zip(cls).map(|(w, z)| *w as f64 * *z as f64).sum::<f64>()
                    + self.bias[j] as f64
            })
            .collect();
        Ok(softmax64(&logits).into_iter().map(|p| p as f32).collect())
    }
}

pub(crate) fn softmax64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_w: Vec<f32>,
    pub ln1_b: Vec<f32>,
    /// `D x D`, heads stacked along the output dimension.
    pub q_w: Vec<f32>,
    pub q_b: Vec<f32>,
    pub k_w: Vec<f32>,
    pub k_b: Vec<f32>,
    pub v_w: Vec<f32>,
    pub v_b: Vec<f32>,
    /// Output projection, `D x D`.
    pub o_w: Vec<f32>,
    pub o_b: Vec<f32>,
    pub ln2_w: Vec<f32>,
    pub ln2_b: Vec<f32>,
    /// `hidden x D`
    pub fc1_w: Vec<f32>,
    pub fc1_b: Vec<f32>,
    /// `D x hidden`
    pub fc2_w: Vec<f32>,
    pub fc2_b: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTWeights {
    /// `D x (p * p * C)`, columns in (row, col, channel) order.
    pub patch_w: Vec<f32>,
    pub patch_b: Vec<f32>,
    /// `N x D`
    pub pos_embed: Vec<f32>,
    pub cls_token: Vec<f32>,
    /// `r x D`
    pub register_tokens: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Option<(Vec<f32>, Vec<f32>)>,
    pub classifier: Option<ImageClassifier>,
}

impl ViTWeights {
    /// All-zero weights with unit LayerNorm scales.
    pub fn zeros(cfg: &ViTConfig) -> Self {
        Self::init(cfg, |_| 0.0)
    }

    /// Gaussian initialization with std `0.02` (LayerNorm scales at 1), seeded.
    pub fn random(cfg: &ViTConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        Self::init(cfg, move |_| normal.sample(&mut rng))
    }

    fn init(cfg: &ViTConfig, mut f: impl FnMut(usize) -> f32) -> Self {
        let d = cfg.embed_dim;
        let hid = cfg.mlp_hidden;
        let mut v = |n: usize| (0..n).map(&mut f).collect::<Vec<f32>>();
        let patch_w = v(d * cfg.patch_dim());
        let patch_b = v(d);
        let pos_embed = v(cfg.num_patches() * d);
        let cls_token = v(d);
        let register_tokens = v(cfg.registers * d);
        let layers = (0..cfg.depth)
            .map(|_| LayerWeights {
                ln1_w: vec![1.0; d],
                ln1_b: v(d),
                q_w: v(d * d),
                q_b: v(d),
                k_w: v(d * d),
                k_b: v(d),
                v_w: v(d * d),
                v_b: v(d),
                o_w: v(d * d),
                o_b: v(d),
                ln2_w: vec![1.0; d],
                ln2_b: v(d),
                fc1_w: v(hid * d),
                fc1_b: v(hid),
                fc2_w: v(d * hid),
                fc2_b: v(d),
            })
            .collect();
        Self {
            patch_w,
            patch_b,
            pos_embed,
            cls_token,
            register_tokens,
            layers,
            final_norm: None,
            classifier: None,
        }
    }

    /// Serializes into the interchange container.
    pub fn to_container(&self, cfg: &ViTConfig) -> Result<TensorContainer> {
        self.validate(cfg)?;
        let d = cfg.embed_dim;
        let hid = cfg.mlp_hidden;
        let mut c = TensorContainer::new();
        c.set_meta("kind", "vit-weights");
        cfg.write_meta(&mut c);
        let mut put = |name: String, shape: Vec<usize>, data: &[f32]| {
            c.insert(name, Tensor::new(shape, data.to_vec()).expect("validated"));
        };
        put("patch_embed.weight".into(), vec![d, cfg.patch_dim()], &self.patch_w);
        put("patch_embed.bias".into(), vec![d], &self.patch_b);
        put("pos_embed".into(), vec![cfg.num_patches(), d], &self.pos_embed);
        put("cls_token".into(), vec![d], &self.cls_token);
        put("register_tokens".into(), vec![cfg.registers, d], &self.register_tokens);
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            put(p("norm1.weight"), vec![d], &l.ln1_w);
            put(p("norm1.bias"), vec![d], &l.ln1_b);
            put(p("attn.q.weight"), vec![d, d], &l.q_w);
            put(p("attn.q.bias"), vec![d], &l.q_b);
            put(p("attn.k.weight"), vec![d, d], &l.k_w);
            put(p("attn.k.bias"), vec![d], &l.k_b);
            put(p("attn.v.weight"), vec![d, d], &l.v_w);
            put(p("attn.v.bias"), vec![d], &l.v_b);
            put(p("attn.proj.weight"), vec![d, d], &l.o_w);
            put(p("attn.proj.bias"), vec![d], &l.o_b);
            put(p("norm2.weight"), vec![d], &l.ln2_w);
            put(p("norm2.bias"), vec![d], &l.ln2_b);
            put(p("mlp.fc1.weight"), vec![hid, d], &l.fc1_w);
            put(p("mlp.fc1.bias"), vec![hid], &l.fc1_b);
            put(p("mlp.fc2.weight"), vec![d, hid], &l.fc2_w);
            put(p("mlp.fc2.bias"), vec![d], &l.fc2_b);
        }
        if let Some((w, b)) = &self.final_norm {
            put("final_norm.weight".into(), vec![d], w);
            put("final_norm.bias".into(), vec![d], b);
        }
        if let Some(cls) = &self.classifier {
            put("classifier.weight".into(), vec![cls.classes(), d], &cls.weight);
            put("classifier.bias".into(), vec![cls.classes()], &cls.bias);
        }
        Ok(c)
    }

    /// Reads weights, checking every tensor against the configuration.
    pub fn from_container(c: &TensorContainer) -> Result<(ViTConfig, ViTWeights)> {
        if let Some(kind) = c.meta_str("kind") {
            if kind != "vit-weights" {
                return Err(FormatError::Manifest(format!("expected vit-weights, found {kind:?}")).into());
            }
        }
        let cfg = ViTConfig::read_meta(c)?;
        let d = cfg.embed_dim;
        let hid = cfg.mlp_hidden;
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            Ok(c.require(name, shape)?.data.clone())
        };
        let patch_w = get("patch_embed.weight", &[d, cfg.patch_dim()])?;
        let patch_b = get("patch_embed.bias", &[d])?;
        let pos_embed = get("pos_embed", &[cfg.num_patches(), d])?;
        let cls_token = get("cls_token", &[d])?;
        let register_tokens = get("register_tokens", &[cfg.registers, d])?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let g = |s: &str, shape: &[usize]| get(&format!("blocks.{i}.{s}"), shape);
            layers.push(LayerWeights {
                ln1_w: g("norm1.weight", &[d])?,
                ln1_b: g("norm1.bias", &[d])?,
                q_w: g("attn.q.weight", &[d, d])?,
                q_b: g("attn.q.bias", &[d])?,
                k_w: g("attn.k.weight", &[d, d])?,
                k_b: g("attn.k.bias", &[d])?,
                v_w: g("attn.v.weight", &[d, d])?,
                v_b: g("attn.v.bias", &[d])?,
                o_w: g("attn.proj.weight", &[d, d])?,
                o_b: g("attn.proj.bias", &[d])?,
                ln2_w: g("norm2.weight", &[d])?,
                ln2_b: g("norm2.bias", &[d])?,
                fc1_w: g("mlp.fc1.weight", &[hid, d])?,
                fc1_b: g("mlp.fc1.bias", &[hid])?,
                fc2_w: g("mlp.fc2.weight", &[d, hid])?,
                fc2_b: g("mlp.fc2.bias", &[d])?,
            });
        }
        let final_norm = match (c.optional("final_norm.weight", &[d])?, c.optional("final_norm.bias", &[d])?) {
            (Some(w), Some(b)) => Some((w.data.clone(), b.data.clone())),
            (None, None) => None,
            _ => return Err(FormatError::MissingTensor("final_norm.weight/bias pair".into()).into()),
        };
        let classifier = match c.get("classifier.bias") {
            None => None,
            Some(b) => {
                let k = b.numel();
                let w = c.require("classifier.weight", &[k, d])?;
                Some(ImageClassifier {
                    weight: w.data.clone(),
                    bias: b.data.clone(),
                })
            }
        };
        let weights = ViTWeights {
            patch_w,
            patch_b,
            pos_embed,
            cls_token,
            register_tokens,
            layers,
            final_norm,
            classifier,
        };
        weights.validate(&cfg)?;
        Ok((cfg, weights))
    }

    /// Checks every tensor length against `cfg`, naming the first offender.
    pub fn validate(&self, cfg: &ViTConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hid = cfg.mlp_hidden;
        let check = |name: String, v: &[f32], n: usize| -> Result<()> {
            if v.len() != n {
                return Err(Error::structural(format!(
                    "tensor {name}: expected {n} values, found {}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::structural(format!("tensor {name} has non-finite values")));
            }
            Ok(())
        };
        check("patch_embed.weight".into(), &self.patch_w, d * cfg.patch_dim())?;
        check("patch_embed.bias".into(), &self.patch_b, d)?;
        check("pos_embed".into(), &self.pos_embed, cfg.num_patches() * d)?;
        check("cls_token".into(), &self.cls_token, d)?;
        check("register_tokens".into(), &self.register_tokens, cfg.registers * d)?;
        if self.layers.len() != cfg.depth {
            return Err(Error::structural(format!(
                "expected {} blocks, found {}",
                cfg.depth,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            check(n("norm1.weight"), &l.ln1_w, d)?;
            check(n("norm1.bias"), &l.ln1_b, d)?;
            check(n("attn.q.weight"), &l.q_w, d * d)?;
            check(n("attn.q.bias"), &l.q_b, d)?;
            check(n("attn.k.weight"), &l.k_w, d * d)?;
            check(n("attn.k.bias"), &l.k_b, d)?;
            check(n("attn.v.weight"), &l.v_w, d * d)?;
            check(n("attn.v.bias"), &l.v_b, d)?;
            check(n("attn.proj.weight"), &l.o_w, d * d)?;
            check(n("attn.proj.bias"), &l.o_b, d)?;
            check(n("norm2.weight"), &l.ln2_w, d)?;
            check(n("norm2.bias"), &l.ln2_b, d)?;
            check(n("mlp.fc1.weight"), &l.fc1_w, hid * d)?;
            check(n("mlp.fc1.bias"), &l.fc1_b, hid)?;
            check(n("mlp.fc2.weight"), &l.fc2_w, d * hid)?;
            check(n("mlp.fc2.bias"), &l.fc2_b, d)?;
        }
        if let Some((w, b)) = &self.final_norm {
            check("final_norm.weight".into(), w, d)?;
            check("final_norm.bias".into(), b, d)?;
        }
        if let Some(c) = &self.classifier {
            check("classifier.weight".into(), &c.weight, c.classes() * d)?;
        }
        Ok(())
    }
}

/// Writes a config and its weights to an interchange file.
pub fn save_weights(cfg: &ViTConfig, w: &ViTWeights, path: impl AsRef<std::path::Path>) -> Result<()> {
    w.to_container(cfg)?.save(path)
}

pub fn load_weights(path: impl AsRef<std::path::Path>) -> Result<(ViTConfig, ViTWeights)> {
    let path = path.as_ref();
    ViTWeights::from_container(&TensorContainer::open(path)?).map_err(|e| e.with_path(path))
}

/// Splits an image into flattened `p x p` patches in row-major patch order.
/// Each vector is laid out as (row, col, channel).
pub fn patchify(img: &ImagePlane, p: usize) -> Result<Vec<Vec<f32>>> {
    let (h, w) = img.dims();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let c = img.channels();
    let data = img.data();
    let mut out = Vec::with_capacity((h / p) * (w / p));
    for py in 0..h / p {
        for px in 0..w / p {
            let mut v = Vec::with_capacity(p * p * c);
            for dy in 0..p {
                let row = ((py * p + dy) * w + px * p) * c;
                v.extend_from_slice(&data[row..row + p * c]);
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// `y[rows x out] = x[rows x in] * W^T + b`, with `W` stored `(out, in)`.
fn linear(x: &[f32], rows: usize, inp: usize, w: &[f32], b: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0f32; rows * out];
    for r in 0..rows {
        y[r * out..(r + 1) * out].copy_from_slice(b);
    }
    // SAFETY: slice lengths match the declared matrix extents.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            inp,
            out,
            1.0,
            x.as_ptr(),
            inp as isize,
            1,
            w.as_ptr(),
            1,
            inp as isize,
            1.0,
            y.as_mut_ptr(),
            out as isize,
            1,
        );
    }
    y
}

fn layer_norm(x: &[f32], dim: usize, gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for (row, o) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / dim as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for i in 0..dim {
            o[i] = ((row[i] as f64 - mean) * inv) as f32 * gamma[i] + beta[i];
        }
    }
    out
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

/// Derivative of the exact GELU.
#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
    cdf + x * pdf
}

/// A ViT with loaded weights; the reference [`EmbeddingBackend`].
#[derive(Clone, Debug)]
pub struct ReferenceVit {
    config: ViTConfig,
    weights: ViTWeights,
    provenance: String,
}

impl ReferenceVit {
    pub fn new(config: ViTConfig, weights: ViTWeights) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Self {
            config,
            weights,
            provenance: "in-memory weights".into(),
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let (config, weights) = load_weights(path)?;
        Ok(Self {
            config,
            weights,
            provenance: format!("vit-weights:{}", path.display()),
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn weights(&self) -> &ViTWeights {
        &self.weights
    }

    /// Runs the backbone on one window.
    pub fn forward(&self, img: &ImagePlane, want_attention: bool) -> Result<EmbeddingGrid> {
        forward(img, &self.config, &self.weights, want_attention)
    }
}

/// Runs the backbone on a `window x window` image.
pub fn forward(
    img: &ImagePlane,
    cfg: &ViTConfig,
    w: &ViTWeights,
    want_attention: bool,
) -> Result<EmbeddingGrid> {
    if img.dims() != (cfg.window, cfg.window) {
        return Err(Error::invalid(format!(
            "input {:?} does not match window {}",
            img.dims(),
            cfg.window
        )));
    }
    if img.channels() != cfg.channels {
        return Err(Error::structural(format!(
            "input has {} channels, backbone expects {}",
            img.channels(),
            cfg.channels
        )));
    }
    let d = cfg.embed_dim;
    let r = cfg.registers;
    let n = cfg.num_patches();
    let t = cfg.num_tokens();
    let hd = cfg.head_dim();
    let nh = cfg.heads;
    let eps = cfg.layer_norm_eps;

    let patches: Vec<f32> = patchify(img, cfg.patch_size)?.concat();
    let embedded = linear(&patches, n, cfg.patch_dim(), &w.patch_w, &w.patch_b, d);

    let mut z = Vec::with_capacity(t * d);
    z.extend_from_slice(&w.cls_token);
    z.extend_from_slice(&w.register_tokens);
    for (e, p) in embedded.iter().zip(&w.pos_embed) {
        z.push(e + p);
    }

    let scale = 1.0 / (hd as f32).sqrt();
    let mut last_attention = None;
    for (li, layer) in w.layers.iter().enumerate() {
        let h1 = layer_norm(&z, d, &layer.ln1_w, &layer.ln1_b, eps);
        let q = linear(&h1, t, d, &layer.q_w, &layer.q_b, d);
        let k = linear(&h1, t, d, &layer.k_w, &layer.k_b, d);
        let v = linear(&h1, t, d, &layer.v_w, &layer.v_b, d);
        let keep = want_attention && li + 1 == w.layers.len();
        let mut probs_all = if keep { vec![0f32; nh * t * t] } else { Vec::new() };
        let mut heads_out = vec![0f32; t * d];
        let mut probs = vec![0f32; t * t];
        for m in 0..nh {
            // SAFETY: strided views stay within q, k (t x d) and probs (t x t).
            unsafe {
                matrixmultiply::sgemm(
                    t,
                    hd,
                    t,
                    scale,
                    q.as_ptr().add(m * hd),
                    d as isize,
                    1,
                    k.as_ptr().add(m * hd),
                    1,
                    d as isize,
                    0.0,
                    probs.as_mut_ptr(),
                    t as isize,
                    1,
                );
            }
            for row in probs.chunks_exact_mut(t) {
                softmax_in_place(row);
            }
            // SAFETY: probs is t x t, v and heads_out are t x d with head offset.
            unsafe {
                matrixmultiply::sgemm(
                    t,
                    t,
                    hd,
                    1.0,
                    probs.as_ptr(),
                    t as isize,
                    1,
                    v.as_ptr().add(m * hd),
                    d as isize,
                    1,
                    0.0,
                    heads_out.as_mut_ptr().add(m * hd),
                    d as isize,
                    1,
                );
            }
            if keep {
                probs_all[m * t * t..(m + 1) * t * t].copy_from_slice(&probs);
            }
        }
        let attn = linear(&heads_out, t, d, &layer.o_w, &layer.o_b, d);
        for (zi, a) in z.iter_mut().zip(&attn) {
            *zi += a;
        }
        let h2 = layer_norm(&z, d, &layer.ln2_w, &layer.ln2_b, eps);
        let mut hidden = linear(&h2, t, d, &layer.fc1_w, &layer.fc1_b, cfg.mlp_hidden);
        for v in &mut hidden {
            *v = gelu(*v);
        }
        let mlp = linear(&hidden, t, cfg.mlp_hidden, &layer.fc2_w, &layer.fc2_b, d);
        for (zi, m) in z.iter_mut().zip(&mlp) {
            *zi += m;
        }
        if keep {
            last_attention = Some(AttentionMaps::new(nh, t, probs_all)?);
        }
    }
    if want_attention && last_attention.is_none() {
        return Err(Error::Unsupported("attention requested from a zero-depth backbone".into()));
    }
    if let Some((g, b)) = &w.final_norm {
        z = layer_norm(&z, d, g, b, eps);
    }

    let cls = z[..d].to_vec();
    let registers = z[d..(1 + r) * d].to_vec();
    let patches = z[(1 + r) * d..].to_vec();
    EmbeddingGrid::new(cfg.geometry(), d, cls, r, registers, patches, last_attention)
}

fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0f64;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v as f64;
    }
    let inv = (1.0 / s) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax class probabilities from the final CLS token.
pub fn classify_image(grid: &EmbeddingGrid, w: &ViTWeights) -> Result<Vec<f32>> {
    let cls = w
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Unsupported("weights carry no image classifier".into()))?;
    cls.probabilities(&grid.cls)
}

impl EmbeddingBackend for ReferenceVit {
    fn embed(&self, window: &ImagePlane, want_attention: bool) -> Result<EmbeddingGrid> {
        self.forward(window, want_attention)
    }

    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            window: self.config.window,
            patch_size: self.config.patch_size,
            embed_dim: self.config.embed_dim,
            heads: self.config.heads,
            registers: self.config.registers,
            provenance: self.provenance.clone(),
        }
    }
}
