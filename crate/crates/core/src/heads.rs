//! Patch-level decision heads and the Dice objective.
//!
//! Every head maps an [`EmbeddingGrid`] to one logit per patch; a patch is
//! called forged when its logit is positive. The probability view of a logit
//! is its sigmoid (the single-logit form of a two-class softmax).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingGrid;
use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, FormatError, Result};
use crate::plane::{FloatPlane, PatchGridGeometry};
use crate::vit::{gelu, gelu_grad, ImageClassifier};

/// Probability clamp used when turning scaled attention scores into logits.
pub const ATTENTION_CLAMP: f64 = 1e-6;

/// Smoothing constant of the training loss.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Vec<f32>,
    pub bias: f32,
}

impl LinearHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Head whose logit is the `k`-th embedding coordinate.
    pub fn unit(dim: usize, k: usize) -> Self {
        let mut weight = vec![0.0; dim];
        weight[k] = 1.0;
        Self { weight, bias: 0.0 }
    }

    /// Reduces a two-class image classifier to a single-logit patch head:
    /// `w = W[positive] - W[other]`, `b = b[positive] - b[other]`.
    pub fn from_image_classifier(c: &ImageClassifier, positive: usize) -> Result<Self> {
        if c.classes() != 2 || positive > 1 {
            return Err(Error::Unsupported(format!(
                "only two-class classifiers reduce to a patch head (got {} classes)",
                c.classes()
            )));
        }
        let d = c.weight.len() / 2;
        let other = 1 - positive;
        let weight = (0..d)
            .map(|i| c.weight[positive * d + i] - c.weight[other * d + i])
            .collect();
        Ok(Self {
            weight,
            bias: c.bias[positive] - c.bias[other],
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }
}

/// Two-layer perceptron with hidden width equal to the embedding dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    /// `D x D`
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: f32,
}

impl MlpHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w1: vec![0.0; dim * dim],
            b1: vec![0.0; dim],
            w2: vec![0.0; dim],
            b2: 0.0,
        }
    }

    /// Small seeded Gaussian initialization (std `1/sqrt(D)` for the first layer).
    pub fn random(dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0f32, 1.0 / (dim as f32).sqrt()).expect("std > 0");
        let n2 = Normal::new(0.0f32, 0.01).expect("std > 0");
        Self {
            w1: (0..dim * dim).map(|_| n1.sample(&mut rng)).collect(),
            b1: vec![0.0; dim],
            w2: (0..dim).map(|_| n2.sample(&mut rng)).collect(),
            b2: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b1.len()
    }

    fn hidden_pre(&self, z: &[f32]) -> Vec<f32> {
        let d = self.dim();
        (0..d)
            .map(|j| {
                let row = &self.w1[j * d..(j + 1) * d];
                row.iter().zip(z).map(|(w, x)| w * x).sum::<f32>() + self.b1[j]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Average,
    Weighted,
}

/// Scores patches by a weighted sum of the CLS row of the last-layer attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub mode: AttentionMode,
    pub weights: Vec<f32>,
}

impl AttentionHead {
    /// Uniform `1/h` weights; needs no training.
    pub fn average(heads: usize) -> Self {
        Self {
            mode: AttentionMode::Average,
            weights: vec![1.0 / heads as f32; heads],
        }
    }

    pub fn weighted(weights: Vec<f32>) -> Self {
        Self {
            mode: AttentionMode::Weighted,
            weights,
        }
    }
}

/// One pre-sigmoid logit per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLogitGrid {
    pub geometry: PatchGridGeometry,
    pub logits: Vec<f32>,
}

impl PatchLogitGrid {
    pub fn probabilities(&self) -> Vec<f32> {
        self.logits.iter().map(|&l| sigmoid(l as f64) as f32).collect()
    }

    /// Block replication to pixel resolution: pixel `(y, x)` takes the logit
    /// of patch `(y / p, x / p)`.
    pub fn upsample(&self) -> FloatPlane {
        upsample_logits(self)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadVariant {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "attn-avg")]
    AttentionAverage,
    #[serde(rename = "attn-w")]
    AttentionWeighted,
}

impl HeadVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Linear => "linear",
            HeadVariant::Mlp => "mlp",
            HeadVariant::AttentionAverage => "attn-avg",
            HeadVariant::AttentionWeighted => "attn-w",
        }
    }
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadVariant::Linear),
            "mlp" => Ok(HeadVariant::Mlp),
            "attn-avg" => Ok(HeadVariant::AttentionAverage),
            "attn-w" => Ok(HeadVariant::AttentionWeighted),
            other => Err(Error::invalid(format!(
                "unknown head variant {other:?} (expected linear, mlp, attn-avg, attn-w)"
            ))),
        }
    }
}

impl std::fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear(LinearHead),
    Mlp(MlpHead),
    Attention(AttentionHead),
}

/// Intermediate values kept by [`Head::forward_probs`] for the backward pass.
#[derive(Clone, Debug)]
pub enum HeadCache {
    Linear,
    Mlp { pre: Vec<f32> },
    Attention(Option<AttnScaling>),
    /// Min-max range was degenerate; output is constant and carries no gradient.
    Degenerate,
}

#[derive(Clone, Debug)]
pub struct AttnScaling {
    scores: Vec<f64>,
    imin: usize,
    imax: usize,
}

impl Head {
    pub fn variant(&self) -> HeadVariant {
        match self {
            Head::Linear(_) => HeadVariant::Linear,
            Head::Mlp(_) => HeadVariant::Mlp,
            Head::Attention(a) if a.mode == AttentionMode::Average => HeadVariant::AttentionAverage,
            Head::Attention(_) => HeadVariant::AttentionWeighted,
        }
    }

    /// Fresh head of the given variant. `dim` is the embedding width, `heads`
    /// the backbone's attention head count.
    pub fn init(variant: HeadVariant, dim: usize, heads: usize, seed: u64) -> Self {
        match variant {
            HeadVariant::Linear => Head::Linear(LinearHead::zeros(dim)),
            HeadVariant::Mlp => Head::Mlp(MlpHead::random(dim, seed)),
            HeadVariant::AttentionAverage => Head::Attention(AttentionHead::average(heads)),
            HeadVariant::AttentionWeighted => Head::Attention(AttentionHead::weighted(vec![1.0 / heads as f32; heads])),
        }
    }

    pub fn needs_attention(&self) -> bool {
        matches!(self, Head::Attention(_))
    }

    pub fn param_count(&self) -> usize {
        match self {
            Head::Linear(h) => h.weight.len() + 1,
            Head::Mlp(h) => h.w1.len() + h.b1.len() + h.w2.len() + 1,
            Head::Attention(h) => h.weights.len(),
        }
    }

    /// Embedding width this head expects, when it reads embeddings.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Head::Linear(h) => Some(h.dim()),
            Head::Mlp(h) => Some(h.dim()),
            Head::Attention(_) => None,
        }
    }

    /// Flattened parameters in a fixed order.
    pub fn params(&self) -> Vec<f32> {
        match self {
            Head::Linear(h) => {
                let mut v = h.weight.clone();
                v.push(h.bias);
                v
            }
            Head::Mlp(h) => {
                let mut v = h.w1.clone();
                v.extend_from_slice(&h.b1);
                v.extend_from_slice(&h.w2);
                v.push(h.b2);
                v
            }
            Head::Attention(h) => h.weights.clone(),
        }
    }

    pub fn set_params(&mut self, p: &[f32]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::structural(format!(
                "{} parameters for a head with {}",
                p.len(),
                self.param_count()
            )));
        }
        match self {
            Head::Linear(h) => {
                let d = h.weight.len();
                h.weight.copy_from_slice(&p[..d]);
                h.bias = p[d];
            }
            Head::Mlp(h) => {
                let d = h.dim();
                h.w1.copy_from_slice(&p[..d * d]);
                h.b1.copy_from_slice(&p[d * d..d * d + d]);
                h.w2.copy_from_slice(&p[d * d + d..d * d + 2 * d]);
                h.b2 = p[d * d + 2 * d];
            }
            Head::Attention(h) => h.weights.copy_from_slice(p),
        }
        Ok(())
    }

    pub fn logits(&self, grid: &EmbeddingGrid) -> Result<PatchLogitGrid> {
        match self {
            Head::Linear(h) => linear_logits(grid, h),
            Head::Mlp(h) => mlp_logits(grid, h),
            Head::Attention(h) => attention_logits(grid, h),
        }
    }

    /// Per-patch probabilities plus the cache needed by [`Head::backward`].
    pub fn forward_probs(&self, grid: &EmbeddingGrid) -> Result<(Vec<f64>, HeadCache)> {
        match self {
            Head::Linear(h) => {
                let l = linear_logits(grid, h)?;
                Ok((l.logits.iter().map(|&v| sigmoid(v as f64)).collect(), HeadCache::Linear))
            }
            Head::Mlp(h) => {
                check_dim(grid, h.dim())?;
                let n = grid.num_patches();
                let d = h.dim();
                let mut pre = Vec::with_capacity(n * d);
                let mut probs = Vec::with_capacity(n);
                for i in 0..n {
                    let a = h.hidden_pre(grid.patch(i));
                    let logit = a.iter().zip(&h.w2).map(|(&x, w)| gelu(x) * w).sum::<f32>() + h.b2;
                    probs.push(sigmoid(logit as f64));
                    pre.extend(a);
                }
                Ok((probs, HeadCache::Mlp { pre }))
            }
            Head::Attention(h) => {
                let scores = attention_scores(grid, h)?;
                match minmax(&scores) {
                    None => Ok((vec![0.5; scores.len()], HeadCache::Degenerate)),
                    Some((imin, imax)) => {
                        let (lo, hi) = (scores[imin], scores[imax]);
                        let probs = scores
                            .iter()
                            .map(|s| ((s - lo) / (hi - lo)).clamp(ATTENTION_CLAMP, 1.0 - ATTENTION_CLAMP))
                            .collect();
                        Ok((probs, HeadCache::Attention(Some(AttnScaling { scores, imin, imax }))))
                    }
                }
            }
        }
    }

    /// Chains `dL/dp` (per patch) back to the flattened parameter gradient.
    pub fn backward(&self, grid: &EmbeddingGrid, probs: &[f64], cache: &HeadCache, dl_dp: &[f64]) -> Result<Vec<f64>> {
        let n = grid.num_patches();
        if probs.len() != n || dl_dp.len() != n {
            return Err(Error::structural("backward: per-patch vectors do not match grid"));
        }
        let mut grad = vec![0f64; self.param_count()];
        match (self, cache) {
            (Head::Linear(h), HeadCache::Linear) => {
                let d = h.dim();
                for i in 0..n {
                    let dl = dl_dp[i] * probs[i] * (1.0 - probs[i]);
                    for (g, &z) in grad[..d].iter_mut().zip(grid.patch(i)) {
                        *g += dl * z as f64;
                    }
                    grad[d] += dl;
                }
            }
            (Head::Mlp(h), HeadCache::Mlp { pre }) => {
                let d = h.dim();
                let (gw1, rest) = grad.split_at_mut(d * d);
                let (gb1, rest) = rest.split_at_mut(d);
                let (gw2, gb2) = rest.split_at_mut(d);
                for i in 0..n {
                    let dl = dl_dp[i] * probs[i] * (1.0 - probs[i]);
                    if dl == 0.0 {
                        continue;
                    }
                    let a = &pre[i * d..(i + 1) * d];
                    let z = grid.patch(i);
                    gb2[0] += dl;
                    for j in 0..d {
                        gw2[j] += dl * gelu(a[j]) as f64;
                        let da = dl * h.w2[j] as f64 * gelu_grad(a[j]) as f64;
                        gb1[j] += da;
                        let row = &mut gw1[j * d..(j + 1) * d];
                        for (g, &x) in row.iter_mut().zip(z) {
                            *g += da * x as f64;
                        }
                    }
                }
            }
            (Head::Attention(h), HeadCache::Attention(Some(s))) => {
                let att = grid.attention.as_ref().expect("forward checked attention");
                let first = grid.first_patch_token();
                let m = h.weights.len();
                let alpha = |head: usize, i: usize| att.row(head, 0)[first + i] as f64;
                let (lo, hi) = (s.scores[s.imin], s.scores[s.imax]);
                let range = hi - lo;
                for i in 0..n {
                    let x = (s.scores[i] - lo) / range;
                    if !(ATTENTION_CLAMP..=1.0 - ATTENTION_CLAMP).contains(&x) {
                        continue;
                    }
                    for (k, g) in grad.iter_mut().enumerate().take(m) {
                        let dmin = alpha(k, s.imin);
                        let dnum = alpha(k, i) - dmin;
                        let dran = alpha(k, s.imax) - dmin;
                        *g += dl_dp[i] * (dnum * range - (s.scores[i] - lo) * dran) / (range * range);
                    }
                }
            }
            (Head::Attention(_), HeadCache::Degenerate) => {}
            _ => return Err(Error::structural("head cache does not match head variant")),
        }
        Ok(grad)
    }

    pub fn to_container(&self, provenance: &HeadProvenance) -> TensorContainer {
        let mut c = TensorContainer::new();
        let v = self.variant().as_str();
        c.set_meta("kind", "head");
        c.set_meta("variant", v);
        c.set_meta("provenance", serde_json::to_value(provenance).expect("serializable"));
        let mut put = |param: &str, shape: Vec<usize>, data: Vec<f32>| {
            c.insert(format!("head/{v}/{param}"), Tensor::new(shape, data).expect("consistent"));
        };
        match self {
            Head::Linear(h) => {
                put("weight", vec![h.dim()], h.weight.clone());
                put("bias", vec![1], vec![h.bias]);
            }
            Head::Mlp(h) => {
                let d = h.dim();
                put("w1", vec![d, d], h.w1.clone());
                put("b1", vec![d], h.b1.clone());
                put("w2", vec![d], h.w2.clone());
                put("b2", vec![1], vec![h.b2]);
            }
            Head::Attention(h) => put("weights", vec![h.weights.len()], h.weights.clone()),
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<(Head, HeadProvenance)> {
        if c.meta_str("kind") != Some("head") {
            return Err(FormatError::Manifest("container is not a head checkpoint".into()).into());
        }
        let variant: HeadVariant = c
            .meta_str("variant")
            .ok_or_else(|| FormatError::Manifest("missing head variant".into()))?
            .parse()?;
        let provenance = c
            .metadata
            .get("provenance")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .map_err(|e| FormatError::Manifest(format!("provenance: {e}")))?
            .unwrap_or_default();
        let v = variant.as_str();
        let name = |p: &str| format!("head/{v}/{p}");
        let get = |p: &str| c.get(&name(p)).ok_or_else(|| FormatError::MissingTensor(name(p)));
        let head = match variant {
            HeadVariant::Linear => {
                let w = get("weight")?;
                let d = w.numel();
                let b = c.require(&name("bias"), &[1])?;
                c.require(&name("weight"), &[d])?;
                Head::Linear(LinearHead {
                    weight: w.data.clone(),
                    bias: b.data[0],
                })
            }
            HeadVariant::Mlp => {
                let d = get("b1")?.numel();
                Head::Mlp(MlpHead {
                    w1: c.require(&name("w1"), &[d, d])?.data.clone(),
                    b1: c.require(&name("b1"), &[d])?.data.clone(),
                    w2: c.require(&name("w2"), &[d])?.data.clone(),
                    b2: c.require(&name("b2"), &[1])?.data[0],
                })
            }
            HeadVariant::AttentionAverage | HeadVariant::AttentionWeighted => {
                let w = get("weights")?;
                Head::Attention(AttentionHead {
                    mode: if variant == HeadVariant::AttentionAverage {
                        AttentionMode::Average
                    } else {
                        AttentionMode::Weighted
                    },
                    weights: w.data.clone(),
                })
            }
        };
        if head.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::structural("head checkpoint has non-finite parameters"));
        }
        Ok((head, provenance))
    }

    pub fn save(&self, provenance: &HeadProvenance, path: impl AsRef<Path>) -> Result<()> {
        self.to_container(provenance).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Head, HeadProvenance)> {
        let path = path.as_ref();
        Head::from_container(&TensorContainer::open(path)?).map_err(|e| e.with_path(path))
    }
}

/// Training record stored alongside head parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadProvenance {
    pub dataset_hash: Option<String>,
    pub epochs: Option<usize>,
    pub final_val_loss: Option<f64>,
    pub backend: Option<String>,
    /// Optimizer and schedule settings used for training.
    pub optimizer: Option<serde_json::Value>,
}

fn check_dim(grid: &EmbeddingGrid, d: usize) -> Result<()> {
    if grid.dim != d {
        return Err(Error::structural(format!(
            "head expects {d}-dimensional embeddings, grid has {}",
            grid.dim
        )));
    }
    Ok(())
}

/// `logit_i = w . z_i + b`
pub fn linear_logits(grid: &EmbeddingGrid, head: &LinearHead) -> Result<PatchLogitGrid> {
    check_dim(grid, head.dim())?;
    let logits = (0..grid.num_patches())
        .map(|i| {
            grid.patch(i)
                .iter()
                .zip(&head.weight)
                .map(|(z, w)| z * w)
                .sum::<f32>()
                + head.bias
        })
        .collect();
    Ok(PatchLogitGrid {
        geometry: grid.geometry,
        logits,
    })
}

/// `logit_i = w2 . GELU(W1 z_i + b1) + b2`
pub fn mlp_logits(grid: &EmbeddingGrid, head: &MlpHead) -> Result<PatchLogitGrid> {
    check_dim(grid, head.dim())?;
    let logits = (0..grid.num_patches())
        .map(|i| {
            let a = head.hidden_pre(grid.patch(i));
            a.iter().zip(&head.w2).map(|(&x, w)| gelu(x) * w).sum::<f32>() + head.b2
        })
        .collect();
    Ok(PatchLogitGrid {
        geometry: grid.geometry,
        logits,
    })
}

fn attention_scores(grid: &EmbeddingGrid, head: &AttentionHead) -> Result<Vec<f64>> {
    let att = grid
        .attention
        .as_ref()
        .ok_or_else(|| Error::Unsupported("attention head needs last-layer attention maps".into()))?;
    if att.heads() != head.weights.len() {
        return Err(Error::structural(format!(
            "attention head has {} weights, backbone exposes {} heads",
            head.weights.len(),
            att.heads()
        )));
    }
    let first = grid.first_patch_token();
    let n = grid.num_patches();
    let mut scores = vec![0f64; n];
    for (m, &w) in head.weights.iter().enumerate() {
        let row = &att.row(m, 0)[first..first + n];
        for (s, &a) in scores.iter_mut().zip(row) {
            *s += w as f64 * a as f64;
        }
    }
    Ok(scores)
}

/// Indices of the minimum and maximum, or `None` when all values coincide.
fn minmax(v: &[f64]) -> Option<(usize, usize)> {
    let mut imin = 0;
    let mut imax = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[imin] {
            imin = i;
        }
        if x > v[imax] {
            imax = i;
        }
    }
    (v.get(imax)? > &v[imin]).then_some((imin, imax))
}

/// CLS-row attention scores, min-max scaled within the window, clamped and
/// mapped to logits. A constant score map yields logit 0 everywhere.
pub fn attention_logits(grid: &EmbeddingGrid, head: &AttentionHead) -> Result<PatchLogitGrid> {
    let scores = attention_scores(grid, head)?;
    let logits = match minmax(&scores) {
        None => vec![0.0; scores.len()],
        Some((imin, imax)) => {
            let (lo, hi) = (scores[imin], scores[imax]);
            scores
                .iter()
                .map(|s| {
                    let x = ((s - lo) / (hi - lo)).clamp(ATTENTION_CLAMP, 1.0 - ATTENTION_CLAMP);
                    (x / (1.0 - x)).ln() as f32
                })
                .collect()
        }
    };
    Ok(PatchLogitGrid {
        geometry: grid.geometry,
        logits,
    })
}

pub fn upsample_logits(grid: &PatchLogitGrid) -> FloatPlane {
    let g = grid.geometry;
    let p = g.patch_size;
    let (h, w) = (g.window_h(), g.window_w());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = &grid.logits[(y / p) * g.grid_w..(y / p + 1) * g.grid_w];
        for &l in row {
            data.extend(std::iter::repeat_n(l, p));
        }
    }
    FloatPlane::new(h, w, data).expect("finite logits")
}

fn check_pair(p: &[f64], g: &[bool]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::structural(format!(
            "dice: {} probabilities vs {} labels",
            p.len(),
            g.len()
        )));
    }
    Ok(())
}

/// `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`
pub fn dice_loss(p: &[f64], g: &[bool], eps: f64) -> Result<f64> {
    check_pair(p, g)?;
    let (inter, pp, gg) = dice_sums(p, g);
    Ok(1.0 - (2.0 * inter + eps) / (pp + gg + eps))
}

/// Analytic `dL/dp_i` of [`dice_loss`].
pub fn dice_grad(p: &[f64], g: &[bool], eps: f64) -> Result<Vec<f64>> {
    check_pair(p, g)?;
    let (inter, pp, gg) = dice_sums(p, g);
    let num = 2.0 * inter + eps;
    let den = pp + gg + eps;
    let den2 = den * den;
    Ok(p.iter()
        .zip(g)
        .map(|(&pi, &gi)| (2.0 * pi * num - 2.0 * (gi as u8 as f64) * den) / den2)
        .collect())
}

fn dice_sums(p: &[f64], g: &[bool]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        pp += pi * pi;
        if gi {
            inter += pi;
            gg += 1.0;
        }
    }
    (inter, pp, gg)
}

/// Dice loss and per-patch gradient when pixel probabilities are constant over
/// each `area`-pixel patch. `forged[k]` counts forged pixels inside patch `k`.
/// Equal to evaluating [`dice_loss`]/[`dice_grad`] on the block-upsampled map
/// and summing the pixel gradient over each block.
pub fn dice_loss_grad_blocks(probs: &[f64], forged: &[usize], area: usize, eps: f64) -> Result<(f64, Vec<f64>)> {
    if probs.len() != forged.len() {
        return Err(Error::structural("dice blocks: length mismatch"));
    }
    let a = area as f64;
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&p, &f) in probs.iter().zip(forged) {
        inter += p * f as f64;
        pp += a * p * p;
        gg += f as f64;
    }
    let num = 2.0 * inter + eps;
    let den = pp + gg + eps;
    let loss = 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(forged)
        .map(|(&p, &f)| (2.0 * a * p * num - 2.0 * f as f64 * den) / (den * den))
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::AttentionMaps;
    use rand::{Rng, SeedableRng};

    fn grid(n_side: usize, p: usize, d: usize, seed: u64) -> EmbeddingGrid {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let geometry = PatchGridGeometry {
            patch_size: p,
            grid_h: n_side,
            grid_w: n_side,
        };
        let n = geometry.num_patches();
        EmbeddingGrid::new(
            geometry,
            d,
            vec![0.0; d],
            0,
            vec![],
            (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            None,
        )
        .unwrap()
    }

    fn with_attention(mut g: EmbeddingGrid, heads: usize, cls_rows: &[Vec<f32>]) -> EmbeddingGrid {
        let n = g.num_patches();
        let t = 1 + g.num_registers + n;
        let mut data = vec![0f32; heads * t * t];
        for m in 0..heads {
            let row = &mut data[m * t * t..m * t * t + t];
            row[0] = 0.1;
            row[1 + g.num_registers..].copy_from_slice(&cls_rows[m]);
        }
        g.attention = Some(AttentionMaps::new(heads, t, data).unwrap());
        g
    }

    #[test]
    fn linear_zero_and_unit_heads() {
        let g = grid(3, 2, 5, 1);
        let l = linear_logits(&g, &LinearHead::zeros(5)).unwrap();
        assert!(l.logits.iter().all(|&v| v == 0.0));
        assert!(l.probabilities().iter().all(|&v| v == 0.5));
        let l = linear_logits(&g, &LinearHead::unit(5, 3)).unwrap();
        for i in 0..9 {
            assert_eq!(l.logits[i], g.patch(i)[3]);
        }
        assert!(matches!(linear_logits(&g, &LinearHead::zeros(4)), Err(Error::Structural(_))));
    }

    #[test]
    fn linear_matches_f64_oracle() {
        let g = grid(6, 2, 16, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = LinearHead {
            weight: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: 0.3,
        };
        let l = linear_logits(&g, &h).unwrap();
        for i in 0..36 {
            let oracle: f64 = g.patch(i).iter().zip(&h.weight).map(|(&z, &w)| z as f64 * w as f64).sum::<f64>() + 0.3;
            assert!((l.logits[i] as f64 - oracle).abs() < 1e-5);
        }
    }

    #[test]
    fn mlp_cases() {
        let g = grid(2, 2, 4, 4);
        let mut h = MlpHead::zeros(4);
        h.b2 = -0.7;
        assert!(mlp_logits(&g, &h).unwrap().logits.iter().all(|&v| v == -0.7));

        // identity first layer, pick coordinate 1, large positive input
        let mut h = MlpHead::zeros(4);
        for j in 0..4 {
            h.w1[j * 4 + j] = 1.0;
        }
        h.w2[1] = 1.0;
        let mut big = grid(1, 2, 4, 0);
        big.patches = vec![0.0, 9.0, 0.0, 0.0];
        let l = mlp_logits(&big, &h).unwrap();
        assert!((l.logits[0] - 9.0).abs() < 1e-4);

        let h = MlpHead::random(4, 9);
        let l = mlp_logits(&g, &h).unwrap();
        for i in 0..4 {
            let z = g.patch(i);
            let mut o = h.b2 as f64;
            for j in 0..4 {
                let a: f64 = (0..4).map(|k| h.w1[j * 4 + k] as f64 * z[k] as f64).sum::<f64>() + h.b1[j] as f64;
                let ge = 0.5 * a * (1.0 + libm::erf(a / std::f64::consts::SQRT_2));
                o += h.w2[j] as f64 * ge;
            }
            assert!((l.logits[i] as f64 - o).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_average_identical_heads_equals_single_row() {
        let row: Vec<f32> = vec![0.05, 0.3, 0.2, 0.15];
        let g = with_attention(grid(2, 2, 3, 5), 3, &[row.clone(), row.clone(), row.clone()]);
        let avg = attention_logits(&g, &AttentionHead::average(3)).unwrap();
        let single = attention_logits(&g, &AttentionHead::weighted(vec![1.0, 0.0, 0.0])).unwrap();
        for (a, b) in avg.logits.iter().zip(&single.logits) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn attention_constant_scores_are_undecided() {
        let row = vec![0.2f32; 4];
        let g = with_attention(grid(2, 2, 3, 5), 2, &[row.clone(), row]);
        let l = attention_logits(&g, &AttentionHead::average(2)).unwrap();
        assert!(l.logits.iter().all(|&v| v == 0.0));
        assert!(l.probabilities().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn attention_three_patch_hand_computation() {
        let geometry = PatchGridGeometry {
            patch_size: 1,
            grid_h: 1,
            grid_w: 3,
        };
        let g = EmbeddingGrid::new(geometry, 1, vec![0.0], 0, vec![], vec![0.0; 3], None).unwrap();
        let g = with_attention(g, 2, &[vec![0.1, 0.4, 0.2], vec![0.9, 0.0, 0.0]]);
        let l = attention_logits(&g, &AttentionHead::weighted(vec![1.0, 0.0])).unwrap();
        // scores (0.1, 0.4, 0.2) -> scaled (0, 1, 1/3) -> clamped -> logit
        let e = 1e-6f64;
        let expect = [(e / (1.0 - e)).ln(), ((1.0 - e) / e).ln(), (0.5f64).ln()];
        for (got, want) in l.logits.iter().zip(expect) {
            assert!((*got as f64 - want).abs() < 1e-3, "{got} vs {want}");
        }
        assert!(matches!(attention_logits(&grid(1, 1, 1, 0), &AttentionHead::average(2)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn upsample_blocks() {
        let geometry = PatchGridGeometry {
            patch_size: 2,
            grid_h: 2,
            grid_w: 2,
        };
        let up = upsample_logits(&PatchLogitGrid {
            geometry,
            logits: vec![1.0, 2.0, 3.0, 4.0],
        });
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let single = upsample_logits(&PatchLogitGrid {
            geometry: PatchGridGeometry {
                patch_size: 3,
                grid_h: 1,
                grid_w: 1,
            },
            logits: vec![-2.5],
        });
        assert!(single.data().iter().all(|&v| v == -2.5));
    }

    #[test]
    fn dice_examples() {
        let g = [true, false, true, true];
        let p: Vec<f64> = g.iter().map(|&b| b as u8 as f64).collect();
        assert_eq!(dice_loss(&p, &g, 1.0).unwrap(), 0.0);
        assert_eq!(dice_loss(&[0.0; 3], &[false; 3], 1.0).unwrap(), 0.0);
        assert!((dice_loss(&[1.0; 4], &[false; 4], 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((dice_loss(&[0.5, 0.5], &[true, false], 1.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(dice_loss(&[0.5], &[true, false], 1.0), Err(Error::Structural(_))));
        assert!(dice_grad(&[0.5], &[], 1.0).is_err());
    }

    #[test]
    fn block_dice_equals_pixel_dice() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let area = 4;
        let probs: Vec<f64> = (0..9).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..36).map(|_| rng.random_bool(0.4)).collect();
        let pixel_p: Vec<f64> = (0..36).map(|i| probs[i / area]).collect();
        let forged: Vec<usize> = (0..9).map(|k| labels[k * area..(k + 1) * area].iter().filter(|&&b| b).count()).collect();
        let (loss, grad) = dice_loss_grad_blocks(&probs, &forged, area, 1.0).unwrap();
        assert!((loss - dice_loss(&pixel_p, &labels, 1.0).unwrap()).abs() < 1e-12);
        let pg = dice_grad(&pixel_p, &labels, 1.0).unwrap();
        for k in 0..9 {
            let s: f64 = pg[k * area..(k + 1) * area].iter().sum();
            assert!((grad[k] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_linear_head_preserves_decisions() {
        let g = grid(4, 2, 6, 12);
        let h = LinearHead {
            weight: vec![0.3, -0.2, 0.5, 0.0, 1.0, -0.4],
            bias: 0.1,
        };
        let base: Vec<bool> = linear_logits(&g, &h).unwrap().logits.iter().map(|&l| l > 0.0).collect();
        for lambda in [0.01f32, 0.5, 3.0, 100.0] {
            let s = LinearHead {
                weight: h.weight.iter().map(|w| w * lambda).collect(),
                bias: h.bias * lambda,
            };
            let d: Vec<bool> = linear_logits(&g, &s).unwrap().logits.iter().map(|&l| l > 0.0).collect();
            assert_eq!(d, base);
        }
    }

    fn fd_param_check(head: Head, g: &EmbeddingGrid, labels: &[usize], area: usize) {
        let loss_of = |h: &Head| {
            let (p, _) = h.forward_probs(g).unwrap();
            dice_loss_grad_blocks(&p, labels, area, 1.0).unwrap().0
        };
        let (p, cache) = head.forward_probs(g).unwrap();
        let (_, dl) = dice_loss_grad_blocks(&p, labels, area, 1.0).unwrap();
        let analytic = head.backward(g, &p, &cache, &dl).unwrap();
        let params = head.params();
        for k in 0..params.len() {
            let step = 1e-3f32;
            let mut plus = head.clone();
            let mut pp = params.clone();
            pp[k] += step;
            plus.set_params(&pp).unwrap();
            let mut minus = head.clone();
            pp[k] -= 2.0 * step;
            minus.set_params(&pp).unwrap();
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step as f64);
            let err = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-4);
            assert!(err < 2e-2, "param {k}: analytic {} vs fd {fd}", analytic[k]);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let g = grid(3, 2, 4, 21);
        let labels = vec![4, 0, 2, 3, 1, 0, 4, 4, 0];
        let lin = Head::Linear(LinearHead {
            weight: vec![0.2, -0.1, 0.3, 0.05],
            bias: -0.1,
        });
        fd_param_check(lin, &g, &labels, 4);
        fd_param_check(Head::Mlp(MlpHead::random(4, 3)), &g, &labels, 4);
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|m| (0..9).map(|i| ((i * 7 + m * 3) % 11) as f32 / 20.0).collect())
            .collect();
        let ga = with_attention(g.clone(), 3, &rows);
        fd_param_check(Head::Attention(AttentionHead::weighted(vec![0.5, 0.3, 0.2])), &ga, &labels, 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let prov = HeadProvenance {
            dataset_hash: Some("abc".into()),
            epochs: Some(3),
            final_val_loss: Some(0.25),
            backend: None,
            optimizer: None,
        };
        for head in [
            Head::Linear(LinearHead::unit(5, 2)),
            Head::Mlp(MlpHead::random(3, 1)),
            Head::Attention(AttentionHead::average(12)),
            Head::Attention(AttentionHead::weighted(vec![0.1, 0.9])),
        ] {
            let c = head.to_container(&prov);
            let bytes = c.to_bytes();
            let (back, p) = Head::from_container(&TensorContainer::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, head);
            assert_eq!(p, prov);
        }
        assert_eq!(Head::Linear(LinearHead::zeros(768)).param_count(), 769);
        assert_eq!(Head::init(HeadVariant::AttentionWeighted, 768, 12, 0).param_count(), 12);
    }

    #[test]
    fn classifier_reduction() {
        let c = ImageClassifier {
            weight: vec![1.0, 2.0, 4.0, -1.0],
            bias: vec![0.5, 1.5],
        };
        let h = LinearHead::from_image_classifier(&c, 1).unwrap();
        assert_eq!(h.weight, vec![3.0, -3.0]);
        assert_eq!(h.bias, 1.0);
    }
}
