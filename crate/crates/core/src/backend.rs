//! Embedding backends: anything that turns a square window into patch tokens.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, FormatError, Result};
use crate::plane::{ImagePlane, PatchGridGeometry};

/// Softmax attention weights of one layer, `heads x tokens x tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    heads: usize,
    tokens: usize,
    data: Vec<f32>,
}

impl AttentionMaps {
    pub fn new(heads: usize, tokens: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != heads * tokens * tokens {
            return Err(Error::structural(format!(
                "attention tensor of {} values is not {heads}x{tokens}x{tokens}",
                data.len()
            )));
        }
        Ok(Self { heads, tokens, data })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Attention row of `query` for head `head`.
    pub fn row(&self, head: usize, query: usize) -> &[f32] {
        let start = (head * self.tokens + query) * self.tokens;
        &self.data[start..start + self.tokens]
    }
}

/// Final-layer token embeddings of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid {
    pub geometry: PatchGridGeometry,
    pub dim: usize,
    pub cls: Vec<f32>,
    pub num_registers: usize,
    /// `registers x dim`
    pub registers: Vec<f32>,
    /// `N x dim`, row-major patch order starting top-left.
    pub patches: Vec<f32>,
    pub attention: Option<AttentionMaps>,
}

impl EmbeddingGrid {
    pub fn new(
        geometry: PatchGridGeometry,
        dim: usize,
        cls: Vec<f32>,
        num_registers: usize,
        registers: Vec<f32>,
        patches: Vec<f32>,
        attention: Option<AttentionMaps>,
    ) -> Result<Self> {
        let n = geometry.num_patches();
        if patches.len() != n * dim || cls.len() != dim || registers.len() != num_registers * dim {
            return Err(Error::structural(format!(
                "embedding grid: {} patch values for {n}x{dim}, cls {}, registers {}",
                patches.len(),
                cls.len(),
                registers.len()
            )));
        }
        if let Some(a) = &attention {
            if a.tokens() != 1 + num_registers + n {
                return Err(Error::structural(format!(
                    "attention over {} tokens, grid has {}",
                    a.tokens(),
                    1 + num_registers + n
                )));
            }
        }
        Ok(Self {
            geometry,
            dim,
            cls,
            num_registers,
            registers,
            patches,
            attention,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.geometry.num_patches()
    }

    #[inline]
    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.dim..(i + 1) * self.dim]
    }

    /// Token index of patch 0 in the attention matrices.
    pub fn first_patch_token(&self) -> usize {
        1 + self.num_registers
    }

    /// Stores the grid, attention included, as a self-describing container.
    pub fn to_container(&self) -> TensorContainer {
        let g = self.geometry;
        let mut c = TensorContainer::new();
        c.set_meta("kind", "embedding");
        c.set_meta("patch_size", g.patch_size);
        c.set_meta("grid_h", g.grid_h);
        c.set_meta("grid_w", g.grid_w);
        c.set_meta("dim", self.dim);
        c.set_meta("registers", self.num_registers);
        let t = |shape: Vec<usize>, data: &[f32]| Tensor::new(shape, data.to_vec()).expect("validated grid");
        c.insert("patches", t(vec![self.num_patches(), self.dim], &self.patches));
        c.insert("cls", t(vec![self.dim], &self.cls));
        c.insert("registers", t(vec![self.num_registers, self.dim], &self.registers));
        if let Some(a) = &self.attention {
            c.insert("attn", t(vec![a.heads(), a.tokens(), a.tokens()], a.data()));
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.meta_str("kind") != Some("embedding") {
            return Err(FormatError::Manifest("container is not an embedding grid".into()).into());
        }
        let geometry = PatchGridGeometry {
            patch_size: c.meta_usize("patch_size")?,
            grid_h: c.meta_usize("grid_h")?,
            grid_w: c.meta_usize("grid_w")?,
        };
        let (d, r) = (c.meta_usize("dim")?, c.meta_usize("registers")?);
        let n = geometry.num_patches();
        let attention = match c.get("attn") {
            Some(a) if a.shape.len() == 3 => Some(AttentionMaps::new(a.shape[0], a.shape[1], a.data.clone())?),
            Some(a) => {
                return Err(FormatError::Shape {
                    name: "attn".into(),
                    expected: vec![0, 1 + r + n, 1 + r + n],
                    found: a.shape.clone(),
                }
                .into())
            }
            None => None,
        };
        EmbeddingGrid::new(
            geometry,
            d,
            c.require("cls", &[d])?.data.clone(),
            r,
            c.require("registers", &[r, d])?.data.clone(),
            c.require("patches", &[n, d])?.data.clone(),
            attention,
        )
    }
}

/// Identity of a backend, recorded in run manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub window: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Attention heads exposed by `embed(.., true)`; 0 when unavailable.
    pub heads: usize,
    pub registers: usize,
    pub provenance: String,
}

/// Deterministic window embedder. Implementations must return identical output
/// for identical input bytes.
pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, window: &ImagePlane, want_attention: bool) -> Result<EmbeddingGrid>;

    fn descriptor(&self) -> BackendDescriptor;
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for &B {
    fn embed(&self, window: &ImagePlane, want_attention: bool) -> Result<EmbeddingGrid> {
        (**self).embed(window, want_attention)
    }

    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<B> {
    fn embed(&self, window: &ImagePlane, want_attention: bool) -> Result<EmbeddingGrid> {
        (**self).embed(window, want_attention)
    }

    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }
}

fn check_window(window: &ImagePlane, size: usize) -> Result<()> {
    if window.dims() != (size, size) {
        return Err(Error::invalid(format!(
            "window {:?} does not match backend size {size}",
            window.dims()
        )));
    }
    Ok(())
}

/// Replays stored embeddings keyed by [`ImagePlane::content_hash`].
#[derive(Clone, Debug)]
pub struct FixtureBackend {
    container: TensorContainer,
    descriptor: BackendDescriptor,
}

impl FixtureBackend {
    pub fn from_container(container: TensorContainer, provenance: String) -> Result<Self> {
        if container.meta_str("kind") != Some("fixture") {
            return Err(FormatError::Manifest("container is not a fixture file".into()).into());
        }
        let descriptor = BackendDescriptor {
            window: container.meta_usize("window")?,
            patch_size: container.meta_usize("patch_size")?,
            embed_dim: container.meta_usize("embed_dim")?,
            heads: container.meta_usize("heads").unwrap_or(0),
            registers: container.meta_usize("registers")?,
            provenance,
        };
        PatchGridGeometry::for_window(descriptor.window, descriptor.patch_size)?;
        Ok(Self {
            container,
            descriptor,
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = TensorContainer::open(path)?;
        Self::from_container(c, format!("fixture:{}", path.display())).map_err(|e| e.with_path(path))
    }

    /// Hashes of every stored window.
    pub fn keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .container
            .names()
            .filter_map(|n| n.strip_prefix("window/")?.strip_suffix("/patches"))
            .map(str::to_string)
            .collect();
        keys.sort();
        keys
    }

    /// Records `backend`'s output on `windows` into a fixture container.
    pub fn record<B: EmbeddingBackend + ?Sized>(
        backend: &B,
        windows: &[ImagePlane],
        with_attention: bool,
    ) -> Result<TensorContainer> {
        let desc = backend.descriptor();
        let mut c = TensorContainer::new();
        c.set_meta("kind", "fixture");
        c.set_meta("window", desc.window);
        c.set_meta("patch_size", desc.patch_size);
        c.set_meta("embed_dim", desc.embed_dim);
        c.set_meta("heads", if with_attention { desc.heads } else { 0 });
        c.set_meta("registers", desc.registers);
        c.set_meta("source", desc.provenance.clone());
        for w in windows {
            let g = backend.embed(w, with_attention)?;
            let key = w.content_hash();
            let d = g.dim;
            c.insert(format!("window/{key}/patches"), Tensor::new(vec![g.num_patches(), d], g.patches)?);
            c.insert(format!("window/{key}/cls"), Tensor::new(vec![d], g.cls)?);
            c.insert(
                format!("window/{key}/registers"),
                Tensor::new(vec![g.num_registers, d], g.registers)?,
            );
            if let Some(a) = g.attention {
                let (h, t) = (a.heads(), a.tokens());
                c.insert(format!("window/{key}/attn"), Tensor::new(vec![h, t, t], a.data)?);
            }
        }
        Ok(c)
    }
}

impl EmbeddingBackend for FixtureBackend {
    fn embed(&self, window: &ImagePlane, want_attention: bool) -> Result<EmbeddingGrid> {
        let d = &self.descriptor;
        check_window(window, d.window)?;
        let key = window.content_hash();
        let geometry = PatchGridGeometry::for_window(d.window, d.patch_size)?;
        let n = geometry.num_patches();
        let name = |s: &str| format!("window/{key}/{s}");
        let patches = match self.container.get(&name("patches")) {
            Some(_) => self.container.require(&name("patches"), &[n, d.embed_dim])?,
            None => {
                return Err(Error::NotFound {
                    key,
                    available: self.keys(),
                })
            }
        };
        let cls = self.container.require(&name("cls"), &[d.embed_dim])?;
        let regs = self.container.require(&name("registers"), &[d.registers, d.embed_dim])?;
        let attention = if want_attention {
            let t = 1 + d.registers + n;
            let a = self
                .container
                .get(&name("attn"))
                .ok_or_else(|| Error::Unsupported(format!("fixture window {key} has no attention maps")))?;
            if a.shape.len() != 3 || a.shape[1..] != [t, t] {
                return Err(FormatError::Shape {
                    name: name("attn"),
                    expected: vec![d.heads, t, t],
                    found: a.shape.clone(),
                }
                .into());
            }
            Some(AttentionMaps::new(a.shape[0], t, a.data.clone())?)
        } else {
            None
        };
        EmbeddingGrid::new(
            geometry,
            d.embed_dim,
            cls.data.clone(),
            d.registers,
            regs.data.clone(),
            patches.data.clone(),
            attention,
        )
    }

    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor.clone()
    }
}

/// Analytic backend: each patch embeds as its per-channel mean mapped to
/// `[-1, 1]` followed by its per-channel standard deviation. Dimension is
/// `2 * channels`. No attention maps. Useful as a deterministic stand-in
/// for a learned backbone in tests, benchmarks and calibration runs.
#[derive(Clone, Debug)]
pub struct PatchStatsBackend {
    window: usize,
    patch_size: usize,
    channels: usize,
}

impl PatchStatsBackend {
    pub fn new(window: usize, patch_size: usize, channels: usize) -> Result<Self> {
        PatchGridGeometry::for_window(window, patch_size)?;
        Ok(Self {
            window,
            patch_size,
            channels,
        })
    }
}

impl Default for PatchStatsBackend {
    fn default() -> Self {
        Self {
            window: 504,
            patch_size: 14,
            channels: 3,
        }
    }
}

impl EmbeddingBackend for PatchStatsBackend {
    fn embed(&self, window: &ImagePlane, want_attention: bool) -> Result<EmbeddingGrid> {
        check_window(window, self.window)?;
        if want_attention {
            return Err(Error::Unsupported("patch-stats backend has no attention maps".into()));
        }
        if window.channels() != self.channels {
            return Err(Error::structural(format!(
                "window has {} channels, backend expects {}",
                window.channels(),
                self.channels
            )));
        }
        let geometry = PatchGridGeometry::for_window(self.window, self.patch_size)?;
        let c = self.channels;
        let d = 2 * c;
        let p = self.patch_size;
        let area = (p * p) as f64;
        let mut patches = Vec::with_capacity(geometry.num_patches() * d);
        for py in 0..geometry.grid_h {
            for px in 0..geometry.grid_w {
                let mut sum = vec![0f64; c];
                let mut sq = vec![0f64; c];
                for y in py * p..(py + 1) * p {
                    for x in px * p..(px + 1) * p {
                        for ch in 0..c {
                            let v = window.get(y, x, ch) as f64;
                            sum[ch] += v;
                            sq[ch] += v * v;
                        }
                    }
                }
                for ch in 0..c {
                    patches.push((2.0 * sum[ch] / area - 1.0) as f32);
                }
                for ch in 0..c {
                    let mean = sum[ch] / area;
                    patches.push((sq[ch] / area - mean * mean).max(0.0).sqrt() as f32);
                }
            }
        }
        let n = geometry.num_patches();
        let cls = (0..d)
            .map(|k| (patches.iter().skip(k).step_by(d).map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
            .collect();
        EmbeddingGrid::new(geometry, d, cls, 0, Vec::new(), patches, None)
    }

    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            window: self.window,
            patch_size: self.patch_size,
            embed_dim: 2 * self.channels,
            heads: 0,
            registers: 0,
            provenance: "patch-stats".into(),
        }
    }
}
