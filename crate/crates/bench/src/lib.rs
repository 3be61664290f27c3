//! Inputs shared by the pipeline benchmarks.

use patchloc_core::{BinaryMask, ImagePlane, ViTConfig};

/// Deterministic RGB test pattern with a red square in the middle third.
pub fn pattern_image(h: usize, w: usize) -> ImagePlane {
    ImagePlane::from_fn(h, w, 3, |y, x, c| match c {
        0 => ((y / (h / 3).max(1) == 1) && (x / (w / 3).max(1) == 1)) as u8 as f32,
        _ => ((y * 31 + x * 17 + c * 7) % 251) as f32 / 250.0,
    })
    .expect("finite pixels")
}

pub fn pattern_mask(h: usize, w: usize, shift: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| (y + shift) % 7 < 3 && (x * 3 + shift) % 5 < 2)
}

/// Small backbone: 112 px window, 14 px patches, 64 wide, 2 layers.
pub fn small_vit() -> ViTConfig {
    ViTConfig {
        patch_size: 14,
        embed_dim: 64,
        depth: 2,
        heads: 4,
        registers: 4,
        window: 112,
        mlp_hidden: 256,
        channels: 3,
        layer_norm_eps: 1e-6,
    }
}
