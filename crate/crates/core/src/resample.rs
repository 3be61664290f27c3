//! Separable resampling kernels.
//!
//! Output pixel centers map back to the source with `(x + 0.5) * in / out - 0.5`.
//! When shrinking, the kernel support is stretched by the scale factor so the
//! filter also acts as an anti-aliasing prefilter. Taps falling outside the
//! source are clamped to the nearest edge sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Nearest,
    Bilinear,
    /// Catmull-Rom cubic (`a = -0.5`).
    Bicubic,
    /// Lanczos with three lobes.
    Lanczos,
}

impl Kernel {
    fn support(self) -> f64 {
        match self {
            Kernel::Nearest => 0.5,
            Kernel::Bilinear => 1.0,
            Kernel::Bicubic => 2.0,
            Kernel::Lanczos => 3.0,
        }
    }

    fn eval(self, x: f64) -> f64 {
        let ax = x.abs();
        match self {
            Kernel::Nearest => {
                if ax < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            Kernel::Bilinear => (1.0 - ax).max(0.0),
            Kernel::Bicubic => cubic(ax, -0.5),
            Kernel::Lanczos => {
                if ax < 3.0 {
                    sinc(x) * sinc(x / 3.0)
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Kernel::Nearest),
            "bilinear" => Ok(Kernel::Bilinear),
            "bicubic" => Ok(Kernel::Bicubic),
            "lanczos" => Ok(Kernel::Lanczos),
            other => Err(Error::invalid(format!("unknown kernel {other:?}"))),
        }
    }
}

fn cubic(x: f64, a: f64) -> f64 {
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Source index for each output coordinate under nearest-neighbour sampling.
pub(crate) fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| ((((i as u128) * 2 + 1) * src as u128) / (2 * dst as u128)) as usize)
        .map(|s| s.min(src - 1))
        .collect()
}

/// Per-output-sample contiguous tap window and normalized weights.
struct Taps {
    start: Vec<usize>,
    len: usize,
    weights: Vec<f32>,
}

fn taps(src: usize, dst: usize, kernel: Kernel) -> Taps {
    let ratio = src as f64 / dst as f64;
    let filter_scale = ratio.max(1.0);
    let support = kernel.support() * filter_scale;
    let full = (2.0 * support).ceil() as usize + 1;
    let len = full.min(src);
    let mut start = Vec::with_capacity(dst);
    let mut weights = vec![0f32; dst * len];
    let mut raw = vec![0f64; full];
    for i in 0..dst {
        let center = (i as f64 + 0.5) * ratio - 0.5;
        let lo = (center - support).floor() as isize + 1;
        let mut sum = 0.0;
        for (k, w) in raw.iter_mut().enumerate() {
            *w = kernel.eval(((lo + k as isize) as f64 - center) / filter_scale);
            sum += *w;
        }
        // Taps outside [0, src) fold onto the edge samples.
        let base = (lo.max(0) as usize).min(src - len);
        let row = &mut weights[i * len..(i + 1) * len];
        for (k, w) in raw.iter().enumerate() {
            let s = (lo + k as isize).clamp(0, src as isize - 1) as usize;
            row[s - base] += (*w / sum) as f32;
        }
        start.push(base);
    }
    Taps {
        start,
        len,
        weights,
    }
}

/// Resizes an interleaved `(h, w, c)` buffer. No clamping is applied.
pub fn resize_buffer(
    data: &[f32],
    (h, w, c): (usize, usize, usize),
    new_h: usize,
    new_w: usize,
    kernel: Kernel,
) -> Result<Vec<f32>> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid(format!("resize target {new_h}x{new_w} must be at least 1x1")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot resize an empty image"));
    }
    if (new_h, new_w) == (h, w) {
        return Ok(data.to_vec());
    }
    if kernel == Kernel::Nearest {
        let ys = nearest_indices(h, new_h);
        let xs = nearest_indices(w, new_w);
        let mut out = Vec::with_capacity(new_h * new_w * c);
        for &sy in &ys {
            for &sx in &xs {
                let i = (sy * w + sx) * c;
                out.extend_from_slice(&data[i..i + c]);
            }
        }
        return Ok(out);
    }

    // Horizontal pass: h x new_w.
    let horizontal = if new_w == w {
        data.to_vec()
    } else {
        let t = taps(w, new_w, kernel);
        let mut tmp = vec![0f32; h * new_w * c];
        tmp.par_chunks_mut(new_w * c).enumerate().for_each(|(y, row)| {
            let src = &data[y * w * c..(y + 1) * w * c];
            for x in 0..new_w {
                let ws = &t.weights[x * t.len..(x + 1) * t.len];
                let s0 = t.start[x];
                for ch in 0..c {
                    let mut acc = 0f32;
                    for (k, &wk) in ws.iter().enumerate() {
                        acc += wk * src[(s0 + k) * c + ch];
                    }
                    row[x * c + ch] = acc;
                }
            }
        });
        tmp
    };

    if new_h == h {
        return Ok(horizontal);
    }
    let t = taps(h, new_h, kernel);
    let stride = new_w * c;
    let mut out = vec![0f32; new_h * stride];
    out.par_chunks_mut(stride).enumerate().for_each(|(y, row)| {
        let ws = &t.weights[y * t.len..(y + 1) * t.len];
        let s0 = t.start[y];
        for (k, &wk) in ws.iter().enumerate() {
            let src = &horizontal[(s0 + k) * stride..(s0 + k + 1) * stride];
            for (o, &v) in row.iter_mut().zip(src) {
                *o += wk * v;
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant_for_every_kernel() {
        let data = vec![0.5f32; 2 * 2 * 3];
        for k in [Kernel::Nearest, Kernel::Bilinear, Kernel::Bicubic, Kernel::Lanczos] {
            let out = resize_buffer(&data, (2, 2, 3), 4, 4, k).unwrap();
            assert_eq!(out.len(), 48);
            for v in out {
                assert!((v - 0.5).abs() < 1e-6, "{k:?}: {v}");
            }
            let down = resize_buffer(&vec![0.5f32; 37 * 23], (37, 23, 1), 5, 7, k).unwrap();
            assert!(down.iter().all(|v| (v - 0.5).abs() < 1e-6), "{k:?}");
        }
    }

    #[test]
    fn nearest_doubling_replicates_blocks() {
        let data: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let out = resize_buffer(&data, (3, 3, 1), 6, 6, Kernel::Nearest).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(out[y * 6 + x], data[(y / 2) * 3 + x / 2]);
            }
        }
    }

    #[test]
    fn zero_target_rejected() {
        assert!(matches!(
            resize_buffer(&[0.0; 4], (2, 2, 1), 0, 3, Kernel::Bicubic),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn catmull_rom_interpolates_samples() {
        assert_eq!(cubic(0.0, -0.5), 1.0);
        assert!(cubic(1.0, -0.5).abs() < 1e-12);
        assert!(cubic(2.0, -0.5).abs() < 1e-12);
        // partition of unity at half-sample offset
        let s: f64 = [-1.5f64, -0.5, 0.5, 1.5].iter().map(|&x| cubic(x.abs(), -0.5)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_ramp_preserved_in_interior_by_bilinear_and_bicubic() {
        let w = 16;
        let data: Vec<f32> = (0..w).map(|x| x as f32).collect();
        for k in [Kernel::Bilinear, Kernel::Bicubic] {
            let out = resize_buffer(&data, (1, w, 1), 1, 2 * w, k).unwrap();
            for x in 4..2 * w - 4 {
                let expect = (x as f32 + 0.5) / 2.0 - 0.5;
                assert!((out[x] - expect).abs() < 1e-4, "{k:?} {x}: {} vs {expect}", out[x]);
            }
        }
    }

    #[test]
    fn tiny_sources_with_wide_kernels() {
        let out = resize_buffer(&[0.2, 0.8], (1, 2, 1), 1, 9, Kernel::Lanczos).unwrap();
        assert_eq!(out.len(), 9);
        let big = resize_buffer(&[0.3], (1, 1, 1), 5, 5, Kernel::Bicubic).unwrap();
        assert!(big.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn nearest_index_map_covers_source() {
        assert_eq!(nearest_indices(3, 6), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(nearest_indices(6, 3), vec![1, 3, 5]);
        assert_eq!(nearest_indices(1, 4), vec![0; 4]);
    }
}
