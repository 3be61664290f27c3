//! Image, mask and float-plane value types.
//!
//! All buffers are row-major with interleaved channels (`y`, `x`, `c`). Pixel
//! values of an [`ImagePlane`] live in `[0, 1]`; 8-bit sources are divided by
//! 255 on ingestion and multiplied back with rounding on output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, FormatError, Result};
use crate::resample::{self, Kernel};

/// An `H x W x C` float image with values in `[0, 1]`, RGB channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Per-pixel manipulation labels. `true` marks a forged pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// A single-channel float plane (logit maps, probability maps).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatPlane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Patch lattice of a square ViT input window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PatchGridGeometry {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGridGeometry {
    /// Geometry of a `window x window` input split into `patch_size` patches.
    pub fn for_window(window: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || window == 0 || window % patch_size != 0 {
            return Err(Error::invalid(format!(
                "window {window} is not a positive multiple of patch size {patch_size}"
            )));
        }
        Ok(Self {
            patch_size,
            grid_h: window / patch_size,
            grid_w: window / patch_size,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn window_h(&self) -> usize {
        self.patch_size * self.grid_h
    }

    pub fn window_w(&self) -> usize {
        self.patch_size * self.grid_w
    }
}

fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if height.checked_mul(width).and_then(|v| v.checked_mul(channels)) != Some(len) {
        return Err(Error::structural(format!(
            "buffer of length {len} does not hold {height}x{width}x{channels} values"
        )));
    }
    Ok(())
}

// Generic buffer helpers shared by the three plane types.

fn crop_buf<T: Copy>(
    data: &[T],
    (h, w, c): (usize, usize, usize),
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> Result<Vec<T>> {
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::invalid(format!(
            "crop window {ch}x{cw} at ({top},{left}) outside {h}x{w} image"
        )));
    }
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in top..top + ch {
        let row = (y * w + left) * c;
        out.extend_from_slice(&data[row..row + cw * c]);
    }
    Ok(out)
}

/// Reflect-101 index: `-1 -> 1`, `n -> n - 2`.
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn pad_buf<T: Copy>(
    data: &[T],
    (h, w, c): (usize, usize, usize),
    pad_right: usize,
    pad_bottom: usize,
) -> Result<Vec<T>> {
    if pad_right >= w || pad_bottom >= h {
        return Err(Error::invalid(format!(
            "mirror padding ({pad_right}, {pad_bottom}) must be smaller than image dims {w}x{h}"
        )));
    }
    let (oh, ow) = (h + pad_bottom, w + pad_right);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let sy = if y < h { y } else { 2 * h - 2 - y };
        let row = &data[sy * w * c..(sy + 1) * w * c];
        out.extend_from_slice(row);
        for x in w..ow {
            let sx = 2 * w - 2 - x;
            out.extend_from_slice(&row[sx * c..(sx + 1) * c]);
        }
    }
    Ok(out)
}

fn flip_h_buf<T: Copy>(data: &[T], (h, w, c): (usize, usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * c;
            out.extend_from_slice(&data[i..i + c]);
        }
    }
    out
}

/// Rotates counter-clockwise by `quarter_turns * 90` degrees. Returns the new dims.
fn rot90_buf<T: Copy>(
    data: &[T],
    (h, w, c): (usize, usize, usize),
    quarter_turns: u8,
) -> (Vec<T>, usize, usize) {
    match quarter_turns % 4 {
        0 => (data.to_vec(), h, w),
        2 => {
            let mut out = Vec::with_capacity(data.len());
            for y in (0..h).rev() {
                for x in (0..w).rev() {
                    let i = (y * w + x) * c;
                    out.extend_from_slice(&data[i..i + c]);
                }
            }
            (out, h, w)
        }
        k => {
            // Output is w x h. CCW: out(y', x') = in(x', w - 1 - y').
            // CW:  out(y', x') = in(h - 1 - x', y').
            let mut out = Vec::with_capacity(data.len());
            for yo in 0..w {
                for xo in 0..h {
                    let (sy, sx) = if k == 1 { (xo, w - 1 - yo) } else { (h - 1 - xo, yo) };
                    let i = (sy * w + sx) * c;
                    out.extend_from_slice(&data[i..i + c]);
                }
            }
            (out, w, h)
        }
    }
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        check_dims(height, width, channels, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a plane by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Quantizes to 8 bits (`round(v * 255)`).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    /// Replicates a gray plane into three channels; RGB planes are returned as is.
    pub fn to_rgb(&self) -> ImagePlane {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Resamples to `new_h x new_w` with a separable kernel, clamping to `[0, 1]`.
    pub fn resize(&self, new_h: usize, new_w: usize, kernel: Kernel) -> Result<ImagePlane> {
        let mut data = resample::resize_buffer(&self.data, self.shape(), new_h, new_w, kernel)?;
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(ImagePlane {
            height: new_h,
            width: new_w,
            channels: self.channels,
            data,
        })
    }

    /// Reflect-101 padding on the right and bottom edges.
    pub fn mirror_pad(&self, pad_right: usize, pad_bottom: usize) -> Result<ImagePlane> {
        let data = pad_buf(&self.data, self.shape(), pad_right, pad_bottom)?;
        Ok(ImagePlane {
            height: self.height + pad_bottom,
            width: self.width + pad_right,
            channels: self.channels,
            data,
        })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImagePlane> {
        let data = crop_buf(&self.data, self.shape(), top, left, h, w)?;
        Ok(ImagePlane {
            height: h,
            width: w,
            channels: self.channels,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> ImagePlane {
        ImagePlane {
            data: flip_h_buf(&self.data, self.shape()),
            ..*self
        }
    }

    pub fn rotate90(&self, quarter_turns: u8) -> ImagePlane {
        let (data, height, width) = rot90_buf(&self.data, self.shape(), quarter_turns);
        ImagePlane {
            height,
            width,
            channels: self.channels,
            data,
        }
    }

    /// Mutable access for in-place photometric operators; callers keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 3 {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("dims checked"))
        } else {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("dims checked"))
        }
    }

    /// Converts a decoded image; grayscale sources stay single-channel.
    pub fn from_dynamic(img: &DynamicImage) -> Result<ImagePlane> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 | 2 => Self::from_u8(h, w, 1, img.to_luma8().as_raw()),
            _ => Self::from_u8(h, w, 3, img.to_rgb8().as_raw()),
        }
    }

    /// Reads a PNG or JPEG file.
    pub fn open(path: impl AsRef<Path>) -> Result<ImagePlane> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::from(e).with_path(path))?;
        Self::from_dynamic(&img)
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_dynamic()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::from(e).with_path(path))
    }

    /// SHA-256 over the 8-bit HWC bytes; the key used by fixture playback.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_u8()))
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(height, width, 1, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Fraction of forged pixels.
    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.data.len() as f64
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::structural(format!(
                "mask dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Ok(BinaryMask { data, ..*self })
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 1)
    }

    /// Masks only ever use nearest-neighbour resampling.
    pub fn resize_nearest(&self, new_h: usize, new_w: usize) -> Result<BinaryMask> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::invalid("resize target must be at least 1x1"));
        }
        let ys = resample::nearest_indices(self.height, new_h);
        let xs = resample::nearest_indices(self.width, new_w);
        let mut data = Vec::with_capacity(new_h * new_w);
        for &sy in &ys {
            for &sx in &xs {
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Ok(BinaryMask {
            height: new_h,
            width: new_w,
            data,
        })
    }

    pub fn mirror_pad(&self, pad_right: usize, pad_bottom: usize) -> Result<BinaryMask> {
        let data = pad_buf(&self.data, self.shape(), pad_right, pad_bottom)?;
        Ok(BinaryMask {
            height: self.height + pad_bottom,
            width: self.width + pad_right,
            data,
        })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<BinaryMask> {
        let data = crop_buf(&self.data, self.shape(), top, left, h, w)?;
        Ok(BinaryMask {
            height: h,
            width: w,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask {
            data: flip_h_buf(&self.data, self.shape()),
            ..*self
        }
    }

    pub fn rotate90(&self, quarter_turns: u8) -> BinaryMask {
        let (data, height, width) = rot90_buf(&self.data, self.shape(), quarter_turns);
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        let bytes = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, bytes).expect("dims checked")
    }

    /// Any decoded image; a pixel is forged when its luma exceeds 127.
    pub fn from_dynamic(img: &DynamicImage) -> BinaryMask {
        let g = img.to_luma8();
        let data = g.as_raw().iter().map(|&v| v > 127).collect();
        BinaryMask {
            height: g.height() as usize,
            width: g.width() as usize,
            data,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<BinaryMask> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::from(e).with_path(path))?;
        Ok(Self::from_dynamic(&img))
    }

    /// Single-channel PNG, forged = 255, pristine = 0.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::from(e).with_path(path))
    }
}

/// Magic prefix of the heatmap stream format.
pub const FLOAT_PLANE_MAGIC: &[u8; 8] = b"FPLANE01";

impl FloatPlane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, 1, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value {v} in float plane")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 1)
    }

    /// Pixels strictly above `threshold` become forged.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    /// Resampling without clamping (logits are unbounded).
    pub fn resize(&self, new_h: usize, new_w: usize, kernel: Kernel) -> Result<FloatPlane> {
        let data = resample::resize_buffer(&self.data, self.shape(), new_h, new_w, kernel)?;
        Ok(FloatPlane {
            height: new_h,
            width: new_w,
            data,
        })
    }

    pub fn mirror_pad(&self, pad_right: usize, pad_bottom: usize) -> Result<FloatPlane> {
        let data = pad_buf(&self.data, self.shape(), pad_right, pad_bottom)?;
        Ok(FloatPlane {
            height: self.height + pad_bottom,
            width: self.width + pad_right,
            data,
        })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<FloatPlane> {
        let data = crop_buf(&self.data, self.shape(), top, left, h, w)?;
        Ok(FloatPlane {
            height: h,
            width: w,
            data,
        })
    }

    /// Min-max normalized 8-bit gray rendering, for previews.
    pub fn to_gray_normalized(&self) -> GrayImage {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let bytes = self.data.iter().map(|&v| to_u8((v - lo) / span)).collect();
        ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("dims checked")
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FLOAT_PLANE_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<FloatPlane> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FLOAT_PLANE_MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(FLOAT_PLANE_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            }
            .into());
        }
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim)?;
        let height = u32::from_le_bytes(dim) as usize;
        r.read_exact(&mut dim)?;
        let width = u32::from_le_bytes(dim) as usize;
        let n = height * width;
        let mut bytes = Vec::with_capacity(n * 4);
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(FormatError::Truncated {
                name: "float plane".into(),
                start: 16,
                end: 16 + (n * 4) as u64,
                available: 16 + bytes.len() as u64,
            }
            .into());
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        FloatPlane::new(height, width, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::from(e).with_path(path))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn open(path: impl AsRef<Path>) -> Result<FloatPlane> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::from(e).with_path(path))?;
        Self::read_from(BufReader::new(f))
    }
}

/// Blends `mask` over `img` in red with the given alpha.
pub fn overlay(img: &ImagePlane, mask: &BinaryMask, alpha: f32) -> Result<RgbImage> {
    if img.dims() != mask.dims() {
        return Err(Error::structural(format!(
            "overlay: image {:?} vs mask {:?}",
            img.dims(),
            mask.dims()
        )));
    }
    let rgb = img.to_rgb();
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let base = &rgb.data()[i * 3..i * 3 + 3];
        let a = if mask.data()[i] { alpha } else { 0.0 };
        let r = base[0] * (1.0 - a) + a;
        let g = base[1] * (1.0 - a);
        let b = base[2] * (1.0 - a);
        *px = Rgb([to_u8(r), to_u8(g), to_u8(b)]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImagePlane {
        let n = (h * w * c) as f32;
        ImagePlane::from_fn(h, w, c, |y, x, ch| ((y * w + x) * c + ch) as f32 / n).unwrap()
    }

    #[test]
    fn mirror_pad_zero_is_identity() {
        let img = ramp(4, 5, 3);
        assert_eq!(img.mirror_pad(0, 0).unwrap(), img);
    }

    #[test]
    fn mirror_pad_row_reflects_without_edge_repeat() {
        let img = ImagePlane::new(1, 4, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let padded = img.mirror_pad(2, 0).unwrap();
        assert_eq!(padded.data(), &[0.1, 0.2, 0.3, 0.4, 0.3, 0.2]);
    }

    #[test]
    fn mirror_pad_matches_index_oracle() {
        let img = ramp(5, 5, 1);
        let padded = img.mirror_pad(3, 2).unwrap();
        assert_eq!(padded.dims(), (7, 8));
        for y in 0..7 {
            for x in 0..8 {
                // reflect-101 lookup written independently
                let sy = if y < 5 { y } else { 5 - 2 - (y - 5) };
                let sx = if x < 5 { x } else { 5 - 2 - (x - 5) };
                assert_eq!(padded.get(y, x, 0), img.get(sy, sx, 0), "({y},{x})");
            }
        }
    }

    #[test]
    fn mirror_pad_rejects_oversized_pad() {
        let img = ramp(3, 3, 1);
        assert!(matches!(img.mirror_pad(3, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(img.mirror_pad(0, 4), Err(Error::InvalidArgument(_))));
        assert!(img.mirror_pad(2, 2).is_ok());
    }

    #[test]
    fn reflect101_index() {
        assert_eq!(reflect101(-1, 4), 1);
        assert_eq!(reflect101(4, 4), 2);
        assert_eq!(reflect101(5, 4), 1);
        assert_eq!(reflect101(0, 1), 0);
    }

    #[test]
    fn crop_cases() {
        let img = ramp(8, 10, 3);
        assert_eq!(img.crop(0, 0, 8, 10).unwrap(), img);
        let one = img.crop(0, 0, 1, 1).unwrap();
        assert_eq!(one.data(), &img.data()[..3]);
        let c = img.crop(1, 1, 7, 9).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                for ch in 0..3 {
                    assert_eq!(c.get(y, x, ch), img.get(y + 1, x + 1, ch));
                }
            }
        }
        assert!(matches!(img.crop(2, 2, 7, 9), Err(Error::InvalidArgument(_))));
        assert!(img.crop(0, 0, 0, 3).is_err());
    }

    #[test]
    fn rotations_compose() {
        let img = ramp(3, 5, 3);
        let r1 = img.rotate90(1);
        assert_eq!(r1.dims(), (5, 3));
        // top-right corner moves to top-left under a CCW quarter turn
        assert_eq!(r1.get(0, 0, 0), img.get(0, 4, 0));
        assert_eq!(r1.rotate90(3), img);
        assert_eq!(img.rotate90(1).rotate90(1), img.rotate90(2));
        assert_eq!(img.rotate90(4), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(1, 0, 2), img.get(1, 4, 2));
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = BinaryMask::from_fn(13, 17, |y, x| (y * 3 + x) % 5 == 0);
        m.save_png(&path).unwrap();
        assert_eq!(BinaryMask::open(&path).unwrap(), m);
        let raw = image::open(&path).unwrap();
        assert_eq!(raw.color(), image::ColorType::L8);
    }

    #[test]
    fn image_png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let bytes: Vec<u8> = (0..6 * 7 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImagePlane::from_u8(6, 7, 3, &bytes).unwrap();
        img.save_png(&path).unwrap();
        let back = ImagePlane::open(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_u8(), bytes);
    }

    #[test]
    fn float_plane_stream_round_trip_and_errors() {
        let p = FloatPlane::from_fn(3, 4, |y, x| y as f32 * -1.5 + x as f32 * 0.25).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"FPLANE01");
        assert_eq!(buf.len(), 16 + 12 * 4);
        assert_eq!(FloatPlane::read_from(&buf[..]).unwrap(), p);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            FloatPlane::read_from(&bad[..]),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            FloatPlane::read_from(&buf[..buf.len() - 4]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn constructors_validate() {
        assert!(ImagePlane::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImagePlane::new(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(ImagePlane::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(FloatPlane::new(1, 2, vec![0.0, f32::INFINITY]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
    }

    #[test]
    fn geometry_counts() {
        let g = PatchGridGeometry::for_window(504, 14).unwrap();
        assert_eq!((g.grid_h, g.grid_w, g.num_patches()), (36, 36, 1296));
        assert!(PatchGridGeometry::for_window(500, 14).is_err());
    }

    #[test]
    fn overlay_tints_forged_pixels() {
        let img = ImagePlane::filled(2, 2, 3, 0.0).unwrap();
        let mask = BinaryMask::from_fn(2, 2, |y, x| y == 0 && x == 0);
        let o = overlay(&img, &mask, 0.5).unwrap();
        assert_eq!(o.get_pixel(0, 0).0, [128, 0, 0]);
        assert_eq!(o.get_pixel(1, 1).0, [0, 0, 0]);
    }

    proptest::proptest! {
        #[test]
        fn crop_of_mirror_pad_is_identity(h in 2usize..20, w in 2usize..20, r in 0usize..19, b in 0usize..19) {
            let r = r % w;
            let b = b % h;
            let img = ramp(h, w, 3);
            let padded = img.mirror_pad(r, b).unwrap();
            proptest::prop_assert_eq!(padded.crop(0, 0, h, w).unwrap(), img);
        }
    }
}
