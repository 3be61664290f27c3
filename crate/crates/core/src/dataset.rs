//! Dataset manifests, ingestion, splitting, labeling policy and window statistics.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::plane::{BinaryMask, ImagePlane};
use crate::tiler::{plan_windows, TilerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Original,
    Autoencoded,
    Regenerated,
    /// Not declared by the manifest.
    #[default]
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// How pixels that only passed through an autoencoder are labeled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelPolicy {
    #[default]
    Pristine,
    Fake,
}

/// One dataset entry of a manifest file.
///
/// `mask` is a template resolved per image: `{stem}` is the file stem,
/// `{name}` the file name, `{ext}` the extension and `{dir}` the image's
/// directory relative to `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// Relative paths resolve against the manifest's directory.
    pub root: PathBuf,
    /// Glob for manipulated images, relative to `root`.
    pub images: String,
    pub mask: String,
    /// Glob for images without any manipulated pixel.
    #[serde(default)]
    pub pristine: Option<String>,
    /// Glob of all mask files, used to report masks no image refers to.
    #[serde(default)]
    pub masks: Option<String>,
    #[serde(default)]
    pub background: BackgroundKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetSpec>,
    /// Directory the manifest was read from.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Manifest = toml::from_str(text).map_err(|e| Error::Config(format!("dataset manifest: {e}")))?;
        m.base = base.into();
        let mut names = BTreeSet::new();
        for d in &m.datasets {
            if !names.insert(&d.name) {
                return Err(Error::Config(format!("dataset {:?} declared twice", d.name)));
            }
        }
        Ok(m)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).with_path(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| e.with_path(path))
    }

    /// SHA-256 over the sorted sample list; identifies a training corpus.
    pub fn fingerprint(samples: &[Sample]) -> String {
        let mut ids: Vec<String> = samples
            .iter()
            .map(|s| format!("{}\t{}\t{:?}", s.dataset, s.id, s.split))
            .collect();
        ids.sort();
        hex::encode(Sha256::digest(ids.join("\n").as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub dataset: String,
    /// Image path relative to the dataset root, `/`-separated.
    pub id: String,
    pub image: PathBuf,
    /// `None` for fully pristine images.
    pub mask: Option<PathBuf>,
    pub background: BackgroundKind,
    pub split: Split,
}

impl Sample {
    /// Loads the image and its mask, empty when the sample is pristine.
    pub fn load(&self) -> Result<(ImagePlane, BinaryMask)> {
        let img = ImagePlane::open(&self.image)?;
        let mask = match &self.mask {
            Some(p) => {
                let m = BinaryMask::open(p)?;
                if m.dims() != img.dims() {
                    return Err(Error::structural(format!(
                        "mask is {:?}, image is {:?}",
                        m.dims(),
                        img.dims()
                    ))
                    .with_path(p));
                }
                m
            }
            None => BinaryMask::empty(img.height(), img.width()),
        };
        Ok((img, mask))
    }

    pub fn is_pristine(&self) -> bool {
        self.mask.is_none()
    }
}

/// Why a file was left out during ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub dataset: String,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub samples: Vec<Sample>,
    pub skipped: Vec<Diagnostic>,
}

impl Ingested {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }
}

fn rel_id(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn glob_sorted(root: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let full = root.join(pattern);
    let pat = full.to_string_lossy();
    let mut out: Vec<PathBuf> = glob::glob(&pat)
        .map_err(|e| Error::Config(format!("bad glob {pattern:?}: {e}")))?
        .filter_map(|r| r.ok())
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

/// Resolves a mask template for an image path relative to `root`.
pub fn resolve_mask(template: &str, root: &Path, image: &Path) -> PathBuf {
    let rel = image.strip_prefix(root).unwrap_or(image);
    let stem = rel.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = rel.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = rel.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = rel.parent().map(|d| rel_id(Path::new(""), d)).unwrap_or_default();
    root.join(
        template
            .replace("{stem}", &stem)
            .replace("{name}", &name)
            .replace("{ext}", &ext)
            .replace("{dir}", &dir),
    )
}

/// Deterministic 80/10/10 split: order by a seeded hash of the id, then cut.
pub fn assign_splits(ids: &[String], seed: u64) -> Vec<Split> {
    let mut order: Vec<(Vec<u8>, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(id.as_bytes());
            (h.finalize().to_vec(), i)
        })
        .collect();
    order.sort();
    let n = ids.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut splits = vec![Split::Test; n];
    for (rank, &(_, i)) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Walks every dataset of the manifest. Files that cannot be paired or whose
/// sizes disagree are skipped and reported.
pub fn ingest(manifest: &Manifest) -> Result<Ingested> {
    let mut out = Ingested::default();
    for spec in &manifest.datasets {
        let root = if spec.root.is_absolute() {
            spec.root.clone()
        } else {
            manifest.base.join(&spec.root)
        };
        let mut found: Vec<(String, PathBuf, Option<PathBuf>)> = Vec::new();
        let mut used_masks = BTreeSet::new();
        let diag = |path: &Path, reason: String| Diagnostic {
            dataset: spec.name.clone(),
            path: path.to_path_buf(),
            reason,
        };
        for img in glob_sorted(&root, &spec.images)? {
            let mask = resolve_mask(&spec.mask, &root, &img);
            if !mask.is_file() {
                out.skipped.push(diag(&img, format!("mask {} not found", mask.display())));
                continue;
            }
            used_masks.insert(mask.clone());
            match (image::image_dimensions(&img), image::image_dimensions(&mask)) {
                (Ok(a), Ok(b)) if a == b => {
                    found.push((rel_id(&root, &img), img, Some(mask)));
                }
                (Ok(a), Ok(b)) => out.skipped.push(diag(
                    &img,
                    format!("image is {}x{}, mask is {}x{}", a.1, a.0, b.1, b.0),
                )),
                (Err(e), _) => out.skipped.push(diag(&img, format!("unreadable image: {e}"))),
                (_, Err(e)) => out.skipped.push(diag(&mask, format!("unreadable mask: {e}"))),
            }
        }
        if let Some(p) = &spec.pristine {
            for img in glob_sorted(&root, p)? {
                match image::image_dimensions(&img) {
                    Ok(_) => found.push((rel_id(&root, &img), img, None)),
                    Err(e) => out.skipped.push(diag(&img, format!("unreadable image: {e}"))),
                }
            }
        }
        if let Some(m) = &spec.masks {
            for mask in glob_sorted(&root, m)? {
                if !used_masks.contains(&mask) && !found.iter().any(|f| f.1 == mask) {
                    out.skipped.push(diag(&mask, "orphan mask: no image refers to it".into()));
                }
            }
        }
        found.sort_by(|a, b| a.0.cmp(&b.0));
        found.dedup_by(|a, b| a.0 == b.0);
        let ids: Vec<String> = found.iter().map(|f| f.0.clone()).collect();
        let splits = assign_splits(&ids, manifest.seed);
        for ((id, image, mask), split) in found.into_iter().zip(splits) {
            out.samples.push(Sample {
                dataset: spec.name.clone(),
                id,
                image,
                mask,
                background: spec.background,
                split,
            });
        }
    }
    Ok(out)
}

/// Training target for a sample's mask. Under [`LabelPolicy::Fake`], an
/// autoencoded or regenerated background makes every pixel a target.
pub fn effective_mask(mask: &BinaryMask, background: BackgroundKind, policy: LabelPolicy) -> Result<BinaryMask> {
    match (policy, background) {
        (LabelPolicy::Pristine, _) | (LabelPolicy::Fake, BackgroundKind::Original) => Ok(mask.clone()),
        (LabelPolicy::Fake, BackgroundKind::Autoencoded | BackgroundKind::Regenerated) => {
            Ok(BinaryMask::full(mask.height(), mask.width()))
        }
        (LabelPolicy::Fake, BackgroundKind::Unknown) => Err(Error::Unsupported(
            "labeling autoencoded pixels as fake needs a declared background kind".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageWindowStats {
    pub id: String,
    /// Modified fraction of the whole image.
    pub mask_fraction: f64,
    pub windows: usize,
    pub modified_windows: usize,
    /// Mean modified fraction over windows with at least one modified pixel.
    pub window_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub per_image: Vec<ImageWindowStats>,
    /// Mean of `mask_fraction` over images with a modified pixel.
    pub mean_mask_fraction: Option<f64>,
    /// Mean of `window_fraction` over images that have one.
    pub mean_window_fraction: Option<f64>,
    pub bin_width: f64,
    /// `(bin_low, count)` histogram of per-image window fractions.
    pub histogram: Vec<(f64, usize)>,
}

/// Mask seen by the tiler: upscaled with nearest sampling, then mirror-padded.
fn tiled_mask(mask: &BinaryMask, cfg: &TilerConfig) -> Result<(BinaryMask, Vec<(usize, usize)>, usize)> {
    let plan = plan_windows(mask.height(), mask.width(), cfg)?;
    let scaled = if plan.is_upscaled() {
        mask.resize_nearest(plan.scaled.0, plan.scaled.1)?
    } else {
        mask.clone()
    };
    let padded = scaled.mirror_pad(plan.padded.1 - plan.scaled.1, plan.padded.0 - plan.scaled.0)?;
    Ok((padded, plan.origins, plan.window))
}

pub fn image_window_stats(id: &str, mask: &BinaryMask, cfg: &TilerConfig) -> Result<ImageWindowStats> {
    let (m, origins, win) = tiled_mask(mask, cfg)?;
    let (h, w) = m.dims();
    // summed-area table with a zero border
    let mut sat = vec![0u64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += m.get(y, x) as u64;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let rect = |t: usize, l: usize| {
        let (b, r) = (t + win, l + win);
        sat[b * (w + 1) + r] + sat[t * (w + 1) + l] - sat[t * (w + 1) + r] - sat[b * (w + 1) + l]
    };
    let area = (win * win) as f64;
    let fractions: Vec<f64> = origins
        .iter()
        .map(|&(t, l)| rect(t, l))
        .filter(|&c| c > 0)
        .map(|c| c as f64 / area)
        .collect();
    Ok(ImageWindowStats {
        id: id.to_string(),
        mask_fraction: mask.fraction(),
        windows: origins.len(),
        modified_windows: fractions.len(),
        window_fraction: (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
    })
}

/// Histogram of values in `[0, 1]` with bins of `width`; 1.0 falls in the last bin.
pub fn histogram(values: &[f64], width: f64) -> Vec<(f64, usize)> {
    let bins = (1.0 / width).round() as usize;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = ((v / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts.into_iter().enumerate().map(|(i, c)| (i as f64 * width, c)).collect()
}

/// Aggregates per-image statistics. Images without a modified pixel appear in
/// `per_image` but not in the means or the histogram.
pub fn summarize(per_image: Vec<ImageWindowStats>, bin_width: f64) -> WindowStats {
    let wf: Vec<f64> = per_image.iter().filter_map(|s| s.window_fraction).collect();
    let mf: Vec<f64> = per_image
        .iter()
        .filter(|s| s.window_fraction.is_some())
        .map(|s| s.mask_fraction)
        .collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    WindowStats {
        mean_mask_fraction: mean(&mf),
        mean_window_fraction: mean(&wf),
        bin_width,
        histogram: if wf.is_empty() { Vec::new() } else { histogram(&wf, bin_width) },
        per_image,
    }
}

pub fn window_stats(masks: &[(String, BinaryMask)], cfg: &TilerConfig, bin_width: f64) -> Result<WindowStats> {
    use rayon::prelude::*;
    let per_image = masks
        .par_iter()
        .map(|(id, m)| image_window_stats(id, m, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_image, bin_width))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, h: usize, w: usize) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        ImagePlane::filled(h, w, 3, 0.5).unwrap().save_png(path).unwrap();
    }

    fn write_mask(path: &Path, h: usize, w: usize) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        BinaryMask::from_fn(h, w, |y, _| y < h / 2).save_png(path).unwrap();
    }

    #[test]
    fn ten_ids_split_eight_one_one() {
        let ids: Vec<String> = (0..10).map(|i| format!("img{i}.png")).collect();
        let s = assign_splits(&ids, 3);
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
        assert_eq!(assign_splits(&ids, 3), s);
    }

    #[test]
    fn ingest_pairs_skips_and_pristine() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        for i in 0..4 {
            write_png(&root.join(format!("fake/a{i}.png")), 8, 10);
            if i != 3 {
                write_mask(&root.join(format!("mask/a{i}_mask.png")), 8, 10);
            }
        }
        write_mask(&root.join("mask/a9_mask.png"), 8, 10);
        write_png(&root.join("fake/bad.png"), 8, 10);
        write_mask(&root.join("mask/bad_mask.png"), 9, 10);
        write_png(&root.join("real/r0.png"), 5, 5);
        let text = r#"
            seed = 1
            [[dataset]]
            name = "toy"
            root = "ds"
            images = "fake/*.png"
            mask = "mask/{stem}_mask.png"
            masks = "mask/*.png"
            pristine = "real/*.png"
            background = "original"
        "#;
        let m = Manifest::parse(text, dir.path()).unwrap();
        let ing = ingest(&m).unwrap();
        let ids: Vec<&str> = ing.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["fake/a0.png", "fake/a1.png", "fake/a2.png", "real/r0.png"]);
        assert_eq!(ing.skipped.len(), 3, "{:?}", ing.skipped);
        let r0 = &ing.samples[3];
        assert!(r0.is_pristine());
        let (img, mask) = r0.load().unwrap();
        assert_eq!(img.dims(), (5, 5));
        assert!(mask.is_empty());
        let (_, m0) = ing.samples[0].load().unwrap();
        assert_eq!(m0.count(), 40);
    }

    #[test]
    fn manifest_errors() {
        assert!(Manifest::parse("[[dataset]]\nname = 1", ".").is_err());
        let dup = r#"
            [[dataset]]
            name = "a"
            root = "."
            images = "*.png"
            mask = "{stem}.png"
            [[dataset]]
            name = "a"
            root = "."
            images = "*.png"
            mask = "{stem}.png"
        "#;
        assert!(matches!(Manifest::parse(dup, "."), Err(Error::Config(_))));
    }

    #[test]
    fn mask_template_placeholders() {
        let root = Path::new("/data");
        let p = resolve_mask("{dir}/gt/{stem}.{ext}", root, Path::new("/data/sub/x.jpg"));
        assert_eq!(p, PathBuf::from("/data/sub/gt/x.jpg"));
        let p = resolve_mask("masks/{name}", root, Path::new("/data/x.png"));
        assert_eq!(p, PathBuf::from("/data/masks/x.png"));
    }

    #[test]
    fn label_policies() {
        let m = BinaryMask::from_fn(4, 4, |y, x| y == x);
        assert_eq!(effective_mask(&m, BackgroundKind::Original, LabelPolicy::Pristine).unwrap(), m);
        assert_eq!(effective_mask(&m, BackgroundKind::Original, LabelPolicy::Fake).unwrap(), m);
        assert_eq!(effective_mask(&m, BackgroundKind::Autoencoded, LabelPolicy::Pristine).unwrap(), m);
        let fake = effective_mask(&m, BackgroundKind::Autoencoded, LabelPolicy::Fake).unwrap();
        assert_eq!(fake.count(), 16);
        assert!(matches!(
            effective_mask(&m, BackgroundKind::Unknown, LabelPolicy::Fake),
            Err(Error::Unsupported(_))
        ));
        for bg in [BackgroundKind::Original, BackgroundKind::Autoencoded, BackgroundKind::Regenerated] {
            let p = effective_mask(&m, bg, LabelPolicy::Pristine).unwrap();
            let f = effective_mask(&m, bg, LabelPolicy::Fake).unwrap();
            assert!(p.data().iter().zip(f.data()).all(|(&a, &b)| !a || b));
        }
    }

    fn brute_force(mask: &BinaryMask, cfg: &TilerConfig) -> Option<f64> {
        let (m, origins, win) = tiled_mask(mask, cfg).unwrap();
        let mut fr = Vec::new();
        for (t, l) in origins {
            let mut c = 0usize;
            for y in t..t + win {
                for x in l..l + win {
                    c += m.get(y, x) as usize;
                }
            }
            if c > 0 {
                fr.push(c as f64 / (win * win) as f64);
            }
        }
        (!fr.is_empty()).then(|| fr.iter().sum::<f64>() / fr.len() as f64)
    }

    #[test]
    fn window_stats_match_brute_force() {
        let cfg = TilerConfig::default();
        let half = BinaryMask::from_fn(504, 504, |_, x| x < 252);
        let s = image_window_stats("half", &half, &cfg).unwrap();
        assert_eq!(s.window_fraction, brute_force(&half, &cfg));
        assert_eq!(s.windows, 25);
        let full = image_window_stats("full", &BinaryMask::full(700, 900), &cfg).unwrap();
        assert_eq!(full.window_fraction, Some(1.0));
        let blob = BinaryMask::from_fn(1100, 1300, |y, x| (300..420).contains(&y) && (900..1250).contains(&x));
        let s = image_window_stats("blob", &blob, &cfg).unwrap();
        assert_eq!(s.window_fraction, brute_force(&blob, &cfg));
        let none = image_window_stats("none", &BinaryMask::empty(600, 600), &cfg).unwrap();
        assert_eq!(none.window_fraction, None);
    }

    #[test]
    fn summary_and_histogram() {
        assert_eq!(window_stats(&[], &TilerConfig::default(), 0.02).unwrap().histogram, vec![]);
        let h = histogram(&[0.0, 0.019, 0.02, 1.0, 0.5], 0.02);
        assert_eq!(h.len(), 50);
        assert_eq!(h[0].1, 2);
        assert_eq!(h[1].1, 1);
        assert_eq!(h[25].1, 1);
        assert_eq!(h[49].1, 1);
        let st = window_stats(
            &[
                ("a".into(), BinaryMask::full(504, 504)),
                ("b".into(), BinaryMask::empty(504, 504)),
            ],
            &TilerConfig::default(),
            0.02,
        )
        .unwrap();
        assert_eq!(st.mean_window_fraction, Some(1.0));
        assert_eq!(st.per_image.len(), 2);
    }
}
