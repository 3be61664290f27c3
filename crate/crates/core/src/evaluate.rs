//! Scoring a localizer over a dataset under a list of perturbations.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingBackend;
use crate::error::Result;
use crate::heads::Head;
use crate::metrics::{score_masks, ScoreRow};
use crate::perturb::{apply, apply_to_mask, PerturbationSpec};
use crate::plane::{BinaryMask, ImagePlane};
use crate::tiler::{localize, TilerConfig};
use crate::trainer::mix_seed;

/// Anything that turns an image into a binary forgery mask of the same size.
pub trait Localizer: Sync {
    fn predict(&self, img: &ImagePlane) -> Result<BinaryMask>;
}

impl<F> Localizer for F
where
    F: Fn(&ImagePlane) -> Result<BinaryMask> + Sync,
{
    fn predict(&self, img: &ImagePlane) -> Result<BinaryMask> {
        self(img)
    }
}

/// Sliding-window localization with a backend and a head.
pub struct TiledLocalizer<'a, B: EmbeddingBackend + ?Sized> {
    pub backend: &'a B,
    pub head: &'a Head,
    pub config: TilerConfig,
}

impl<B: EmbeddingBackend + ?Sized> Localizer for TiledLocalizer<'_, B> {
    fn predict(&self, img: &ImagePlane) -> Result<BinaryMask> {
        Ok(localize(img, self.backend, self.head, &self.config)?.mask)
    }
}

/// Indexed evaluation images with their ground truth.
pub trait EvalSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dataset name and image id.
    fn label(&self, i: usize) -> (String, String);

    fn load(&self, i: usize) -> Result<(ImagePlane, BinaryMask)>;
}

impl EvalSource for [crate::dataset::Sample] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn label(&self, i: usize) -> (String, String) {
        (self[i].dataset.clone(), self[i].id.clone())
    }

    fn load(&self, i: usize) -> Result<(ImagePlane, BinaryMask)> {
        self[i].load().map_err(|e| e.with_path(&self[i].image))
    }
}

/// In-memory images: (dataset, id, image, mask).
impl EvalSource for [(String, String, ImagePlane, BinaryMask)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn label(&self, i: usize) -> (String, String) {
        (self[i].0.clone(), self[i].1.clone())
    }

    fn load(&self, i: usize) -> Result<(ImagePlane, BinaryMask)> {
        Ok((self[i].2.clone(), self[i].3.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub dataset: String,
    pub image: String,
    pub perturbation: String,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutcome {
    /// Image-major, then in the order of the perturbation list.
    pub rows: Vec<ScoreRow>,
    pub failures: Vec<EvalFailure>,
}

/// Perturbs, localizes and scores one image. Resized images are scored
/// against the nearest-neighbour-resized ground truth.
pub fn score_one<L: Localizer + ?Sized>(
    img: &ImagePlane,
    gt: &BinaryMask,
    spec: &PerturbationSpec,
    seed: u64,
    localizer: &L,
) -> Result<crate::metrics::Scores> {
    let degraded = apply(img, spec, seed)?;
    let target = apply_to_mask(gt, spec)?;
    let pred = localizer.predict(&degraded)?;
    score_masks(&pred, &target)
}

/// Every image under every spec. Images are processed in parallel; the
/// output order does not depend on scheduling. Errors are collected, not
/// raised, so a caller can decide whether partial results are acceptable.
pub fn evaluate_grid<S, L>(source: &S, specs: &[PerturbationSpec], seed: u64, localizer: &L) -> EvalOutcome
where
    S: EvalSource + ?Sized,
    L: Localizer + ?Sized,
{
    let per_image: Vec<(Vec<ScoreRow>, Vec<EvalFailure>)> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let (dataset, image) = source.label(i);
            let fail = |tag: String, e: crate::error::Error| EvalFailure {
                dataset: dataset.clone(),
                image: image.clone(),
                perturbation: tag,
                error: e.to_string(),
            };
            let (img, gt) = match source.load(i) {
                Ok(v) => v,
                Err(e) => return (Vec::new(), vec![fail("*".into(), e)]),
            };
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            for (k, spec) in specs.iter().enumerate() {
                let s = mix_seed(mix_seed(seed, i as u64), k as u64);
                match score_one(&img, &gt, spec, s, localizer) {
                    Ok(sc) => rows.push(ScoreRow::new(&dataset, &image, &spec.tag(), gt.is_empty(), sc)),
                    Err(e) => failures.push(fail(spec.tag(), e)),
                }
            }
            (rows, failures)
        })
        .collect();
    let mut out = EvalOutcome::default();
    for (r, f) in per_image {
        out.rows.extend(r);
        out.failures.extend(f);
    }
    out
}

/// One point of a score-versus-severity curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub family: String,
    pub severity: f64,
    pub count: usize,
    pub iou: f64,
    pub f1: f64,
}

/// Mean scores per perturbation family and severity. The unperturbed rows
/// are repeated in every family as its reference point; they also appear
/// once under the family "none".
pub fn severity_curves(rows: &[ScoreRow]) -> Result<Vec<CurvePoint>> {
    let mut groups: BTreeMap<(&'static str, u64), (usize, f64, f64)> = BTreeMap::new();
    let mut baseline = (0usize, 0.0, 0.0);
    let mut families = std::collections::BTreeSet::new();
    for r in rows {
        let spec: PerturbationSpec = r.perturbation.parse()?;
        let (family, severity) = spec.family();
        families.insert(family);
        if family == "none" {
            baseline.0 += 1;
            baseline.1 += r.iou;
            baseline.2 += r.f1;
        }
        let g = groups.entry((family, severity.to_bits())).or_default();
        g.0 += 1;
        g.1 += r.iou;
        g.2 += r.f1;
    }
    let mut points: Vec<CurvePoint> = groups
        .into_iter()
        .map(|((family, sev), (n, iou, f1))| CurvePoint {
            family: family.into(),
            severity: f64::from_bits(sev),
            count: n,
            iou: iou / n as f64,
            f1: f1 / n as f64,
        })
        .collect();
    if baseline.0 > 0 {
        for family in families.into_iter().filter(|&f| f != "none") {
            let reference = match family {
                "jpeg" | "double_jpeg" => f64::INFINITY,
                "resize" => 100.0,
                _ => 0.0,
            };
            points.push(CurvePoint {
                family: family.into(),
                severity: reference,
                count: baseline.0,
                iou: baseline.1 / baseline.0 as f64,
                f1: baseline.2 / baseline.0 as f64,
            });
        }
    }
    points.sort_by(|a, b| a.family.cmp(&b.family).then(a.severity.total_cmp(&b.severity)));
    Ok(points)
}

/// Curve points as CSV text with a header row.
pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("family,severity,count,iou,f1\n");
    for p in points {
        let sev = if p.severity.is_infinite() {
            "original".to_string()
        } else {
            p.severity.to_string()
        };
        s.push_str(&format!("{},{},{},{:.6},{:.6}\n", p.family, sev, p.count, p.iou, p.f1));
    }
    s
}
