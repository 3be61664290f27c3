//! Pixel-level localization scores and their aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::BinaryMask;

/// Stabilizer in the precision, recall and F1 denominators.
pub const SCORE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Neither prediction nor ground truth has a positive pixel.
    pub fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::structural(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// IoU has no stabilizer; when both masks are empty IoU and F1 are 1.
pub fn scores(c: &ConfusionCounts, eps: f64) -> Scores {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let precision = tp / (tp + fp + eps);
    let recall = tp / (tp + fn_ + eps);
    if c.both_empty() {
        return Scores {
            iou: 1.0,
            f1: 1.0,
            precision,
            recall,
        };
    }
    Scores {
        iou: tp / (tp + fp + fn_),
        f1: 2.0 * precision * recall / (precision + recall + eps),
        precision,
        recall,
    }
}

pub fn score_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Scores> {
    Ok(scores(&confusion(pred, gt)?, SCORE_EPS))
}

/// One evaluated image under one perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub dataset: String,
    pub image: String,
    pub perturbation: String,
    /// Ground truth has no forged pixel.
    pub pristine: bool,
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl ScoreRow {
    pub fn new(dataset: &str, image: &str, perturbation: &str, pristine: bool, s: Scores) -> Self {
        Self {
            dataset: dataset.into(),
            image: image.into(),
            perturbation: perturbation.into(),
            pristine,
            iou: s.iou,
            f1: s.f1,
            precision: s.precision,
            recall: s.recall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupKey {
    Dataset,
    Perturbation,
    Pristine,
}

impl std::str::FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(GroupKey::Dataset),
            "perturbation" => Ok(GroupKey::Perturbation),
            "pristine" => Ok(GroupKey::Pristine),
            other => Err(Error::invalid(format!("unknown grouping key {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group: Vec<String>,
    pub count: usize,
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn key_of(row: &ScoreRow, keys: &[GroupKey]) -> Vec<String> {
    keys.iter()
        .map(|k| match k {
            GroupKey::Dataset => row.dataset.clone(),
            GroupKey::Perturbation => row.perturbation.clone(),
            GroupKey::Pristine => if row.pristine { "pristine" } else { "forged" }.to_string(),
        })
        .collect()
}

/// Arithmetic means per group, ordered by group key.
pub fn aggregate(rows: &[ScoreRow], keys: &[GroupKey]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<Vec<String>, [f64; 5]> = BTreeMap::new();
    for r in rows {
        let g = groups.entry(key_of(r, keys)).or_default();
        g[0] += 1.0;
        g[1] += r.iou;
        g[2] += r.f1;
        g[3] += r.precision;
        g[4] += r.recall;
    }
    groups
        .into_iter()
        .map(|(group, s)| AggregateRow {
            group,
            count: s[0] as usize,
            iou: s[1] / s[0],
            f1: s[2] / s[0],
            precision: s[3] / s[0],
            recall: s[4] / s[0],
        })
        .collect()
}

/// Aligned plain-text table of aggregated rows.
pub fn format_table(rows: &[AggregateRow], keys: &[GroupKey]) -> String {
    let mut header: Vec<String> = keys
        .iter()
        .map(|k| format!("{k:?}").to_lowercase())
        .collect();
    header.extend(["n", "iou", "f1", "precision", "recall"].map(String::from));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = r.group.clone();
            v.push(r.count.to_string());
            v.extend([r.iou, r.f1, r.precision, r.recall].map(|x| format!("{x:.4}")));
            v
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i < keys.len() { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule);
    for r in &body {
        line(&mut out, r);
    }
    out
}
