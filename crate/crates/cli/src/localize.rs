use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use patchloc_core::plane::overlay;
use patchloc_core::tiler::localize;
use patchloc_core::{Error, ImagePlane, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::common::{
    collect_inputs, create_dir, open_backend, open_head, output_path, with_jobs, CmdResult, Failure, InputFile,
    RunManifest,
};
use crate::{resolve, CommonArgs, TilerArgs};

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    /// Image files or directories.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,

    /// `patch-stats[:WINDOW:PATCH]`, a ViT weight file or an embedding fixture file.
    #[arg(long, default_value = "patch-stats")]
    pub backend: String,

    /// Head file, `unit:K` or `attn-avg`.
    #[arg(long)]
    pub head: String,

    /// Directory for the manifest (and outputs not redirected below).
    #[arg(long)]
    pub out: PathBuf,

    /// Directory for mask PNGs.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,

    /// Directory for raw float32 heatmaps.
    #[arg(long)]
    pub heatmap_out: Option<PathBuf>,

    /// Directory for red overlay PNGs; none are written without it.
    #[arg(long)]
    pub overlay_out: Option<PathBuf>,

    #[command(flatten)]
    pub tiler: TilerArgs,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Serialize)]
struct ImageRecord {
    input: PathBuf,
    height: usize,
    width: usize,
    windows: usize,
    scaled: (usize, usize),
    padded: (usize, usize),
    forged_fraction: f64,
    mask: PathBuf,
    heatmap: PathBuf,
    overlay: Option<PathBuf>,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct FailedInput {
    input: PathBuf,
    error: String,
}

pub fn run(a: &LocalizeArgs) -> CmdResult {
    let started = Instant::now();
    let backend = open_backend(&a.backend)?;
    let desc = backend.descriptor();
    let (head, head_info) = open_head(&a.head, &desc)?;
    let cfg = resolve(&a.common, a.tiler.tiler(desc.window), TrainConfig::default())?;
    if cfg.tiler.window != desc.window {
        return Err(Failure::Usage(format!(
            "window {} does not match backend window {}",
            cfg.tiler.window, desc.window
        )));
    }
    let inputs = collect_inputs(&a.inputs)?;
    if inputs.is_empty() {
        return Err(Failure::Usage("no input images found".into()));
    }
    let mask_dir = a.mask_out.clone().unwrap_or_else(|| a.out.clone());
    let heat_dir = a.heatmap_out.clone().unwrap_or_else(|| a.out.clone());
    create_dir(&a.out)?;

    let one = |f: &InputFile| -> Result<ImageRecord, Error> {
        let t = Instant::now();
        let img = ImagePlane::open(&f.path)?;
        let res = localize(&img, backend.as_ref(), &head, &cfg.tiler)?;
        let mask = output_path(&mask_dir, &f.rel_stem, ".mask.png");
        let heatmap = output_path(&heat_dir, &f.rel_stem, ".heatmap.f32");
        for p in [&mask, &heatmap] {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d)?;
            }
        }
        res.mask.save_png(&mask)?;
        res.heatmap.save(&heatmap)?;
        let overlay_path = match &a.overlay_out {
            Some(dir) => {
                let p = output_path(dir, &f.rel_stem, ".overlay.png");
                if let Some(d) = p.parent() {
                    std::fs::create_dir_all(d)?;
                }
                overlay(&img, &res.mask, 0.5)?.save(&p)?;
                Some(p)
            }
            None => None,
        };
        Ok(ImageRecord {
            input: f.path.clone(),
            height: img.height(),
            width: img.width(),
            windows: res.plan.len(),
            scaled: res.plan.scaled,
            padded: res.plan.padded,
            forged_fraction: res.mask.fraction(),
            mask,
            heatmap,
            overlay: overlay_path,
            seconds: t.elapsed().as_secs_f64(),
        })
    };

    let keep_going = a.common.keep_going;
    let results: Vec<Result<ImageRecord, Error>> = with_jobs(a.common.jobs, || inputs.par_iter().map(one).collect())?;

    let mut images = Vec::new();
    let mut failed = Vec::new();
    for (r, f) in results.into_iter().zip(&inputs) {
        match r {
            Ok(rec) => images.push(rec),
            Err(e) => {
                eprintln!("{}: {e}", f.path.display());
                failed.push(FailedInput {
                    input: f.path.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if !keep_going && !failed.is_empty() {
        return Err(Failure::Run(format!("{}: {}", failed[0].input.display(), failed[0].error)));
    }

    let mut manifest = RunManifest::new("localize", &cfg);
    manifest.backend = Some(desc);
    manifest.head = Some(head_info);
    manifest.timings_s.insert("total".into(), started.elapsed().as_secs_f64());
    manifest.details = serde_json::json!({ "images": images, "failed": failed });
    manifest.write(&a.out)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(failed.len()))
    }
}
