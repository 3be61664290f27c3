use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use patchloc_core::dataset::{window_stats, Diagnostic};
use patchloc_core::{BinaryMask, TilerConfig, TrainConfig};
use rayon::prelude::*;

use crate::common::{
    create_dir, load_dataset, with_jobs, write_file, write_jsonl, write_skipped, CmdResult, RunManifest, SplitArg,
};
use crate::{resolve, CommonArgs, TilerArgs};

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Dataset manifest (TOML).
    pub dataset: PathBuf,

    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,

    /// Histogram bin width.
    #[arg(long, default_value_t = 0.02)]
    pub bin_width: f64,

    #[command(flatten)]
    pub tiler: TilerArgs,

    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(a: &StatsArgs) -> CmdResult {
    let started = Instant::now();
    if !(a.bin_width > 0.0 && a.bin_width <= 1.0) {
        return Err(crate::common::Failure::Usage("--bin-width must lie in (0, 1]".into()));
    }
    let cfg = resolve(&a.common, a.tiler.tiler(TilerConfig::default().window), TrainConfig::default())?;
    let ing = load_dataset(&a.dataset)?;
    let samples: Vec<_> = a.split.select(&ing).into_iter().filter(|s| s.mask.is_some()).collect();
    create_dir(&a.out)?;

    let loaded: Vec<Result<(String, BinaryMask), Diagnostic>> = with_jobs(a.common.jobs, || {
        samples
            .par_iter()
            .map(|s| {
                let p = s.mask.as_ref().expect("filtered");
                BinaryMask::open(p)
                    .map(|m| (format!("{}/{}", s.dataset, s.id), m))
                    .map_err(|e| Diagnostic {
                        dataset: s.dataset.clone(),
                        path: p.clone(),
                        reason: e.to_string(),
                    })
            })
            .collect()
    })?;
    let mut skipped = ing.skipped.clone();
    let mut masks = Vec::new();
    for r in loaded {
        match r {
            Ok(m) => masks.push(m),
            Err(d) => {
                eprintln!("skipped {}: {}", d.path.display(), d.reason);
                skipped.push(d);
            }
        }
    }
    let stats = with_jobs(a.common.jobs, || window_stats(&masks, &cfg.tiler, a.bin_width))??;

    write_jsonl(&a.out.join("per_image.jsonl"), &stats.per_image)?;
    let mut hist = String::from("bin_low,count\n");
    for (low, n) in &stats.histogram {
        hist.push_str(&format!("{low:.4},{n}\n"));
    }
    write_file(&a.out.join("histogram.csv"), hist.as_bytes())?;
    let summary = serde_json::json!({
        "images": stats.per_image.len(),
        "images_with_modified_windows": stats.per_image.iter().filter(|s| s.window_fraction.is_some()).count(),
        "mean_mask_fraction": stats.mean_mask_fraction,
        "mean_window_fraction": stats.mean_window_fraction,
        "bin_width": stats.bin_width,
    });
    write_file(
        &a.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("json").as_bytes(),
    )?;
    write_skipped(&a.out, &skipped)?;

    let mut manifest = RunManifest::new("stats", &cfg);
    manifest.timings_s.insert("total".into(), started.elapsed().as_secs_f64());
    manifest.details = serde_json::json!({ "dataset": a.dataset, "summary": summary, "skipped": skipped.len() });
    manifest.write(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}
