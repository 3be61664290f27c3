use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use patchloc_core::perturb::{apply, augment};
use patchloc_core::trainer::mix_seed;
use patchloc_core::{AugmentationPolicy, BinaryMask, Error, ImagePlane, TilerConfig, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::common::{
    collect_inputs, create_dir, output_path, with_jobs, CmdResult, Failure, InputFile, RunManifest,
};
use crate::evaluate::parse_specs;
use crate::{resolve, CommonArgs};

#[derive(Args, Debug)]
pub struct PerturbArgs {
    /// Image files or directories; directory structure is mirrored.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,

    /// `grid` or a comma-separated list of tags (e.g. `jpeg80,djpeg90-60,resize50,noise7`).
    #[arg(long, default_value = "grid")]
    pub specs: String,

    /// Apply the training augmentation instead, `--copies` times per image.
    /// The `[augment]` table of `--config` configures it.
    #[arg(long)]
    pub augment: bool,

    #[arg(long, default_value_t = 1)]
    pub copies: usize,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Serialize)]
struct Written {
    input: PathBuf,
    outputs: Vec<PathBuf>,
}

pub fn run(a: &PerturbArgs) -> CmdResult {
    let common = &a.common;
    let started = Instant::now();
    let specs = parse_specs(&a.specs)?;
    let cfg = resolve(common, TilerConfig::default(), TrainConfig::default())?;
    let inputs = collect_inputs(&a.inputs)?;
    if inputs.is_empty() {
        return Err(Failure::Usage("no input images found".into()));
    }
    create_dir(&a.out)?;
    let policy: &AugmentationPolicy = &cfg.augment;

    let one = |(i, f): (usize, &InputFile)| -> Result<Written, Error> {
        let img = ImagePlane::open(&f.path)?;
        let mut outputs = Vec::new();
        let mut save = |tag: &str, out: &ImagePlane| -> Result<(), Error> {
            let p = output_path(&a.out, &f.rel_stem, &format!(".{tag}.png"));
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d)?;
            }
            out.save_png(&p)?;
            outputs.push(p);
            Ok(())
        };
        let seed = mix_seed(cfg.seed, i as u64);
        if a.augment {
            let empty = BinaryMask::empty(img.height(), img.width());
            for k in 0..a.copies {
                let (out, _) = augment(&img, &empty, policy, mix_seed(seed, k as u64))?;
                save(&format!("aug{k}"), &out)?;
            }
        } else {
            for (k, spec) in specs.iter().enumerate() {
                save(&spec.tag(), &apply(&img, spec, mix_seed(seed, k as u64))?)?;
            }
        }
        Ok(Written {
            input: f.path.clone(),
            outputs,
        })
    };
    let results: Vec<Result<Written, Error>> =
        with_jobs(common.jobs, || inputs.par_iter().enumerate().map(one).collect())?;

    let mut written = Vec::new();
    let mut failed = Vec::new();
    for (r, f) in results.into_iter().zip(&inputs) {
        match r {
            Ok(w) => written.push(w),
            Err(e) => {
                eprintln!("{}: {e}", f.path.display());
                failed.push(serde_json::json!({ "input": f.path, "error": e.to_string() }));
            }
        }
    }
    if !common.keep_going && !failed.is_empty() {
        return Err(Failure::Run(failed[0].to_string()));
    }
    let mut manifest = RunManifest::new("perturb", &cfg);
    manifest.timings_s.insert("total".into(), started.elapsed().as_secs_f64());
    manifest.details = serde_json::json!({
        "mode": if a.augment { "augment" } else { "specs" },
        "perturbations": specs.iter().map(|s| s.tag()).collect::<Vec<_>>(),
        "written": written,
        "failed": failed,
    });
    manifest.write(&a.out)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(failed.len()))
    }
}
