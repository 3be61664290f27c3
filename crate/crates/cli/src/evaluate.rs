use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use patchloc_core::evaluate::{curves_csv, evaluate_grid, severity_curves, TiledLocalizer};
use patchloc_core::metrics::{aggregate, format_table, GroupKey};
use patchloc_core::perturb::robustness_grid;
use patchloc_core::{PerturbationSpec, TrainConfig};

use crate::common::{
    create_dir, load_dataset, open_backend, open_head, with_jobs, write_file, write_jsonl, write_skipped, CmdResult,
    Failure, RunManifest, SplitArg,
};
use crate::{resolve, CommonArgs, TilerArgs};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Dataset manifest (TOML).
    pub dataset: PathBuf,

    #[arg(long, default_value = "patch-stats")]
    pub backend: String,

    /// Head file, `unit:K` or `attn-avg`.
    #[arg(long)]
    pub head: String,

    /// `none`, `grid` (the fifteen robustness conditions) or a comma-separated
    /// list of tags such as `jpeg80,resize50,noise7`.
    #[arg(long, default_value = "none")]
    pub perturb: String,

    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,

    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub tiler: TilerArgs,

    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn parse_specs(s: &str) -> CmdResult<Vec<PerturbationSpec>> {
    match s {
        "grid" => Ok(robustness_grid()),
        _ => s
            .split(',')
            .map(|t| t.trim().parse().map_err(|e: patchloc_core::Error| Failure::Usage(e.to_string())))
            .collect(),
    }
}

pub fn run(a: &EvaluateArgs) -> CmdResult {
    let started = Instant::now();
    let specs = parse_specs(&a.perturb)?;
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
    let ing = load_dataset(&a.dataset)?;
    let samples = a.split.select(&ing);
    create_dir(&a.out)?;

    let localizer = TiledLocalizer {
        backend: backend.as_ref(),
        head: &head,
        config: cfg.tiler,
    };
    let outcome = with_jobs(a.common.jobs, || evaluate_grid(samples.as_slice(), &specs, cfg.seed, &localizer))?;
    for f in &outcome.failures {
        eprintln!("{}/{} [{}]: {}", f.dataset, f.image, f.perturbation, f.error);
    }
    if !a.common.keep_going && !outcome.failures.is_empty() {
        let f = &outcome.failures[0];
        return Err(Failure::Run(format!("{}/{}: {}", f.dataset, f.image, f.error)));
    }

    let rows = &outcome.rows;
    write_jsonl(&a.out.join("scores.jsonl"), rows)?;
    let mut summary = String::new();
    for keys in [
        vec![GroupKey::Dataset, GroupKey::Perturbation],
        vec![GroupKey::Perturbation, GroupKey::Pristine],
    ] {
        summary.push_str(&format_table(&aggregate(rows, &keys), &keys));
        summary.push('\n');
    }
    write_file(&a.out.join("summary.txt"), summary.as_bytes())?;
    let curves = severity_curves(rows)?;
    write_file(&a.out.join("curves.csv"), curves_csv(&curves).as_bytes())?;
    write_jsonl(&a.out.join("failures.jsonl"), &outcome.failures)?;
    write_skipped(&a.out, &ing.skipped)?;

    let mut manifest = RunManifest::new("evaluate", &cfg);
    manifest.backend = Some(desc);
    manifest.head = Some(head_info);
    manifest.timings_s.insert("total".into(), started.elapsed().as_secs_f64());
    manifest.details = serde_json::json!({
        "dataset": a.dataset,
        "split": format!("{:?}", a.split).to_lowercase(),
        "images": samples.len(),
        "perturbations": specs.iter().map(|s| s.tag()).collect::<Vec<_>>(),
        "rows": rows.len(),
        "failures": outcome.failures.len(),
        "skipped": ing.skipped.len(),
    });
    manifest.write(&a.out)?;
    print!("{summary}");
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(outcome.failures.len()))
    }
}
