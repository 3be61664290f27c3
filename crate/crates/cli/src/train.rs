use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use patchloc_core::heads::{HeadProvenance, HeadVariant};
use patchloc_core::trainer::{train_attention_weights, train_variant, EmbeddingCache, SampleSource};
use patchloc_core::{Manifest, TrainConfig};

use crate::common::{
    create_dir, load_dataset, open_backend, with_jobs, write_file, write_jsonl, write_skipped, CmdResult, Failure,
    HeadInfo, RunManifest,
};
use crate::{default_tiler, resolve, CommonArgs};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest (TOML).
    pub dataset: PathBuf,

    /// linear, mlp, attn-avg or attn-w.
    #[arg(long, value_parser = parse_variant)]
    pub variant: HeadVariant,

    #[arg(long, default_value = "patch-stats")]
    pub backend: String,

    /// Output directory for the head, history and manifest.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub max_epochs: Option<usize>,

    #[arg(long)]
    pub max_steps: Option<usize>,

    #[arg(long)]
    pub images_per_epoch: Option<usize>,

    #[command(flatten)]
    pub common: CommonArgs,
}

fn parse_variant(s: &str) -> Result<HeadVariant, String> {
    s.parse().map_err(|e: patchloc_core::Error| e.to_string())
}

pub fn run(a: &TrainArgs) -> CmdResult {
    let started = Instant::now();
    let backend = open_backend(&a.backend)?;
    let desc = backend.descriptor();
    let d = TrainConfig::default();
    let train_flags = TrainConfig {
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        max_epochs: a.max_epochs.unwrap_or(d.max_epochs),
        max_steps: a.max_steps,
        images_per_epoch: a.images_per_epoch,
        ..d
    };
    let cfg = resolve(&a.common, default_tiler(desc.window), train_flags)?;
    if cfg.augment.size != desc.window {
        return Err(Failure::Usage(format!(
            "augment.size {} does not match backend window {}",
            cfg.augment.size, desc.window
        )));
    }
    let needs_attention = matches!(a.variant, HeadVariant::AttentionAverage | HeadVariant::AttentionWeighted);
    if needs_attention && desc.heads == 0 {
        return Err(Failure::Usage(format!("{} needs a backend with attention maps", a.variant)));
    }

    let ing = load_dataset(&a.dataset)?;
    let train = SampleSource {
        samples: ing.split(patchloc_core::Split::Train),
        policy: cfg.train.label_policy,
    };
    let val = SampleSource {
        samples: ing.split(patchloc_core::Split::Val),
        policy: cfg.train.label_policy,
    };
    let cache = EmbeddingCache::from_env()?;
    create_dir(&a.out)?;

    let outcome = with_jobs(a.common.jobs, || {
        if a.variant == HeadVariant::AttentionWeighted {
            train_attention_weights(backend.as_ref(), &train, &val, &cfg.train, &cfg.augment)
        } else {
            train_variant(a.variant, backend.as_ref(), &train, &val, &cfg.train, &cfg.augment, cache.as_ref())
        }
    })??;

    let provenance = HeadProvenance {
        dataset_hash: Some(Manifest::fingerprint(&train.samples)),
        epochs: Some(outcome.history.len()),
        final_val_loss: outcome.history.get(outcome.best_epoch).and_then(|r| r.val_loss),
        backend: Some(desc.provenance.clone()),
        optimizer: Some(serde_json::to_value(&cfg.train).expect("serializable config")),
    };
    let head_path = a.out.join("head.plc");
    outcome.head.save(&provenance, &head_path)?;
    write_jsonl(&a.out.join("history.jsonl"), &outcome.history)?;
    let mut steps = String::from("step,loss\n");
    for (i, l) in outcome.step_losses.iter().enumerate() {
        steps.push_str(&format!("{i},{l}\n"));
    }
    write_file(&a.out.join("steps.csv"), steps.as_bytes())?;
    write_skipped(&a.out, &ing.skipped)?;

    let bytes = std::fs::read(&head_path).map_err(|e| crate::common::io_err(&head_path, e))?;
    let mut manifest = RunManifest::new("train", &cfg);
    manifest.backend = Some(desc);
    manifest.head = Some(HeadInfo {
        source: head_path.display().to_string(),
        variant: a.variant,
        sha256: {
            use sha2::Digest;
            hex::encode(sha2::Sha256::digest(&bytes))
        },
    });
    manifest.timings_s.insert("total".into(), started.elapsed().as_secs_f64());
    for (i, t) in outcome.epoch_times.iter().enumerate() {
        manifest.timings_s.insert(format!("epoch_{i:03}"), t.as_secs_f64());
    }
    manifest.details = serde_json::json!({
        "dataset": a.dataset,
        "variant": a.variant,
        "train_images": train.samples.len(),
        "val_images": val.samples.len(),
        "best_epoch": outcome.best_epoch,
        "stop": outcome.stop,
        "steps": outcome.step_losses.len(),
        "cache": cache.as_ref().map(|c| c.dir().to_path_buf()),
    });
    manifest.write(&a.out)?;
    Ok(())
}
