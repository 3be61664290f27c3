use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use patchloc_core::backend::{BackendDescriptor, EmbeddingBackend, FixtureBackend, PatchStatsBackend};
use patchloc_core::dataset::{ingest, Diagnostic, Ingested, Manifest, Sample, Split};
use patchloc_core::heads::{Head, HeadVariant, LinearHead};
use patchloc_core::perturb::JPEG_CODEC;
use patchloc_core::{AugmentationPolicy, Error, ReferenceVit, TensorContainer, TilerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// How a command ended badly.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// Processing failed; exit code 1.
    Run(String),
    /// Some inputs failed under `--keep-going`; exit code 1.
    Partial(usize),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(_) | Failure::Partial(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Run(m) => write!(f, "{m}"),
            Failure::Partial(n) => write!(f, "{n} input(s) failed"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Run(e.to_string()),
        }
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

pub fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Run(format!("{}: {e}", path.display()))
}

/// Settings that can come from flags or from a `--config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tiler: TilerConfig,
    pub train: TrainConfig,
    pub augment: AugmentationPolicy,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Overlays the TOML file at `path` on `self`; keys in the file win.
    pub fn with_file(self, path: Option<&Path>) -> CmdResult<Self> {
        let Some(path) = path else { return Ok(self) };
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let over: toml::Table =
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let mut base = toml::Table::try_from(&self).map_err(|e| Failure::Usage(format!("config: {e}")))?;
        merge(&mut base, over);
        let cfg: RunConfig = base
            .try_into()
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CmdResult {
        self.tiler.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Opens a backend from `patch-stats[:window:patch]` or a weight or fixture file.
pub fn open_backend(spec: &str) -> CmdResult<Box<dyn EmbeddingBackend>> {
    if let Some(rest) = spec.strip_prefix("patch-stats") {
        let (window, patch) = match rest.strip_prefix(':') {
            None if rest.is_empty() => (504, 14),
            Some(r) => {
                let bad = || Failure::Usage(format!("backend {spec:?}: expected patch-stats:WINDOW:PATCH"));
                let (w, p) = r.split_once(':').ok_or_else(bad)?;
                (w.parse().map_err(|_| bad())?, p.parse().map_err(|_| bad())?)
            }
            None => return Err(Failure::Usage(format!("unknown backend {spec:?}"))),
        };
        return Ok(Box::new(PatchStatsBackend::new(window, patch, 3).map_err(|e| Failure::Usage(e.to_string()))?));
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Failure::Usage(format!("backend {spec:?} is neither a built-in nor a file")));
    }
    let c = TensorContainer::open(path).map_err(|e| Failure::Usage(format!("{spec}: {e}")))?;
    match c.meta_str("kind") {
        Some("vit-weights") => Ok(Box::new(ReferenceVit::load(path)?)),
        Some("fixture") => Ok(Box::new(FixtureBackend::open(path)?)),
        other => Err(Failure::Usage(format!("{spec}: unsupported container kind {other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub source: String,
    pub variant: HeadVariant,
    pub sha256: String,
}

/// Loads a head file, or builds `unit:K` (linear head on coordinate K) or
/// `attn-avg` for the given backend.
pub fn open_head(spec: &str, desc: &BackendDescriptor) -> CmdResult<(Head, HeadInfo)> {
    let builtin = |head: Head| {
        let info = HeadInfo {
            source: spec.into(),
            variant: head.variant(),
            sha256: hex::encode(Sha256::digest(spec.as_bytes())),
        };
        Ok((head, info))
    };
    if spec == "attn-avg" {
        return builtin(Head::init(HeadVariant::AttentionAverage, desc.embed_dim, desc.heads, 0));
    }
    if let Some(k) = spec.strip_prefix("unit:") {
        let k: usize = k.parse().map_err(|_| Failure::Usage(format!("head {spec:?}: bad coordinate")))?;
        if k >= desc.embed_dim {
            return Err(Failure::Usage(format!("head {spec:?}: backend has {} dimensions", desc.embed_dim)));
        }
        return builtin(Head::Linear(LinearHead::unit(desc.embed_dim, k)));
    }
    let path = Path::new(spec);
    let bytes = fs::read(path).map_err(|e| Failure::Usage(format!("head {spec}: {e}")))?;
    let (head, _) = Head::load(path).map_err(|e| Failure::Usage(format!("head {spec}: {e}")))?;
    let info = HeadInfo {
        source: spec.into(),
        variant: head.variant(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    Ok((head, info))
}

/// The record written once into every output directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    pub jpeg_codec: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub backend: Option<BackendDescriptor>,
    pub head: Option<HeadInfo>,
    pub timings_s: BTreeMap<String, f64>,
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION"),
            jpeg_codec: JPEG_CODEC,
            seed: config.seed,
            config: config.clone(),
            backend: None,
            head: None,
            timings_s: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> CmdResult {
        let text = serde_json::to_string_pretty(self).expect("serializable manifest");
        write_file(&dir.join("manifest.json"), text.as_bytes())
    }
}

pub fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CmdResult {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("serializable row");
        buf.write_all(b"\n").expect("in-memory write");
    }
    write_file(path, &buf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

impl SplitArg {
    pub fn select(self, ing: &Ingested) -> Vec<Sample> {
        match self {
            SplitArg::All => ing.samples.clone(),
            SplitArg::Train => ing.split(Split::Train),
            SplitArg::Val => ing.split(Split::Val),
            SplitArg::Test => ing.split(Split::Test),
        }
    }
}

/// Reads a dataset manifest and lists its samples; skipped files are logged.
pub fn load_dataset(path: &Path) -> CmdResult<Ingested> {
    let m = Manifest::open(path).map_err(|e| Failure::Usage(e.to_string()))?;
    let ing = ingest(&m)?;
    for d in &ing.skipped {
        log::warn!("skipped {}: {}", d.path.display(), d.reason);
    }
    Ok(ing)
}

pub fn write_skipped(dir: &Path, skipped: &[Diagnostic]) -> CmdResult {
    write_jsonl(&dir.join("skipped.jsonl"), skipped)
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else if is_image(&p) {
            out.push(p);
        }
    }
    Ok(())
}

/// An input image and its output path stem relative to the output directory.
#[derive(Clone, Debug)]
pub struct InputFile {
    pub path: PathBuf,
    pub rel_stem: PathBuf,
}

/// Expands files and directories into images. Files under a directory keep
/// their relative location; stems that would collide get a numeric suffix.
pub fn collect_inputs(inputs: &[PathBuf]) -> CmdResult<Vec<InputFile>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found = Vec::new();
            walk(input, &mut found).map_err(|e| io_err(input, e))?;
            for p in found {
                let rel = p.strip_prefix(input).unwrap_or(&p).with_extension("");
                out.push(InputFile { path: p, rel_stem: rel });
            }
        } else {
            let stem = input.file_stem().map(PathBuf::from).unwrap_or_else(|| "image".into());
            out.push(InputFile {
                path: input.clone(),
                rel_stem: stem,
            });
        }
    }
    let mut seen = std::collections::HashMap::<PathBuf, usize>::new();
    for f in &mut out {
        let n = seen.entry(f.rel_stem.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            let name = format!("{}-{}", f.rel_stem.display(), *n - 1);
            f.rel_stem = PathBuf::from(name);
        }
    }
    Ok(out)
}

/// `<dir>/<rel_stem><suffix>`
pub fn output_path(dir: &Path, rel_stem: &Path, suffix: &str) -> PathBuf {
    let mut s = dir.join(rel_stem).into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs `f` inside a pool of `jobs` threads, or the global pool when `None`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CmdResult<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Failure::Usage("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Run(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig {
            seed: 3,
            tiler: TilerConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentationPolicy::default(),
        }
    }

    #[test]
    fn config_file_overrides_selected_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 9\n[tiler]\nstride = 64\n[train]\nbatch_size = 8\n").unwrap();
        let cfg = base().with_file(Some(&p)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tiler.stride, 64);
        assert_eq!(cfg.tiler.window, 504);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.lr, 1e-3);
    }

    #[test]
    fn config_unknown_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[train]\nbatchsize = 8\n").unwrap();
        assert!(matches!(base().with_file(Some(&p)), Err(Failure::Usage(_))));
    }

    #[test]
    fn backend_specs() {
        assert_eq!(open_backend("patch-stats").unwrap().descriptor().window, 504);
        assert_eq!(open_backend("patch-stats:28:7").unwrap().descriptor().embed_dim, 6);
        assert!(matches!(open_backend("patch-stats:28"), Err(Failure::Usage(_))));
        assert!(matches!(open_backend("nope"), Err(Failure::Usage(_))));
    }

    #[test]
    fn colliding_stems_get_suffixes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a/x.png");
        let b = dir.path().join("b/x.png");
        let got = collect_inputs(&[a, b]).unwrap();
        let stems: Vec<_> = got.iter().map(|f| f.rel_stem.display().to_string()).collect();
        assert_eq!(stems, vec!["x", "x-1"]);
    }
}
