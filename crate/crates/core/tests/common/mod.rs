#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use tailgen_core::backends::{
    Backend, BackendError, BackendRequest, BackendResponse, BackendResult, Kind,
};
use tailgen_core::dataset::synthetic_manifest;
use tailgen_core::pipeline::PipelineConfig;

pub const TEN_CLASS_COUNTS: [usize; 10] = [100, 64, 41, 26, 17, 11, 7, 4, 3, 2];

/// Small, fast, fully mocked run settings; `extra` is appended verbatim and
/// may add top-level keys before any table.
pub fn config(extra_top: &str, extra_mock: &str) -> PipelineConfig {
    let text = format!(
        "per_class_cap = 50
score_threshold = 0.8
seed = 42
num_mix_samples = 48
resolution = 24
worker_width = 4
original_images = \"procedural\"
clock = \"simulated\"
{extra_top}
[mock]
resolution = 24
embed_dim = 48
{extra_mock}
"
    );
    PipelineConfig::from_toml(&text).expect("test config is valid")
}

pub fn write_manifest(dir: &Path, counts: &[usize]) -> PathBuf {
    let path = dir.join("synthetic.tsv");
    std::fs::write(&path, synthetic_manifest("synthetic", counts).serialize()).unwrap();
    path
}

/// Every file under `root` except the journal, summary and cache, which
/// legitimately differ between equivalent runs.
pub fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            let top = rel
                .components()
                .next()
                .unwrap()
                .as_os_str()
                .to_string_lossy()
                .into_owned();
            if matches!(top.as_str(), "journal.jsonl" | "summary.json" | "cache") {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// First differing artifact, for readable failures.
pub fn first_difference(
    a: &BTreeMap<PathBuf, Vec<u8>>,
    b: &BTreeMap<PathBuf, Vec<u8>>,
) -> Option<String> {
    for (k, v) in a {
        match b.get(k) {
            None => return Some(format!("{} missing on the right", k.display())),
            Some(w) if w != v => return Some(format!("{} differs", k.display())),
            _ => {}
        }
    }
    b.keys()
        .find(|k| !a.contains_key(*k))
        .map(|k| format!("{} missing on the left", k.display()))
}

/// Passes requests through until `after` calls of `kind` have been made,
/// then fails every later one hard, like a process dying mid-stage.
pub struct KillAfter {
    pub inner: Arc<dyn Backend>,
    pub kind: Kind,
    pub after: usize,
    pub seen: AtomicUsize,
}

impl Backend for KillAfter {
    fn call(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        if request.kind == self.kind && self.seen.fetch_add(1, Ordering::SeqCst) >= self.after {
            return Err(BackendError::hard(request.kind, "killed"));
        }
        self.inner.call(request)
    }
}
