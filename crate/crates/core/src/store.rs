//! On-disk layout: a content-addressed image store, a request-keyed
//! response cache and append-only run directories.
//!
//! ```text
//! <root>/images/<ref>.png
//! <root>/cache/<request-key>.json
//! <root>/runs/<run_id>/{manifest.json, graph.json, cases.jsonl, filtered.jsonl,
//!                       errors.jsonl, responses.jsonl, requests.jsonl, metrics.json,
//!                       matrix.json, matrix.csv, clusters.json, ...}
//! ```
//!
//! Every write goes through [`write_atomic`] (write a temp file in the
//! target directory, then rename over the destination).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::hashing::{content_ref, is_ref};
use crate::imaging;
use crate::pipeline::TestCase;
use crate::prompts::{GroundTruth, QuestionKind};
use crate::sampler::Criterion;
use crate::services::ResponseCache;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const CASES_FILE: &str = "cases.jsonl";
pub const FILTERED_FILE: &str = "filtered.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const REQUESTS_FILE: &str = "requests.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const MATRIX_JSON_FILE: &str = "matrix.json";
pub const MATRIX_CSV_FILE: &str = "matrix.csv";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const HALLUCINATION_GRAPH_FILE: &str = "hallucination_graph.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("undecodable image: {0}")]
    UndecodableImage(String),
    #[error("image {0} not found in store")]
    MissingImage(String),
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid run id '{0}'")]
    InvalidRunId(String),
    #[error("mode filter is empty")]
    EmptyModeFilter,
    #[error("no accepted cases match criteria {0}")]
    NoMatchingCases(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `bytes` to `path` via a temp file in the same directory and an
/// atomic rename. Creates parent directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// One JSON object per line, compact form.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Record {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Appends records; existing bytes are never rewritten.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    if records.is_empty() && path.exists() {
        return Ok(());
    }
    let mut bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    bytes.extend_from_slice(to_jsonl(records).as_bytes());
    write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Record {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["images", "cache", "runs"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, image_ref: &str) -> PathBuf {
        self.root.join("images").join(format!("{image_ref}.png"))
    }

    /// Stores a PNG under its content hash. Idempotent.
    pub fn put_image(&self, png: &[u8]) -> Result<String, StoreError> {
        imaging::validate_png(png).map_err(StoreError::UndecodableImage)?;
        let image_ref = content_ref(png);
        let path = self.image_path(&image_ref);
        if !path.exists() {
            write_atomic(&path, png).map_err(io_err(&path))?;
        }
        Ok(image_ref)
    }

    pub fn get_image(&self, image_ref: &str) -> Result<Vec<u8>, StoreError> {
        if !is_ref(image_ref) {
            return Err(StoreError::MissingImage(image_ref.to_owned()));
        }
        let path = self.image_path(image_ref);
        std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::MissingImage(image_ref.to_owned()),
            _ => io_err(&path)(e),
        })
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        is_ref(key).then(|| self.root.join("cache").join(format!("{key}.json")))
    }

    pub fn cache_lookup(&self, key: &str) -> Option<Vec<u8>> {
        std::fs::read(self.cache_path(key)?).ok()
    }

    pub fn cache_store(&self, key: &str, body: &[u8]) -> std::io::Result<()> {
        let path = self
            .cache_path(key)
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "bad cache key"))?;
        write_atomic(&path, body)
    }

    pub fn run(&self, run_id: &str) -> Result<RunDir, StoreError> {
        let valid = !run_id.is_empty()
            && run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !run_id.starts_with('.');
        if !valid {
            return Err(StoreError::InvalidRunId(run_id.to_owned()));
        }
        let path = self.root.join("runs").join(run_id);
        std::fs::create_dir_all(&path).map_err(io_err(&path))?;
        Ok(RunDir {
            id: run_id.to_owned(),
            path,
        })
    }
}

impl ResponseCache for Store {
    fn get(&self, key: &str) -> Option<Vec<u8>> {
        self.cache_lookup(key)
    }

    fn put(&self, key: &str, body: &[u8]) -> std::io::Result<()> {
        self.cache_store(key, body)
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    id: String,
    path: PathBuf,
}

impl RunDir {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn has_manifest(&self) -> bool {
        self.file(MANIFEST_FILE).exists()
    }

    pub fn read_manifest(&self) -> Result<RunManifest, StoreError> {
        read_json(&self.file(MANIFEST_FILE))
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        write_json(&self.file(MANIFEST_FILE), manifest)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub attempted: usize,
    pub accepted: usize,
    pub filtered: usize,
    pub errored: usize,
}

impl OutcomeCounts {
    pub fn is_consistent(&self) -> bool {
        self.attempted == self.accepted + self.filtered + self.errored
    }

    pub fn add(&mut self, other: &OutcomeCounts) {
        self.attempted += other.attempted;
        self.accepted += other.accepted;
        self.filtered += other.filtered;
        self.errored += other.errored;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionCounts {
    pub requested_k: usize,
    pub sampled_pairs: usize,
    /// Fewer candidates than `requested_k` were available.
    pub exhausted: bool,
    #[serde(flatten)]
    pub outcomes: OutcomeCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    /// Milliseconds since the Unix epoch; the only non-deterministic field.
    pub created_unix_ms: u64,
    pub config: RunConfig,
    pub seed: u64,
    pub sampler_algorithm: String,
    pub template_version: String,
    pub graph_ref: String,
    pub criteria: BTreeMap<Criterion, CriterionCounts>,
    pub totals: OutcomeCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingested: Option<OutcomeCounts>,
}

impl RunManifest {
    pub fn is_consistent(&self) -> bool {
        self.totals.is_consistent()
            && self.criteria.values().all(|c| c.outcomes.is_consistent())
            && self.ingested.map_or(true, |c| c.is_consistent())
    }
}

pub fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One supervised fine-tuning instruction pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub image: String,
    pub prompt: String,
    pub response: String,
    pub criterion: Criterion,
}

/// "The image shows {truth labels, sorted, comma-joined}."
pub fn sft_caption(truth: &BTreeSet<String>) -> String {
    let labels: Vec<&str> = truth.iter().map(String::as_str).collect();
    format!("The image shows {}.", labels.join(", "))
}

/// Instruction pairs for every case whose criterion is in `modes`, sorted
/// by case id.
pub fn export_sft(cases: &[TestCase], modes: &BTreeSet<Criterion>) -> Result<Vec<SftRecord>, StoreError> {
    if modes.is_empty() {
        return Err(StoreError::EmptyModeFilter);
    }
    let mut selected: Vec<&TestCase> = cases.iter().filter(|c| modes.contains(&c.pair.criterion)).collect();
    if selected.is_empty() {
        let names: Vec<&str> = modes.iter().map(|m| m.as_str()).collect();
        return Err(StoreError::NoMatchingCases(names.join(",")));
    }
    selected.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut out = Vec::new();
    for case in selected {
        for q in &case.questions {
            let response = match (q.kind, q.ground_truth) {
                (QuestionKind::Generative, _) => sft_caption(&case.truth),
                (_, GroundTruth::Yes) => "Yes.".to_owned(),
                (_, _) => "No.".to_owned(),
            };
            out.push(SftRecord {
                image: case.image_ref.clone(),
                prompt: q.text.clone(),
                response,
                criterion: case.pair.criterion,
            });
        }
    }
    Ok(out)
}
