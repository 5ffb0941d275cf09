//! Synthesis → detection filter → annotation, persisted per run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::graph::{ConceptGraph, GraphError};
use crate::hashing::{content_ref, seed_from_bytes, seed_from_ref};
use crate::imaging;
use crate::prompts::{image_prompt, question_set, PromptError, Question, Style, Templates};
use crate::sampler::{sample_pairs, ConceptPair, Criterion, SampleError, SAMPLER_ALGORITHM};
use crate::services::{ServiceClient, ServiceError};
use crate::store::{
    append_jsonl, now_unix_ms, read_jsonl, CriterionCounts, OutcomeCounts, RunDir, RunManifest, Store, StoreError,
    CASES_FILE, ERRORS_FILE, FILTERED_FILE, GRAPH_FILE, REQUESTS_FILE,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{context}: {source}")]
    Service {
        context: String,
        #[source]
        source: ServiceError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("invalid test case {case_id}: {reason}")]
    InvalidCase { case_id: String, reason: String },
    #[error("{path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{errored} case(s) failed; see errors.jsonl")]
    Incomplete { errored: usize, transport: bool },
}

impl PipelineError {
    pub fn is_transport(&self) -> bool {
        match self {
            PipelineError::Service { source, .. } => source.is_transport(),
            PipelineError::Incomplete { transport, .. } => *transport,
            _ => false,
        }
    }
}

/// `Err(Incomplete)` when any error record exists; transport-classified if
/// any of them is a transport failure.
pub fn check_complete(errors: &[ErrorRecord]) -> Result<(), PipelineError> {
    if errors.is_empty() {
        return Ok(());
    }
    Err(PipelineError::Incomplete {
        errored: errors.len(),
        transport: errors.iter().any(|e| e.transport),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthesized,
    Ingested,
}

/// One accepted image with its annotation and questions. Fields are in
/// alphabetical order so serialized records are canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    pub hallucination_targets: BTreeSet<String>,
    pub image_ref: String,
    pub pair: ConceptPair,
    pub questions: Vec<Question>,
    /// Text-to-image seed of the accepted attempt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<Style>,
    pub truth: BTreeSet<String>,
}

impl TestCase {
    pub fn validate(&self, templates: &Templates) -> Result<(), String> {
        self.pair.validate()?;
        for label in [&self.pair.a.label, &self.pair.b.label] {
            if !self.truth.contains(label) {
                return Err(format!("pair label '{label}' missing from truth"));
            }
        }
        let expected = question_set(&self.truth, &self.hallucination_targets, templates).map_err(|e| e.to_string())?;
        if expected != self.questions {
            return Err("questions do not match question_set(truth, targets)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredRecord {
    pub attempts: u32,
    pub case_id: String,
    /// Labels the detector reported for the last attempt.
    pub detected: BTreeSet<String>,
    pub image_ref: String,
    pub pair: ConceptPair,
    pub reason: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<Style>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<Style>,
    pub transport: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaseOutcome {
    Accepted(TestCase),
    Filtered(FilteredRecord),
}

impl CaseOutcome {
    pub fn case_id(&self) -> &str {
        match self {
            CaseOutcome::Accepted(c) => &c.case_id,
            CaseOutcome::Filtered(f) => &f.case_id,
        }
    }
}

#[derive(Serialize)]
struct CaseKey<'a> {
    a: &'a str,
    b: &'a str,
    criterion: Criterion,
    seed: u64,
    style: Style,
}

/// Content hash of (pair, criterion, style, seed).
pub fn compute_case_id(pair: &ConceptPair, style: Style, seed: u64) -> String {
    let key = CaseKey {
        a: &pair.a.label,
        b: &pair.b.label,
        criterion: pair.criterion,
        seed,
        style,
    };
    content_ref(&serde_json::to_vec(&key).expect("key serializes"))
}

#[derive(Serialize)]
struct IngestKey<'a> {
    a: &'a str,
    b: &'a str,
    criterion: Criterion,
    image_ref: &'a str,
    source: Source,
}

pub fn ingested_case_id(pair: &ConceptPair, image_ref: &str) -> String {
    let key = IngestKey {
        a: &pair.a.label,
        b: &pair.b.label,
        criterion: pair.criterion,
        image_ref,
        source: Source::Ingested,
    };
    content_ref(&serde_json::to_vec(&key).expect("key serializes"))
}

/// Seed for the `attempt`-th generation of a case: the first 8 bytes of
/// the case id, then derived seeds for regenerations.
pub fn attempt_seed(case_id: &str, attempt: u32) -> u64 {
    if attempt == 0 {
        seed_from_ref(case_id).unwrap_or_else(|| seed_from_bytes(case_id.as_bytes()))
    } else {
        seed_from_bytes(format!("{case_id}:{attempt}").as_bytes())
    }
}

/// Neighbors of truth concepts that are not themselves in truth, ranked
/// by their strongest link (weight desc, then label), capped.
pub fn derive_hallucination_targets(graph: &ConceptGraph, truth: &BTreeSet<String>, cap: usize) -> BTreeSet<String> {
    let mut best: BTreeMap<String, u64> = BTreeMap::new();
    for t in truth {
        let Ok(neighbors) = graph.neighbors(t) else {
            continue;
        };
        for (c, w) in neighbors {
            if truth.contains(&c.label) {
                continue;
            }
            let slot = best.entry(c.label).or_insert(0);
            *slot = (*slot).max(w);
        }
    }
    let mut ranked: Vec<(String, u64)> = best.into_iter().collect();
    ranked.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    ranked.into_iter().take(cap).map(|(l, _)| l).collect()
}

/// Text-to-image and detector clients for one run.
pub struct Services {
    pub t2i: ServiceClient,
    pub detect: ServiceClient,
}

impl Services {
    pub fn connect(config: &RunConfig, store: &Store) -> Result<Self, PipelineError> {
        let cache: Arc<Store> = Arc::new(store.clone());
        let client = |ep: &crate::services::ServiceEndpoint, name: &str| {
            ServiceClient::connect(ep.clone())
                .map(|c| c.with_cache(cache.clone()))
                .map_err(|source| PipelineError::Service {
                    context: format!("{name} endpoint"),
                    source,
                })
        };
        Ok(Self {
            t2i: client(&config.endpoints.t2i, "t2i")?,
            detect: client(&config.endpoints.detect, "detect")?,
        })
    }
}

fn vocabulary(graph: &ConceptGraph) -> Vec<String> {
    graph.labels().map(str::to_owned).collect()
}

fn missing_reason(pair: &ConceptPair, truth: &BTreeSet<String>) -> Option<String> {
    let missing: Vec<&str> = [pair.a.label.as_str(), pair.b.label.as_str()]
        .into_iter()
        .filter(|l| !truth.contains(*l))
        .collect();
    (!missing.is_empty()).then(|| format!("missing: {}", missing.join(", ")))
}

fn detect_truth(
    detect: &ServiceClient,
    png: &[u8],
    vocab: &[String],
    threshold: f64,
    case_id: &str,
) -> Result<BTreeSet<String>, PipelineError> {
    let detections = detect.detect(png, vocab, threshold).map_err(|source| PipelineError::Service {
        context: format!("case {case_id}: detect"),
        source,
    })?;
    Ok(detections.into_iter().map(|d| d.label).collect())
}

fn accept(
    graph: &ConceptGraph,
    config: &RunConfig,
    pair: &ConceptPair,
    truth: BTreeSet<String>,
    case_id: String,
    image_ref: String,
    seed: Option<u64>,
    style: Option<Style>,
    source: Source,
) -> Result<TestCase, PipelineError> {
    let targets = derive_hallucination_targets(graph, &truth, config.hallucination_cap);
    let questions = question_set(&truth, &targets, &config.templates)?;
    Ok(TestCase {
        case_id,
        hallucination_targets: targets,
        image_ref,
        pair: pair.clone(),
        questions,
        seed,
        source,
        style,
        truth,
    })
}

/// Generates, stores and filters one (pair, style) image. Up to
/// `max_regen_attempts` generations are tried before the case is filtered.
pub fn synthesize_case(
    services: &Services,
    store: &Store,
    graph: &ConceptGraph,
    pair: &ConceptPair,
    style: Style,
    seed: u64,
    config: &RunConfig,
) -> Result<CaseOutcome, PipelineError> {
    let case_id = compute_case_id(pair, style, seed);
    let vocab = vocabulary(graph);
    let mut last = None;
    for attempt in 0..config.max_regen_attempts {
        let t2i_seed = attempt_seed(&case_id, attempt);
        let spec = image_prompt(pair, style, t2i_seed, &config.templates);
        let image = services
            .t2i
            .txt2img(&spec, config.image_width, config.image_height)
            .map_err(|source| PipelineError::Service {
                context: format!("case {case_id}: txt2img"),
                source,
            })?;
        let image_ref = store.put_image(&image.png)?;
        let truth = detect_truth(&services.detect, &image.png, &vocab, config.threshold, &case_id)?;
        match missing_reason(pair, &truth) {
            None => {
                let case = accept(
                    graph,
                    config,
                    pair,
                    truth,
                    case_id,
                    image_ref,
                    Some(t2i_seed),
                    Some(style),
                    Source::Synthesized,
                )?;
                return Ok(CaseOutcome::Accepted(case));
            }
            Some(reason) => {
                tracing::debug!(case_id = %case_id, attempt, %reason, "filtered attempt");
                last = Some(FilteredRecord {
                    attempts: attempt + 1,
                    case_id: case_id.clone(),
                    detected: truth,
                    image_ref,
                    pair: pair.clone(),
                    reason,
                    source: Source::Synthesized,
                    style: Some(style),
                });
            }
        }
    }
    last.map(CaseOutcome::Filtered)
        .ok_or_else(|| PipelineError::Config("max_regen_attempts must be at least 1".into()))
}

/// Reads and validates every accepted case of a run.
pub fn load_cases(run: &RunDir, templates: &Templates) -> Result<Vec<TestCase>, PipelineError> {
    let path = run.file(CASES_FILE);
    let cases: Vec<TestCase> = read_jsonl(&path)?;
    for (i, c) in cases.iter().enumerate() {
        c.validate(templates).map_err(|message| StoreError::Record {
            path: path.clone(),
            line: i + 1,
            message,
        })?;
    }
    Ok(cases)
}

pub fn load_filtered(run: &RunDir) -> Result<Vec<FilteredRecord>, PipelineError> {
    Ok(read_jsonl(&run.file(FILTERED_FILE))?)
}

fn known_outcomes(run: &RunDir) -> Result<HashMap<String, bool>, PipelineError> {
    let mut known = HashMap::new();
    for c in read_jsonl::<TestCase>(&run.file(CASES_FILE))? {
        known.insert(c.case_id, true);
    }
    for f in load_filtered(run)? {
        known.insert(f.case_id, false);
    }
    Ok(known)
}

/// Sorts new outcomes by case id and appends them to the run files.
fn persist_outcomes(run: &RunDir, mut outcomes: Vec<CaseOutcome>, mut errors: Vec<ErrorRecord>) -> Result<(), PipelineError> {
    outcomes.sort_by(|x, y| x.case_id().cmp(y.case_id()));
    let (mut accepted, mut filtered) = (Vec::new(), Vec::new());
    for o in outcomes {
        match o {
            CaseOutcome::Accepted(c) => accepted.push(c),
            CaseOutcome::Filtered(f) => filtered.push(f),
        }
    }
    append_jsonl(&run.file(CASES_FILE), &accepted)?;
    append_jsonl(&run.file(FILTERED_FILE), &filtered)?;
    errors.sort_by(|x, y| (&x.case_id, &x.file).cmp(&(&y.case_id, &y.file)));
    append_jsonl(&run.file(ERRORS_FILE), &errors)?;
    Ok(())
}

fn write_run_graph(run: &RunDir, graph: &ConceptGraph) -> Result<String, PipelineError> {
    let canonical = graph.to_canonical_json();
    graph.save(&run.file(GRAPH_FILE))?;
    Ok(content_ref(canonical.as_bytes()))
}

/// Runs `f` over `jobs` on up to `workers` threads; results keep job order.
fn parallel_map<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = workers.max(1).min(jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

struct Job {
    pair: ConceptPair,
    style: Style,
    case_id: String,
}

/// Samples pairs per criterion, synthesizes every (pair, style) and writes
/// cases, filtered records, errors and the manifest. Case ids already
/// present in the run are not synthesized again.
pub fn run_batch(
    store: &Store,
    run_id: &str,
    graph: &ConceptGraph,
    config: &RunConfig,
    services: &Services,
) -> Result<RunManifest, PipelineError> {
    run_batch_detailed(store, run_id, graph, config, services).map(|(m, _)| m)
}

/// [`run_batch`], also returning the error records of this invocation.
pub fn run_batch_detailed(
    store: &Store,
    run_id: &str,
    graph: &ConceptGraph,
    config: &RunConfig,
    services: &Services,
) -> Result<(RunManifest, Vec<ErrorRecord>), PipelineError> {
    config.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let run = store.run(run_id)?;
    let graph_ref = write_run_graph(&run, graph)?;
    let known = known_outcomes(&run)?;

    let mut criteria: BTreeMap<Criterion, CriterionCounts> = BTreeMap::new();
    let mut jobs = Vec::new();
    for &criterion in &config.criteria {
        let counts = criteria.entry(criterion).or_default();
        counts.requested_k = config.k;
        let pairs = match sample_pairs(graph, criterion, config.k, config.seed) {
            Ok(p) => p,
            Err(SampleError::NoCandidates(_)) => {
                tracing::warn!(%criterion, "no candidate pairs");
                counts.exhausted = true;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        counts.sampled_pairs = pairs.len();
        counts.exhausted = pairs.len() < config.k;
        for pair in pairs {
            for &style in &config.styles {
                let case_id = compute_case_id(&pair, style, config.seed);
                jobs.push(Job {
                    pair: pair.clone(),
                    style,
                    case_id,
                });
            }
        }
    }

    let pending: Vec<&Job> = jobs.iter().filter(|j| !known.contains_key(&j.case_id)).collect();
    tracing::info!(total = jobs.len(), pending = pending.len(), "synthesizing");
    let workers = services.t2i.endpoint().max_in_flight;
    let results = parallel_map(&pending, workers, |job| {
        synthesize_case(services, store, graph, &job.pair, job.style, config.seed, config)
    });

    let mut status: HashMap<&str, Option<bool>> = known.iter().map(|(k, v)| (k.as_str(), Some(*v))).collect();
    let mut outcomes = Vec::new();
    let mut errors = Vec::new();
    for (job, result) in pending.iter().zip(results) {
        match result {
            Ok(outcome) => {
                status.insert(&job.case_id, Some(matches!(outcome, CaseOutcome::Accepted(_))));
                outcomes.push(outcome);
            }
            Err(e) => {
                tracing::warn!(case_id = %job.case_id, error = %e, "case failed");
                if let PipelineError::Store(_) = e {
                    return Err(e);
                }
                status.insert(&job.case_id, None);
                errors.push(ErrorRecord {
                    case_id: Some(job.case_id.clone()),
                    criterion: Some(job.pair.criterion),
                    transport: e.is_transport(),
                    error: e.to_string(),
                    file: None,
                    pair: Some((job.pair.a.label.clone(), job.pair.b.label.clone())),
                    style: Some(job.style),
                });
            }
        }
    }
    persist_outcomes(&run, outcomes, errors.clone())?;

    for job in &jobs {
        let counts = criteria.get_mut(&job.pair.criterion).expect("criterion registered");
        counts.outcomes.attempted += 1;
        match status.get(job.case_id.as_str()).copied().flatten() {
            Some(true) => counts.outcomes.accepted += 1,
            Some(false) => counts.outcomes.filtered += 1,
            None => counts.outcomes.errored += 1,
        }
    }
    let mut totals = OutcomeCounts::default();
    for c in criteria.values() {
        totals.add(&c.outcomes);
    }

    let mut log = services.t2i.take_log();
    log.extend(services.detect.take_log());
    append_jsonl(&run.file(REQUESTS_FILE), &log)?;

    let previous = if run.has_manifest() { Some(run.read_manifest()?) } else { None };
    let manifest = RunManifest {
        run_id: run_id.to_owned(),
        tool_version: crate::TOOL_VERSION.to_owned(),
        created_unix_ms: now_unix_ms(),
        config: config.redacted(),
        seed: config.seed,
        sampler_algorithm: SAMPLER_ALGORITHM.to_owned(),
        template_version: config.templates.version(),
        graph_ref,
        criteria,
        totals,
        ingested: previous.and_then(|m| m.ingested),
    };
    run.write_manifest(&manifest)?;
    Ok((manifest, errors))
}

/// One sidecar line: the intended pair for an image file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarEntry {
    pub file: String,
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
}

pub fn read_sidecar(path: &Path) -> Result<BTreeMap<String, SidecarEntry>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Sidecar {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| PipelineError::Sidecar {
            path: path.to_owned(),
            message: format!("line {}: {message}", i + 1),
        };
        let entry: SidecarEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if out.contains_key(&entry.file) {
            return Err(bad(format!("duplicate entry for '{}'", entry.file)));
        }
        out.insert(entry.file.clone(), entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestResult {
    pub outcomes: Vec<CaseOutcome>,
    pub errors: Vec<ErrorRecord>,
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn ingest_one(
    file: &Path,
    entry: &SidecarEntry,
    default_criterion: Criterion,
    graph: &ConceptGraph,
    detect: &ServiceClient,
    store: &Store,
    config: &RunConfig,
) -> Result<CaseOutcome, String> {
    let concept = |l: &str| {
        let l = l.trim().to_lowercase();
        graph.concept(&l).ok_or_else(|| format!("label '{l}' is not in the graph"))
    };
    let (x, y) = (concept(&entry.a)?, concept(&entry.b)?);
    let weight = graph.weight(&x.label, &y.label);
    let pair = ConceptPair::new(x, y, weight, entry.criterion.unwrap_or(default_criterion));
    pair.validate()?;
    let bytes = std::fs::read(file).map_err(|e| format!("cannot read image: {e}"))?;
    let png = imaging::to_png(&bytes).map_err(|e| format!("unreadable image: {e}"))?;
    let image_ref = store.put_image(&png).map_err(|e| e.to_string())?;
    let case_id = ingested_case_id(&pair, &image_ref);
    let truth = detect_truth(detect, &png, &vocabulary(graph), config.threshold, &case_id).map_err(|e| e.to_string())?;
    Ok(match missing_reason(&pair, &truth) {
        None => CaseOutcome::Accepted(
            accept(graph, config, &pair, truth, case_id, image_ref, None, None, Source::Ingested)
                .map_err(|e| e.to_string())?,
        ),
        Some(reason) => CaseOutcome::Filtered(FilteredRecord {
            attempts: 1,
            case_id,
            detected: truth,
            image_ref,
            pair,
            reason,
            source: Source::Ingested,
            style: None,
        }),
    })
}

/// Passes external PNG/JPEG images through the same detect/filter path as
/// synthesized ones. Per-file problems become error records.
pub fn ingest_images(
    store: &Store,
    run_id: &str,
    graph: &ConceptGraph,
    dir: &Path,
    sidecar: &Path,
    default_criterion: Criterion,
    config: &RunConfig,
    detect: &ServiceClient,
) -> Result<IngestResult, PipelineError> {
    let run = store.run(run_id)?;
    let entries = read_sidecar(sidecar)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PipelineError::Sidecar {
            path: dir.to_owned(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();

    let known = known_outcomes(&run)?;
    let mut result = IngestResult::default();
    let mut seen = BTreeSet::new();
    let mut counts = OutcomeCounts::default();
    let err = |file: &str, error: String| ErrorRecord {
        case_id: None,
        criterion: None,
        error,
        file: Some(file.to_owned()),
        pair: None,
        style: None,
        transport: false,
    };
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
        seen.insert(name.clone());
        counts.attempted += 1;
        let Some(entry) = entries.get(&name) else {
            counts.errored += 1;
            result.errors.push(err(&name, "no sidecar entry".into()));
            continue;
        };
        match ingest_one(path, entry, default_criterion, graph, detect, store, config) {
            Ok(outcome) => {
                match &outcome {
                    CaseOutcome::Accepted(_) => counts.accepted += 1,
                    CaseOutcome::Filtered(_) => counts.filtered += 1,
                }
                if !known.contains_key(outcome.case_id()) {
                    result.outcomes.push(outcome);
                }
            }
            Err(e) => {
                counts.errored += 1;
                result.errors.push(ErrorRecord {
                    pair: Some((entry.a.clone(), entry.b.clone())),
                    ..err(&name, e)
                });
            }
        }
    }
    for name in entries.keys().filter(|n| !seen.contains(*n)) {
        counts.attempted += 1;
        counts.errored += 1;
        result.errors.push(err(name, "file listed in sidecar not found".into()));
    }

    persist_outcomes(&run, result.outcomes.clone(), result.errors.clone())?;
    result.outcomes.sort_by(|x, y| x.case_id().cmp(y.case_id()));
    let log = detect.take_log();
    append_jsonl(&run.file(REQUESTS_FILE), &log)?;

    let graph_ref = write_run_graph(&run, graph)?;
    let mut manifest = if run.has_manifest() {
        run.read_manifest()?
    } else {
        RunManifest {
            run_id: run_id.to_owned(),
            tool_version: crate::TOOL_VERSION.to_owned(),
            created_unix_ms: now_unix_ms(),
            config: config.redacted(),
            seed: config.seed,
            sampler_algorithm: SAMPLER_ALGORITHM.to_owned(),
            template_version: config.templates.version(),
            graph_ref,
            criteria: BTreeMap::new(),
            totals: OutcomeCounts::default(),
            ingested: None,
        }
    };
    manifest.ingested = Some(counts);
    run.write_manifest(&manifest)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Concept, SceneRecord};

    fn example_graph() -> ConceptGraph {
        let rec = |labels: &[(&str, bool)]| {
            SceneRecord::new(
                labels
                    .iter()
                    .map(|(l, env)| if *env { Concept::environment(*l) } else { Concept::entity(*l) })
                    .collect(),
            )
        };
        let mut records = Vec::new();
        for _ in 0..3 {
            records.push(rec(&[("dog", false), ("frisbee", false), ("grass", true)]));
        }
        for _ in 0..2 {
            records.push(rec(&[("dog", false), ("grass", true)]));
        }
        records.push(rec(&[("car", false), ("sky", true)]));
        build_graph(&records).unwrap()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hallucination_targets_from_neighbors() {
        let g = example_graph();
        assert_eq!(derive_hallucination_targets(&g, &set(&["dog", "grass"]), 3), set(&["frisbee"]));
        let all: BTreeSet<String> = g.labels().map(str::to_owned).collect();
        assert!(derive_hallucination_targets(&g, &all, 3).is_empty());
        assert!(derive_hallucination_targets(&g, &set(&["dog"]), 0).is_empty());
        assert_eq!(derive_hallucination_targets(&g, &set(&["dog"]), 1), set(&["grass"]));
    }

    #[test]
    fn case_id_is_stable_and_distinct() {
        let g = example_graph();
        let pair = ConceptPair::new(
            g.concept("dog").unwrap(),
            g.concept("frisbee").unwrap(),
            3,
            Criterion::Common,
        );
        let id = compute_case_id(&pair, Style::Photo, 7);
        assert_eq!(id, compute_case_id(&pair, Style::Photo, 7));
        assert_ne!(id, compute_case_id(&pair, Style::Anime, 7));
        assert_ne!(id, compute_case_id(&pair, Style::Photo, 8));
        assert_ne!(attempt_seed(&id, 0), attempt_seed(&id, 1));
        assert_eq!(attempt_seed(&id, 0), seed_from_ref(&id).unwrap());
    }

    #[test]
    fn missing_reason_lists_pair_labels() {
        let g = example_graph();
        let pair = ConceptPair::new(
            g.concept("dog").unwrap(),
            g.concept("frisbee").unwrap(),
            3,
            Criterion::Common,
        );
        assert_eq!(missing_reason(&pair, &set(&["dog", "frisbee"])), None);
        assert_eq!(missing_reason(&pair, &set(&["dog"])).as_deref(), Some("missing: frisbee"));
        assert_eq!(missing_reason(&pair, &set(&[])).as_deref(), Some("missing: dog, frisbee"));
    }
}
