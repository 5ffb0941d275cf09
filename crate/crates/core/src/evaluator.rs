//! Queries the model under test and parses its answers.
//!
//! Generative answers become a set of mentioned vocabulary labels;
//! yes/no answers become a [`Verdict`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::content_ref;
use crate::pipeline::TestCase;
use crate::prompts::QuestionKind;
use crate::services::{ServiceClient, ServiceError};
use crate::store::{append_jsonl, read_jsonl, RunDir, Store, StoreError, RESPONSES_FILE};

pub const BUILTIN_SYNONYMS_VERSION: &str = "synonyms-v1";

/// Built-in `(canonical, surface)` entries. Only entries whose canonical
/// label is in the active vocabulary take effect.
const BUILTIN_SYNONYMS: &[(&str, &str)] = &[
    ("airplane", "aeroplane"),
    ("airplane", "plane"),
    ("bicycle", "bike"),
    ("cell_phone", "cellphone"),
    ("cell_phone", "mobile phone"),
    ("cell_phone", "smartphone"),
    ("couch", "sofa"),
    ("cup", "mug"),
    ("hot_dog", "hotdog"),
    ("motorcycle", "motorbike"),
    ("person", "boy"),
    ("person", "child"),
    ("person", "children"),
    ("person", "girl"),
    ("person", "kid"),
    ("person", "man"),
    ("person", "men"),
    ("person", "people"),
    ("person", "woman"),
    ("person", "women"),
    ("puppy", "puppies"),
    ("tv", "television"),
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("synonym file {path}: line {line}: {message}")]
    SynonymLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("surface form '{surface}' maps to both '{first}' and '{second}'")]
    SynonymConflict {
        surface: String,
        first: String,
        second: String,
    },
    #[error("cannot read synonym file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("evaluation mode must be generative, discriminative or both, got '{0}'")]
    Mode(String),
}

impl EvalError {
    pub fn is_transport(&self) -> bool {
        matches!(self, EvalError::Service(e) if e.is_transport())
    }
}

/// Canonical label → surface forms. A surface form belongs to at most one
/// canonical label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    entries: BTreeMap<String, BTreeSet<String>>,
    owner: BTreeMap<String, String>,
    version: String,
}

fn normalize_surface(s: &str) -> String {
    words(&s.to_lowercase()).join(" ")
}

impl SynonymTable {
    pub fn empty() -> Self {
        Self {
            version: "none".into(),
            ..Self::default()
        }
    }

    pub fn builtin() -> Self {
        let mut t = Self::empty();
        for (c, s) in BUILTIN_SYNONYMS {
            t.insert(c, s).expect("built-in synonym table is conflict-free");
        }
        t.version = BUILTIN_SYNONYMS_VERSION.into();
        t
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn entries(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.entries
    }

    pub fn insert(&mut self, canonical: &str, surface: &str) -> Result<(), EvalError> {
        let surface = normalize_surface(surface);
        let canonical = canonical.trim().to_lowercase();
        if let Some(prev) = self.owner.get(&surface) {
            if *prev != canonical {
                return Err(EvalError::SynonymConflict {
                    surface,
                    first: prev.clone(),
                    second: canonical,
                });
            }
            return Ok(());
        }
        self.owner.insert(surface.clone(), canonical.clone());
        self.entries.entry(canonical).or_default().insert(surface);
        Ok(())
    }

    /// Parses `canonical<TAB>surface` lines; blank lines and `#` comments
    /// are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self, EvalError> {
        let mut t = Self::empty();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |message: &str| EvalError::SynonymLine {
                path: path.to_owned(),
                line: i + 1,
                message: message.to_owned(),
            };
            let (canonical, surface) = line.split_once('\t').ok_or_else(|| bad("expected canonical<TAB>surface"))?;
            if canonical.trim().is_empty() || normalize_surface(surface).is_empty() {
                return Err(bad("empty canonical label or surface form"));
            }
            if surface.chars().any(|c| c.is_uppercase()) {
                return Err(bad("surface forms must be lowercase"));
            }
            t.insert(canonical, surface).map_err(|e| bad(&e.to_string()))?;
        }
        t.version = format!("file-{}", content_ref(text.as_bytes()));
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Built-in entries overlaid with `user` entries; a user surface form
    /// replaces a built-in one.
    pub fn merged(builtin: &SynonymTable, user: &SynonymTable) -> SynonymTable {
        let mut t = user.clone();
        for (surface, canonical) in &builtin.owner {
            if !t.owner.contains_key(surface) {
                t.owner.insert(surface.clone(), canonical.clone());
                t.entries.entry(canonical.clone()).or_default().insert(surface.clone());
            }
        }
        t.version = format!("{}+{}", builtin.version, user.version);
        t
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Token plus whether it is joined to the previous token by whitespace
/// only (multi-word forms never span punctuation).
fn tokens(text: &str) -> Vec<(String, bool)> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut gap_is_space = false;
    for c in lower.chars() {
        if c.is_alphabetic() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push((std::mem::take(&mut cur), gap_is_space));
                gap_is_space = true;
            }
            if !c.is_whitespace() {
                gap_is_space = false;
            }
        }
    }
    if !cur.is_empty() {
        out.push((cur, gap_is_space));
    }
    out
}

/// Compiled surface-form lookup for one vocabulary.
#[derive(Debug, Clone)]
pub struct MentionMatcher {
    forms: HashMap<Vec<String>, String>,
    max_words: usize,
}

impl MentionMatcher {
    /// Every vocabulary label matches its own spelling (underscores read as
    /// spaces). Synonyms apply only to labels in the vocabulary and never
    /// shadow another label's own spelling.
    pub fn new<'a>(vocabulary: impl IntoIterator<Item = &'a str>, synonyms: &SynonymTable) -> Self {
        let vocab: BTreeSet<&str> = vocabulary.into_iter().collect();
        let mut forms = HashMap::new();
        for label in &vocab {
            let w = words(&label.replace('_', " "));
            if !w.is_empty() {
                forms.insert(w, label.to_string());
            }
        }
        for (canonical, surfaces) in &synonyms.entries {
            if !vocab.contains(canonical.as_str()) {
                continue;
            }
            for s in surfaces {
                forms.entry(words(s)).or_insert_with(|| canonical.clone());
            }
        }
        let max_words = forms.keys().map(Vec::len).max().unwrap_or(0);
        Self { forms, max_words }
    }

    fn lookup(&self, words: &[String]) -> Option<&String> {
        if let Some(c) = self.forms.get(words) {
            return Some(c);
        }
        let (last, head) = words.split_last()?;
        for suffix in ["es", "s"] {
            if let Some(stem) = last.strip_suffix(suffix).filter(|s| !s.is_empty()) {
                let mut key = head.to_vec();
                key.push(stem.to_owned());
                if let Some(c) = self.forms.get(&key) {
                    return Some(c);
                }
            }
        }
        None
    }

    pub fn extract(&self, text: &str) -> BTreeSet<String> {
        let toks = tokens(text);
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < toks.len() {
            // longest run of whitespace-joined words starting at i
            let mut span = 1;
            while span < self.max_words && i + span < toks.len() && toks[i + span].1 {
                span += 1;
            }
            let hit = (1..=span).rev().find_map(|n| {
                let key: Vec<String> = toks[i..i + n].iter().map(|(w, _)| w.clone()).collect();
                self.lookup(&key).map(|c| (n, c.clone()))
            });
            match hit {
                Some((n, label)) => {
                    found.insert(label);
                    i += n;
                }
                None => i += 1,
            }
        }
        found
    }
}

pub fn extract_mentions<'a>(
    text: &str,
    vocabulary: impl IntoIterator<Item = &'a str>,
    synonyms: &SynonymTable,
) -> BTreeSet<String> {
    MentionMatcher::new(vocabulary, synonyms).extract(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
    Invalid,
}

/// A leading yes/no decides; otherwise the first standalone yes/no
/// anywhere; otherwise invalid.
pub fn parse_verdict(text: &str) -> Verdict {
    let ws = words(&text.to_lowercase());
    let pick = |w: &String| match w.as_str() {
        "yes" => Some(Verdict::Yes),
        "no" => Some(Verdict::No),
        _ => None,
    };
    ws.iter().find_map(pick).unwrap_or(Verdict::Invalid)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Parsed {
    Mentions { labels: BTreeSet<String> },
    Verdict { verdict: Verdict },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub case_id: String,
    pub q: usize,
    pub raw: String,
    pub parsed: Parsed,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Generative,
    Discriminative,
    Both,
}

impl EvalMode {
    pub fn includes(self, kind: QuestionKind) -> bool {
        match self {
            EvalMode::Both => true,
            EvalMode::Generative => kind == QuestionKind::Generative,
            EvalMode::Discriminative => kind != QuestionKind::Generative,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Generative => "generative",
            EvalMode::Discriminative => "discriminative",
            EvalMode::Both => "both",
        })
    }
}

impl FromStr for EvalMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generative" => Ok(EvalMode::Generative),
            "discriminative" => Ok(EvalMode::Discriminative),
            "both" => Ok(EvalMode::Both),
            other => Err(EvalError::Mode(other.to_owned())),
        }
    }
}

fn parse_answer(kind: QuestionKind, raw: &str, matcher: &MentionMatcher) -> Parsed {
    match kind {
        QuestionKind::Generative => Parsed::Mentions {
            labels: matcher.extract(raw),
        },
        _ => Parsed::Verdict {
            verdict: parse_verdict(raw),
        },
    }
}

fn failed_answer(kind: QuestionKind) -> Parsed {
    match kind {
        QuestionKind::Generative => Parsed::Mentions { labels: BTreeSet::new() },
        _ => Parsed::Verdict {
            verdict: Verdict::Invalid,
        },
    }
}

/// Asks every selected question of every case, skipping `(case_id, q)`
/// pairs in `skip`. Results come back sorted by case id then question
/// index. Transport failures become error-tagged responses.
pub fn evaluate_cases(
    cases: &[TestCase],
    client: &ServiceClient,
    store: &Store,
    mode: EvalMode,
    matcher: &MentionMatcher,
    skip: &BTreeSet<(String, usize)>,
) -> Result<Vec<ModelResponse>, EvalError> {
    let mut jobs: Vec<(&TestCase, usize)> = cases
        .iter()
        .flat_map(|c| c.questions.iter().enumerate().map(move |(i, q)| (c, i, q.kind)))
        .filter(|(c, i, kind)| mode.includes(*kind) && !skip.contains(&(c.case_id.clone(), *i)))
        .map(|(c, i, _)| (c, i))
        .collect();
    jobs.sort_by(|a, b| (&a.0.case_id, a.1).cmp(&(&b.0.case_id, b.1)));

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<ModelResponse>>> = Mutex::new(vec![None; jobs.len()]);
    let fatal: Mutex<Option<EvalError>> = Mutex::new(None);
    let workers = client.endpoint().max_in_flight.max(1).min(jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= jobs.len() || fatal.lock().unwrap().is_some() {
                    break;
                }
                let (case, qi) = jobs[idx];
                let question = &case.questions[qi];
                let image = match store.get_image(&case.image_ref) {
                    Ok(b) => b,
                    Err(e) => {
                        fatal.lock().unwrap().get_or_insert(e.into());
                        break;
                    }
                };
                let response = match client.query(&image, &question.text) {
                    Ok(raw) => ModelResponse {
                        case_id: case.case_id.clone(),
                        q: qi,
                        parsed: parse_answer(question.kind, &raw, matcher),
                        raw,
                        error: None,
                    },
                    Err(e) => {
                        tracing::warn!(case_id = %case.case_id, q = qi, error = %e, "query failed");
                        ModelResponse {
                            case_id: case.case_id.clone(),
                            q: qi,
                            raw: String::new(),
                            parsed: failed_answer(question.kind),
                            error: Some(e.to_string()),
                        }
                    }
                };
                results.lock().unwrap()[idx] = Some(response);
            });
        }
    });
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(e);
    }
    Ok(results.into_inner().unwrap().into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub new_responses: usize,
    pub skipped_existing: usize,
    pub errored: usize,
}

/// Evaluates the cases of a run and appends new responses to
/// `responses.jsonl`. Already recorded `(case_id, q)` entries are kept.
pub fn evaluate_run(
    run: &RunDir,
    cases: &[TestCase],
    client: &ServiceClient,
    store: &Store,
    mode: EvalMode,
    matcher: &MentionMatcher,
) -> Result<EvalSummary, EvalError> {
    let path = run.file(RESPONSES_FILE);
    let existing: Vec<ModelResponse> = read_jsonl(&path)?;
    let skip: BTreeSet<(String, usize)> = existing.iter().map(|r| (r.case_id.clone(), r.q)).collect();
    let fresh = evaluate_cases(cases, client, store, mode, matcher, &skip)?;
    append_jsonl(&path, &fresh)?;
    Ok(EvalSummary {
        new_responses: fresh.len(),
        skipped_existing: skip.len(),
        errored: fresh.iter().filter(|r| r.error.is_some()).count(),
    })
}
