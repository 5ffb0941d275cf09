//! Weighted, undirected concept co-occurrence graph.
//!
//! Nodes are typed concepts (entity or environment). The weight of an
//! unordered pair is the number of scene records containing both concepts,
//! counted once per record. Only entity–entity and entity–environment pairs
//! carry weight; environment–environment co-occurrences are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed scene record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("conflicting level for concept '{label}': {first} vs {second}")]
    ConflictingLevel {
        label: String,
        first: Level,
        second: Level,
    },
    #[error("concept '{0}' not found in graph")]
    NotFound(String),
    #[error("graph file parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("graph validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Entity,
    Environment,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Entity => "entity",
            Level::Environment => "environment",
        }
    }

    /// Whether a pair with these levels may carry an edge.
    pub fn pair_allowed(a: Level, b: Level) -> bool {
        !(a == Level::Environment && b == Level::Environment)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entity" => Ok(Level::Entity),
            "environment" => Ok(Level::Environment),
            other => Err(format!("unknown level '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Concept {
    pub label: String,
    pub level: Level,
}

impl Concept {
    pub fn new(label: impl Into<String>, level: Level) -> Self {
        Self {
            label: label.into(),
            level,
        }
    }

    pub fn entity(label: impl Into<String>) -> Self {
        Self::new(label, Level::Entity)
    }

    pub fn environment(label: impl Into<String>) -> Self {
        Self::new(label, Level::Environment)
    }
}

/// Checks the label invariant: non-empty, trimmed, lowercase.
pub fn validate_label(label: &str) -> Result<(), String> {
    if label.is_empty() {
        return Err("empty label".into());
    }
    if label.trim() != label {
        return Err(format!("label '{label}' has surrounding whitespace"));
    }
    if label.to_lowercase() != label {
        return Err(format!("label '{label}' is not lowercase"));
    }
    Ok(())
}

/// Concepts observed together in one scene annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub concepts: Vec<Concept>,
}

impl SceneRecord {
    pub fn new(concepts: Vec<Concept>) -> Self {
        Self { concepts }
    }

    /// Parses one line-delimited record. Labels are trimmed and lowercased.
    pub fn parse_line(line: &str, line_no: usize) -> Result<Self, GraphError> {
        let malformed = |reason: String| GraphError::MalformedRecord {
            line: line_no,
            reason,
        };
        let mut record: SceneRecord =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if record.concepts.is_empty() {
            return Err(malformed("record has no concepts".into()));
        }
        for c in &mut record.concepts {
            c.label = c.label.trim().to_lowercase();
            if c.label.is_empty() {
                return Err(malformed("empty label".into()));
            }
        }
        Ok(record)
    }
}

/// The co-occurrence graph. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConceptGraph {
    concepts: BTreeMap<String, Level>,
    /// Keyed by (a, b) with a < b; every stored weight is positive.
    weights: BTreeMap<(String, String), u64>,
    adjacency: BTreeMap<String, Vec<(String, u64)>>,
}

impl ConceptGraph {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a graph from explicit parts, enforcing every invariant.
    pub fn from_parts<C, W>(concepts: C, weights: W) -> Result<Self, GraphError>
    where
        C: IntoIterator<Item = Concept>,
        W: IntoIterator<Item = (String, String, u64)>,
    {
        let mut nodes = BTreeMap::new();
        for c in concepts {
            validate_label(&c.label).map_err(GraphError::Validation)?;
            if nodes.insert(c.label.clone(), c.level).is_some() {
                return Err(GraphError::Validation(format!(
                    "duplicate concept '{}'",
                    c.label
                )));
            }
        }
        let mut edges = BTreeMap::new();
        for (a, b, count) in weights {
            if a == b {
                return Err(GraphError::Validation(format!("self-loop on '{a}'")));
            }
            if a > b {
                return Err(GraphError::Validation(format!(
                    "edge ('{a}','{b}') is not in lexicographic key order"
                )));
            }
            if count == 0 {
                return Err(GraphError::Validation(format!(
                    "edge ('{a}','{b}') has zero weight"
                )));
            }
            let la = *nodes
                .get(&a)
                .ok_or_else(|| GraphError::Validation(format!("edge references unknown concept '{a}'")))?;
            let lb = *nodes
                .get(&b)
                .ok_or_else(|| GraphError::Validation(format!("edge references unknown concept '{b}'")))?;
            if !Level::pair_allowed(la, lb) {
                return Err(GraphError::Validation(format!(
                    "environment-environment edge ('{a}','{b}')"
                )));
            }
            if edges.insert((a.clone(), b.clone()), count).is_some() {
                return Err(GraphError::Validation(format!("duplicate edge ('{a}','{b}')")));
            }
        }
        Ok(Self::assemble(nodes, edges))
    }

    fn assemble(concepts: BTreeMap<String, Level>, weights: BTreeMap<(String, String), u64>) -> Self {
        let mut adjacency: BTreeMap<String, Vec<(String, u64)>> = BTreeMap::new();
        for ((a, b), &w) in &weights {
            adjacency.entry(a.clone()).or_default().push((b.clone(), w));
            adjacency.entry(b.clone()).or_default().push((a.clone(), w));
        }
        for list in adjacency.values_mut() {
            list.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        }
        Self {
            concepts,
            weights,
            adjacency,
        }
    }

    pub fn node_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn edge_count(&self) -> usize {
        self.weights.len()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.concepts.contains_key(label)
    }

    pub fn level(&self, label: &str) -> Option<Level> {
        self.concepts.get(label).copied()
    }

    pub fn concept(&self, label: &str) -> Option<Concept> {
        self.level(label).map(|lvl| Concept::new(label, lvl))
    }

    /// Concepts in label order.
    pub fn concepts(&self) -> impl Iterator<Item = Concept> + '_ {
        self.concepts.iter().map(|(l, &lvl)| Concept::new(l.clone(), lvl))
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.concepts.keys().map(String::as_str)
    }

    /// Symmetric weight lookup; 0 when there is no edge.
    pub fn weight(&self, a: &str, b: &str) -> u64 {
        let key = if a <= b {
            (a.to_owned(), b.to_owned())
        } else {
            (b.to_owned(), a.to_owned())
        };
        self.weights.get(&key).copied().unwrap_or(0)
    }

    /// Positive-weight edges in (a, b) order with a < b.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.weights.iter().map(|((a, b), &w)| (a.as_str(), b.as_str(), w))
    }

    /// Positive-weight partners sorted by weight desc, then label asc.
    pub fn neighbors(&self, label: &str) -> Result<Vec<(Concept, u64)>, GraphError> {
        if !self.contains(label) {
            return Err(GraphError::NotFound(label.to_owned()));
        }
        Ok(self
            .adjacency
            .get(label)
            .map(|list| {
                list.iter()
                    .map(|(l, w)| (Concept::new(l.clone(), self.concepts[l]), *w))
                    .collect()
            })
            .unwrap_or_default())
    }

    /// Canonical serialized form: sorted keys, sorted arrays, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let file = GraphFile {
            concepts: self.concepts().collect(),
            format_version: GRAPH_FORMAT_VERSION,
            weights: self
                .edges()
                .map(|(a, b, count)| WeightEntry {
                    a: a.to_owned(),
                    b: b.to_owned(),
                    count,
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("graph serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| GraphError::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        if file.format_version != GRAPH_FORMAT_VERSION {
            return Err(GraphError::Validation(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        Self::from_parts(
            file.concepts,
            file.weights.into_iter().map(|w| (w.a, w.b, w.count)),
        )
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        crate::store::write_atomic(path, self.to_canonical_json().as_bytes())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    concepts: Vec<Concept>,
    format_version: u32,
    weights: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightEntry {
    a: String,
    b: String,
    count: u64,
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

/// Incremental builder; records are folded in one at a time.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    concepts: BTreeMap<String, Level>,
    weights: BTreeMap<(String, String), u64>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_record(&mut self, record: &SceneRecord) -> Result<(), GraphError> {
        let mut seen: BTreeMap<&str, Level> = BTreeMap::new();
        for c in &record.concepts {
            validate_label(&c.label).map_err(GraphError::Validation)?;
            match seen.get(c.label.as_str()) {
                Some(&lvl) if lvl != c.level => {
                    return Err(GraphError::ConflictingLevel {
                        label: c.label.clone(),
                        first: lvl,
                        second: c.level,
                    })
                }
                _ => {
                    seen.insert(&c.label, c.level);
                }
            }
            if let Some(&lvl) = self.concepts.get(&c.label) {
                if lvl != c.level {
                    return Err(GraphError::ConflictingLevel {
                        label: c.label.clone(),
                        first: lvl,
                        second: c.level,
                    });
                }
            }
        }
        for (&label, &lvl) in &seen {
            self.concepts.entry(label.to_owned()).or_insert(lvl);
        }
        let unique: Vec<(&str, Level)> = seen.into_iter().collect();
        for (i, &(a, la)) in unique.iter().enumerate() {
            for &(b, lb) in &unique[i + 1..] {
                if Level::pair_allowed(la, lb) {
                    *self.weights.entry((a.to_owned(), b.to_owned())).or_insert(0) += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> ConceptGraph {
        ConceptGraph::assemble(self.concepts, self.weights)
    }
}

/// Builds a graph from in-memory records.
pub fn build_graph<'a, I>(records: I) -> Result<ConceptGraph, GraphError>
where
    I: IntoIterator<Item = &'a SceneRecord>,
{
    let mut builder = GraphBuilder::new();
    for r in records {
        builder.add_record(r)?;
    }
    Ok(builder.finish())
}

/// Streams line-delimited scene records. Blank lines are skipped; errors
/// carry the 1-based line number.
pub fn build_graph_from_reader<R: BufRead>(reader: R) -> Result<ConceptGraph, GraphError> {
    let mut builder = GraphBuilder::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = SceneRecord::parse_line(&line, idx + 1)?;
        builder.add_record(&record).map_err(|e| match e {
            GraphError::Validation(reason) => GraphError::MalformedRecord {
                line: idx + 1,
                reason,
            },
            other => other,
        })?;
    }
    Ok(builder.finish())
}

/// Distinct labels across records, used by tests and diagnostics.
pub fn distinct_labels<'a, I>(records: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a SceneRecord>,
{
    records
        .into_iter()
        .flat_map(|r| r.concepts.iter().map(|c| c.label.clone()))
        .collect()
}
