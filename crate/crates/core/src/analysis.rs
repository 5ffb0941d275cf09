//! Fact–hallucination co-occurrence matrix, k-means over its rows and the
//! derived hallucination-association graph.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{ModelResponse, Parsed};
use crate::graph::{Concept, ConceptGraph, GraphError, Level};
use crate::pipeline::TestCase;

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-9;
pub const TOP_CONCEPTS: usize = 5;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("response references unknown case {0}")]
    UnknownCase(String),
    #[error("only {nonzero} non-zero rows for k={k}; use a smaller k")]
    TooFewRows { nonzero: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("label '{0}' is not in the source graph")]
    UnknownLabel(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `counts[t][h]`: how often truth concept `t` co-occurred with a
/// hallucinated mention `h`. Rows and columns are sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactHallMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl FactHallMatrix {
    /// Puts rows and columns into canonical (sorted) order.
    pub fn new(rows: Vec<String>, cols: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, AnalysisError> {
        if counts.len() != rows.len() || counts.iter().any(|r| r.len() != cols.len()) {
            return Err(AnalysisError::Shape(format!(
                "{} rows x {} cols but counts are {}x{:?}",
                rows.len(),
                cols.len(),
                counts.len(),
                counts.first().map(Vec::len)
            )));
        }
        let mut cells = BTreeMap::new();
        for (r, row) in rows.iter().zip(&counts) {
            for (c, &v) in cols.iter().zip(row) {
                *cells.entry((r.clone(), c.clone())).or_insert(0) += v;
            }
        }
        Ok(Self::from_cells(rows, cols, &cells))
    }

    fn from_cells(
        rows: impl IntoIterator<Item = String>,
        cols: impl IntoIterator<Item = String>,
        cells: &BTreeMap<(String, String), u64>,
    ) -> Self {
        let rows: Vec<String> = rows.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let cols: Vec<String> = cols.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let counts = rows
            .iter()
            .map(|r| {
                cols.iter()
                    .map(|c| cells.get(&(r.clone(), c.clone())).copied().unwrap_or(0))
                    .collect()
            })
            .collect();
        Self { rows, cols, counts }
    }

    pub fn get(&self, row: &str, col: &str) -> u64 {
        match (self.rows.binary_search_by(|r| r.as_str().cmp(row)), self.cols.binary_search_by(|c| c.as_str().cmp(col))) {
            (Ok(r), Ok(c)) => self.counts[r][c],
            _ => 0,
        }
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Header row `truth,<cols...>`, then one row per truth concept.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth");
        for c in &self.cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.counts) {
            out.push_str(r);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Counts every (truth, hallucinated mention) combination of every
/// successful generative response.
pub fn build_matrix(cases: &[TestCase], responses: &[ModelResponse]) -> Result<FactHallMatrix, AnalysisError> {
    let by_id: BTreeMap<&str, &TestCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let mut rows = BTreeSet::new();
    let mut cols = BTreeSet::new();
    let mut cells: BTreeMap<(String, String), u64> = BTreeMap::new();
    for r in responses {
        let Parsed::Mentions { labels } = &r.parsed else {
            continue;
        };
        let case = by_id
            .get(r.case_id.as_str())
            .ok_or_else(|| AnalysisError::UnknownCase(r.case_id.clone()))?;
        if r.error.is_some() {
            continue;
        }
        rows.extend(case.truth.iter().cloned());
        for h in labels.difference(&case.truth) {
            cols.insert(h.clone());
            for t in &case.truth {
                *cells.entry((t.clone(), h.clone())).or_insert(0) += 1;
            }
        }
    }
    Ok(FactHallMatrix::from_cells(rows, cols, &cells))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub index: usize,
    pub members: Vec<String>,
    /// Members ranked by row total (desc, then label), at most five.
    pub top_truth_concepts: Vec<String>,
    pub hallucination_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub assignments: BTreeMap<String, usize>,
    pub clusters: Vec<Cluster>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Euclidean k-means over L1-normalized non-zero rows. Initialization
/// starts from non-zero row `seed % n` and adds the farthest remaining row
/// until k centroids exist (ties to the lowest row). All-zero rows join
/// the nearest centroid afterwards. Cluster indices follow the first
/// member in row order.
pub fn cluster_concepts(matrix: &FactHallMatrix, k: usize, seed: u64) -> Result<ClusterReport, AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::ZeroK);
    }
    let nonzero: Vec<usize> = (0..matrix.rows.len()).filter(|&r| matrix.row_total(r) > 0).collect();
    if nonzero.len() < k {
        return Err(AnalysisError::TooFewRows {
            nonzero: nonzero.len(),
            k,
        });
    }
    let profile = |r: usize| -> Vec<f64> {
        let total = matrix.row_total(r) as f64;
        matrix.counts[r].iter().map(|&v| v as f64 / total).collect()
    };
    let points: Vec<Vec<f64>> = nonzero.iter().map(|&r| profile(r)).collect();
    let n = points.len();

    let mut chosen = vec![(seed % n as u64) as usize];
    while chosen.len() < k {
        let mut pick = None;
        let mut pick_d = f64::NEG_INFINITY;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let d = chosen.iter().map(|&c| dist2(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if d > pick_d {
                pick = Some(i);
                pick_d = d;
            }
        }
        chosen.push(pick.expect("n >= k leaves a candidate"));
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();

    let dims = matrix.cols.len();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dims]; k];
        let mut sizes = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            sizes[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if sizes[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
            shift = shift.max(dist2(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        let reassigned: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let stable = reassigned == assign;
        assign = reassigned;
        if stable && shift <= TOLERANCE {
            converged = true;
            break;
        }
    }

    let zero = vec![0.0; dims];
    let mut raw = vec![0usize; matrix.rows.len()];
    for (slot, &r) in nonzero.iter().enumerate() {
        raw[r] = assign[slot];
    }
    for r in (0..matrix.rows.len()).filter(|r| matrix.row_total(*r) == 0) {
        raw[r] = nearest(&zero, &centroids);
    }

    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in &raw {
        let next = relabel.len();
        relabel.entry(c).or_insert(next);
    }
    let mut clusters: Vec<Cluster> = (0..relabel.len())
        .map(|index| Cluster {
            index,
            members: Vec::new(),
            top_truth_concepts: Vec::new(),
            hallucination_total: 0,
        })
        .collect();
    let mut assignments = BTreeMap::new();
    for (r, label) in matrix.rows.iter().enumerate() {
        let c = relabel[&raw[r]];
        assignments.insert(label.clone(), c);
        clusters[c].members.push(label.clone());
        clusters[c].hallucination_total += matrix.row_total(r);
    }
    for cl in &mut clusters {
        let mut ranked: Vec<(u64, &String)> = cl
            .members
            .iter()
            .map(|m| (matrix.row_total(matrix.rows.binary_search(m).expect("member is a row")), m))
            .collect();
        ranked.sort_by(|x, y| y.0.cmp(&x.0).then_with(|| x.1.cmp(y.1)));
        cl.top_truth_concepts = ranked.into_iter().take(TOP_CONCEPTS).map(|(_, m)| m.clone()).collect();
    }
    Ok(ClusterReport {
        k,
        seed,
        iterations,
        converged,
        assignments,
        clusters,
    })
}

/// Undirected graph of hallucination associations: weight(t, h) is the
/// larger of the two directed counts. Levels come from `source`;
/// environment–environment pairs are dropped.
pub fn hallucination_graph(matrix: &FactHallMatrix, source: &ConceptGraph) -> Result<ConceptGraph, AnalysisError> {
    let labels: BTreeSet<&String> = matrix.rows.iter().chain(&matrix.cols).collect();
    let mut concepts = Vec::new();
    let mut levels: BTreeMap<&str, Level> = BTreeMap::new();
    for l in labels {
        let level = source.level(l).ok_or_else(|| AnalysisError::UnknownLabel(l.clone()))?;
        levels.insert(l, level);
        concepts.push(Concept::new(l.clone(), level));
    }
    let mut weights: BTreeMap<(String, String), u64> = BTreeMap::new();
    for (t, row) in matrix.rows.iter().zip(&matrix.counts) {
        for (h, &v) in matrix.cols.iter().zip(row) {
            if v == 0 || t == h || !Level::pair_allowed(levels[t.as_str()], levels[h.as_str()]) {
                continue;
            }
            let key = if t < h { (t.clone(), h.clone()) } else { (h.clone(), t.clone()) };
            let w = weights.entry(key).or_insert(0);
            *w = (*w).max(v);
        }
    }
    Ok(ConceptGraph::from_parts(
        concepts,
        weights.into_iter().map(|((a, b), w)| (a, b, w)),
    )?)
}
