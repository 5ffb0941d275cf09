//! Concept-pair selection under the four distribution criteria.
//!
//! `common` and `longtail` are deterministic prefixes of a sorted candidate
//! list. `random` and `fictional` draw uniformly without replacement using
//! [`SAMPLER_ALGORITHM`], which is fully specified so other implementations
//! can reproduce a sample from the same seed.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Concept, ConceptGraph, Level};

/// Default number of pairs drawn per criterion.
pub const DEFAULT_K: usize = 40;

/// Identity of the seeded generator and the draw procedure, recorded in
/// every run manifest.
pub const SAMPLER_ALGORITHM: &str = "xoshiro256++ seeded by SplitMix64(seed) (rand_xoshiro seed_from_u64); \
partial Fisher-Yates over the canonical candidate list: for i in 0..m, j = i + next_u64() % (n - i), swap(i, j)";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no candidates for criterion {0}")]
    NoCandidates(Criterion),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Common,
    Longtail,
    Random,
    Fictional,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Common,
        Criterion::Longtail,
        Criterion::Random,
        Criterion::Fictional,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Common => "common",
            Criterion::Longtail => "longtail",
            Criterion::Random => "random",
            Criterion::Fictional => "fictional",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "common" => Ok(Criterion::Common),
            "longtail" | "long-tail" => Ok(Criterion::Longtail),
            "random" => Ok(Criterion::Random),
            "fictional" => Ok(Criterion::Fictional),
            other => Err(format!(
                "unknown criterion '{other}' (expected common, longtail, random or fictional)"
            )),
        }
    }
}

/// A sampled pair in canonical order (`a.label < b.label`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptPair {
    pub a: Concept,
    pub b: Concept,
    pub criterion: Criterion,
    pub weight: u64,
}

impl ConceptPair {
    /// Orders the two concepts canonically.
    pub fn new(x: Concept, y: Concept, weight: u64, criterion: Criterion) -> Self {
        let (a, b) = if x.label <= y.label { (x, y) } else { (y, x) };
        Self {
            a,
            b,
            criterion,
            weight,
        }
    }

    pub fn labels(&self) -> (&str, &str) {
        (&self.a.label, &self.b.label)
    }

    /// Checks canonical order, allowed pattern and the criterion/weight rule.
    pub fn validate(&self) -> Result<(), String> {
        if self.a.label >= self.b.label {
            return Err(format!(
                "pair ({}, {}) is not in canonical order",
                self.a.label, self.b.label
            ));
        }
        if !Level::pair_allowed(self.a.level, self.b.level) {
            return Err(format!(
                "pair ({}, {}) is environment-environment",
                self.a.label, self.b.label
            ));
        }
        match self.criterion {
            Criterion::Fictional if self.weight != 0 => {
                Err("fictional pair must have zero weight".into())
            }
            Criterion::Common | Criterion::Longtail if self.weight == 0 => {
                Err(format!("{} pair must have positive weight", self.criterion))
            }
            _ => Ok(()),
        }
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        (&self.a.label, &self.b.label).cmp(&(&other.a.label, &other.b.label))
    }
}

/// All candidate pairs for a criterion, in the criterion's canonical order.
pub fn candidate_pairs(graph: &ConceptGraph, criterion: Criterion) -> Vec<ConceptPair> {
    let mut out: Vec<ConceptPair> = match criterion {
        Criterion::Common | Criterion::Longtail => graph
            .edges()
            .map(|(a, b, w)| {
                let ca = graph.concept(a).expect("edge endpoint exists");
                let cb = graph.concept(b).expect("edge endpoint exists");
                ConceptPair::new(ca, cb, w, criterion)
            })
            .collect(),
        Criterion::Random | Criterion::Fictional => {
            let concepts: Vec<Concept> = graph.concepts().collect();
            let mut pairs = Vec::new();
            for (i, a) in concepts.iter().enumerate() {
                for b in &concepts[i + 1..] {
                    if !Level::pair_allowed(a.level, b.level) {
                        continue;
                    }
                    let w = graph.weight(&a.label, &b.label);
                    if criterion == Criterion::Fictional && w > 0 {
                        continue;
                    }
                    pairs.push(ConceptPair::new(a.clone(), b.clone(), w, criterion));
                }
            }
            pairs
        }
    };
    match criterion {
        Criterion::Common => out.sort_by(|x, y| y.weight.cmp(&x.weight).then_with(|| x.key_cmp(y))),
        Criterion::Longtail => out.sort_by(|x, y| x.weight.cmp(&y.weight).then_with(|| x.key_cmp(y))),
        Criterion::Random | Criterion::Fictional => out.sort_by(|x, y| x.key_cmp(y)),
    }
    out
}

/// Draws up to `k` pairs. Returns fewer than `k` only when the candidates
/// run out; an empty candidate set is an error.
pub fn sample_pairs(
    graph: &ConceptGraph,
    criterion: Criterion,
    k: usize,
    seed: u64,
) -> Result<Vec<ConceptPair>, SampleError> {
    if k == 0 {
        return Err(SampleError::InvalidK);
    }
    let mut candidates = candidate_pairs(graph, criterion);
    if candidates.is_empty() {
        return Err(SampleError::NoCandidates(criterion));
    }
    let take = k.min(candidates.len());
    match criterion {
        Criterion::Common | Criterion::Longtail => {}
        Criterion::Random | Criterion::Fictional => {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            partial_shuffle(&mut candidates, take, &mut rng);
        }
    }
    candidates.truncate(take);
    Ok(candidates)
}

fn partial_shuffle<T, R: RngCore>(items: &mut [T], take: usize, rng: &mut R) {
    let n = items.len();
    for i in 0..take {
        let span = (n - i) as u64;
        let j = i + (rng.next_u64() % span) as usize;
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, SceneRecord};

    fn example_graph() -> ConceptGraph {
        let rec = |items: &[(&str, Level)]| {
            SceneRecord::new(items.iter().map(|&(l, lvl)| Concept::new(l, lvl)).collect())
        };
        use Level::*;
        let mut r = Vec::new();
        for _ in 0..3 {
            r.push(rec(&[("dog", Entity), ("frisbee", Entity), ("grass", Environment)]));
        }
        for _ in 0..2 {
            r.push(rec(&[("dog", Entity), ("grass", Environment)]));
        }
        r.push(rec(&[("car", Entity), ("sky", Environment)]));
        build_graph(&r).unwrap()
    }

    fn labels(pairs: &[ConceptPair]) -> Vec<(String, String, u64)> {
        pairs
            .iter()
            .map(|p| (p.a.label.clone(), p.b.label.clone(), p.weight))
            .collect()
    }

    #[test]
    fn common_and_longtail_heads() {
        let g = example_graph();
        let common = candidate_pairs(&g, Criterion::Common);
        assert_eq!(labels(&common[..1]), vec![("dog".into(), "grass".into(), 5)]);
        let longtail = candidate_pairs(&g, Criterion::Longtail);
        assert_eq!(labels(&longtail[..1]), vec![("car".into(), "sky".into(), 1)]);
    }

    #[test]
    fn fictional_is_zero_weight_complement() {
        let g = example_graph();
        let fict = labels(&candidate_pairs(&g, Criterion::Fictional));
        let expect: Vec<(String, String, u64)> = [
            ("car", "dog"),
            ("car", "frisbee"),
            ("car", "grass"),
            ("dog", "sky"),
            ("frisbee", "sky"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string(), 0))
        .collect();
        assert_eq!(fict, expect);
    }

    #[test]
    fn random_includes_edges_and_non_edges() {
        let g = example_graph();
        // 5 nodes, 2 env: C(5,2)=10 minus the single env-env pair
        assert_eq!(candidate_pairs(&g, Criterion::Random).len(), 9);
    }

    #[test]
    fn common_top_two_tie_break() {
        let g = example_graph();
        let got = sample_pairs(&g, Criterion::Common, 2, 12345).unwrap();
        assert_eq!(
            labels(&got),
            vec![("dog".into(), "grass".into(), 5), ("dog".into(), "frisbee".into(), 3)]
        );
        assert_eq!(got, sample_pairs(&g, Criterion::Common, 2, 0).unwrap());
    }

    #[test]
    fn fictional_exhaustion_returns_all() {
        let g = example_graph();
        let got = sample_pairs(&g, Criterion::Fictional, 100, 7).unwrap();
        assert_eq!(got.len(), 5);
        let mut sorted = got.clone();
        sorted.sort_by(|x, y| x.key_cmp(y));
        assert_eq!(sorted, candidate_pairs(&g, Criterion::Fictional));
        assert_eq!(got, sample_pairs(&g, Criterion::Fictional, 100, 7).unwrap());
    }

    #[test]
    fn empty_candidates_is_an_error() {
        let g = build_graph(&[SceneRecord::new(vec![Concept::entity("dog")])]).unwrap();
        assert_eq!(
            sample_pairs(&g, Criterion::Longtail, 1, 0),
            Err(SampleError::NoCandidates(Criterion::Longtail))
        );
        assert_eq!(sample_pairs(&g, Criterion::Common, 0, 0), Err(SampleError::InvalidK));
    }

    #[test]
    fn pair_validation() {
        let p = ConceptPair::new(Concept::entity("dog"), Concept::entity("cat"), 0, Criterion::Common);
        assert_eq!(p.labels(), ("cat", "dog"));
        assert!(p.validate().is_err());
        let p = ConceptPair::new(
            Concept::environment("sky"),
            Concept::environment("grass"),
            0,
            Criterion::Random,
        );
        assert!(p.validate().is_err());
    }

    #[test]
    fn criterion_parse() {
        assert_eq!("long-tail".parse::<Criterion>(), Ok(Criterion::Longtail));
        assert!("rare".parse::<Criterion>().is_err());
    }
}
