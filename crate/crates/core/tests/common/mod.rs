//! Shared fixtures and brute-force oracles for the integration tests.
//! The oracles deliberately avoid the library's own helpers.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ode_core::config::RunConfig;
use ode_core::graph::{build_graph, Concept, ConceptGraph, Level, SceneRecord};
use ode_core::sampler::Criterion;
use ode_core::services::ServiceEndpoint;

/// SplitMix64, used both as a fixture generator and as the seeding stage
/// of the xoshiro256++ oracle.
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

/// Reference xoshiro256++ (Blackman & Vigna), seeded from four SplitMix64
/// outputs.
pub struct Xoshiro256pp([u64; 4]);

impl Xoshiro256pp {
    pub fn seed(seed: u64) -> Self {
        let mut sm = SplitMix64(seed);
        Self([sm.next(), sm.next(), sm.next(), sm.next()])
    }

    pub fn next(&mut self) -> u64 {
        let s = &mut self.0;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }
}

pub const ENTITIES: [&str; 20] = [
    "bicycle", "book", "bottle", "bus", "car", "cat", "chair", "clock", "cow", "cup", "dog", "frisbee", "horse",
    "kite", "laptop", "person", "sheep", "table", "umbrella", "vase",
];
pub const ENVIRONMENTS: [&str; 4] = ["beach", "grass", "sky", "street"];

pub fn level_of(label: &str) -> Level {
    if ENVIRONMENTS.contains(&label) {
        Level::Environment
    } else {
        Level::Entity
    }
}

/// The small hand-counted example graph: {dog,frisbee,grass}×3,
/// {dog,grass}×2, {car,sky}×1.
pub fn example_records() -> Vec<SceneRecord> {
    let rec = |labels: &[&str]| SceneRecord::new(labels.iter().map(|l| Concept::new(*l, level_of(l))).collect());
    let mut out = Vec::new();
    out.extend((0..3).map(|_| rec(&["dog", "frisbee", "grass"])));
    out.extend((0..2).map(|_| rec(&["dog", "grass"])));
    out.push(rec(&["car", "sky"]));
    out
}

pub fn example_graph() -> ConceptGraph {
    build_graph(&example_records()).unwrap()
}

/// Random scene records over the first `nodes` labels of a mixed pool.
pub fn random_records(seed: u64, nodes: usize, records: usize) -> Vec<SceneRecord> {
    let mut rng = SplitMix64(seed);
    let pool: Vec<&str> = ENTITIES.iter().take(8).chain(ENVIRONMENTS.iter()).copied().collect();
    let labels: Vec<&str> = pool.into_iter().take(nodes.max(1)).collect();
    (0..records)
        .map(|_| {
            let size = 1 + rng.below(4) as usize;
            let concepts = (0..size)
                .map(|_| {
                    let l = labels[rng.below(labels.len() as u64) as usize];
                    Concept::new(l, level_of(l))
                })
                .collect();
            SceneRecord::new(concepts)
        })
        .collect()
}

/// Brute-force co-occurrence counts: each unordered allowed-pattern pair
/// counted once per record.
pub fn oracle_weights(records: &[SceneRecord]) -> BTreeMap<(String, String), u64> {
    let mut w = BTreeMap::new();
    for r in records {
        let mut labels: Vec<(String, Level)> = r.concepts.iter().map(|c| (c.label.clone(), c.level)).collect();
        labels.sort();
        labels.dedup();
        for i in 0..labels.len() {
            for j in (i + 1)..labels.len() {
                let (a, la) = &labels[i];
                let (b, lb) = &labels[j];
                if *la == Level::Environment && *lb == Level::Environment {
                    continue;
                }
                *w.entry((a.clone(), b.clone())).or_insert(0) += 1;
            }
        }
    }
    w
}

pub fn oracle_labels(records: &[SceneRecord]) -> BTreeMap<String, Level> {
    records
        .iter()
        .flat_map(|r| r.concepts.iter().map(|c| (c.label.clone(), c.level)))
        .collect()
}

/// (a, b, weight) for every allowed pair, in (a, b) order.
pub fn oracle_all_pairs(records: &[SceneRecord]) -> Vec<(String, String, u64)> {
    let labels = oracle_labels(records);
    let weights = oracle_weights(records);
    let names: Vec<&String> = labels.keys().collect();
    let mut out = Vec::new();
    for i in 0..names.len() {
        for j in (i + 1)..names.len() {
            if labels[names[i]] == Level::Environment && labels[names[j]] == Level::Environment {
                continue;
            }
            let w = weights.get(&(names[i].clone(), names[j].clone())).copied().unwrap_or(0);
            out.push((names[i].clone(), names[j].clone(), w));
        }
    }
    out
}

/// Candidate list for a criterion in its documented order.
pub fn oracle_candidates(records: &[SceneRecord], criterion: Criterion) -> Vec<(String, String, u64)> {
    let mut all = oracle_all_pairs(records);
    match criterion {
        Criterion::Common => {
            all.retain(|p| p.2 > 0);
            all.sort_by(|x, y| y.2.cmp(&x.2).then_with(|| (&x.0, &x.1).cmp(&(&y.0, &y.1))));
        }
        Criterion::Longtail => {
            all.retain(|p| p.2 > 0);
            all.sort_by(|x, y| x.2.cmp(&y.2).then_with(|| (&x.0, &x.1).cmp(&(&y.0, &y.1))));
        }
        Criterion::Random => {}
        Criterion::Fictional => all.retain(|p| p.2 == 0),
    }
    all
}

/// Independent re-implementation of the documented sampling procedure.
pub fn oracle_sample(records: &[SceneRecord], criterion: Criterion, k: usize, seed: u64) -> Vec<(String, String, u64)> {
    let mut cands = oracle_candidates(records, criterion);
    let take = k.min(cands.len());
    if matches!(criterion, Criterion::Random | Criterion::Fictional) {
        let mut rng = Xoshiro256pp::seed(seed);
        let n = cands.len();
        for i in 0..take {
            let j = i + (rng.next() % (n - i) as u64) as usize;
            cands.swap(i, j);
        }
    }
    cands.truncate(take);
    cands
}

/// A larger synthetic corpus over 20 entities and 4 environments with
/// enough positive and zero-weight pairs for k=40 under every criterion.
pub fn benchmark_records() -> Vec<SceneRecord> {
    let mut rng = SplitMix64(2024);
    let mut out = Vec::new();
    for i in 0..220 {
        let mut labels: BTreeSet<&str> = BTreeSet::new();
        // skewed popularity so weights spread out
        let n_ent = 1 + rng.below(3) as usize;
        for _ in 0..n_ent {
            let r = rng.below(100) as usize;
            let idx = (r * r / 500).min(ENTITIES.len() - 1);
            labels.insert(ENTITIES[(idx + i % 3) % ENTITIES.len()]);
        }
        if rng.below(2) == 0 {
            labels.insert(ENVIRONMENTS[rng.below(4) as usize]);
        }
        out.push(SceneRecord::new(labels.into_iter().map(|l| Concept::new(l, level_of(l))).collect()));
    }
    out
}

pub fn write_records(path: &Path, records: &[SceneRecord]) {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).unwrap());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn endpoint(url: &str) -> ServiceEndpoint {
    ServiceEndpoint {
        backoff_ms: 0,
        ..ServiceEndpoint::new(url)
    }
}

/// Config wired to the in-process mocks.
pub fn mock_config(store: &Path, detect: &str, model: &str, k: usize) -> RunConfig {
    let mut c = RunConfig {
        store_dir: store.to_owned(),
        k,
        seed: 7,
        ..RunConfig::default()
    };
    c.endpoints.t2i = endpoint("mock://t2i");
    c.endpoints.detect = endpoint(detect);
    c.endpoints.model = endpoint(model);
    c
}

pub fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}
