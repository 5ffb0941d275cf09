//! Generative (CHAIR, Cover, Hal, Cog) and discriminative (Accuracy,
//! Precision, Recall, F1) hallucination metrics.
//!
//! Per response, with M the mentioned objects, T the truth set and H the
//! hallucination targets:
//!
//! * CHAIR = 1 − |M ∩ T| / |M|
//! * Cover = |M ∩ T| / |T|
//! * Hal   = 1 if CHAIR > 0 else 0
//! * Cog   = |M ∩ H| / |M|
//!
//! A response with no mentions scores 0 on all four and is counted in
//! `empty_mention_responses`.
//!
//! For yes/no questions an unparseable answer is always wrong: it lowers
//! Accuracy and, when the ground truth is the positive class, Recall.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{ModelResponse, Parsed, Verdict};
use crate::pipeline::TestCase;
use crate::prompts::{GroundTruth, QuestionKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("truth set must not be empty")]
    EmptyTruth,
    #[error("hallucination targets overlap the truth set at '{0}'")]
    TargetOverlap(String),
    #[error("cannot aggregate an empty list of scores")]
    EmptyAggregate,
    #[error("record {0} has no yes/no ground truth")]
    MissingGroundTruth(usize),
    #[error("response references unknown case {0}")]
    UnknownCase(String),
    #[error("response {case_id}#{q} does not match its question: {reason}")]
    Mismatch { case_id: String, q: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeScores {
    pub chair: f64,
    pub cover: f64,
    pub hal: f64,
    pub cog: f64,
    pub empty_mentions: bool,
}

pub fn score_generative(
    mentions: &BTreeSet<String>,
    truth: &BTreeSet<String>,
    targets: &BTreeSet<String>,
) -> Result<GenerativeScores, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    if let Some(x) = truth.intersection(targets).next() {
        return Err(MetricsError::TargetOverlap(x.clone()));
    }
    let hits = mentions.intersection(truth).count() as f64;
    let cover = hits / truth.len() as f64;
    if mentions.is_empty() {
        return Ok(GenerativeScores {
            chair: 0.0,
            cover,
            hal: 0.0,
            cog: 0.0,
            empty_mentions: true,
        });
    }
    let m = mentions.len() as f64;
    let chair = 1.0 - hits / m;
    let cog = mentions.intersection(targets).count() as f64 / m;
    Ok(GenerativeScores {
        chair,
        cover,
        hal: if chair > 0.0 { 1.0 } else { 0.0 },
        cog,
        empty_mentions: false,
    })
}

/// Rounds half-to-even at one decimal place, on the exact decimal
/// expansion of `x` (so 0.35, stored as 0.34999…, goes down).
pub fn round_1dp(x: f64) -> f64 {
    format!("{x:.1}").parse().expect("formatted float parses")
}

fn as_percent(fraction: f64) -> f64 {
    round_1dp(fraction * 100.0)
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSummary {
    pub chair: f64,
    pub cover: f64,
    pub hal: f64,
    pub cog: f64,
    pub responses: usize,
    pub empty_mention_responses: usize,
}

/// Means of each score as percentages rounded to one decimal.
pub fn aggregate_generative(scores: &[GenerativeScores]) -> Result<GenerativeSummary, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyAggregate);
    }
    let field = |f: fn(&GenerativeScores) -> f64| as_percent(stable_mean(scores.iter().map(f).collect()));
    Ok(GenerativeSummary {
        chair: field(|s| s.chair),
        cover: field(|s| s.cover),
        hal: field(|s| s.hal),
        cog: field(|s| s.cog),
        responses: scores.len(),
        empty_mention_responses: scores.iter().filter(|s| s.empty_mentions).count(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveClass {
    #[default]
    Yes,
    No,
}

impl PositiveClass {
    fn truth(self) -> GroundTruth {
        match self {
            PositiveClass::Yes => GroundTruth::Yes,
            PositiveClass::No => GroundTruth::No,
        }
    }

    fn verdict(self) -> Verdict {
        match self {
            PositiveClass::Yes => Verdict::Yes,
            PositiveClass::No => Verdict::No,
        }
    }
}

impl fmt::Display for PositiveClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositiveClass::Yes => "yes",
            PositiveClass::No => "no",
        })
    }
}

impl FromStr for PositiveClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "yes" => Ok(PositiveClass::Yes),
            "no" => Ok(PositiveClass::No),
            other => Err(format!("positive class must be yes or no, got '{other}'")),
        }
    }
}

/// Confusion cells relative to the positive class, over valid answers
/// only; invalid answers are counted separately by their ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub invalid_on_yes: usize,
    pub invalid_on_no: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.invalid_on_yes + self.invalid_on_no
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.invalid_on_yes += other.invalid_on_yes;
        self.invalid_on_no += other.invalid_on_no;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeScores {
    pub positive_class: PositiveClass,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Names of metrics whose denominator was zero (reported as 0).
    pub zero_denominator: Vec<String>,
}

pub fn confusion(records: &[(Verdict, GroundTruth)], positive: PositiveClass) -> Result<ConfusionCounts, MetricsError> {
    let pos_truth = positive.truth();
    let pos_verdict = positive.verdict();
    let mut c = ConfusionCounts::default();
    for (i, &(verdict, truth)) in records.iter().enumerate() {
        if truth == GroundTruth::None {
            return Err(MetricsError::MissingGroundTruth(i));
        }
        match verdict {
            Verdict::Invalid => match truth {
                GroundTruth::Yes => c.invalid_on_yes += 1,
                _ => c.invalid_on_no += 1,
            },
            v => match (truth == pos_truth, v == pos_verdict) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            },
        }
    }
    Ok(c)
}

pub fn scores_from_counts(counts: ConfusionCounts, positive: PositiveClass) -> DiscriminativeScores {
    let mut zero = Vec::new();
    let mut ratio = |name: &str, num: usize, den: usize| {
        if den == 0 {
            zero.push(name.to_owned());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let invalid_on_positive = match positive {
        PositiveClass::Yes => counts.invalid_on_yes,
        PositiveClass::No => counts.invalid_on_no,
    };
    let accuracy = ratio("accuracy", counts.tp + counts.tn, counts.total());
    let precision = ratio("precision", counts.tp, counts.tp + counts.fp);
    let recall = ratio("recall", counts.tp, counts.tp + counts.fn_ + invalid_on_positive);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        zero.push("f1".to_owned());
        0.0
    };
    DiscriminativeScores {
        positive_class: positive,
        counts,
        accuracy,
        precision,
        recall,
        f1,
        zero_denominator: zero,
    }
}

pub fn score_discriminative(
    records: &[(Verdict, GroundTruth)],
    positive: PositiveClass,
) -> Result<DiscriminativeScores, MetricsError> {
    Ok(scores_from_counts(confusion(records, positive)?, positive))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub questions: usize,
    pub counts: ConfusionCounts,
    pub zero_denominator: Vec<String>,
    /// Answers that never reached the model (transport failures).
    pub errored: usize,
}

impl DiscriminativeSummary {
    fn from_scores(s: &DiscriminativeScores, errored: usize) -> Self {
        Self {
            accuracy: as_percent(s.accuracy),
            precision: as_percent(s.precision),
            recall: as_percent(s.recall),
            f1: as_percent(s.f1),
            questions: s.counts.total(),
            counts: s.counts,
            zero_denominator: s.zero_denominator.clone(),
            errored,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeBlock {
    #[serde(flatten)]
    pub summary: GenerativeSummary,
    /// Describe prompts that failed in transport; excluded from the means.
    pub errored: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CriterionMetrics {
    pub generative: Option<GenerativeBlock>,
    pub discriminative: Option<DiscriminativeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub positive_class: PositiveClass,
    pub conventions: BTreeMap<String, String>,
    pub synonym_table_version: String,
    /// Keyed by criterion name plus `all`.
    pub criteria: BTreeMap<String, CriterionMetrics>,
}

pub const ALL_KEY: &str = "all";

#[derive(Default)]
struct Accumulator {
    generative: Vec<GenerativeScores>,
    generative_errored: usize,
    verdicts: Vec<(Verdict, GroundTruth)>,
    verdict_errored: usize,
}

/// Joins responses with their cases and scores them per criterion.
pub fn compute_report(
    cases: &[TestCase],
    responses: &[ModelResponse],
    positive: PositiveClass,
    synonym_table_version: &str,
) -> Result<MetricsReport, MetricsError> {
    let by_id: BTreeMap<&str, &TestCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let mut groups: BTreeMap<String, Accumulator> = BTreeMap::new();
    for r in responses {
        let case = by_id
            .get(r.case_id.as_str())
            .ok_or_else(|| MetricsError::UnknownCase(r.case_id.clone()))?;
        let mismatch = |reason: &str| MetricsError::Mismatch {
            case_id: r.case_id.clone(),
            q: r.q,
            reason: reason.to_owned(),
        };
        let question = case.questions.get(r.q).ok_or_else(|| mismatch("question index out of range"))?;
        for key in [case.pair.criterion.as_str(), ALL_KEY] {
            let acc = groups.entry(key.to_owned()).or_default();
            match (&r.parsed, question.kind) {
                (Parsed::Mentions { labels }, QuestionKind::Generative) => {
                    if r.error.is_some() {
                        acc.generative_errored += 1;
                    } else {
                        acc.generative
                            .push(score_generative(labels, &case.truth, &case.hallucination_targets)?);
                    }
                }
                (Parsed::Verdict { verdict }, QuestionKind::Factual | QuestionKind::Hallucination) => {
                    if r.error.is_some() {
                        acc.verdict_errored += 1;
                    }
                    acc.verdicts.push((*verdict, question.ground_truth));
                }
                _ => return Err(mismatch("parsed kind does not match question kind")),
            }
        }
    }
    let mut criteria = BTreeMap::new();
    for (key, acc) in groups {
        let generative = if acc.generative.is_empty() {
            None
        } else {
            Some(GenerativeBlock {
                summary: aggregate_generative(&acc.generative)?,
                errored: acc.generative_errored,
            })
        };
        let discriminative = if acc.verdicts.is_empty() {
            None
        } else {
            let s = score_discriminative(&acc.verdicts, positive)?;
            Some(DiscriminativeSummary::from_scores(&s, acc.verdict_errored))
        };
        criteria.insert(
            key,
            CriterionMetrics {
                generative,
                discriminative,
            },
        );
    }
    let conventions = [
        ("positive_class", positive.to_string()),
        ("empty_mentions", "chair=0, hal=0, cog=0; counted in empty_mention_responses".into()),
        ("invalid_verdict", "counted incorrect for accuracy and as a miss for recall".into()),
        ("rounding", "percent, half-even, 1 decimal".into()),
        ("generative_transport_errors", "excluded from means, counted in errored".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect();
    Ok(MetricsReport {
        positive_class: positive,
        conventions,
        synonym_table_version: synonym_table_version.to_owned(),
        criteria,
    })
}
