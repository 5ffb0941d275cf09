//! Text-to-image prompts and the generative / yes-no question templates.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::content_ref;
use crate::sampler::ConceptPair;

pub const TEMPLATE_VERSION: &str = "templates-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("truth set must not be empty")]
    EmptyTruth,
    #[error("label '{0}' is both a truth label and a hallucination target")]
    Overlap(String),
    #[error("invalid template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Photo,
    Anime,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Photo, Style::Anime];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Photo => "photo",
            Style::Anime => "anime",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "photo" => Ok(Style::Photo),
            "anime" => Ok(Style::Anime),
            other => Err(format!("unknown style '{other}' (expected photo or anime)")),
        }
    }
}

/// Prompt and question templates. `{a}`, `{b}` and `{object}` are
/// substituted verbatim; no articles are inserted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Templates {
    pub image_prompt: String,
    pub photo_suffix: String,
    pub anime_suffix: String,
    pub photo_negative: String,
    pub anime_negative: String,
    pub describe: String,
    pub existence: String,
}

impl Default for Templates {
    fn default() -> Self {
        let negative = "blurry, low quality, extra limbs, watermark, text".to_owned();
        Self {
            image_prompt: "a picture of {a} and {b}".into(),
            photo_suffix: "photograph, realistic, high detail".into(),
            anime_suffix: "anime style illustration".into(),
            photo_negative: negative.clone(),
            anime_negative: negative,
            describe: "Please describe this image.".into(),
            existence: "Is there a {object} in the image?".into(),
        }
    }
}

impl Templates {
    pub fn validate(&self) -> Result<(), PromptError> {
        for placeholder in ["{a}", "{b}"] {
            if self.image_prompt.matches(placeholder).count() != 1 {
                return Err(PromptError::Template(format!(
                    "image_prompt must contain {placeholder} exactly once"
                )));
            }
        }
        if self.existence.matches("{object}").count() != 1 {
            return Err(PromptError::Template(
                "existence must contain {object} exactly once".into(),
            ));
        }
        if self.describe.trim().is_empty() {
            return Err(PromptError::Template("describe must not be empty".into()));
        }
        Ok(())
    }

    /// Version tag: the built-in version, or a content hash when overridden.
    pub fn version(&self) -> String {
        if *self == Templates::default() {
            TEMPLATE_VERSION.to_owned()
        } else {
            let json = serde_json::to_vec(self).expect("templates serialize");
            format!("custom-{}", content_ref(&json))
        }
    }

    fn suffix(&self, style: Style) -> &str {
        match style {
            Style::Photo => &self.photo_suffix,
            Style::Anime => &self.anime_suffix,
        }
    }

    fn negative(&self, style: Style) -> &str {
        match style {
            Style::Photo => &self.photo_negative,
            Style::Anime => &self.anime_negative,
        }
    }

    pub fn existence_question(&self, object: &str) -> String {
        self.existence.replace("{object}", object)
    }

    /// Inverse of [`Templates::existence_question`].
    pub fn parse_existence_target(&self, text: &str) -> Option<String> {
        let (prefix, suffix) = self.existence.split_once("{object}")?;
        let inner = text.strip_prefix(prefix)?.strip_suffix(suffix)?;
        (!inner.is_empty()).then(|| inner.to_owned())
    }

    /// Inverse of the image prompt head; returns the two substituted labels.
    pub fn parse_image_prompt(&self, prompt: &str) -> Option<(String, String)> {
        let (before_a, rest) = self.image_prompt.split_once("{a}")?;
        let (between, after_b) = rest.split_once("{b}")?;
        let body = prompt.strip_prefix(before_a)?;
        let (a, tail) = body.split_once(between)?;
        let b = if after_b.is_empty() {
            tail.split(", ").next().unwrap_or(tail)
        } else {
            tail.split_once(after_b)?.0
        };
        (!a.is_empty() && !b.is_empty()).then(|| (a.to_owned(), b.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePromptSpec {
    pub pair: ConceptPair,
    pub style: Style,
    pub prompt: String,
    pub negative_prompt: String,
    pub seed: u64,
}

pub fn image_prompt(pair: &ConceptPair, style: Style, seed: u64, templates: &Templates) -> ImagePromptSpec {
    let head = templates
        .image_prompt
        .replace("{a}", &pair.a.label)
        .replace("{b}", &pair.b.label);
    let suffix = templates.suffix(style);
    let prompt = if suffix.is_empty() {
        head
    } else {
        format!("{head}, {suffix}")
    };
    ImagePromptSpec {
        pair: pair.clone(),
        style,
        prompt,
        negative_prompt: templates.negative(style).to_owned(),
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Generative,
    Factual,
    Hallucination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruth {
    Yes,
    No,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub ground_truth: GroundTruth,
    pub kind: QuestionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub text: String,
}

impl Question {
    pub fn is_yes_no(&self) -> bool {
        self.kind != QuestionKind::Generative
    }
}

/// Describe prompt first, then factual questions over `truth`, then
/// counterfactual questions over `targets`, each group sorted.
pub fn question_set(
    truth: &BTreeSet<String>,
    targets: &BTreeSet<String>,
    templates: &Templates,
) -> Result<Vec<Question>, PromptError> {
    if truth.is_empty() {
        return Err(PromptError::EmptyTruth);
    }
    if let Some(dup) = truth.intersection(targets).next() {
        return Err(PromptError::Overlap(dup.clone()));
    }
    let mut out = Vec::with_capacity(1 + truth.len() + targets.len());
    out.push(Question {
        ground_truth: GroundTruth::None,
        kind: QuestionKind::Generative,
        target: None,
        text: templates.describe.clone(),
    });
    out.extend(truth.iter().map(|t| Question {
        ground_truth: GroundTruth::Yes,
        kind: QuestionKind::Factual,
        target: Some(t.clone()),
        text: templates.existence_question(t),
    }));
    out.extend(targets.iter().map(|t| Question {
        ground_truth: GroundTruth::No,
        kind: QuestionKind::Hallucination,
        target: Some(t.clone()),
        text: templates.existence_question(t),
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Concept;
    use crate::sampler::Criterion;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn dog_frisbee() -> ConceptPair {
        ConceptPair::new(Concept::entity("frisbee"), Concept::entity("dog"), 3, Criterion::Common)
    }

    #[test]
    fn photo_and_anime_prompts() {
        let t = Templates::default();
        let photo = image_prompt(&dog_frisbee(), Style::Photo, 1, &t);
        assert_eq!(photo.prompt, "a picture of dog and frisbee, photograph, realistic, high detail");
        assert_eq!(photo.negative_prompt, "blurry, low quality, extra limbs, watermark, text");
        let anime = image_prompt(&dog_frisbee(), Style::Anime, 1, &t);
        assert_eq!(anime.prompt, "a picture of dog and frisbee, anime style illustration");
        assert_eq!(photo, image_prompt(&dog_frisbee(), Style::Photo, 1, &t));
    }

    #[test]
    fn prompt_head_parses_back() {
        let t = Templates::default();
        let spec = image_prompt(&dog_frisbee(), Style::Anime, 0, &t);
        assert_eq!(t.parse_image_prompt(&spec.prompt), Some(("dog".into(), "frisbee".into())));
    }

    #[test]
    fn four_question_example() {
        let t = Templates::default();
        let qs = question_set(&set(&["dog", "frisbee"]), &set(&["car"]), &t).unwrap();
        let texts: Vec<&str> = qs.iter().map(|q| q.text.as_str()).collect();
        assert_eq!(
            texts,
            vec![
                "Please describe this image.",
                "Is there a dog in the image?",
                "Is there a frisbee in the image?",
                "Is there a car in the image?",
            ]
        );
        let gts: Vec<GroundTruth> = qs.iter().map(|q| q.ground_truth).collect();
        assert_eq!(gts, vec![GroundTruth::None, GroundTruth::Yes, GroundTruth::Yes, GroundTruth::No]);
        assert_eq!(qs[0].target, None);
    }

    #[test]
    fn question_set_edges() {
        let t = Templates::default();
        assert_eq!(question_set(&set(&["dog"]), &set(&[]), &t).unwrap().len(), 2);
        assert_eq!(
            question_set(&set(&["dog"]), &set(&["dog"]), &t),
            Err(PromptError::Overlap("dog".into()))
        );
        assert_eq!(question_set(&set(&[]), &set(&["car"]), &t), Err(PromptError::EmptyTruth));
    }

    #[test]
    fn template_validation() {
        let mut t = Templates::default();
        assert!(t.validate().is_ok());
        assert_eq!(t.version(), TEMPLATE_VERSION);
        t.existence = "Do you see it?".into();
        assert!(t.validate().is_err());
        assert!(t.version().starts_with("custom-"));
    }
}
