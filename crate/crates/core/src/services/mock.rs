//! Deterministic in-process implementations of the three services.
//!
//! The mock text-to-image service parses the two concept labels out of the
//! prompt and writes them into a PNG tEXt chunk; the mock detector reads
//! that chunk back; the mock model answers from it. This makes the whole
//! pipeline testable end to end without any model weights.
//!
//! Selected through `mock://<script>?<options>` base URLs:
//!
//! | option          | effect                                                        |
//! |-----------------|---------------------------------------------------------------|
//! | `extra=a,b`     | t2i embeds these labels in addition to the prompt's pair      |
//! | `omit=a,b`      | detector never reports these labels                           |
//! | `omit_percent=p`| detector drops the second pair label for p% of prompts        |
//! | `omit_seed=s`   | salt for the `omit_percent` decision                          |
//! | `confidence=c`  | detector confidence for every detection (default 0.9)         |
//! | `pool=a,b`      | candidate labels for the `hallucinate-one` script             |
//! | `delay_ms=n`    | sleep inside every call                                       |
//! | `fail_first=n`  | answer the first n calls with HTTP 503                        |
//!
//! Scripts (the URL host) only affect `/v1/query`: `truthful` (default),
//! `always-yes`, `refuser`, `hallucinate-one`.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use super::wire::*;
use super::{ServiceError, Transport, TransportFailure};
use crate::hashing::seed_from_bytes;
use crate::imaging::{self, PROMPT_KEY};
use crate::prompts::Templates;

pub const MOCK_IMAGE_SIZE: u32 = 64;
pub const MOCK_CONFIDENCE: f64 = 0.9;
pub const REFUSAL_TEXT: &str = "I cannot answer that.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelScript {
    Truthful,
    AlwaysYes,
    Refuser,
    HallucinateOne { pool: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    pub script: ModelScript,
    pub extra_labels: Vec<String>,
    pub omit_labels: BTreeSet<String>,
    pub omit_percent: u32,
    pub omit_seed: u64,
    pub confidence: f64,
    pub delay_ms: u64,
    pub fail_first: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            script: ModelScript::Truthful,
            extra_labels: Vec::new(),
            omit_labels: BTreeSet::new(),
            omit_percent: 0,
            omit_seed: 0,
            confidence: MOCK_CONFIDENCE,
            delay_ms: 0,
            fail_first: 0,
        }
    }
}

impl MockConfig {
    pub fn from_url(base_url: &str) -> Result<Self, ServiceError> {
        let bad = |msg: String| ServiceError::Endpoint(format!("{base_url}: {msg}"));
        let url = url::Url::parse(base_url).map_err(|e| bad(e.to_string()))?;
        if url.scheme() != "mock" {
            return Err(bad("not a mock:// URL".into()));
        }
        let mut cfg = MockConfig::default();
        let mut pool = Vec::new();
        let list = |v: &str| -> Vec<String> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect()
        };
        for (k, v) in url.query_pairs() {
            let num = |v: &str| v.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")));
            match k.as_ref() {
                "extra" => cfg.extra_labels = list(&v),
                "omit" => cfg.omit_labels = list(&v).into_iter().collect(),
                "omit_percent" => cfg.omit_percent = num(&v)?.min(100) as u32,
                "omit_seed" => cfg.omit_seed = num(&v)?,
                "confidence" => {
                    cfg.confidence = v.parse::<f64>().map_err(|e| bad(format!("confidence: {e}")))?;
                    if !(0.0..=1.0).contains(&cfg.confidence) {
                        return Err(bad("confidence must be in [0,1]".into()));
                    }
                }
                "pool" => pool = list(&v),
                "delay_ms" => cfg.delay_ms = num(&v)?,
                "fail_first" => cfg.fail_first = num(&v)? as usize,
                other => return Err(bad(format!("unknown mock option '{other}'"))),
            }
        }
        cfg.script = match url.host_str().unwrap_or("") {
            "always-yes" => ModelScript::AlwaysYes,
            "refuser" => ModelScript::Refuser,
            "hallucinate-one" => ModelScript::HallucinateOne { pool },
            _ => ModelScript::Truthful,
        };
        Ok(cfg)
    }

    /// Whether the detector drops a label for the image keyed by `key`
    /// (the generating prompt, or the label list for images without one).
    pub fn omits(&self, key: &str) -> bool {
        self.omit_percent > 0
            && seed_from_bytes(format!("{}:{key}", self.omit_seed).as_bytes()) % 100
                < u64::from(self.omit_percent)
    }
}

/// A scripted mock service with observable call and concurrency counters.
#[derive(Debug)]
pub struct MockService {
    config: MockConfig,
    templates: Templates,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockService {
    pub fn new(config: MockConfig) -> Self {
        Self {
            config,
            templates: Templates::default(),
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn from_url(base_url: &str) -> Result<Self, ServiceError> {
        Ok(Self::new(MockConfig::from_url(base_url)?))
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Pure request handler: (HTTP status, JSON body).
    pub fn handle(&self, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
        let result = match path {
            TXT2IMG_PATH => self.txt2img(body),
            DETECT_PATH => self.detect(body),
            QUERY_PATH => self.query(body),
            other => Err((404, format!("unknown path {other}"))),
        };
        match result {
            Ok(bytes) => (200, bytes),
            Err((code, error)) => (code, serde_json::to_vec(&ErrorBody { error }).expect("serializes")),
        }
    }

    fn txt2img(&self, body: &[u8]) -> Result<Vec<u8>, (u16, String)> {
        let req: Txt2ImgRequest = serde_json::from_slice(body).map_err(|e| (400, e.to_string()))?;
        let (a, b) = self
            .templates
            .parse_image_prompt(&req.prompt)
            .ok_or_else(|| (400, format!("cannot parse concept labels from prompt '{}'", req.prompt)))?;
        let mut labels = vec![a, b];
        for extra in &self.config.extra_labels {
            if !labels.contains(extra) {
                labels.push(extra.clone());
            }
        }
        let fill = seed_from_bytes(format!("{}|{}|{}", req.prompt, req.style, req.seed).as_bytes());
        let png = imaging::encode_labeled_png(MOCK_IMAGE_SIZE, MOCK_IMAGE_SIZE, &labels, Some(&req.prompt), fill);
        Ok(serde_json::to_vec(&Txt2ImgResponse {
            image_png_base64: BASE64.encode(png),
            backend_id: "mock-t2i/1".into(),
        })
        .expect("serializes"))
    }

    fn decode_image(b64: &str) -> Result<Vec<u8>, (u16, String)> {
        let png = BASE64
            .decode(b64.as_bytes())
            .map_err(|e| (400, format!("invalid base64: {e}")))?;
        imaging::validate_png(&png).map_err(|e| (400, format!("invalid PNG: {e}")))?;
        Ok(png)
    }

    fn detect(&self, body: &[u8]) -> Result<Vec<u8>, (u16, String)> {
        let req: DetectRequest = serde_json::from_slice(body).map_err(|e| (400, e.to_string()))?;
        if req.vocabulary.is_empty() {
            return Err((400, "empty vocabulary".into()));
        }
        let png = Self::decode_image(&req.image_png_base64)?;
        let labels = imaging::embedded_labels(&png).unwrap_or_default();
        let key = imaging::png_text(&png, PROMPT_KEY).unwrap_or_else(|| labels.join(","));
        let dropped = if self.config.omits(&key) {
            labels.get(1).or_else(|| labels.first()).cloned()
        } else {
            None
        };
        let detections = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| req.vocabulary.contains(l))
            .filter(|(_, l)| !self.config.omit_labels.contains(*l) && dropped.as_ref() != Some(l))
            .filter(|_| self.config.confidence >= req.confidence_threshold)
            .map(|(i, l)| {
                let off = (i as f64) * 4.0;
                Detection {
                    label: l.clone(),
                    confidence: self.config.confidence,
                    bbox: [off, off, off + 32.0, off + 32.0],
                }
            })
            .collect();
        Ok(serde_json::to_vec(&DetectResponse { detections }).expect("serializes"))
    }

    fn query(&self, body: &[u8]) -> Result<Vec<u8>, (u16, String)> {
        let req: QueryRequest = serde_json::from_slice(body).map_err(|e| (400, e.to_string()))?;
        if req.prompt.is_empty() {
            return Err((400, "empty prompt".into()));
        }
        let png = Self::decode_image(&req.image_png_base64)?;
        let labels = imaging::embedded_labels(&png).unwrap_or_default();
        let text = self.answer(&labels, &req.prompt);
        Ok(serde_json::to_vec(&QueryResponse { text }).expect("serializes"))
    }

    fn answer(&self, labels: &[String], prompt: &str) -> String {
        if self.config.script == ModelScript::Refuser {
            return REFUSAL_TEXT.into();
        }
        if let Some(target) = self.templates.parse_existence_target(prompt) {
            let present = labels.contains(&target);
            return match (&self.config.script, present) {
                (ModelScript::AlwaysYes, _) => "Yes".into(),
                (_, true) => format!("Yes, there is a {} in the image.", surface(&target)),
                (_, false) => format!("No, there is no {} in the image.", surface(&target)),
            };
        }
        let mut named: Vec<String> = labels.to_vec();
        if let ModelScript::HallucinateOne { pool } = &self.config.script {
            if let Some(extra) = pool.iter().find(|p| !labels.contains(p)) {
                named.push(extra.clone());
            }
        }
        caption(&named)
    }
}

fn surface(label: &str) -> String {
    label.replace('_', " ")
}

/// "The image shows a dog, a frisbee and a grass."
pub fn caption(labels: &[String]) -> String {
    let items: Vec<String> = labels.iter().map(|l| format!("a {}", surface(l))).collect();
    let list = match items.len() {
        0 => "nothing in particular".to_owned(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    };
    format!("The image shows {list}.")
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Transport for MockService {
    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportFailure> {
        let call_no = self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.config.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.config.delay_ms));
        }
        if call_no < self.config.fail_first {
            return Err(TransportFailure::Status {
                code: 503,
                body: "mock: scripted failure".into(),
            });
        }
        match self.handle(path, body) {
            (200, bytes) => Ok(bytes),
            (code, bytes) => Err(TransportFailure::Status {
                code,
                body: String::from_utf8_lossy(&bytes).into_owned(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Concept;
    use crate::prompts::{image_prompt, Style};
    use crate::sampler::{ConceptPair, Criterion};
    use crate::services::{ServiceClient, ServiceEndpoint};
    use std::sync::Arc;

    fn client(url: &str) -> ServiceClient {
        ServiceClient::connect(ServiceEndpoint { retries: 0, backoff_ms: 1, ..ServiceEndpoint::new(url) }).unwrap()
    }

    fn dog_frisbee_png() -> Vec<u8> {
        let pair = ConceptPair::new(Concept::entity("dog"), Concept::entity("frisbee"), 3, Criterion::Common);
        let spec = image_prompt(&pair, Style::Photo, 5, &Templates::default());
        client("mock://t2i").txt2img(&spec, 512, 512).unwrap().png
    }

    fn vocab(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn t2i_embeds_labels_deterministically() {
        let png = dog_frisbee_png();
        assert_eq!(imaging::validate_png(&png), Ok((64, 64)));
        assert_eq!(imaging::embedded_labels(&png), Some(vocab(&["dog", "frisbee"])));
        assert_eq!(png, dog_frisbee_png());
    }

    #[test]
    fn detector_contract() {
        let png = dog_frisbee_png();
        let det = client("mock://detect");
        let found = det.detect(&png, &vocab(&["dog", "frisbee", "car"]), 0.5).unwrap();
        assert_eq!(found.len(), 2);
        assert!(found.iter().all(|d| d.confidence == 0.9));
        assert!(det.detect(&png, &vocab(&["car"]), 0.5).unwrap().is_empty());
        assert!(det.detect(&png, &vocab(&["dog", "frisbee"]), 1.0).unwrap().is_empty());
        let omitting = client("mock://detect?omit=frisbee");
        let found = omitting.detect(&png, &vocab(&["dog", "frisbee"]), 0.5).unwrap();
        assert_eq!(found.iter().map(|d| d.label.as_str()).collect::<Vec<_>>(), vec!["dog"]);
    }

    #[test]
    fn model_scripts() {
        let png = dog_frisbee_png();
        let describe = "Please describe this image.";
        assert_eq!(
            client("mock://truthful").query(&png, describe).unwrap(),
            "The image shows a dog and a frisbee."
        );
        assert_eq!(
            client("mock://truthful").query(&png, "Is there a car in the image?").unwrap(),
            "No, there is no car in the image."
        );
        assert_eq!(client("mock://always-yes").query(&png, "Is there a car in the image?").unwrap(), "Yes");
        assert_eq!(client("mock://refuser").query(&png, describe).unwrap(), REFUSAL_TEXT);
        assert_eq!(
            client("mock://hallucinate-one?pool=dog,car").query(&png, describe).unwrap(),
            "The image shows a dog, a frisbee and a car."
        );
    }

    #[test]
    fn fail_first_triggers_retry() {
        let mock = Arc::new(MockService::from_url("mock://truthful?fail_first=2").unwrap());
        let c = ServiceClient::with_transport(
            ServiceEndpoint { retries: 3, backoff_ms: 1, ..ServiceEndpoint::new("mock://truthful") },
            mock.clone(),
        );
        let png = dog_frisbee_png();
        assert!(c.query(&png, "Please describe this image.").is_ok());
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn bad_requests_get_400() {
        let m = MockService::new(MockConfig::default());
        assert_eq!(m.handle(QUERY_PATH, b"{}").0, 400);
        let body = serde_json::to_vec(&DetectRequest {
            image_png_base64: BASE64.encode(dog_frisbee_png()),
            vocabulary: vec![],
            confidence_threshold: 0.5,
        })
        .unwrap();
        assert_eq!(m.handle(DETECT_PATH, &body).0, 400);
        let body = serde_json::to_vec(&QueryRequest { image_png_base64: BASE64.encode(b"nope"), prompt: "x".into() }).unwrap();
        assert_eq!(m.handle(QUERY_PATH, &body).0, 400);
        assert_eq!(m.handle("/v2/other", b"{}").0, 404);
    }

    #[test]
    fn url_options() {
        let cfg = MockConfig::from_url("mock://detect?omit_percent=30&omit_seed=4&confidence=0.7").unwrap();
        assert_eq!((cfg.omit_percent, cfg.omit_seed, cfg.confidence), (30, 4, 0.7));
        assert!(MockConfig::from_url("mock://detect?bogus=1").is_err());
        assert!(MockConfig::from_url("mock://detect?confidence=2").is_err());
        let hits = (0..1000).filter(|i| cfg.omits(&format!("prompt {i}"))).count();
        assert!((230..370).contains(&hits), "{hits}");
    }

    #[test]
    fn caption_forms() {
        assert_eq!(caption(&vocab(&["hot_dog"])), "The image shows a hot dog.");
        assert_eq!(caption(&vocab(&["a", "b", "c"])), "The image shows a a, a b and a c.");
    }
}
