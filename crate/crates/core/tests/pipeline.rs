mod common;

use std::collections::BTreeMap;
use std::io::Cursor;

use common::*;
use ode_core::config::RunConfig;
use ode_core::evaluator::{evaluate_run, EvalMode, MentionMatcher, Parsed, SynonymTable, Verdict};
use ode_core::graph::{build_graph, Concept};
use ode_core::imaging::encode_labeled_png;
use ode_core::pipeline::{
    derive_hallucination_targets, ingest_images, load_cases, run_batch, run_batch_detailed, synthesize_case,
    CaseOutcome, Services, Source,
};
use ode_core::prompts::Style;
use ode_core::sampler::{ConceptPair, Criterion};
use ode_core::services::ServiceClient;
use ode_core::store::{Store, CASES_FILE};

fn dog_frisbee() -> ConceptPair {
    ConceptPair::new(Concept::entity("dog"), Concept::entity("frisbee"), 3, Criterion::Common)
}

fn synth(detect: &str, threshold: f64) -> CaseOutcome {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let config = RunConfig {
        threshold,
        ..mock_config(dir.path(), detect, "mock://truthful", 5)
    };
    let services = Services::connect(&config, &store).unwrap();
    synthesize_case(&services, &store, &example_graph(), &dog_frisbee(), Style::Photo, 1, &config).unwrap()
}

#[test]
fn synthesized_case_is_accepted_with_both_labels() {
    match synth("mock://detect", 0.5) {
        CaseOutcome::Accepted(case) => {
            assert!(case.truth.contains("dog") && case.truth.contains("frisbee"));
            assert_eq!(case.source, Source::Synthesized);
            assert_eq!(case.hallucination_targets, set(&["grass"]));
            case.validate(&Default::default()).unwrap();
        }
        other => panic!("expected acceptance, got {other:?}"),
    }
}

#[test]
fn omitted_label_is_filtered_with_reason() {
    match synth("mock://detect?omit=frisbee", 0.5) {
        CaseOutcome::Filtered(f) => {
            assert_eq!(f.reason, "missing: frisbee");
            assert_eq!(f.attempts, 2);
            assert_eq!(f.detected, set(&["dog"]));
        }
        other => panic!("expected filtering, got {other:?}"),
    }
    match synth("mock://detect", 1.0) {
        CaseOutcome::Filtered(f) => assert_eq!(f.reason, "missing: dog, frisbee"),
        other => panic!("expected filtering, got {other:?}"),
    }
}

#[test]
fn case_ids_and_images_are_stable_across_stores() {
    let (a, b) = (synth("mock://detect", 0.5), synth("mock://detect", 0.5));
    match (a, b) {
        (CaseOutcome::Accepted(a), CaseOutcome::Accepted(b)) => assert_eq!(a, b),
        other => panic!("{other:?}"),
    }
}

#[test]
fn hallucination_targets_example() {
    let g = example_graph();
    assert_eq!(derive_hallucination_targets(&g, &set(&["dog", "grass"]), 3), set(&["frisbee"]));
    let all = set(&["car", "dog", "frisbee", "grass", "sky"]);
    assert!(derive_hallucination_targets(&g, &all, 3).is_empty());
    assert!(derive_hallucination_targets(&g, &set(&["dog"]), 0).is_empty());
}

#[test]
fn rerun_is_resumed_from_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let graph = example_graph();
    let config = mock_config(dir.path(), "mock://detect", "mock://truthful", 5);

    let first = run_batch(&store, "r1", &graph, &config, &Services::connect(&config, &store).unwrap()).unwrap();
    assert!(first.is_consistent());
    let longtail = &first.criteria[&Criterion::Longtail];
    assert!(longtail.exhausted);
    assert_eq!(longtail.sampled_pairs, 4);
    let cases_before = std::fs::read(store.run("r1").unwrap().file(CASES_FILE)).unwrap();

    let services = Services::connect(&config, &store).unwrap();
    let mut second = run_batch(&store, "r1", &graph, &config, &services).unwrap();
    assert_eq!(services.t2i.stats().network_calls + services.t2i.stats().cache_hits, 0);
    assert_eq!(services.detect.stats().network_calls, 0);
    second.created_unix_ms = first.created_unix_ms;
    assert_eq!(second, first);
    assert_eq!(std::fs::read(store.run("r1").unwrap().file(CASES_FILE)).unwrap(), cases_before);
}

#[test]
fn output_is_independent_of_concurrency() {
    let graph = build_graph(&benchmark_records()).unwrap();
    let mut outputs = Vec::new();
    for max_in_flight in [1, 8] {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut config = mock_config(dir.path(), "mock://detect?omit_percent=20", "mock://truthful", 6);
        config.endpoints.t2i.max_in_flight = max_in_flight;
        let services = Services::connect(&config, &store).unwrap();
        let (manifest, errors) = run_batch_detailed(&store, "r", &graph, &config, &services).unwrap();
        assert!(errors.is_empty());
        let run = store.run("r").unwrap();
        let files: Vec<Vec<u8>> = ["cases.jsonl", "filtered.jsonl"]
            .iter()
            .map(|f| std::fs::read(run.file(f)).unwrap())
            .collect();
        outputs.push((files, manifest.totals));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn transport_failures_become_error_records() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let mut config = mock_config(dir.path(), "mock://detect", "mock://truthful", 2);
    config.endpoints.t2i.base_url = "http://127.0.0.1:9".into();
    config.endpoints.t2i.retries = 0;
    config.endpoints.t2i.timeout_ms = 2_000;
    config.criteria = vec![Criterion::Common];
    let services = Services::connect(&config, &store).unwrap();
    let (manifest, errors) = run_batch_detailed(&store, "down", &example_graph(), &config, &services).unwrap();
    assert_eq!(manifest.totals.errored, 4);
    assert_eq!(manifest.totals.accepted, 0);
    assert!(manifest.is_consistent());
    assert!(errors.iter().all(|e| e.transport && e.case_id.is_some()));
    let err = ode_core::pipeline::check_complete(&errors).unwrap_err();
    assert!(err.is_transport());
}

fn jpeg_bytes() -> Vec<u8> {
    let img = image::RgbImage::from_pixel(16, 16, image::Rgb([120, 30, 200]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Jpeg).unwrap();
    out.into_inner()
}

#[test]
fn ingest_mixes_accepted_filtered_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    let labels = |ls: &[&str]| ls.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    std::fs::write(images.join("a.png"), encode_labeled_png(32, 32, &labels(&["dog", "frisbee"]), None, 3)).unwrap();
    std::fs::write(images.join("b.png"), encode_labeled_png(32, 32, &labels(&["dog"]), None, 4)).unwrap();
    std::fs::write(images.join("c.jpg"), jpeg_bytes()).unwrap();
    std::fs::write(images.join("d.png"), b"not an image").unwrap();
    std::fs::write(images.join("e.png"), encode_labeled_png(32, 32, &labels(&["car", "sky"]), None, 5)).unwrap();
    std::fs::write(images.join("notes.txt"), "ignored").unwrap();
    let sidecar = dir.path().join("sidecar.jsonl");
    let lines: String = ["a.png", "b.png", "c.jpg", "d.png"]
        .iter()
        .map(|f| format!("{{\"file\":\"{f}\",\"a\":\"frisbee\",\"b\":\"dog\"}}\n"))
        .collect();
    std::fs::write(&sidecar, lines).unwrap();

    let store = Store::open(dir.path().join("store")).unwrap();
    let config = mock_config(store.root(), "mock://detect", "mock://truthful", 5);
    let detect = ServiceClient::connect(config.endpoints.detect.clone()).unwrap();
    let graph = example_graph();
    let result =
        ingest_images(&store, "ing", &graph, &images, &sidecar, Criterion::Random, &config, &detect).unwrap();

    let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
    for o in &result.outcomes {
        match o {
            CaseOutcome::Accepted(c) => {
                assert_eq!(c.source, Source::Ingested);
                assert_eq!(c.pair.criterion, Criterion::Random);
                assert_eq!(c.truth, set(&["dog", "frisbee"]));
                *by_kind.entry("accepted").or_default() += 1;
            }
            CaseOutcome::Filtered(f) => {
                let expect = if f.detected.is_empty() { "missing: dog, frisbee" } else { "missing: frisbee" };
                assert_eq!(f.reason, expect);
                *by_kind.entry("filtered").or_default() += 1;
            }
        }
    }
    assert_eq!(by_kind, BTreeMap::from([("accepted", 1), ("filtered", 2)]));
    let files: Vec<&str> = result.errors.iter().filter_map(|e| e.file.as_deref()).collect();
    assert_eq!(files, ["d.png", "e.png"]);
    assert!(result.errors.iter().all(|e| !e.transport));

    let cases = load_cases(&store.run("ing").unwrap(), &config.templates).unwrap();
    assert_eq!(cases.len(), 1);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let empty_sidecar = dir.path().join("empty.jsonl");
    std::fs::write(&empty_sidecar, "").unwrap();
    let none =
        ingest_images(&store, "ing2", &graph, &empty, &empty_sidecar, Criterion::Random, &config, &detect).unwrap();
    assert!(none.outcomes.is_empty() && none.errors.is_empty());
    // sidecar entries without files are reported per file
    let orphans = ingest_images(&store, "ing3", &graph, &empty, &sidecar, Criterion::Random, &config, &detect).unwrap();
    assert_eq!(orphans.errors.len(), 4);
}

#[test]
fn evaluation_resumes_and_scripts_behave() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let graph = example_graph();
    let mut config = mock_config(dir.path(), "mock://detect", "mock://truthful", 1);
    config.criteria = vec![Criterion::Common];
    config.styles = vec![Style::Photo];
    run_batch(&store, "ev", &graph, &config, &Services::connect(&config, &store).unwrap()).unwrap();
    let run = store.run("ev").unwrap();
    let cases = load_cases(&run, &config.templates).unwrap();
    assert_eq!(cases.len(), 1);
    let matcher = MentionMatcher::new(graph.labels(), &SynonymTable::builtin());

    let truthful = ServiceClient::connect(config.endpoints.model.clone()).unwrap();
    let s1 = evaluate_run(&run, &cases, &truthful, &store, EvalMode::Generative, &matcher).unwrap();
    assert_eq!(s1.new_responses, 1);
    let s2 = evaluate_run(&run, &cases, &truthful, &store, EvalMode::Both, &matcher).unwrap();
    assert_eq!((s2.new_responses, s2.skipped_existing), (cases[0].questions.len() - 1, 1));
    let s3 = evaluate_run(&run, &cases, &truthful, &store, EvalMode::Both, &matcher).unwrap();
    assert_eq!(s3.new_responses, 0);

    let responses: Vec<ode_core::evaluator::ModelResponse> =
        ode_core::store::read_jsonl(&run.file("responses.jsonl")).unwrap();
    match &responses[0].parsed {
        Parsed::Mentions { labels } => assert_eq!(labels, &cases[0].truth),
        other => panic!("{other:?}"),
    }

    let always_yes = ServiceClient::connect(ode_core::services::ServiceEndpoint::new("mock://always-yes")).unwrap();
    let refuser = ServiceClient::connect(ode_core::services::ServiceEndpoint::new("mock://refuser")).unwrap();
    let skip = Default::default();
    for (client, expect) in [(&always_yes, Verdict::Yes), (&refuser, Verdict::Invalid)] {
        let got = ode_core::evaluator::evaluate_cases(&cases, client, &store, EvalMode::Discriminative, &matcher, &skip)
            .unwrap();
        assert_eq!(got.len(), cases[0].questions.len() - 1);
        assert!(got.iter().all(|r| r.parsed == Parsed::Verdict { verdict: expect }));
    }
}
