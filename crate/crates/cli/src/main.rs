use std::collections::BTreeSet;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ode_core::analysis::{build_matrix, cluster_concepts, hallucination_graph};
use ode_core::config::RunConfig;
use ode_core::evaluator::{evaluate_run, EvalMode, MentionMatcher, ModelResponse, SynonymTable};
use ode_core::graph::{build_graph_from_reader, ConceptGraph, GraphError};
use ode_core::metrics::{compute_report, MetricsReport, PositiveClass};
use ode_core::pipeline::{check_complete, ingest_images, load_cases, run_batch_detailed, CaseOutcome, PipelineError, Services};
use ode_core::report::{
    bar_chart_svg, report_rows, to_csv, DISCRIMINATIVE_METRICS, DISCRIMINATIVE_SVG_FILE, GENERATIVE_METRICS,
    GENERATIVE_SVG_FILE, REPORT_CSV_FILE,
};
use ode_core::sampler::sample_pairs;
use ode_core::services::ServiceClient;
use ode_core::store::{self, read_json, read_jsonl, write_json, RunDir, Store, StoreError};
use ode_core::{Criterion, Error, ErrorKind, Style};

const EXIT_VALIDATION: u8 = 1;
const EXIT_TRANSPORT: u8 = 2;
const EXIT_USAGE: u8 = 64;

/// Open-set object-hallucination benchmark: build concept graphs, sample
/// pairs, synthesize and filter images, evaluate a model and score it.
///
/// Service URLs come from the config file and can be overridden with
/// ODE_T2I_URL, ODE_DETECT_URL and ODE_MODEL_URL. A `mock://<script>` URL
/// selects the built-in deterministic mock.
#[derive(Parser, Debug)]
#[command(name = "ode", version, about, long_about = None)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Run config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store root [default: config store_dir, "ode_store"]
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Sampling seed [default: config seed, 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Criterion filter: common, longtail, random, fictional (repeatable)
    /// [default: config criteria, all four]
    #[arg(long, global = true)]
    criterion: Vec<Criterion>,
    /// Pairs per criterion [default: config k, 40]
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Image style: photo or anime (repeatable) [default: both]
    #[arg(long, global = true)]
    style: Vec<Style>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Concept graph operations.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Sample concept pairs from a graph.
    Sample {
        #[arg(long)]
        graph: PathBuf,
        /// Write pairs (one JSON object per line) here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize, filter and annotate test cases into a run.
    Generate {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        run: String,
    },
    /// Pass external images through the detection filter into a run.
    Ingest {
        #[arg(long)]
        run: String,
        /// Directory of PNG/JPEG files.
        #[arg(long)]
        dir: PathBuf,
        /// Lines of {"file","a","b"[,"criterion"]}.
        #[arg(long)]
        sidecar: PathBuf,
        /// Concept graph [default: the run's graph.json]
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Query the model under test for every case of a run.
    Evaluate {
        #[arg(long)]
        run: String,
        /// generative, discriminative or both
        #[arg(long, default_value = "both")]
        mode: EvalMode,
    },
    /// Score responses into metrics.json.
    Metrics {
        #[arg(long)]
        run: String,
        /// Positive class for precision/recall [default: config, yes]
        #[arg(long)]
        positive_class: Option<PositiveClass>,
    },
    /// Fact-hallucination matrix, clusters and hallucination graph.
    Analyze {
        #[arg(long)]
        run: String,
        /// Number of clusters [default: config analysis.clusters, 4]
        #[arg(long)]
        clusters: Option<usize>,
        /// Clustering seed [default: config analysis.seed, 0]
        #[arg(long)]
        cluster_seed: Option<u64>,
    },
    /// Export accepted cases as instruction pairs (filtered by --criterion).
    ExportSft {
        #[arg(long)]
        run: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write report.csv and SVG bar charts from metrics.json.
    Report {
        #[arg(long)]
        run: String,
    },
}

#[derive(Subcommand, Debug)]
enum GraphCommand {
    /// Build a graph from line-delimited scene records.
    Build {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List a concept's neighbors by weight.
    Neighbors {
        #[arg(long)]
        graph: PathBuf,
        label: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Validation => ExitCode::from(EXIT_VALIDATION),
                ErrorKind::Transport => ExitCode::from(EXIT_TRANSPORT),
            }
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, Error> {
    let mut config = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_env();
    if let Some(s) = &g.store {
        config.store_dir = s.clone();
    }
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(k) = g.k {
        config.k = k;
    }
    if !g.criterion.is_empty() {
        config.criteria = g.criterion.clone();
    }
    if !g.style.is_empty() {
        config.styles = g.style.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Prints `value` as JSON under `--json`, otherwise the text lines.
fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    let mut out = std::io::stdout().lock();
    let _ = if json {
        writeln!(out, "{}", serde_json::to_string_pretty(value).expect("serializes"))
    } else {
        write!(out, "{}", text())
    };
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    store::write_atomic(path, bytes).map_err(|source| {
        StoreError::Io {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

fn existing_run(store: &Store, run: &str) -> Result<RunDir, Error> {
    let dir = store.run(run)?;
    if !dir.file(store::GRAPH_FILE).exists() {
        return Err(GraphError::NotFound(format!("{} (run '{run}' has no graph; run generate or ingest first)", store::GRAPH_FILE)).into());
    }
    Ok(dir)
}

fn synonyms(config: &RunConfig) -> Result<SynonymTable, Error> {
    let builtin = SynonymTable::builtin();
    Ok(match &config.synonyms {
        Some(p) => SynonymTable::merged(&builtin, &SynonymTable::load(p)?),
        None => builtin,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let g = &cli.global;
    match &cli.command {
        Command::Graph(GraphCommand::Build { records, out }) => {
            let file = std::fs::File::open(records).map_err(GraphError::Io)?;
            let graph = build_graph_from_reader(std::io::BufReader::new(file))?;
            graph.save(out)?;
            let summary = serde_json::json!({
                "nodes": graph.node_count(),
                "edges": graph.edge_count(),
                "out": out,
            });
            emit(g.json, &summary, || {
                format!("{} nodes, {} edges -> {}\n", graph.node_count(), graph.edge_count(), out.display())
            });
        }
        Command::Graph(GraphCommand::Neighbors { graph, label }) => {
            let graph = ConceptGraph::load(graph)?;
            let list: Vec<serde_json::Value> = graph
                .neighbors(label)?
                .into_iter()
                .map(|(c, w)| serde_json::json!({"label": c.label, "level": c.level, "weight": w}))
                .collect();
            emit(g.json, &list, || {
                list.iter()
                    .map(|v| format!("{}\t{}\t{}\n", v["label"].as_str().unwrap_or(""), v["level"].as_str().unwrap_or(""), v["weight"]))
                    .collect()
            });
        }
        Command::Sample { graph, out } => {
            let config = load_config(g)?;
            let graph = ConceptGraph::load(graph)?;
            let mut pairs = Vec::new();
            for &c in &config.criteria {
                pairs.extend(sample_pairs(&graph, c, config.k, config.seed)?);
            }
            let text = store::to_jsonl(&pairs);
            match out {
                Some(p) => {
                    write_file(p, text.as_bytes())?;
                    let summary = serde_json::json!({"pairs": pairs.len(), "out": p});
                    emit(g.json, &summary, || format!("{} pairs -> {}\n", pairs.len(), p.display()));
                }
                None => print!("{text}"),
            }
        }
        Command::Generate { graph, run } => {
            let config = load_config(g)?;
            let store = Store::open(&config.store_dir)?;
            let graph = ConceptGraph::load(graph)?;
            let services = Services::connect(&config, &store)?;
            let (manifest, errors) = run_batch_detailed(&store, run, &graph, &config, &services)?;
            emit(g.json, &manifest, || {
                let mut s = String::new();
                for (c, n) in &manifest.criteria {
                    s.push_str(&format!(
                        "{c}: sampled {}{}, attempted {}, accepted {}, filtered {}, errored {}\n",
                        n.sampled_pairs,
                        if n.exhausted { " (exhausted)" } else { "" },
                        n.outcomes.attempted,
                        n.outcomes.accepted,
                        n.outcomes.filtered,
                        n.outcomes.errored
                    ));
                }
                s
            });
            check_complete(&errors)?;
        }
        Command::Ingest {
            run,
            dir,
            sidecar,
            graph,
        } => {
            let config = load_config(g)?;
            let store = Store::open(&config.store_dir)?;
            let run_dir = store.run(run)?;
            let graph = match graph {
                Some(p) => ConceptGraph::load(p)?,
                None => ConceptGraph::load(&run_dir.file(store::GRAPH_FILE))?,
            };
            let default_criterion = g.criterion.first().copied().unwrap_or(Criterion::Random);
            let detect = ServiceClient::connect(config.endpoints.detect.clone())?
                .with_cache(std::sync::Arc::new(store.clone()));
            let result = ingest_images(&store, run, &graph, dir, sidecar, default_criterion, &config, &detect)?;
            let accepted = result.outcomes.iter().filter(|o| matches!(o, CaseOutcome::Accepted(_))).count();
            let summary = serde_json::json!({
                "new_accepted": accepted,
                "new_filtered": result.outcomes.len() - accepted,
                "errors": result.errors,
            });
            emit(g.json, &summary, || {
                format!(
                    "accepted {accepted}, filtered {}, errors {}\n",
                    result.outcomes.len() - accepted,
                    result.errors.len()
                )
            });
            check_complete(&result.errors)?;
        }
        Command::Evaluate { run, mode } => {
            let config = load_config(g)?;
            let store = Store::open(&config.store_dir)?;
            let run_dir = existing_run(&store, run)?;
            let graph = ConceptGraph::load(&run_dir.file(store::GRAPH_FILE))?;
            let cases = load_cases(&run_dir, &config.templates)?;
            let table = synonyms(&config)?;
            let matcher = MentionMatcher::new(graph.labels(), &table);
            let client = ServiceClient::connect(config.endpoints.model.clone())?
                .with_cache(std::sync::Arc::new(store.clone()));
            let summary = evaluate_run(&run_dir, &cases, &client, &store, *mode, &matcher)?;
            store::append_jsonl(&run_dir.file(store::REQUESTS_FILE), &client.take_log())?;
            emit(g.json, &summary, || {
                format!(
                    "{} new responses ({} errored), {} already recorded\n",
                    summary.new_responses, summary.errored, summary.skipped_existing
                )
            });
            if summary.errored > 0 {
                return Err(PipelineError::Incomplete {
                    errored: summary.errored,
                    transport: true,
                }
                .into());
            }
        }
        Command::Metrics { run, positive_class } => {
            let config = load_config(g)?;
            let store = Store::open(&config.store_dir)?;
            let run_dir = store.run(run)?;
            let cases = load_cases(&run_dir, &config.templates)?;
            let responses: Vec<ModelResponse> = read_jsonl(&run_dir.file(store::RESPONSES_FILE))?;
            let positive = positive_class.unwrap_or(config.positive_class);
            let report = compute_report(&cases, &responses, positive, synonyms(&config)?.version())?;
            write_json(&run_dir.file(store::METRICS_FILE), &report)?;
            emit(g.json, &report, || metrics_text(&report));
        }
        Command::Analyze {
            run,
            clusters,
            cluster_seed,
        } => {
            let config = load_config(g)?;
            let store = Store::open(&config.store_dir)?;
            let run_dir = existing_run(&store, run)?;
            let graph = ConceptGraph::load(&run_dir.file(store::GRAPH_FILE))?;
            let cases = load_cases(&run_dir, &config.templates)?;
            let responses: Vec<ModelResponse> = read_jsonl(&run_dir.file(store::RESPONSES_FILE))?;
            let matrix = build_matrix(&cases, &responses)?;
            write_json(&run_dir.file(store::MATRIX_JSON_FILE), &matrix)?;
            write_file(&run_dir.file(store::MATRIX_CSV_FILE), matrix.to_csv().as_bytes())?;
            hallucination_graph(&matrix, &graph)?.save(&run_dir.file(store::HALLUCINATION_GRAPH_FILE))?;
            let k = clusters.unwrap_or(config.analysis.clusters);
            let seed = cluster_seed.unwrap_or(config.analysis.seed);
            let report = cluster_concepts(&matrix, k, seed)?;
            write_json(&run_dir.file(store::CLUSTERS_FILE), &report)?;
            emit(g.json, &report, || {
                report
                    .clusters
                    .iter()
                    .map(|c| format!("cluster {}: {}\n", c.index, c.top_truth_concepts.join(", ")))
                    .collect()
            });
        }
        Command::ExportSft { run, out } => {
            let config = load_config(g)?;
            let store = Store::open(&config.store_dir)?;
            let run_dir = store.run(run)?;
            let cases = load_cases(&run_dir, &config.templates)?;
            let modes: BTreeSet<Criterion> = config.criteria.iter().copied().collect();
            let records = store::export_sft(&cases, &modes)?;
            write_file(out, store::to_jsonl(&records).as_bytes())?;
            let summary = serde_json::json!({"records": records.len(), "out": out});
            emit(g.json, &summary, || format!("{} records -> {}\n", records.len(), out.display()));
        }
        Command::Report { run } => {
            let config = load_config(g)?;
            let store = Store::open(&config.store_dir)?;
            let run_dir = store.run(run)?;
            let report: MetricsReport = read_json(&run_dir.file(store::METRICS_FILE))?;
            let rows = report_rows(&report);
            write_file(&run_dir.file(REPORT_CSV_FILE), to_csv(&rows).as_bytes())?;
            let gen = bar_chart_svg("Generative (%)", &rows, "generative", &GENERATIVE_METRICS);
            write_file(&run_dir.file(GENERATIVE_SVG_FILE), gen.as_bytes())?;
            let dis = bar_chart_svg("Discriminative (%)", &rows, "discriminative", &DISCRIMINATIVE_METRICS);
            write_file(&run_dir.file(DISCRIMINATIVE_SVG_FILE), dis.as_bytes())?;
            emit(g.json, &rows, || to_csv(&rows));
        }
    }
    Ok(())
}

fn metrics_text(report: &MetricsReport) -> String {
    let mut s = format!("positive class: {}\n", report.positive_class);
    for (key, m) in &report.criteria {
        if let Some(gm) = &m.generative {
            let x = &gm.summary;
            s.push_str(&format!(
                "{key:<10} generative      CHAIR {:>5.1}  Cover {:>5.1}  Hal {:>5.1}  Cog {:>5.1}  (n={})\n",
                x.chair, x.cover, x.hal, x.cog, x.responses
            ));
        }
        if let Some(d) = &m.discriminative {
            s.push_str(&format!(
                "{key:<10} discriminative  Acc {:>5.1}  P {:>5.1}  R {:>5.1}  F1 {:>5.1}  (n={})\n",
                d.accuracy, d.precision, d.recall, d.f1, d.questions
            ));
        }
    }
    s
}
