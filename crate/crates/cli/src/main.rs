use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pathcouncil::bench::{self, BenchOptions};
use pathcouncil::config::{BenchMetric, Config, ConfigError, Stage};
use pathcouncil::domain::Query;
use pathcouncil::knowledge::{self, Bm25Index, KnowledgeError};
use pathcouncil::memory::{render_session, MemoryStore};
use pathcouncil::pipeline::{Pipeline, PipelineError, RunOptions};
use pathcouncil::vizfusion::{self, AttentionMap, FusionMode};

#[derive(Parser)]
#[command(name = "pathcouncil", version, about = "Multi-agent question answering over whole-slide images")]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for any randomized backend behavior; also part of the session id.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record all timestamps and latencies as 0.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question about a slide.
    Ask {
        #[arg(long)]
        slide: String,
        #[arg(long)]
        question: String,
        #[arg(long)]
        thumbnail: Option<PathBuf>,
        /// Where to write the full run as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the memory log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stages to switch off, in addition to the configured ones.
        #[arg(long, value_parser = parse_stage)]
        disable: Vec<Stage>,
    },
    /// Chunk and index a document collection.
    IngestKb {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Search an index.
    QueryKb {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(required = true)]
        keywords: Vec<String>,
    },
    /// Run a bench file and score answers against ground truth.
    Bench {
        #[arg(long)]
        cases: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plain-text table path; the table is printed either way.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Concurrent cases.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Derive missing ground-truth claims with the claim extractor backend.
        #[arg(long)]
        extract_claims: bool,
        /// Overrides `bench.metric` from the configuration.
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        #[arg(long, value_parser = parse_stage)]
        disable: Vec<Stage>,
    },
    /// Print a memory log, one session at a time.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        session: Option<String>,
    },
    /// Fuse attention maps into one normalized heat map.
    FuseMaps {
        #[arg(required = true)]
        maps: Vec<PathBuf>,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 64)]
        cols: usize,
        #[arg(long, value_enum, default_value_t = Mode::Mean)]
        mode: Mode,
        /// Output PNG; a JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Precision,
    ExactMatch,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mean,
    Max,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse::<Stage>().map_err(|e| e.to_string())
}

/// Exit status 2 for bad input, 1 for run failures.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(m: impl ToString) -> Self {
        Self { code: 2, message: m.to_string() }
    }
    fn run(m: impl ToString) -> Self {
        Self { code: 1, message: m.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::run(e),
            _ => Failure::usage(e),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Query(_) => Failure::usage(e),
            PipelineError::Config(c) => c.into(),
            _ => Failure::run(e),
        }
    }
}

impl From<KnowledgeError> for Failure {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::BadChunkConfig { .. }
            | KnowledgeError::BadIndexFile { .. }
            | KnowledgeError::DuplicateDocument(_)
            | KnowledgeError::EmptyCorpus => Failure::usage(e),
            _ => Failure::run(e),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::run(format!("cannot write {}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let path = cli.config.as_deref().ok_or_else(|| Failure::usage("--config is required for this command"))?;
    Ok(Config::load(path)?)
}

fn options(cli: &Cli) -> RunOptions {
    RunOptions {
        seed: cli.seed,
        timestamps: !cli.no_timestamps,
    }
}

async fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Ask {
            slide,
            question,
            thumbnail,
            out,
            log,
            disable,
        } => {
            let cfg = load_config(&cli)?;
            let mut query = Query::new(slide.clone(), question.clone()).map_err(Failure::usage)?;
            if let Some(t) = thumbnail {
                query = query.with_thumbnail(t.clone()).map_err(Failure::usage)?;
            }
            let mut stages = cfg.pipeline.disable.clone();
            stages.extend(disable.iter().copied());
            let pipeline = Pipeline::from_config(cfg, options(&cli))?;
            let result = pipeline.run_ablation(&query, &stages).await;
            if let Some(log) = log {
                pipeline.memory().persist(log).map_err(Failure::run)?;
            }
            let run = result?;
            if let Some(out) = out {
                write_file(out, &(run.to_json() + "\n"))?;
            }
            println!("{}", run.final_answer.text);
        }
        Command::IngestKb {
            manifest,
            out,
            chunk_size,
            overlap,
        } => {
            let defaults = match &cli.config {
                Some(_) => load_config(&cli)?.retrieval,
                None => Default::default(),
            };
            let size = chunk_size.unwrap_or(defaults.chunk_size);
            let overlap = overlap.unwrap_or(defaults.overlap);
            let docs = knowledge::load_manifest(manifest)?;
            let chunks = knowledge::ingest(&docs, size, overlap)?;
            let index = knowledge::build_index(chunks)?.with_documents(&docs);
            index.save(out)?;
            println!("documents: {}", docs.len());
            println!("chunks: {}", index.corpus_size());
            println!("terms: {}", index.term_count());
        }
        Command::QueryKb { index, top_k, keywords } => {
            let index = Bm25Index::load(index)?;
            let terms: Vec<String> = keywords.iter().flat_map(|k| knowledge::tokenize(k)).collect();
            let hits = index.retrieve(&terms, top_k.unwrap_or(knowledge::DEFAULT_TOP_K));
            for h in hits {
                let text = index.chunk(&h.chunk_id).map(|c| c.text.as_str()).unwrap_or("");
                let one_line: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
                println!("{}\t{}\t{:.4}\t{}", h.rank, h.chunk_id, h.score, one_line);
            }
        }
        Command::Bench {
            cases,
            out,
            table,
            parallel,
            extract_claims,
            metric,
            disable,
        } => {
            let cfg = load_config(&cli)?;
            let cases = bench::load_bench(cases).map_err(|e| if e.is_input_error() { Failure::usage(&e) } else { Failure::run(&e) })?;
            let mut stages = cfg.pipeline.disable.clone();
            stages.extend(disable.iter().copied());
            let pipeline = Pipeline::from_config(cfg, options(&cli))?;
            let metric = match metric {
                Some(Metric::Precision) => BenchMetric::Precision,
                Some(Metric::ExactMatch) => BenchMetric::ExactMatch,
                None => pipeline.config().bench.metric,
            };
            let agents = &pipeline.config().agents;
            let judge = match (metric, agents.bench_judge()) {
                (_, Some(id)) => Some(pipeline.registry().chat(id).map_err(Failure::run)?),
                (BenchMetric::Precision, None) => return Err(Failure::usage("no bench judge configured")),
                (BenchMetric::ExactMatch, None) => None,
            };
            let extractor = match (extract_claims, &agents.claim_extractor) {
                (true, Some(id)) => Some(pipeline.registry().chat(id).map_err(Failure::run)?),
                (true, None) => return Err(Failure::usage("--extract-claims needs agents.claim_extractor")),
                (false, _) => None,
            };
            let report = bench::run_bench(
                &cases,
                &pipeline,
                BenchOptions {
                    judge: judge.as_deref(),
                    metric,
                    claim_extractor: extractor.as_deref(),
                    parallel: *parallel,
                    disable: &stages,
                },
            )
            .await
            .map_err(Failure::run)?;
            let text = report.to_table();
            if let Some(out) = out {
                write_file(out, &(report.to_json() + "\n"))?;
            }
            if let Some(t) = table {
                write_file(t, &text)?;
            }
            print!("{text}");
        }
        Command::Report { log, session } => {
            let store = MemoryStore::load(log).map_err(Failure::usage)?;
            let sessions = match session {
                Some(s) => vec![s.clone()],
                None => store.sessions(),
            };
            for s in sessions {
                let entries = store.query(&s, None);
                if entries.is_empty() {
                    return Err(Failure::usage(format!("no entries for session {s:?}")));
                }
                println!("== session {s}");
                print!("{}", render_session(&entries));
            }
        }
        Command::FuseMaps {
            maps,
            rows,
            cols,
            mode,
            out,
        } => {
            let maps: Vec<AttentionMap> = maps
                .iter()
                .map(|p| AttentionMap::load(p))
                .collect::<Result<_, _>>()
                .map_err(Failure::usage)?;
            let mode = match mode {
                Mode::Mean => FusionMode::Mean,
                Mode::Max => FusionMode::Max,
            };
            let fused = vizfusion::fuse(&maps, *rows, *cols, mode).map_err(Failure::usage)?;
            let sidecar = vizfusion::render(&fused, out).map_err(Failure::run)?;
            println!("sources: {}", fused.source_ids.join(", "));
            println!("image: {}", out.display());
            println!("sidecar: {}", sidecar.display());
            if fused.degenerate {
                println!("warning: every input map was constant");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("PATHCOUNCIL_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
