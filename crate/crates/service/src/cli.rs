//! Command-line interface. Usage errors exit with status 2, runtime errors
//! with status 1 and a diagnostic on stderr.

use std::ffi::OsString;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ctagent_core::backend::{synthetic_report, EmbeddingClient, HttpEmbeddingClient, MockEmbedder};
use ctagent_core::evaluation::{evaluate_pairs, AbnormalityLexicon, TableRow};
use ctagent_core::feature_io::{generate_synthetic_volume, load_volume, save_volume, VolumeDims};
use ctagent_core::memory::{build_corpus, RegionSplitter};
use ctagent_core::orchestration::Engine;
use serde::Deserialize;

use crate::config::ENV_PREFIX;
use crate::{build_engine, server, EngineConfig, ServiceError};

#[derive(Debug, Parser)]
#[command(name = "ctagent", version, about = "Region-guided CT question answering and report generation")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Use the built-in deterministic backends (no network).
    #[arg(long, global = true)]
    pub mock: bool,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic feature volume (and optionally synthetic reports).
    Synth(SynthArgs),
    /// Answer a question about one study.
    Qa(QaArgs),
    /// Generate a full report for one study.
    Report(ReportArgs),
    /// Score generated texts against references.
    Eval(EvalArgs),
    /// Exemplar corpus management.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Run an HTTP server that answers backend requests with the mock models.
    MockBackend(MockBackendArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub slices: usize,
    #[arg(long, default_value_t = 128)]
    pub tokens: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub key_dim: usize,
    /// Also write this many synthetic reports as JSONL to `--reports-out`.
    #[arg(long, requires = "reports_out")]
    pub reports: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub reports_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QaArgs {
    /// A `.ctfv` file or the id of a study in `storage.studies_dir`.
    #[arg(long)]
    pub study: String,
    #[arg(long)]
    pub question: String,
    #[arg(long, default_value = "cli")]
    pub session: String,
    /// Print the full outcome as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub study: String,
    #[arg(long, default_value = "cli")]
    pub session: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL with `{"generated": .., "reference": ..}` per line.
    #[arg(long, value_name = "PATH")]
    pub pairs: PathBuf,
    /// JSON object mapping category ids to alias lists. Defaults to the
    /// built-in approximate chest CT lexicon.
    #[arg(long, value_name = "PATH")]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Split, embed and store historical reports as a `CTES` file.
    Build {
        /// JSONL (a string or `{"report": ..}` per line) or plain text with
        /// blank lines between reports.
        #[arg(long, value_name = "PATH")]
        reports: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides `server.listen`.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Args)]
pub struct MockBackendArgs {
    #[arg(long, default_value = "127.0.0.1:9100")]
    pub listen: String,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let mut out = std::io::stdout().lock();
    match execute(&cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_max_level(level)
        .try_init();
}

fn config_env(cli: &Cli) -> Vec<(String, String)> {
    let mut env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    if cli.mock {
        env.push((format!("{ENV_PREFIX}BACKEND__MOCK"), "true".into()));
    }
    env
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::io(path, e)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), ServiceError> {
    let cfg = EngineConfig::parse_with_env(cli.config.as_deref(), config_env(cli))?;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(io_err(Path::new("stdout")));
    match &cli.command {
        Command::Synth(a) => {
            let seed = a.seed.unwrap_or(cfg.params.seed);
            let dims = VolumeDims::new(a.slices, a.tokens, a.dim, a.heads, a.key_dim);
            let vf = generate_synthetic_volume(seed, dims)?;
            save_volume(&vf, &a.out)?;
            w(out, format!("wrote {} ({}x{}x{}, seed {seed})", a.out.display(), a.slices, a.tokens, a.dim))?;
            if let (Some(n), Some(path)) = (a.reports, &a.reports_out) {
                let mut text = String::new();
                for i in 0..n {
                    text.push_str(&serde_json::to_string(&synthetic_report(seed.wrapping_add(i))).expect("string"));
                    text.push('\n');
                }
                std::fs::write(path, text).map_err(io_err(path))?;
                w(out, format!("wrote {n} reports to {}", path.display()))?;
            }
        }
        Command::Qa(a) => {
            let engine = build_engine(&cfg)?;
            let id = resolve_study(&engine, &a.study)?;
            let res = engine.run_qa(&a.question, &id, &a.session)?;
            if a.json {
                w(out, serde_json::to_string_pretty(&res).expect("outcome serializes"))?;
            } else {
                w(out, res.answer.clone())?;
                let regions: Vec<&str> = res.regions.iter().map(|r| r.canonical_name()).collect();
                eprintln!("regions: {} trace: {}", regions.join(","), res.trace_id);
            }
        }
        Command::Report(a) => {
            let engine = build_engine(&cfg)?;
            let id = resolve_study(&engine, &a.study)?;
            let res = engine.run_report(&id, &a.session)?;
            if a.json {
                w(out, serde_json::to_string_pretty(&res).expect("outcome serializes"))?;
            } else {
                w(out, res.report.clone())?;
                eprintln!("exemplars: {} trace: {}", res.exemplars.len(), res.trace_id);
            }
        }
        Command::Eval(a) => {
            let lex = match &a.lexicon {
                Some(p) => AbnormalityLexicon::load(p)?,
                None => {
                    tracing::warn!("no --lexicon given; using the built-in approximate lexicon");
                    AbnormalityLexicon::default_chest_ct()
                }
            };
            let pairs = read_pairs(&a.pairs)?;
            let report = evaluate_pairs(&pairs, &lex)?;
            if a.json {
                w(out, serde_json::to_string_pretty(&report).expect("report serializes"))?;
            } else {
                w(out, TableRow::COLUMNS.join(" | "))?;
                w(out, report.table_row(a.method.clone().unwrap_or_else(|| "ctagent".into())).to_line())?;
                w(
                    out,
                    format!(
                        "CE tp={} fp={} fn={} precision={:.4} recall={:.4} f1={:.4} ({} pairs)",
                        report.ce.tp,
                        report.ce.fp,
                        report.ce.fn_,
                        report.ce.precision,
                        report.ce.recall,
                        report.ce.f1,
                        pairs.len()
                    ),
                )?;
            }
        }
        Command::Corpus { command: CorpusCommand::Build { reports, out: path } } => {
            let texts = read_reports(reports)?;
            let embedder: Arc<dyn EmbeddingClient> = if cfg.backend.mock {
                Arc::new(MockEmbedder::default())
            } else {
                let url = cfg
                    .backend
                    .embedder_url
                    .clone()
                    .ok_or_else(|| ServiceError::ConfigInvalid("backend.embedder_url is required".into()))?;
                Arc::new(HttpEmbeddingClient::new(url, &cfg.backend.embedder_model)?)
            };
            let dim = embedder.embed("dimension probe")?.len();
            let (store, stats) = build_corpus(&texts, &RegionSplitter::new(), embedder.as_ref(), dim);
            store.save(path)?;
            w(
                out,
                format!(
                    "wrote {} records to {} ({} unsplittable, {} embedding failures, {} regions filled)",
                    stats.accepted,
                    path.display(),
                    stats.unsplittable,
                    stats.embedding_failures,
                    stats.filled_regions
                ),
            )?;
        }
        Command::Serve(a) => {
            let mut cfg = cfg;
            if let Some(l) = &a.listen {
                cfg.server.listen = l.clone();
            }
            let engine = Arc::new(build_engine(&cfg)?);
            let rt = runtime()?;
            rt.block_on(server::serve(engine.clone(), &cfg, server::shutdown_signal()))?;
        }
        Command::MockBackend(a) => {
            let rt = runtime()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&a.listen)
                    .await
                    .map_err(|source| ServiceError::BindFailure { addr: a.listen.clone(), source })?;
                eprintln!("mock backend on http://{}/v1/chat and /v1/embed", a.listen);
                crate::mock_backend::serve(listener, server::shutdown_signal())
                    .await
                    .map_err(io_err(Path::new("listener")))
            })?;
        }
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, ServiceError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(io_err(Path::new("tokio runtime")))
}

/// Registers a `.ctfv` path with the engine, or checks that an id is known.
fn resolve_study(engine: &Engine, study: &str) -> Result<String, ServiceError> {
    let p = Path::new(study);
    if p.is_file() {
        let vf = load_volume(p)?;
        return Ok(engine.add_study(vf)?.study_id);
    }
    engine.study(study)?;
    Ok(study.to_string())
}

#[derive(Debug, Deserialize)]
struct PairLine {
    #[serde(alias = "prediction", alias = "candidate")]
    generated: String,
    #[serde(alias = "ground_truth", alias = "target")]
    reference: String,
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, ServiceError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<PairLine>(l).map(|p| (p.generated, p.reference)).map_err(|e| {
                ServiceError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))
            })
        })
        .collect()
}

fn read_reports(path: &Path) -> Result<Vec<String>, ServiceError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Line {
            Text(String),
            Object { report: String },
        }
        return text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<Line>(l)
                    .map(|x| match x {
                        Line::Text(s) | Line::Object { report: s } => s,
                    })
                    .map_err(|e| {
                        ServiceError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))
                    })
            })
            .collect();
    }
    Ok(text
        .split("\n\n")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect())
}
