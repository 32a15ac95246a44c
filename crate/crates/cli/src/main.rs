use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mggraph::commands::{cmd_build, cmd_eval, cmd_inspect, cmd_query, QueryRequest};
use mggraph::config::{ProviderKind, RunConfig};
use mggraph::eval::DEFAULT_KS;

const EXIT_USAGE: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "mggraph",
    version,
    about = "Multimodal knowledge graph indexing and retrieval"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run config file, or the name of a preset.
    #[arg(long, global = true, env = "MGGRAPH_CONFIG")]
    config: Option<String>,
    /// Retrieval preset (evqa, infoseek, scienceqa, task-bc, task-mc).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Embedding provider: fixture, files or remote.
    #[arg(long, global = true)]
    provider: Option<ProviderKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index from a corpus directory.
    Build {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Answer one query and print the result as JSON.
    Query {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        /// Image reference (id, path or URL) as understood by the provider.
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        query_id: Option<String>,
        /// Number of chunks to return.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Run a queries file against gold chunks and report Recall@K.
    Eval {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Also write recall as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print index statistics.
    Inspect {
        #[arg(long)]
        index: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(arg) => RunConfig::resolve(arg)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &g.preset {
        cfg.retrieval.preset = Some(p.clone());
    }
    if let Some(kind) = g.provider {
        cfg.provider.kind = kind;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick(arg: &Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    match arg.as_ref().or(fallback.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => Err(anyhow::Error::msg(format!(
            "--{flag} is required (or set paths in the config)"
        ))
        .context(UsageMarker)),
    }
}

/// Attached as context to errors that should exit with the usage code.
#[derive(Debug)]
struct UsageMarker;

impl std::fmt::Display for UsageMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("usage error")
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = load_config(&cli.global)?;
    let paths = cfg.paths.clone();
    match cli.command {
        Command::Build { corpus, index } => {
            let corpus = pick(&corpus, &paths.corpus_dir, "corpus")?;
            let index = pick(&index, &paths.index_dir, "index")?;
            let summary = cmd_build(&corpus, &index, &cfg)?;
            print_json(&summary)?;
        }
        Command::Query {
            index,
            text,
            image,
            query_id,
            top_k,
        } => {
            let index = pick(&index, &paths.index_dir, "index")?;
            if text.is_none() && image.is_none() {
                return Err(anyhow::Error::msg("give --text and/or --image").context(UsageMarker));
            }
            if top_k.is_some() {
                cfg.retrieval.answer_top_k = top_k;
            }
            let req = QueryRequest {
                query_id,
                text_query: text,
                image_query_ref: image,
                config_overrides: None,
            };
            let result = cmd_query(&index, &req, &cfg)?;
            print_json(&result)?;
            if !result.converged {
                return Ok(EXIT_NO_CONVERGENCE);
            }
        }
        Command::Eval {
            index,
            queries,
            gold,
            ks,
            csv,
        } => {
            let index = pick(&index, &paths.index_dir, "index")?;
            let gold = pick(&gold, &paths.gold_file, "gold")?;
            let ks = ks.unwrap_or_else(|| DEFAULT_KS.to_vec());
            let out = cmd_eval(&index, &queries, &gold, &cfg, &ks)?;
            if let Some(path) = csv {
                write(&path, out.report.to_csv())?;
            }
            print_json(&out)?;
            if out.unconverged_queries > 0 {
                return Ok(EXIT_NO_CONVERGENCE);
            }
        }
        Command::Inspect { index } => {
            let index = pick(&index, &paths.index_dir, "index")?;
            print_json(&cmd_inspect(&index)?)?;
        }
    }
    Ok(0)
}

fn write(path: &Path, body: String) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MGGRAPH_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let usage = e.downcast_ref::<UsageMarker>().is_some();
            eprintln!("error: {e:#}");
            if usage {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
