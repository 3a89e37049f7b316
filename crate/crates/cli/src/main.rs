mod archive;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "star",
    version,
    about = "Table retrieval with clustered query generation and weighted fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate corpus and query files and print their statistics.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Write the merged, validated corpus here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build table representations into a resumable archive.
    Represent {
        #[command(flatten)]
        common: Common,
        /// Archive path (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build representations and write a searchable index.
    Index {
        #[command(flatten)]
        common: Common,
        /// Index file; the representation archive is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search an index and print ranked tables as JSON lines.
    Search {
        #[command(flatten)]
        common: Common,
        /// Index file to search.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Number of tables to return.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Query text.
        query: String,
    },
    /// Evaluate the configured pipeline (Recall@1/5/10).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Report path (JSON; a .txt rendering is written alongside).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k baseline, fixed fusion over a lambda grid, and dynamic fusion.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated lambda grid [default: 0.1,...,0.9].
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Leave out the dynamic fusion row.
        #[arg(long)]
        no_dwf: bool,
    },
    /// Full model against its three single-component ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Fixed,
    Dynamic,
    Concat,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    /// Hashed n-gram encoder and template queries, no network.
    Reference,
    /// Embedding and generation services from the config file.
    Remote,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file (JSON lines); repeat for several datasets.
    #[arg(long)]
    corpus: Vec<PathBuf>,
    /// Evaluation queries, paired with --corpus by position.
    #[arg(long)]
    queries: Vec<PathBuf>,
    /// Header weight in the row embedding mix.
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of clusters per table.
    #[arg(long = "k")]
    k: Option<usize>,
    /// Query weight for fixed fusion.
    #[arg(long)]
    lambda: Option<f64>,
    /// Scale of the table/query cosine for dynamic fusion.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Seed for every random choice [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Persistent embedding cache (JSON lines).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Route remote calls to an in-process mock that checks request shapes.
    #[arg(long)]
    dry_run: bool,
    /// error, warn, info, debug or trace.
    #[arg(long)]
    log_level: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
