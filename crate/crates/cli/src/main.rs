use std::io::Write;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use promptws::backend::{Backend, HttpBackend, HttpConfig, MockBackend};
use promptws::batching::BatchConfig;
use promptws::client::Client;
use promptws::labelmodel::ProbLabels;
use promptws::serving::{self, DualEncoderBackend, HashEncoder, ServeError, ServerConfig};
use promptws::voter::VoteMatrix;
use promptws_cli::{config::TaskConfig, eval, pipeline};

#[derive(Parser)]
#[command(name = "promptws", version, about = "Prompted weak supervision runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ServeBackend {
    /// Deterministic completions and hash-based ranking scores.
    Mock,
    /// Hash-based dual encoder for caption ranking, with a representation cache.
    MockDual,
    /// OpenAI-style completion endpoint.
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Host a backend behind the framed TCP protocol.
    Serve {
        #[arg(long, value_enum)]
        backend: ServeBackend,
        #[arg(long, default_value = "127.0.0.1:7341")]
        bind: String,
        #[arg(long, default_value_t = 4096)]
        budget: usize,
        #[arg(long, default_value_t = 64)]
        max_batch: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "mock")]
        model_id: String,
        /// Completion URL for the http backend.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Print a running server's status.
    Probe {
        #[arg(long)]
        addr: String,
    },
    /// Label a dataset as described by a task config.
    Label {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Persistent response cache; in-memory when omitted.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score probabilistic labels against gold labels.
    Eval {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "label")]
        gold_column: String,
        /// votes.csv from the same run, for coverage.
        #[arg(long)]
        votes: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { backend, bind, budget, max_batch, workers, model_id, endpoint } => {
            serve(backend, &bind, BatchConfig { token_budget: budget, max_batch, workers }, model_id, endpoint)
        }
        Command::Probe { addr } => probe(&addr),
        Command::Label { config, out, cache } => label(&config, &out, cache.as_deref()),
        Command::Eval { probs, gold, gold_column, votes } => evaluate(&probs, &gold, &gold_column, votes.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn serve(
    kind: ServeBackend,
    bind: &str,
    batch: BatchConfig,
    model_id: String,
    endpoint: Option<String>,
) -> Result<(), Failure> {
    batch.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let addrs: Vec<SocketAddr> =
        bind.to_socket_addrs().map_err(|e| Failure::Config(format!("invalid bind address {bind:?}: {e}")))?.collect();
    let backend: Arc<dyn Backend> = match kind {
        ServeBackend::Mock => Arc::new(MockBackend::new(model_id)),
        ServeBackend::MockDual => Arc::new(DualEncoderBackend::new(HashEncoder::new(model_id, 64))),
        ServeBackend::Http => {
            let endpoint =
                endpoint.ok_or_else(|| Failure::Config("--endpoint is required for the http backend".into()))?;
            Arc::new(HttpBackend::new(HttpConfig::new(endpoint, model_id)))
        }
    };
    let handle = serving::serve(backend, addrs.as_slice(), ServerConfig { batch }).map_err(|e| match e {
        ServeError::Config(e) => Failure::Config(e.to_string()),
        e @ ServeError::Bind(_) => Failure::Runtime(e.to_string()),
    })?;
    println!("listening on {}", handle.local_addr());
    let _ = std::io::stdout().flush();
    handle.wait();
    Ok(())
}

fn probe(addr: &str) -> Result<(), Failure> {
    let status = serving::probe(addr).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{}", serde_json::to_string(&status).expect("status serializes"));
    Ok(())
}

fn label(config_path: &Path, out: &Path, cache: Option<&Path>) -> Result<(), Failure> {
    let (config, text) = TaskConfig::load(config_path).map_err(|e| Failure::Config(e.to_string()))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let runtime = |e: pipeline::PipelineError| Failure::Runtime(e.to_string());
    let engine = pipeline::build_engine(&config).map_err(runtime)?;
    let client = Client::with_cache(engine, pipeline::open_cache(cache).map_err(runtime)?);
    let run = pipeline::run_label(&config, base, &client).map_err(runtime)?;
    pipeline::write_outputs(&run, &config, &text, out).map_err(runtime)?;
    println!(
        "labeled {} rows with {} LFs; cache hit rate {:.3}, {} backend queries; wrote {}",
        run.votes.n_rows(),
        run.votes.n_lfs(),
        run.stats.hit_rate(),
        run.stats.backend_queries,
        out.display()
    );
    Ok(())
}

fn evaluate(probs: &Path, gold: &Path, gold_column: &str, votes: Option<&Path>) -> Result<(), Failure> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())));
    let (probs, names) =
        ProbLabels::from_csv(&read(probs)?).map_err(|e| Failure::Runtime(format!("{}: {e}", probs.display())))?;
    let gold = eval::load_gold(gold, gold_column, &names).map_err(|e| Failure::Runtime(e.to_string()))?;
    let votes = match votes {
        Some(p) => Some(
            VoteMatrix::from_csv(&read(p)?, probs.k() as u32)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let report = eval::evaluate(&probs, &names, &gold, votes.as_ref()).map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{report}");
    Ok(())
}
