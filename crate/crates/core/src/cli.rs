//! Command-line entry point: `run`, `eval` and `serve`.
//!
//! Exit codes follow sysexits where one fits:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | converged (or command succeeded) |
//! | 2 | max_iterations |
//! | 3 | no_eligible_cluster |
//! | 4 | backend_failure |
//! | 5 | selection_timeout |
//! | 6 | invalid_selection |
//! | 64 | bad config or usage |
//! | 65 | malformed samples |
//! | 66 | input file unreadable |
//! | 69 | bind failure |
//! | 74 | output not writable |
//! | 130 | interrupted |

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc::{self, Receiver, Sender};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use crate::backends::{BackendConfig, BackendKind, Backends, ImagePayload};
use crate::config::{self, JobConfig};
use crate::embedding::Embedding;
use crate::evaluation::{self, EvalError, EvalSample};
use crate::pipeline::{
    ChannelSelector, Coordinator, IterationRecord, MostCohesive, RunLog, RunObserver, RunStatus, SelectionMode,
    SelectionRequest, SidecarWriter,
};
use crate::service::{self, AppState, ServiceOptions};

pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DATA: u8 = 65;
pub const EXIT_NO_INPUT: u8 = 66;
pub const EXIT_UNAVAILABLE: u8 = 69;
pub const EXIT_IO: u8 = 74;

#[derive(Debug, Parser)]
#[command(name = "charfunnel", version, about = "Iterative consistent-character extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline headless and write runlog.json plus embedding sidecars.
    Run(RunArgs),
    /// Compare methods on prompt similarity and identity consistency.
    Eval(EvalArgs),
    /// Serve the REST API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Auto,
    Manual,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Job document (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's rng_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's selection_mode; manual reads cluster ids from stdin.
    #[arg(long, value_enum)]
    pub selection: Option<SelectionArg>,
    /// Output directory; falls back to the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// JSONL sample file, optionally prefixed with a method name: `ours=path.jsonl`.
    #[arg(long = "samples", required = true)]
    pub samples: Vec<String>,
    /// Directory receiving comparison.csv and comparison.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Backend used by jobs that name none.
    #[arg(long, value_enum, default_value = "simulated")]
    pub backend: BackendArg,
    /// JSON object of backend options.
    #[arg(long, default_value = "{}")]
    pub backend_options: String,
    /// Each finished run is exported to `<dir>/<run_id>/`.
    #[arg(long)]
    pub export_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Simulated,
    Http,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

pub fn exit_code(status: Option<RunStatus>) -> u8 {
    match status {
        Some(RunStatus::Converged) => 0,
        Some(RunStatus::MaxIterations) => 2,
        Some(RunStatus::NoEligibleCluster) => 3,
        Some(RunStatus::BackendFailure) | None => 4,
        Some(RunStatus::SelectionTimeout) => 5,
        Some(RunStatus::InvalidSelection) => 6,
        Some(RunStatus::Interrupted) => 130,
    }
}

/// Parses arguments from the process and runs the chosen command.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .try_init();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

pub fn execute(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Run(args) => cmd_run(&args),
        Command::Eval(args) => cmd_eval(&args).map(|_| 0),
        Command::Serve(args) => cmd_serve(&args).map(|_| 0),
    }
}

/// Reads a job document and applies `--seed`, `--selection` and the
/// environment URL override.
pub fn load_job(args: &RunArgs) -> Result<JobConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::new(EXIT_NO_INPUT, format!("{}: {e}", args.config.display())))?;
    let mut job = JobConfig::parse(&text, &BackendConfig::default())
        .map_err(|e| CliError::new(EXIT_USAGE, format!("{}: {e}", args.config.display())))?;
    job.apply_env();
    if let Some(seed) = args.seed {
        job.run.rng_seed = Some(seed);
    }
    match args.selection {
        Some(SelectionArg::Auto) => job.run.selection_mode = SelectionMode::Auto,
        Some(SelectionArg::Manual) => job.run.selection_mode = SelectionMode::Manual,
        None => {}
    }
    Ok(job)
}

pub fn cmd_run(args: &RunArgs) -> Result<u8, CliError> {
    let job = load_job(args)?;
    let out = args
        .out
        .clone()
        .or_else(|| job.output_dir.clone())
        .ok_or_else(|| CliError::new(EXIT_USAGE, "no output directory: pass --out or set output_dir"))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", out.display())))?;

    let backend = job
        .backend
        .build()
        .map_err(|e| CliError::new(4, format!("backend construction failed: {e}")))?;
    let (request_tx, request_rx) = mpsc::channel();
    let mut observer = CliObserver {
        sidecars: SidecarWriter::new(&out),
        requests: (job.run.selection_mode == SelectionMode::Manual).then_some(request_tx),
    };
    let coordinator = Coordinator::new(job.run.clone(), Backends::from_backend(backend.as_ref()))
        .map_err(|e| CliError::new(EXIT_USAGE, e.to_string()))?
        .with_backend_config(job.backend.clone())
        .with_observer(&mut observer);
    let log = match job.run.selection_mode {
        SelectionMode::Auto => coordinator.with_selector(MostCohesive).run(),
        SelectionMode::Manual => {
            let (tx, rx) = mpsc::channel();
            spawn_stdin_reader(request_rx, tx);
            let timeout = Duration::from_secs(job.run.selection_timeout_secs);
            coordinator.with_selector(ChannelSelector::new(rx, timeout)).run()
        }
    };
    if let Some(e) = observer.sidecars.error.take() {
        return Err(CliError::new(EXIT_IO, format!("writing embedding sidecars: {e}")));
    }
    write_runlog(&out, &log)?;
    report(&log);
    Ok(exit_code(log.status))
}

pub fn write_runlog(dir: &Path, log: &RunLog) -> Result<(), CliError> {
    let path = dir.join("runlog.json");
    std::fs::write(&path, log.to_json_pretty()).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn report(log: &RunLog) {
    let status = log
        .status
        .map(|s| serde_json::to_value(s).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        .unwrap_or_default();
    eprintln!("status: {status}");
    for r in &log.iterations {
        eprintln!(
            "  iteration {}: stat {:.4} (threshold {:.4}) chosen {:?}",
            r.index, r.convergence_stat, r.threshold_in_effect, r.chosen_cluster
        );
    }
    if let Some(err) = &log.error {
        eprintln!("error: {err}");
    }
}

struct CliObserver {
    sidecars: SidecarWriter,
    requests: Option<Sender<SelectionRequest>>,
}

impl RunObserver for CliObserver {
    fn awaiting_selection(&mut self, request: &SelectionRequest) {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "iteration {}: choose a cluster", request.iteration);
        for c in &request.clusters {
            let _ = writeln!(
                err,
                "  [{}] size {:>3}  cohesion {:.4}{}",
                c.id,
                c.size,
                c.cohesion,
                if c.eligible { "" } else { "  (below minimum size)" }
            );
        }
        let _ = writeln!(err, "cluster id [{}]: ", request.suggested);
        if let Some(tx) = &self.requests {
            let _ = tx.send(request.clone());
        }
    }

    fn iteration_completed(&mut self, record: &IterationRecord, embeddings: &[Embedding], payloads: &[ImagePayload]) {
        self.sidecars.iteration_completed(record, embeddings, payloads);
    }
}

/// Answers each selection request with a cluster id read from stdin; an
/// empty line accepts the suggestion. EOF closes the selection channel,
/// which interrupts the run.
fn spawn_stdin_reader(requests: Receiver<SelectionRequest>, selections: Sender<usize>) {
    std::thread::spawn(move || {
        let stdin = std::io::stdin();
        let mut lines = stdin.lock().lines();
        while let Ok(request) = requests.recv() {
            loop {
                let Some(Ok(line)) = lines.next() else { return };
                let id = match line.trim() {
                    "" => request.suggested,
                    s => match s.parse::<usize>() {
                        Ok(id) => id,
                        Err(_) => {
                            eprintln!("not a cluster id: `{s}`");
                            continue;
                        }
                    },
                };
                if !request.is_selectable(id) {
                    eprintln!("cluster {id} is not selectable at iteration {}", request.iteration);
                    continue;
                }
                if selections.send(id).is_err() {
                    return;
                }
                break;
            }
        }
    });
}

/// Splits `name=path` into its parts; a bare path is named after its stem.
pub fn parse_samples_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !name.contains(['/', '\\']) => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| arg.to_string());
            (name, path)
        }
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut methods: Vec<(String, Vec<EvalSample>)> = Vec::new();
    for arg in &args.samples {
        let (name, path) = parse_samples_arg(arg);
        let file = std::fs::File::open(&path)
            .map_err(|e| CliError::new(EXIT_NO_INPUT, format!("{}: {e}", path.display())))?;
        let samples = evaluation::read_samples(std::io::BufReader::new(file)).map_err(|e| match e {
            EvalError::Malformed { line, message } => {
                CliError::new(EXIT_DATA, format!("{}:{line}: {message}", path.display()))
            }
            other => CliError::new(EXIT_DATA, format!("{}: {other}", path.display())),
        })?;
        methods.push((name, samples));
    }
    let rows = evaluation::comparison_table(&methods).map_err(|e| CliError::new(EXIT_DATA, e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", args.out.display())))?;
    for (file, body) in [
        ("comparison.csv", evaluation::table_csv(&rows)),
        ("comparison.json", evaluation::table_json(&rows)),
    ] {
        let path = args.out.join(file);
        std::fs::write(&path, body).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    }
    print!("{}", evaluation::table_csv(&rows));
    Ok(())
}

pub fn serve_options(args: &ServeArgs) -> Result<ServiceOptions, CliError> {
    let backend_options: serde_json::Value = serde_json::from_str(&args.backend_options)
        .map_err(|e| CliError::new(EXIT_USAGE, format!("--backend-options: {e}")))?;
    let mut backend = BackendConfig {
        backend: match args.backend {
            BackendArg::Simulated => BackendKind::Simulated,
            BackendArg::Http => BackendKind::Http,
        },
        backend_options,
    };
    if let Ok(url) = std::env::var(config::HTTP_URL_ENV) {
        config::apply_url_override(&mut backend, &url);
    }
    backend
        .check()
        .map_err(|e| CliError::new(EXIT_USAGE, format!("--backend-options: {e}")))?;
    Ok(ServiceOptions {
        default_backend: backend,
        export_dir: args.export_dir.clone(),
    })
}

pub fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    let options = serve_options(args)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new(EXIT_UNAVAILABLE, format!("runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .map_err(|e| CliError::new(EXIT_UNAVAILABLE, format!("cannot bind {}: {e}", args.addr)))?;
        let local = listener.local_addr().map_err(|e| CliError::new(EXIT_UNAVAILABLE, e.to_string()))?;
        tracing::info!("listening on http://{local}");
        service::serve(listener, AppState::new(options), shutdown_signal())
            .await
            .map_err(|e| CliError::new(EXIT_UNAVAILABLE, e.to_string()))
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down; interrupting in-flight runs");
}
