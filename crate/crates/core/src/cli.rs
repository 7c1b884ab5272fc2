//! `adshield` command line: scenario runs, corpus analysis, corpus synthesis
//! and an end-to-end demo. Machine-readable JSON goes to stdout (or `--out`),
//! logs go to stderr.
//!
//! Exit codes: 0 success, 1 usage / I/O / parse error, 2 validation error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use serde::Serialize;

use crate::adchannel::{AdServer, Tally, Verdict};
use crate::fraudbench::{self, honest_click, Device, Scenario, ScenarioError};
use crate::permtool::{self, PermtoolError};
use crate::uievents::DEFAULT_FRESHNESS_MS;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "adshield", version, about = "Privilege-separated advertising reference-monitor simulator")]
pub struct CliConfig {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario file and emit its RunReport.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's own seed.
        #[arg(long, env = "ADSHIELD_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario's freshness window.
        #[arg(long)]
        freshness_ms: Option<u64>,
        /// Simulation worker threads (default: available parallelism).
        #[arg(long)]
        workers: Option<usize>,
        /// Write the host message log as JSON lines.
        #[arg(long)]
        host_log: Option<PathBuf>,
        /// Write the ad server's verdict log as JSON lines.
        #[arg(long)]
        server_log: Option<PathBuf>,
    },
    /// Attribute corpus permissions to linked ad libraries.
    Permscan {
        corpus: PathBuf,
        /// JSON array of library profiles (default: built-in set).
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic JSON-lines corpus.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, env = "ADSHIELD_SEED", default_value_t = 0)]
        seed: u64,
        /// JSON array of library profiles to link against (default: built-in set).
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one honest fetch → display → click → report pipeline.
    Demo {
        #[arg(long, env = "ADSHIELD_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FRESHNESS_MS)]
        freshness_ms: u64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Permtool(#[from] PermtoolError),
    #[error("demo pipeline failed: {0}")]
    Demo(#[from] fraudbench::PipelineError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) | CliError::Permtool(PermtoolError::UnknownLibrary { .. }) => EXIT_INVALID,
            _ => EXIT_IO,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn emit(out: Option<&Path>, body: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, body).map_err(io_err(path)),
        None => stdout.write_all(body.as_bytes()).map_err(io_err(Path::new("<stdout>"))),
    }
}

fn load_profiles(path: Option<&Path>) -> Result<Vec<permtool::LibraryProfile>, CliError> {
    match path {
        None => Ok(permtool::builtin_profiles()),
        Some(path) => serde_json::from_str(&read(path)?).map_err(|source| CliError::Parse {
            path: path.display().to_string(),
            source,
        }),
    }
}

#[derive(Serialize)]
struct DemoOutput {
    #[serde(flatten)]
    verdict: Verdict,
    device: String,
    token_id: String,
    impression_id: String,
    creative_id: String,
    tally: Tally,
}

fn execute(cfg: CliConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cfg.command {
        Command::Run {
            scenario,
            seed,
            out,
            freshness_ms,
            workers,
            host_log,
            server_log,
        } => {
            let text = read(&scenario)?;
            let mut s = Scenario::from_json(&text).map_err(|source| CliError::Parse {
                path: scenario.display().to_string(),
                source,
            })?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(ms) = freshness_ms {
                s.freshness_ms = ms;
            }
            log::info!("running {} users with seed {}", s.n_users, s.seed);
            let outcome = fraudbench::run_detailed(&s, workers.unwrap_or_else(fraudbench::default_workers))?;
            if let Some(path) = host_log {
                fs::write(&path, outcome.host_log_jsonl()).map_err(io_err(&path))?;
            }
            if let Some(path) = server_log {
                let body: String = outcome
                    .server_log
                    .iter()
                    .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
                    .collect();
                fs::write(&path, body).map_err(io_err(&path))?;
            }
            emit(out.as_deref(), &(outcome.report.to_json() + "\n"), stdout)
        }
        Command::Permscan { corpus, profiles, out } => {
            let file = fs::File::open(&corpus).map_err(io_err(&corpus))?;
            let apps = permtool::read_corpus(BufReader::new(file)).map_err(|e| match e {
                PermtoolError::Parse { line, source } => CliError::Parse {
                    path: format!("{}:{line}", corpus.display()),
                    source,
                },
                other => other.into(),
            })?;
            let profiles = load_profiles(profiles.as_deref())?;
            let report = permtool::attribute(&apps, &profiles)?;
            log::info!("{} apps, {} ad-only", report.per_app.len(), report.ad_only_apps);
            emit(out.as_deref(), &(report.to_json() + "\n"), stdout)
        }
        Command::Synth { n, seed, profiles, out } => {
            let pool = load_profiles(profiles.as_deref())?;
            let corpus = permtool::synth_corpus(n, &pool, seed);
            let mut buf = Vec::new();
            permtool::write_corpus(&corpus, &mut buf)?;
            emit(out.as_deref(), &String::from_utf8(buf).expect("json is utf-8"), stdout)
        }
        Command::Demo { seed, freshness_ms } => {
            let server = AdServer::with_seed(fraudbench::SERVER_NAME, seed, 4);
            let device = Device::install("device-demo", seed, freshness_ms, &server)?;
            let click = honest_click(&device, &server, 1_000)?;
            let verdict = server.submit_click(&click.report, click.report.submitted_at);
            let output = DemoOutput {
                verdict,
                device: device.monitor.device().to_string(),
                token_id: click.token.token_id.to_string(),
                impression_id: click.impression.impression_id.to_string(),
                creative_id: click.creative.creative_id.to_string(),
                tally: server.revenue_tally(),
            };
            let body = serde_json::to_string(&output).expect("demo output serializes") + "\n";
            emit(None, &body, stdout)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match CliConfig::try_parse_from(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(rendered.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = stderr.write_all(rendered.as_bytes());
                    EXIT_IO
                }
            };
        }
    };
    let level = match cfg.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .try_init();

    match execute(cfg, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
