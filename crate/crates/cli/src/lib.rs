//! The `semmap` command line: one subcommand per pipeline stage plus an
//! end-to-end `demo`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | other failure |
//! | 2 | invalid configuration or input (including log/calibration mismatch) |
//! | 3 | trajectory unobservable (no GNSS fix) |
//! | 4 | network failure |
//! | 5 | file format version not supported by this build |

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};
use config::PipelineConfig;
use semmap::codec::Region;
use semmap_server::{http, MapServer, ServerConfig};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const INVALID: i32 = 2;
    pub const UNOBSERVABLE: i32 = 3;
    pub const NETWORK: i32 = 4;
    pub const VERSION: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unobservable trajectory: {0}")]
    Unobservable(String),
    #[error("network failure: {0} (is the server running? retry once it is reachable)")]
    Network(String),
    #[error("unsupported format version: {0}")]
    VersionMismatch(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => exit::INVALID,
            CliError::Unobservable(_) => exit::UNOBSERVABLE,
            CliError::Network(_) => exit::NETWORK,
            CliError::VersionMismatch(_) => exit::VERSION,
            CliError::Runtime(_) => exit::FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "semmap", version, about = "Crowd-sourced semantic map pipeline")]
pub struct Cli {
    /// Seed for world generation and sensor noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML pipeline configuration.
    #[arg(long, global = true, env = "SEMMAP_CONFIG")]
    pub config: Option<PathBuf>,
    /// More logging; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drive the configured path through the world and write a drive log.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Also write the world as JSON.
        #[arg(long)]
        world_out: Option<PathBuf>,
    },
    /// Build a local map (SGUP) from a drive log.
    MapBuild {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// World JSON to check the map labels against.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Send a local map to the server as one session.
    Upload {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, env = "SEMMAP_SERVER")]
        server: Option<String>,
        #[arg(long, default_value = "vehicle")]
        vehicle_id: String,
        /// Defaults to a digest of the file, so re-sending it is a no-op.
        #[arg(long)]
        session_id: Option<String>,
    },
    /// Run the aggregation server until interrupted.
    Serve {
        #[arg(long, env = "SEMMAP_LISTEN")]
        listen: Option<String>,
        #[arg(long, env = "SEMMAP_DATA_DIR")]
        data_dir: Option<PathBuf>,
        /// Seconds between background compactions; 0 disables them.
        #[arg(long, env = "SEMMAP_COMPACT_INTERVAL")]
        compact_interval: Option<f64>,
    },
    /// Download the compressed map (SMAP) of a region.
    Fetch {
        #[arg(long, env = "SEMMAP_SERVER")]
        server: Option<String>,
        /// `min_x,min_y,max_x,max_y` in meters; default everything.
        #[arg(long, value_parser = parse_bbox, allow_hyphen_values = true)]
        bbox: Option<Region>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize a drive log against a map (SMAP or SGUP).
    Localize {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a localization CSV with the log's ground truth.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Map, merge, compress and localize on a generated urban block.
    Demo {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        sessions: usize,
        /// Turn every noise source off.
        #[arg(long)]
        noiseless: bool,
    },
}

fn parse_bbox(s: &str) -> Result<Region, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c, d] if a <= c && b <= d => Ok(Region::new(a, b, c, d)),
        [_, _, _, _] => Err("bbox needs min <= max".into()),
        _ => Err("bbox is min_x,min_y,max_x,max_y".into()),
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).unwrap_or_default());
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn serve(cfg: &PipelineConfig, listen: &str, data_dir: &Path, compact_interval: f64) -> Result<(), CliError> {
    let server = MapServer::open(
        data_dir,
        ServerConfig {
            checkpoint_every: cfg.server.checkpoint_every,
        },
    )
    .map_err(|e| CliError::Runtime(format!("{}: {e}", data_dir.display())))?;
    let server = Arc::new(server);
    let interval = (compact_interval > 0.0).then(|| Duration::from_secs_f64(compact_interval));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .map_err(|e| CliError::Network(format!("bind {listen}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Network(e.to_string()))?;
        let st = server.status();
        println!("listening on http://{addr} (version {}, {} tiles)", st.version, st.tile_count);
        use std::io::Write;
        let _ = std::io::stdout().flush();
        http::serve(server, listener, interval, async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

/// Run one parsed command line, printing its report as one JSON line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate { out, world_out } => print_json(&commands::cmd_simulate(&cfg, &out, world_out.as_deref())?),
        Command::MapBuild {
            log,
            calibration,
            out,
            world,
        } => print_json(&commands::cmd_map_build(&cfg, &log, calibration.as_deref(), &out, world.as_deref())?),
        Command::Upload {
            map,
            server,
            vehicle_id,
            session_id,
        } => {
            let url = server.unwrap_or_else(|| cfg.server.url.clone());
            print_json(&commands::cmd_upload(&cfg, &map, &url, &vehicle_id, session_id.as_deref())?)
        }
        Command::Serve {
            listen,
            data_dir,
            compact_interval,
        } => {
            let listen = listen.unwrap_or_else(|| cfg.server.listen.clone());
            let dir = data_dir.unwrap_or_else(|| cfg.server.data_dir.clone());
            serve(&cfg, &listen, &dir, compact_interval.unwrap_or(cfg.server.compact_interval_s))?
        }
        Command::Fetch { server, bbox, out } => {
            let url = server.unwrap_or_else(|| cfg.server.url.clone());
            print_json(&commands::cmd_fetch(&cfg, &url, &bbox.unwrap_or_else(Region::everything), &out)?)
        }
        Command::Localize {
            log,
            map,
            calibration,
            out,
        } => print_json(&commands::cmd_localize(&cfg, &log, &map, calibration.as_deref(), &out)?),
        Command::Evaluate { estimate, log, out_dir } => print_json(&commands::cmd_evaluate(&estimate, &log, &out_dir)?),
        Command::Demo {
            out_dir,
            sessions,
            noiseless,
        } => print_json(&commands::run_demo(&cfg, sessions, noiseless, &out_dir)?),
    }
    Ok(())
}
