use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shardjoin_cli::commands::{gen, node, orchestrate, simulate};

/// Distributed hash join driver: generate workloads, run cluster nodes,
/// orchestrate sweeps, and check the engine in the in-process simulator.
///
/// Logging is controlled by the SHARDJOIN_LOG environment variable
/// (error, warn, info, debug, trace); there are no other environment
/// overrides.
#[derive(Parser)]
#[command(name = "shardjoin", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write one partition file per (table, node) from a manifest.
    Gen {
        /// Manifest file (key = value grammar).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one cluster node to completion and write its load report.
    Node {
        /// Node config file naming the whole cluster plus data_dir/out_dir.
        #[arg(long)]
        config: PathBuf,
        /// This node's id (0-based position in the config's node list).
        #[arg(long)]
        id: u32,
    },
    /// Execute a manifest's sweep as local processes and collate summary.csv.
    Orchestrate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run sweep points through the in-process simulator across seeds,
    /// checking results against the reference join (and traces in
    /// deterministic mode). Exits nonzero iff a check fails.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        /// Number of seeds per sweep point.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Write one JSON-lines trace file per deterministic run here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("SHARDJOIN_LOG", "warn"),
    )
    .init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Gen { spec, out } => gen::cmd_gen(spec, out),
        Cmd::Node { config, id } => node::cmd_node(config, *id),
        Cmd::Orchestrate { manifest } => orchestrate::cmd_orchestrate(manifest),
        Cmd::Simulate { manifest, seeds, trace_dir } => {
            simulate::cmd_simulate(manifest, *seeds, trace_dir.as_deref())
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shardjoin: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
