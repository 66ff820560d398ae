//! `healthreg`: run ledger nodes and agents, drive credential flows and
//! play the health scenarios.
//!
//! Exit codes: 0 success, 1 usage error, 2 connectivity or infrastructure
//! failure, 3 protocol-level negative outcome (decline, invalid verdict,
//! failed scenario).

mod agent_cmd;
mod config;
mod demo;
mod node_cmd;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::CliConfig;
use output::{report_error, CliError, Output, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "healthreg", version, about = "Self-sovereign health registry: nodes, agents, scenarios")]
struct Cli {
    /// TOML settings file; flags and environment variables take precedence.
    #[arg(long, global = true, env = "HEALTHREG_CONFIG")]
    config: Option<PathBuf>,
    /// Tables instead of line-delimited JSON.
    #[arg(long, global = true)]
    human: bool,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "HEALTHREG_LOG")]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ledger node operations.
    Node {
        #[command(subcommand)]
        cmd: node_cmd::NodeCommand,
    },
    /// Messaging agent operations.
    Agent {
        #[command(subcommand)]
        cmd: agent_cmd::AgentCommand,
    },
    /// Run a health scenario on a throwaway in-process network and print
    /// its transcript.
    Demo(demo::DemoArgs),
    /// List the scenario names.
    Scenarios,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = CliConfig::load(cli.config.as_deref())?;
    let level = cli.log_level.clone().or(config.log_level.clone()).unwrap_or_else(|| "warn".into());
    let _ = env_logger::Builder::new().parse_filters(&level).try_init();
    let out = Output { human: cli.human };
    match cli.command {
        Command::Node { cmd } => node_cmd::run(cmd, &config, out),
        Command::Agent { cmd } => agent_cmd::run(cmd, &config, out),
        Command::Demo(args) => demo::run(args, out),
        Command::Scenarios => {
            demo::list(out);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::from(EXIT_OK);
        }
        Err(e) => {
            report_error(&CliError::usage(e.to_string().trim_end()));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            report_error(&e);
            ExitCode::from(e.exit)
        }
    }
}
