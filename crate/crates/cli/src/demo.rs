use std::time::Duration;

use clap::Args;
use serde_json::json;

use healthreg_health::{run_scenario, scenario, SCENARIO_NAMES};
use healthreg_node::cluster::Cluster;
use healthreg_node::NodeOptions;

use crate::node_cmd::node_error;
use crate::output::{CliError, Output};

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Scenario name.
    name: String,
    /// Overrides the scenario's own seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ledger nodes: 1 runs in process, more serve HTTP on loopback ports.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..=16))]
    nodes: u16,
}

pub fn run(args: DemoArgs, out: Output) -> Result<(), CliError> {
    let Some(script) = scenario(&args.name) else {
        return Err(CliError::infra("UNKNOWN_SCENARIO", format!("no scenario named `{}`", args.name))
            .with("valid", SCENARIO_NAMES));
    };
    let dir = tempfile::tempdir()?;
    let n = args.nodes as usize;
    let options = NodeOptions {
        ordering_timeout: Duration::from_secs(2),
        ..NodeOptions::default()
    };
    let cluster = if n == 1 {
        Cluster::local(1, &dir.path().join("ledger"), options)
    } else {
        Cluster::http(n, &dir.path().join("ledger"), options)
    }
    .map_err(node_error)?;
    let run = run_scenario(&script, cluster.client(), &dir.path().join("agents"), args.seed);
    out.lines(&run.transcript);
    match run.result {
        Ok(()) => Ok(()),
        Err(e) => Err(CliError::protocol(e.code(), format!("step {}: expected {}, got {}", e.step, e.expected, e.actual))
            .with("scenario", &script.name)
            .with("step", e.step)
            .with("expected", &e.expected)
            .with("actual", &e.actual)),
    }
}

pub fn list(out: Output) {
    let names: Vec<_> = SCENARIO_NAMES.iter().map(|n| json!({ "name": n })).collect();
    out.lines(&names);
}
