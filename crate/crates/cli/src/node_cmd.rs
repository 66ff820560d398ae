use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use healthreg_core::wallet::KdfParams;
use healthreg_core::{Did, KeyPair, PublicKey};
use healthreg_node::{
    GenesisFile, GenesisNode, HttpLedgerClient, HttpTransport, LedgerClient, Node, NodeConfig, NodeError, NodeOptions,
    NodeServer, SubmitError,
};

use crate::config::{passphrase_source, read_passphrase, CliConfig};
use crate::output::{CliError, Output, EXIT_INFRA};

#[derive(Debug, Subcommand)]
pub enum NodeCommand {
    /// Create a steward wallet holding a fresh node key and print its DID
    /// and verification key for the roster.
    NewSteward(NewStewardArgs),
    /// Write a genesis file from a roster of nodes.
    InitGenesis(InitGenesisArgs),
    /// Serve a node until killed.
    Run(RunArgs),
    /// Print height, root hash and view of one or more nodes.
    Status(EndpointArgs),
    /// Make the leader of view K take over (static view change).
    PromoteLeader(PromoteArgs),
}

#[derive(Debug, Args)]
pub struct PassphraseArgs {
    /// File holding the wallet passphrase (a trailing newline is ignored).
    #[arg(long, env = "HEALTHREG_PASSPHRASE_FILE")]
    pub passphrase_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NewStewardArgs {
    #[arg(long, env = "HEALTHREG_WALLET")]
    wallet: Option<PathBuf>,
    #[command(flatten)]
    passphrase: PassphraseArgs,
}

#[derive(Debug, Args)]
pub struct InitGenesisArgs {
    /// Roster JSON: `{"network_id", "nodes": [{"node_name",
    /// "verification_key", "replication_endpoint", "client_endpoint"}]}`.
    #[arg(long)]
    roster: PathBuf,
    /// Output path; defaults to the configured genesis path.
    #[arg(long, env = "HEALTHREG_GENESIS")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, env = "HEALTHREG_GENESIS")]
    genesis: Option<PathBuf>,
    /// This node's name in the genesis file.
    #[arg(long, env = "HEALTHREG_NODE_NAME")]
    name: Option<String>,
    /// Steward wallet path.
    #[arg(long, env = "HEALTHREG_WALLET")]
    wallet: Option<PathBuf>,
    #[arg(long, env = "HEALTHREG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// PROPOSE to quorum deadline, in milliseconds.
    #[arg(long, default_value_t = 2000)]
    ordering_timeout_ms: u64,
    #[command(flatten)]
    passphrase: PassphraseArgs,
}

#[derive(Debug, Args)]
pub struct EndpointArgs {
    /// Node client endpoint; repeatable. Defaults to every node of the
    /// genesis file, then to the configured endpoints.
    #[arg(long = "endpoint", env = "HEALTHREG_ENDPOINTS", value_delimiter = ',')]
    endpoints: Vec<String>,
    #[arg(long, env = "HEALTHREG_GENESIS")]
    genesis: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PromoteArgs {
    #[arg(long)]
    view: u64,
    /// Client endpoint of the new leader; defaults to the leader of the
    /// view per the genesis file.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, env = "HEALTHREG_GENESIS")]
    genesis: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RosterEntry {
    node_name: String,
    verification_key: PublicKey,
    replication_endpoint: String,
    client_endpoint: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Roster {
    network_id: String,
    nodes: Vec<RosterEntry>,
}

#[derive(Serialize)]
struct StatusLine {
    endpoint: String,
    #[serde(flatten)]
    status: healthreg_node::NodeStatus,
}

pub fn node_error(e: NodeError) -> CliError {
    let exit = match e {
        NodeError::EndpointBusy(_) | NodeError::Io(_) | NodeError::Store(_) | NodeError::WalletLocked => EXIT_INFRA,
        _ => crate::output::EXIT_USAGE,
    };
    CliError::new(exit, e.code(), &e)
}

pub fn submit_error(e: SubmitError, endpoint: &str) -> CliError {
    match e {
        SubmitError::PeerUnavailable { detail } => {
            CliError::infra("CONNECTION_FAILED", detail).with("endpoint", endpoint)
        }
        SubmitError::BadRequest { detail } => CliError::usage(detail),
        other => CliError::infra(other.code(), &other).with("endpoint", endpoint),
    }
}

fn required<T>(value: Option<T>, what: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::usage(format!("{what} is required (flag, environment or config file)")))
}

fn load_genesis(path: &Path) -> Result<GenesisFile, CliError> {
    GenesisFile::load(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())).with("path", path))
}

pub fn run(cmd: NodeCommand, config: &CliConfig, out: Output) -> Result<(), CliError> {
    match cmd {
        NodeCommand::NewSteward(args) => {
            let path = required(args.wallet.or(config.wallet.clone()), "--wallet")?;
            if path.exists() {
                return Err(CliError::usage(format!("{} already exists", path.display())));
            }
            let source = passphrase_source(args.passphrase.passphrase_file.as_deref(), config);
            let pass = read_passphrase(&source, "new steward wallet", true)?;
            let keys = KeyPair::generate(&mut rand::rngs::OsRng);
            healthreg_node::steward::create_steward_wallet(&path, &pass, KdfParams::default(), &keys)
                .map_err(|e| CliError::infra(e.code(), e))?;
            out.record(&json!({
                "wallet": path,
                "node_did": Did::from_public_key(&keys.public_key),
                "verification_key": keys.public_key,
            }));
            Ok(())
        }
        NodeCommand::InitGenesis(args) => {
            let out_path = required(args.out.or(config.genesis.clone()), "--out")?;
            let text = std::fs::read_to_string(&args.roster)
                .map_err(|e| CliError::usage(format!("cannot read roster {}: {e}", args.roster.display())))?;
            let roster: Roster = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("roster {}: {e}", args.roster.display())))?;
            let genesis = GenesisFile {
                network_id: roster.network_id,
                nodes: roster
                    .nodes
                    .into_iter()
                    .map(|n| GenesisNode {
                        node_did: Did::from_public_key(&n.verification_key),
                        node_name: n.node_name,
                        verification_key: n.verification_key,
                        replication_endpoint: n.replication_endpoint,
                        client_endpoint: n.client_endpoint,
                    })
                    .collect(),
            };
            genesis.validate().map_err(|e| CliError::new(crate::output::EXIT_USAGE, "BAD_GENESIS", e))?;
            genesis.save(&out_path)?;
            out.record(&json!({
                "genesis": out_path,
                "network_id": genesis.network_id,
                "nodes": genesis.nodes.len(),
                "fingerprint": genesis.fingerprint(),
            }));
            Ok(())
        }
        NodeCommand::Run(args) => {
            let genesis = load_genesis(&required(args.genesis.or(config.genesis.clone()), "--genesis")?)?;
            let node_config = NodeConfig {
                genesis,
                own_name: required(args.name.or(config.node_name.clone()), "--name")?,
                steward_wallet_path: required(args.wallet.or(config.wallet.clone()), "--wallet")?,
                data_dir: required(args.data_dir.or(config.data_dir.clone()), "--data-dir")?,
            };
            let source = passphrase_source(args.passphrase.passphrase_file.as_deref(), config);
            let pass = read_passphrase(&source, "steward wallet", false)?;
            let timeout = Duration::from_millis(args.ordering_timeout_ms);
            let options = NodeOptions {
                ordering_timeout: timeout,
                ..NodeOptions::default()
            };
            let node = Node::open(&node_config, &pass, HttpTransport::new(timeout), options).map_err(node_error)?;
            drop(pass);
            let server = NodeServer::start(node).map_err(node_error)?;
            let own = node_config.genesis.node(&node_config.own_name).expect("opened").clone();
            out.record(&json!({
                "event": "listening",
                "name": own.node_name,
                "replication_endpoint": own.replication_endpoint,
                "client_endpoint": own.client_endpoint,
                "status": server.node().status(),
            }));
            loop {
                std::thread::park();
            }
        }
        NodeCommand::Status(args) => {
            let endpoints = if !args.endpoints.is_empty() {
                args.endpoints
            } else if let Some(path) = args.genesis.or(config.genesis.clone()) {
                load_genesis(&path)?.nodes.into_iter().map(|n| n.client_endpoint).collect()
            } else {
                config.endpoints.clone()
            };
            if endpoints.is_empty() {
                return Err(CliError::usage("no node endpoint given"));
            }
            let mut lines = Vec::new();
            let mut failed = Vec::new();
            let mut first_error = None;
            for endpoint in endpoints {
                match HttpLedgerClient::new(vec![endpoint.clone()]).status() {
                    Ok(status) => lines.push(StatusLine { endpoint, status }),
                    Err(e) => {
                        first_error.get_or_insert(submit_error(e, &endpoint));
                        failed.push(endpoint);
                    }
                }
            }
            out.lines(&lines);
            match first_error {
                Some(e) => Err(e.with("failed_endpoints", failed)),
                None => Ok(()),
            }
        }
        NodeCommand::PromoteLeader(args) => {
            let endpoint = match args.endpoint {
                Some(e) => e,
                None => {
                    let path = required(args.genesis.or(config.genesis.clone()), "--endpoint or --genesis")?;
                    load_genesis(&path)?.leader_of(args.view).client_endpoint.clone()
                }
            };
            let status = HttpLedgerClient::new(vec![endpoint.clone()])
                .promote(args.view)
                .map_err(|e| submit_error(e, &endpoint))?;
            out.record(&StatusLine { endpoint, status });
            Ok(())
        }
    }
}
