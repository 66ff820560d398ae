use std::collections::BTreeMap;
use std::io::{BufRead, IsTerminal, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Subcommand};
use rand::RngCore;
use serde_json::{json, Value};

use healthreg_agent::events::EventKind;
use healthreg_agent::{
    Agent, AgentConfig, ApiServer, ConsentPolicy, HttpWire, InboxServer, PendingItem, PendingKind,
};
use healthreg_core::bytes::b64_encode;
use healthreg_core::ledger::SchemaRecord;
use healthreg_core::wallet::Wallet;
use healthreg_core::Did;
use healthreg_node::{GenesisFile, HttpLedgerClient};

use crate::config::{api_token, passphrase_source, read_passphrase, CliConfig};
use crate::node_cmd::PassphraseArgs;
use crate::output::{CliError, Output, EXIT_INFRA, EXIT_PROTOCOL, EXIT_USAGE};

#[derive(Debug, Subcommand)]
pub enum AgentCommand {
    /// Serve an agent: peer inbox plus messaging API, until killed. Prints
    /// one JSON line when ready, then one per agent event.
    Run(RunArgs),
    /// Agent label, endpoint and public DID.
    Status(ApiArgs),
    /// Create an invitation; prints its URL and QR payload.
    Invite(InviteArgs),
    /// Accept an invitation (URL, QR payload or @file).
    Connect(ConnectArgs),
    /// List connections.
    Connections(ApiArgs),
    /// Issue a credential over a connection; prints the credential id.
    Issue(IssueArgs),
    /// Request a proof over a connection; prints the verification report.
    RequestProof(RequestProofArgs),
    Credentials {
        #[command(subcommand)]
        cmd: CredentialsCommand,
    },
    /// Revoke a credential this agent issued.
    Revoke(RevokeArgs),
    /// Offers and proof requests waiting for consent.
    Pending(ApiArgs),
    Approve(ApproveArgs),
    Decline(DeclineArgs),
    /// Public-ledger writes: identity, schemas, cred-defs.
    Ledger {
        #[command(subcommand)]
        cmd: LedgerCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum CredentialsCommand {
    /// Credentials held in the wallet.
    List(ApiArgs),
}

#[derive(Debug, Subcommand)]
pub enum LedgerCommand {
    /// Write the self-signed AUTHORITY NYM that opens an empty ledger.
    Bootstrap(ApiArgs),
    /// Create this agent's public DID if it has none yet and print it; an
    /// authority then registers it with register-nym.
    PublicDid(ApiArgs),
    /// Register another DID with a role.
    RegisterNym(RegisterNymArgs),
    /// Publish a schema, or all seven catalog schemas with --catalog.
    PublishSchema(PublishSchemaArgs),
    /// Publish a cred-def and revocation registry for a schema.
    PublishCredDef(PublishCredDefArgs),
    /// Cred-defs this agent issues under.
    CredDefs(ApiArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ApiArgs {
    /// Messaging API base URL of the agent.
    #[arg(long, env = "HEALTHREG_API")]
    api: Option<String>,
    /// File holding the API bearer token (or set HEALTHREG_API_TOKEN).
    #[arg(long)]
    api_token_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, env = "HEALTHREG_LABEL")]
    label: Option<String>,
    #[arg(long, env = "HEALTHREG_WALLET")]
    wallet: Option<PathBuf>,
    /// Genesis file: supplies the ledger endpoints and network fingerprint.
    #[arg(long, env = "HEALTHREG_GENESIS")]
    genesis: Option<PathBuf>,
    /// Ledger client endpoints, overriding the genesis file.
    #[arg(long = "ledger", env = "HEALTHREG_ENDPOINTS", value_delimiter = ',')]
    ledger: Vec<String>,
    /// Inbox listen address.
    #[arg(long, env = "HEALTHREG_LISTEN")]
    listen: Option<String>,
    /// Messaging API listen address.
    #[arg(long, env = "HEALTHREG_API_LISTEN")]
    api_listen: Option<String>,
    /// Inbox URL peers should use; defaults to the listen address.
    #[arg(long, env = "HEALTHREG_PUBLIC_ENDPOINT")]
    public_endpoint: Option<String>,
    /// Approve every offer and proof request without asking (test mode).
    #[arg(long)]
    auto_consent: bool,
    #[arg(long, default_value_t = 30)]
    flow_timeout_secs: u64,
    #[arg(long)]
    api_token_file: Option<PathBuf>,
    #[command(flatten)]
    passphrase: PassphraseArgs,
}

#[derive(Debug, Args)]
pub struct InviteArgs {
    #[command(flatten)]
    api: ApiArgs,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConnectArgs {
    #[command(flatten)]
    api: ApiArgs,
    /// Invitation URL, QR payload text, or @file holding either.
    #[arg(long)]
    invitation: String,
    #[arg(long)]
    alias: Option<String>,
}

#[derive(Debug, Args)]
pub struct IssueArgs {
    #[command(flatten)]
    api: ApiArgs,
    /// Connection id or alias.
    #[arg(long)]
    to: String,
    /// Schema id, or a schema name this agent has a cred-def for.
    #[arg(long)]
    schema: String,
    /// Attribute values as a JSON object, or @file.
    #[arg(long)]
    values: String,
}

#[derive(Debug, Args)]
pub struct RequestProofArgs {
    #[command(flatten)]
    api: ApiArgs,
    #[arg(long)]
    to: String,
    /// Schema id, or a schema name together with --authority.
    #[arg(long, required_unless_present = "request")]
    schema: Option<String>,
    /// DID that published the schema, when --schema is a bare name.
    #[arg(long)]
    authority: Option<Did>,
    #[arg(long, default_value = "1.0")]
    schema_version: String,
    #[arg(long, value_delimiter = ',')]
    attributes: Vec<String>,
    #[arg(long)]
    cred_def: Option<String>,
    /// Requested credentials as a JSON array, or @file, instead of
    /// --schema/--attributes.
    #[arg(long, conflicts_with_all = ["schema", "attributes", "cred_def"])]
    request: Option<String>,
}

#[derive(Debug, Args)]
pub struct RevokeArgs {
    #[command(flatten)]
    api: ApiArgs,
    #[arg(long)]
    credential: String,
}

#[derive(Debug, Args)]
pub struct ApproveArgs {
    #[command(flatten)]
    api: ApiArgs,
    thread_id: String,
    /// Credential to present, one per requested item; repeatable.
    #[arg(long = "credential")]
    credentials: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DeclineArgs {
    #[command(flatten)]
    api: ApiArgs,
    thread_id: String,
}

#[derive(Debug, Args)]
pub struct RegisterNymArgs {
    #[command(flatten)]
    api: ApiArgs,
    #[arg(long)]
    did: Did,
    /// MEMBER, STEWARD or AUTHORITY.
    #[arg(long, default_value = "MEMBER")]
    role: String,
}

#[derive(Debug, Args)]
pub struct PublishSchemaArgs {
    #[command(flatten)]
    api: ApiArgs,
    /// Publish the seven health catalog schemas.
    #[arg(long, conflicts_with_all = ["name", "attributes"])]
    catalog: bool,
    #[arg(long, required_unless_present = "catalog")]
    name: Option<String>,
    #[arg(long, default_value = "1.0")]
    version: String,
    #[arg(long, value_delimiter = ',')]
    attributes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PublishCredDefArgs {
    #[command(flatten)]
    api: ApiArgs,
    /// Schema id.
    #[arg(long)]
    schema: String,
    /// Revocation registry capacity.
    #[arg(long)]
    capacity: Option<u32>,
}

/// Blocking client for the messaging API.
struct ApiClient {
    base: String,
    token: String,
    http: ureq::Agent,
}

impl ApiClient {
    fn new(args: &ApiArgs, config: &CliConfig) -> Result<Self, CliError> {
        let base = args
            .api
            .clone()
            .or(config.api.clone())
            .ok_or_else(|| CliError::usage("--api is required (flag, HEALTHREG_API or config file)"))?;
        let token = api_token(args.api_token_file.as_deref(), std::env::var("HEALTHREG_API_TOKEN").ok(), config)?
            .ok_or_else(|| CliError::usage("no API token (--api-token-file, HEALTHREG_API_TOKEN or config file)"))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            token,
            // flows wait up to the agent's flow timeout
            http: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        })
    }

    fn call(&self, method: &str, path: &str, body: Option<Value>) -> Result<Value, CliError> {
        let request = self
            .http
            .request(method, &format!("{}{path}", self.base))
            .set("Authorization", &format!("Bearer {}", self.token));
        let result = match body {
            Some(b) => request.send_json(b),
            None => request.call(),
        };
        match result {
            Ok(resp) => resp.into_json().map_err(|e| CliError::infra("BAD_RESPONSE", e)),
            Err(ureq::Error::Status(status, resp)) => {
                let body: Value = resp.into_json().unwrap_or(Value::Null);
                let code = body["error"].as_str().unwrap_or("HTTP_ERROR");
                let detail = body["detail"].as_str().map(str::to_string).unwrap_or(format!("HTTP {status}"));
                Err(CliError::new(exit_for_status(status), code, detail).with("status", status))
            }
            Err(ureq::Error::Transport(t)) => {
                Err(CliError::infra("CONNECTION_FAILED", t).with("endpoint", &self.base))
            }
        }
    }

    fn get(&self, path: &str) -> Result<Value, CliError> {
        self.call("GET", path, None)
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, CliError> {
        self.call("POST", path, Some(body))
    }

    /// A connection id from an id or alias.
    fn connection(&self, to: &str) -> Result<String, CliError> {
        let connections = self.get("/connections")?;
        let list = connections.as_array().cloned().unwrap_or_default();
        if list.iter().any(|c| c["connection_id"] == to) {
            return Ok(to.to_string());
        }
        let matches: Vec<&Value> = list.iter().filter(|c| c["alias"] == to).collect();
        match matches.as_slice() {
            [one] => Ok(one["connection_id"].as_str().unwrap_or_default().to_string()),
            [] => Err(CliError::usage(format!("no connection with id or alias `{to}`"))),
            _ => Err(CliError::usage(format!("alias `{to}` names several connections; pass the connection id"))),
        }
    }

    /// A schema id from an id or the name of one of this agent's cred-defs.
    fn issuer_schema(&self, schema: &str) -> Result<String, CliError> {
        if schema.contains(':') {
            return Ok(schema.to_string());
        }
        let cred_defs = self.get("/cred-defs")?;
        let prefix = format!("{schema}:");
        let ids: Vec<String> = cred_defs
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|c| c["schema_id"].as_str())
            .filter(|id| id.starts_with(&prefix))
            .map(str::to_string)
            .collect();
        match ids.as_slice() {
            [one] => Ok(one.clone()),
            [] => Err(CliError::usage(format!("no cred-def for a schema named `{schema}`"))),
            _ => Err(CliError::usage(format!("several schemas named `{schema}`; pass the schema id"))),
        }
    }
}

fn exit_for_status(status: u16) -> u8 {
    match status {
        413 | 422 => EXIT_PROTOCOL,
        400 | 401 | 404 | 409 => EXIT_USAGE,
        _ => EXIT_INFRA,
    }
}

/// `@path` reads a file; anything else is taken literally.
fn inline_or_file(arg: &str) -> Result<String, CliError> {
    match arg.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path)
            .map(|s| s.trim().to_string())
            .map_err(|e| CliError::usage(format!("cannot read {path}: {e}"))),
        None => Ok(arg.to_string()),
    }
}

fn parse_values(arg: &str) -> Result<BTreeMap<String, String>, CliError> {
    let text = inline_or_file(arg)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("--values: {e}")))?;
    let Value::Object(map) = value else {
        return Err(CliError::usage("--values must be a JSON object"));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            Value::Number(_) | Value::Bool(_) => Ok((k, v.to_string())),
            _ => Err(CliError::usage(format!("--values: `{k}` must be a string"))),
        })
        .collect()
}

pub fn run(cmd: AgentCommand, config: &CliConfig, out: Output) -> Result<(), CliError> {
    let client = |args: &ApiArgs| ApiClient::new(args, config);
    match cmd {
        AgentCommand::Run(args) => serve(args, config, out),
        AgentCommand::Status(api) => {
            out.record(&client(&api)?.get("/status")?);
            Ok(())
        }
        AgentCommand::Invite(args) => {
            out.record(&client(&args.api)?.post("/invitations", json!({ "label": args.label }))?);
            Ok(())
        }
        AgentCommand::Connect(args) => {
            let invitation = inline_or_file(&args.invitation)?;
            let view = client(&args.api)?.post("/connections", json!({ "invitation": invitation, "alias": args.alias }))?;
            out.record(&view);
            Ok(())
        }
        AgentCommand::Connections(api) => {
            out.list(client(&api)?.get("/connections")?.as_array().map(Vec::as_slice).unwrap_or_default());
            Ok(())
        }
        AgentCommand::Issue(args) => {
            let api = client(&args.api)?;
            let values = parse_values(&args.values)?;
            let connection_id = api.connection(&args.to)?;
            let schema_id = api.issuer_schema(&args.schema)?;
            let body = json!({ "connection_id": connection_id, "schema_id": schema_id, "values": values });
            out.record(&api.post("/issue", body)?);
            Ok(())
        }
        AgentCommand::RequestProof(args) => {
            let api = client(&args.api)?;
            let requested = match (&args.request, &args.schema) {
                (Some(req), _) => serde_json::from_str::<Value>(&inline_or_file(req)?)
                    .map_err(|e| CliError::usage(format!("--request: {e}")))?,
                (None, Some(schema)) => {
                    let schema_id = match (&args.authority, schema.contains(':')) {
                        (_, true) => schema.clone(),
                        (Some(did), false) => SchemaRecord::derive_id(schema, &args.schema_version, did),
                        (None, false) => api.issuer_schema(schema).map_err(|_| {
                            CliError::usage("pass the full schema id, or the schema name with --authority")
                        })?,
                    };
                    json!([{ "schema_id": schema_id, "attribute_names": args.attributes, "cred_def_id": args.cred_def }])
                }
                (None, None) => return Err(CliError::usage("--schema or --request is required")),
            };
            let connection_id = api.connection(&args.to)?;
            let report = api.post("/proof-requests", json!({ "connection_id": connection_id, "requested": requested }))?;
            out.record(&report);
            if report["verdict"] == "VALID" {
                Ok(())
            } else {
                Err(CliError::protocol("VERDICT_INVALID", "the presentation did not verify")
                    .with("failed", &report["checks"]))
            }
        }
        AgentCommand::Credentials {
            cmd: CredentialsCommand::List(api),
        } => {
            out.list(client(&api)?.get("/credentials")?.as_array().map(Vec::as_slice).unwrap_or_default());
            Ok(())
        }
        AgentCommand::Revoke(args) => {
            out.record(&client(&args.api)?.post("/revoke", json!({ "credential_id": args.credential }))?);
            Ok(())
        }
        AgentCommand::Pending(api) => {
            out.list(client(&api)?.get("/pending")?.as_array().map(Vec::as_slice).unwrap_or_default());
            Ok(())
        }
        AgentCommand::Approve(args) => {
            let ids = (!args.credentials.is_empty()).then_some(args.credentials);
            let path = format!("/pending/{}/approve", args.thread_id);
            out.record(&client(&args.api)?.post(&path, json!({ "credential_ids": ids }))?);
            Ok(())
        }
        AgentCommand::Decline(args) => {
            let path = format!("/pending/{}/decline", args.thread_id);
            out.record(&client(&args.api)?.post(&path, json!({}))?);
            Ok(())
        }
        AgentCommand::Ledger { cmd } => ledger(cmd, config, out),
    }
}

fn ledger(cmd: LedgerCommand, config: &CliConfig, out: Output) -> Result<(), CliError> {
    let client = |args: &ApiArgs| ApiClient::new(args, config);
    match cmd {
        LedgerCommand::Bootstrap(api) => out.record(&client(&api)?.post("/ledger/bootstrap", json!({}))?),
        LedgerCommand::PublicDid(api) => out.record(&client(&api)?.post("/ledger/public-did", json!({}))?),
        LedgerCommand::RegisterNym(args) => {
            let body = json!({ "did": args.did, "role": args.role.to_uppercase() });
            out.record(&client(&args.api)?.post("/ledger/nyms", body)?);
        }
        LedgerCommand::PublishSchema(args) => {
            let api = client(&args.api)?;
            let schemas: Vec<Value> = if args.catalog {
                healthreg_health::catalog()
                    .schemas
                    .iter()
                    .map(|s| json!({ "name": s.name, "version": s.version, "attributes": s.attributes }))
                    .collect()
            } else {
                if args.attributes.is_empty() {
                    return Err(CliError::usage("--attributes is required"));
                }
                vec![json!({ "name": args.name, "version": args.version, "attributes": args.attributes })]
            };
            let mut published = Vec::new();
            for body in schemas {
                published.push(api.post("/ledger/schemas", body)?);
            }
            out.lines(&published);
        }
        LedgerCommand::PublishCredDef(args) => {
            let body = json!({ "schema_id": args.schema, "capacity": args.capacity });
            out.record(&client(&args.api)?.post("/ledger/cred-defs", body)?);
        }
        LedgerCommand::CredDefs(api) => {
            out.list(client(&api)?.get("/cred-defs")?.as_array().map(Vec::as_slice).unwrap_or_default());
        }
    }
    Ok(())
}

fn bind(addr: &str) -> Result<TcpListener, CliError> {
    TcpListener::bind(addr).map_err(|e| CliError::infra("ENDPOINT_BUSY", format!("{addr}: {e}")))
}

fn serve(args: RunArgs, config: &CliConfig, out: Output) -> Result<(), CliError> {
    let label = args
        .label
        .or(config.label.clone())
        .ok_or_else(|| CliError::usage("--label is required"))?;
    let wallet_path = args
        .wallet
        .or(config.wallet.clone())
        .ok_or_else(|| CliError::usage("--wallet is required"))?;
    let genesis = match args.genesis.or(config.genesis.clone()) {
        Some(path) => Some(
            GenesisFile::load(&path).map_err(|e| CliError::new(EXIT_USAGE, "BAD_GENESIS", format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    let mut ledger_endpoints = args.ledger;
    if ledger_endpoints.is_empty() {
        ledger_endpoints = match &genesis {
            Some(g) => g.nodes.iter().map(|n| n.client_endpoint.clone()).collect(),
            None => config.endpoints.clone(),
        };
    }
    if ledger_endpoints.is_empty() {
        return Err(CliError::usage("no ledger endpoints (--ledger, --genesis or config file)"));
    }
    let token = match api_token(args.api_token_file.as_deref(), std::env::var("HEALTHREG_API_TOKEN").ok(), config)? {
        Some(t) => t,
        None => {
            let mut raw = [0u8; 24];
            rand::rngs::OsRng.fill_bytes(&mut raw);
            b64_encode(&raw)
        }
    };

    let inbox_listener = bind(args.listen.or(config.listen.clone()).as_deref().unwrap_or("127.0.0.1:0"))?;
    let api_listener = bind(args.api_listen.or(config.api_listen.clone()).as_deref().unwrap_or("127.0.0.1:0"))?;
    let endpoint = match args.public_endpoint.or(config.public_endpoint.clone()) {
        Some(e) => e,
        None => format!("http://{}", inbox_listener.local_addr()?),
    };

    let source = passphrase_source(args.passphrase.passphrase_file.as_deref(), config);
    let pass = read_passphrase(&source, &format!("{label} wallet"), !wallet_path.exists())?;
    let wallet = Wallet::open(&wallet_path, &pass).map_err(|e| {
        let exit = if e.code() == "WALLET_LOCKED" { EXIT_INFRA } else { EXIT_USAGE };
        CliError::new(exit, e.code(), &e)
    })?;
    drop(pass);

    let mut agent_config = AgentConfig::new(&label, &endpoint);
    agent_config.flow_timeout = Duration::from_secs(args.flow_timeout_secs);
    agent_config.fingerprint = genesis.as_ref().map(GenesisFile::fingerprint);
    let ledger = Arc::new(HttpLedgerClient::new(ledger_endpoints));
    let agent = Agent::open(agent_config, wallet, ledger, HttpWire::standard()).map_err(|e| {
        let exit = if e.is_protocol() { EXIT_PROTOCOL } else { EXIT_INFRA };
        CliError::new(exit, e.code(), &e)
    })?;
    let interactive = !args.auto_consent && std::io::stdin().is_terminal();
    agent.set_consent(Arc::new(if args.auto_consent {
        ConsentPolicy::ApproveAll
    } else {
        ConsentPolicy::Queue
    }));

    let inbox = InboxServer::start(inbox_listener, agent.inbox())?;
    let api = ApiServer::start(api_listener, &agent, &token)?;
    let generated = args.api_token_file.is_none() && std::env::var_os("HEALTHREG_API_TOKEN").is_none()
        && config.api_token.is_none() && config.api_token_file.is_none();
    out.record(&json!({
        "event": "listening",
        "label": agent.label(),
        "endpoint": agent.endpoint(),
        "inbox": inbox.endpoint(),
        "api": api.endpoint(),
        "public_did": agent.public_did(),
        "api_token": generated.then_some(&token),
        "consent": if args.auto_consent { "auto" } else if interactive { "prompt" } else { "queue" },
    }));
    let _ = std::io::stdout().flush();

    let mut next = 0;
    loop {
        for event in agent.events().wait_since(next, Duration::from_secs(1)) {
            next = event.seq + 1;
            out.record(&event);
            let _ = std::io::stdout().flush();
            if interactive && matches!(event.kind, EventKind::PendingAdded { .. }) {
                if let Some(item) = event.thread_id.as_deref().and_then(|t| agent.pending().into_iter().find(|p| p.thread_id == t)) {
                    prompt_consent(&agent, &item);
                }
            }
        }
    }
}

/// Asks on the terminal; anything but an explicit answer leaves the item
/// queued for the messaging API.
fn prompt_consent(agent: &Agent, item: &PendingItem) {
    let what = match item.kind {
        PendingKind::Offer => "offers a credential",
        PendingKind::ProofRequest => "requests a proof of",
    };
    eprintln!(
        "{} {what} [{}] with attributes: {}",
        item.peer_label,
        item.schema_ids.join(", "),
        item.attribute_names.join(", ")
    );
    eprint!("approve (a), decline (d) or leave pending (enter)? ");
    let _ = std::io::stderr().flush();
    let mut line = String::new();
    if std::io::stdin().lock().read_line(&mut line).is_err() {
        return;
    }
    let result = match line.trim() {
        "a" | "y" | "approve" => agent.approve(&item.thread_id, None),
        "d" | "n" | "decline" => agent.decline(&item.thread_id),
        _ => Ok(()),
    };
    if let Err(e) = result {
        eprintln!("{}", json!({ "error": e.code(), "detail": e.to_string() }));
    }
}
