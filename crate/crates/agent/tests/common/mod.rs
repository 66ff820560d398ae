#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use healthreg_agent::events::EventKind;
use healthreg_agent::wire::LocalHub;
use healthreg_agent::{Agent, AgentConfig, ConsentPolicy, MessageKind};
use healthreg_core::credential::RequestedCredential;
use healthreg_core::ledger::{CredDefRecord, Role, SchemaRecord};
use healthreg_core::wallet::{KdfParams, Wallet};
use healthreg_node::cluster::Cluster;
use healthreg_node::{LedgerClient, NodeOptions};
use tempfile::TempDir;

pub const ATTRS: [&str; 4] = ["full_name", "vaccine", "dose_date", "lot_number"];
pub const MARKER: &str = "MARKER-5e1f0c77";

pub struct World {
    pub dir: TempDir,
    pub cluster: Cluster,
    pub ledger: Arc<dyn LedgerClient>,
    pub hub: Arc<LocalHub>,
    pub authority: Arc<Agent>,
    pub issuer: Arc<Agent>,
    pub holder: Arc<Agent>,
    pub verifier: Arc<Agent>,
    pub schema: SchemaRecord,
    pub cred_def: CredDefRecord,
}

pub fn values() -> BTreeMap<String, String> {
    [
        ("full_name", "Ada Example"),
        ("vaccine", "YF-17D"),
        ("dose_date", "2026-03-01"),
        ("lot_number", MARKER),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl World {
    pub fn new() -> Self {
        Self::with_timeout(Duration::from_secs(10))
    }

    pub fn with_timeout(flow_timeout: Duration) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cluster = Cluster::local(1, &dir.path().join("net"), NodeOptions::default()).unwrap();
        let ledger = cluster.client();
        let hub = LocalHub::new();
        let open = |label: &str, seed: u64| {
            agent_on(&dir, &ledger, &hub, label, seed, flow_timeout, None)
        };
        let authority = open("authority", 1);
        let issuer = open("issuer", 2);
        let holder = open("holder", 3);
        let verifier = open("verifier", 4);

        authority.bootstrap_authority().unwrap();
        let issuer_did = issuer.ensure_public_did().unwrap();
        authority.register_nym(&issuer_did, Role::Steward).unwrap();
        let schema = authority.publish_schema("vaccination", "1.0", &ATTRS).unwrap();
        let cred_def = issuer.publish_cred_def(&schema.schema_id, None).unwrap();
        holder.set_consent(Arc::new(ConsentPolicy::ApproveAll));
        Self {
            dir,
            cluster,
            ledger,
            hub,
            authority,
            issuer,
            holder,
            verifier,
            schema,
            cred_def,
        }
    }

    /// Connects `inviter` and `invitee`; returns (inviter side, invitee side)
    /// connection ids, which are equal.
    pub fn connect(&self, inviter: &Agent, invitee: &Agent) -> String {
        let invitation = inviter.create_invitation(None).unwrap();
        let id = invitee.connect(&invitation, None).unwrap();
        wait_until(|| inviter.connection(&id).map(|c| c.state.as_str() == "COMPLETE").unwrap_or(false));
        id
    }

    pub fn requested(&self, names: &[&str]) -> Vec<RequestedCredential> {
        vec![RequestedCredential {
            schema_id: self.schema.schema_id.clone(),
            attribute_names: names.iter().map(|s| s.to_string()).collect(),
            cred_def_id: None,
        }]
    }

    /// Connection plus one issued credential.
    pub fn issued(&self) -> (String, String) {
        let conn = self.connect(&self.issuer, &self.holder);
        let cred = self.issuer.issue(&conn, &self.schema.schema_id, values()).unwrap();
        wait_until(|| !self.holder.credentials().is_empty());
        (conn, cred)
    }
}

pub fn agent_on(
    dir: &TempDir,
    ledger: &Arc<dyn LedgerClient>,
    hub: &Arc<LocalHub>,
    label: &str,
    seed: u64,
    flow_timeout: Duration,
    fingerprint: Option<healthreg_core::Digest>,
) -> Arc<Agent> {
    let wallet = Wallet::open_with(dir.path().join(format!("{label}.wallet")), "pw", KdfParams::light()).unwrap();
    let endpoint = format!("local://{label}");
    let mut config = AgentConfig::new(label, &endpoint).seed(seed);
    config.flow_timeout = flow_timeout;
    config.fingerprint = fingerprint;
    let agent = Agent::open(config, wallet, ledger.clone(), hub.clone()).unwrap();
    hub.register(&endpoint, agent.inbox());
    agent
}

pub fn wait_until(mut f: impl FnMut() -> bool) {
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while !f() {
        assert!(std::time::Instant::now() < deadline, "condition not reached");
        std::thread::sleep(Duration::from_millis(5));
    }
}

/// Kinds each agent reports sending, in order.
pub fn sent_kinds(agent: &Agent) -> Vec<(Option<String>, MessageKind)> {
    agent
        .events()
        .since(0)
        .into_iter()
        .filter_map(|e| match e.kind {
            EventKind::MessageSent { kind } => Some((e.thread_id, kind)),
            _ => None,
        })
        .collect()
}
