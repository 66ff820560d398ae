//! Acceptance suite: one `PASS` or `FAIL` line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the console.
//! Pass a substring as the first argument to run a subset.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use healthreg_agent::events::EventKind;
use healthreg_agent::message::ProofPresentationBody;
use healthreg_agent::protocol::{self, Flow, Side, ISSUANCE_PATH};
use healthreg_agent::qr::{self, QrKind};
use healthreg_agent::wire::LocalHub;
use healthreg_agent::{
    Agent, AgentConfig, AgentError, ConsentPolicy, MessageKind, Outcome, Payload, ProtocolMessage, QrPresentation,
};
use healthreg_core::credential::{
    build_presentation, commit_attribute, issue_credential, verify_presentation, Credential, Presentation,
    ProofRequest, RequestedCredential, RevocationSlot, Verdict,
};
use healthreg_core::ledger::{
    chain_head, CredDefRecord, Ledger, LedgerTransaction, Query, Rejection, RevocationRegistryRecord,
    RevocationUpdate, Role, SchemaRecord, TxPayload, Bitmap,
};
use healthreg_core::wallet::{KdfParams, RecordKind, Wallet, WalletError, WalletRecord, SEALED_OFFSET};
use healthreg_core::workload::{Actor, WorkloadGenerator};
use healthreg_core::{canonical, Did, Digest, KeyPair};
use healthreg_health::{run_scenario, scenario, SCENARIO_NAMES};
use healthreg_node::cluster::Cluster;
use healthreg_node::{quorum, CommitObserver, NodeOptions};

type Outcome_ = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- ledger

fn inject_invalid(ledger: &mut Ledger, actors: &[Actor], next: Option<&LedgerTransaction>, r: &mut ChaCha20Rng) -> Result<usize, String> {
    let before = (ledger.height(), ledger.root_hash());
    let state = ledger.state();
    let registered: Vec<&Actor> = actors
        .iter()
        .filter(|a| state.resolve(&Query::Did(a.did.clone())).is_ok())
        .collect();
    let authority = registered.iter().find(|a| a.role == Role::Authority).ok_or("no authority")?;
    let stranger = Actor::generate(r, Role::Authority);

    let mut cases: Vec<(&str, LedgerTransaction, bool)> = Vec::new();
    let schema = SchemaRecord::new("injected", "1.0", &stranger.did, &["a"]);
    cases.push(("UNKNOWN_SUBMITTER", stranger.sign(TxPayload::Schema(schema)), false));
    if let Some(next) = next {
        let mut forged = next.clone();
        forged.signature.0[r.gen_range(0..64)] ^= 0x01;
        cases.push(("BAD_SIGNATURE", forged, true));
        let mut skipped = next.clone();
        skipped.seq_no += 1;
        cases.push(("CHAIN_MISMATCH", skipped, true));
    }
    let first = ledger.log()[0].clone();
    cases.push(("DUPLICATE_ID", first, false));
    let orphan = CredDefRecord::new("absent:1.0:did:shr:none", &authority.did, authority.keys.public_key);
    cases.push(("MISSING_DEPENDENCY", authority.sign(TxPayload::CredDef(orphan)), false));
    let mut bad_version = SchemaRecord::new("badver", "1.0", &authority.did, &["a"]);
    bad_version.version = "one".into();
    cases.push(("MALFORMED", authority.sign(TxPayload::Schema(bad_version)), false));
    if let Some(member) = registered.iter().find(|a| a.role == Role::Member) {
        let schema = SchemaRecord::new("by_member", "1.0", &member.did, &["a"]);
        cases.push(("UNAUTHORIZED_ROLE", member.sign(TxPayload::Schema(schema)), false));
    }
    if let Some(reg) = state.revocations.values().find(|r| r.revoked_bitmap.count_ones() > 0) {
        let issuer_did = &state.cred_defs[&reg.cred_def_id].issuer_did;
        if let Some(issuer) = actors.iter().find(|a| &a.did == issuer_did) {
            let update = RevocationUpdate {
                registry_id: reg.registry_id.clone(),
                revoked_bitmap: Bitmap::zeroed(reg.capacity),
            };
            cases.push(("BITMAP_REGRESSION", issuer.sign(TxPayload::RevocUpdate(update)), false));
        }
    }

    let n = cases.len();
    for (expected, tx, positioned) in cases {
        let got = if positioned { ledger.append(tx).err() } else { ledger.submit(tx).err() };
        let code = got.as_ref().map(Rejection::code);
        ensure!(code == Some(expected), "expected {expected}, got {code:?}");
        ensure!((ledger.height(), ledger.root_hash()) == before, "a rejected tx changed the state");
    }
    Ok(n)
}

fn ledger_determinism() -> Outcome_ {
    let mut r = rng(0x1ed6e5);
    let mut generator = WorkloadGenerator::new(&mut r);
    generator.generate(&mut r, 1000);
    let log = Arc::new(generator.ledger.log().to_vec());
    ensure!(log.len() == 1001, "workload has {} txs", log.len());

    let replicas: Vec<_> = (0..3)
        .map(|i| {
            let log = log.clone();
            let actors = generator.actors.clone();
            std::thread::spawn(move || -> Result<(Digest, usize), String> {
                let mut r = rng(i);
                let mut ledger = Ledger::new();
                let mut injected = 0;
                for (k, tx) in log.iter().enumerate() {
                    // replica 0 also sees invalid transactions along the way
                    if i == 0 && k > 0 && k % 250 == 0 {
                        injected += inject_invalid(&mut ledger, &actors, Some(tx), &mut r)?;
                    }
                    ledger.append(tx.clone()).map_err(|e| format!("replica {i} rejected tx {k}: {e}"))?;
                }
                if i == 0 {
                    injected += inject_invalid(&mut ledger, &actors, None, &mut r)?;
                }
                Ok((ledger.root_hash(), injected))
            })
        })
        .collect();
    let mut roots = Vec::new();
    let mut injected = 0;
    for handle in replicas {
        let (root, n) = handle.join().map_err(|_| "replica panicked".to_string())??;
        roots.push(root);
        injected += n;
    }
    ensure!(roots.windows(2).all(|w| w[0] == w[1]), "root hashes differ: {roots:?}");
    ensure!(roots[0] == generator.ledger.root_hash(), "replay differs from the generator");
    ensure!(Some(roots[0]) == chain_head(log.iter()), "root is not the chain head");
    Ok(format!("1000 txs on 3 replicas, root {}, {injected} invalid txs rejected with the expected reason", roots[0]))
}

#[derive(Default)]
struct Recorder {
    seen: Mutex<HashMap<u64, Digest>>,
    conflicts: Mutex<Vec<(String, u64)>>,
}

impl CommitObserver for Recorder {
    fn on_commit(&self, node: &str, tx: &LedgerTransaction) {
        let digest = healthreg_core::crypto::sha256(&tx.canonical_bytes());
        if *self.seen.lock().unwrap().entry(tx.seq_no).or_insert(digest) != digest {
            self.conflicts.lock().unwrap().push((node.to_string(), tx.seq_no));
        }
    }
}

fn consensus_synchronization() -> Outcome_ {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let recorder = Arc::new(Recorder::default());
    let options = NodeOptions {
        observer: Some(recorder.clone()),
        ..NodeOptions::default()
    };
    let mut cluster = Cluster::http(4, dir.path(), options).map_err(|e| e.to_string())?;
    let client = cluster.client();
    let mut r = rng(0xc0425);
    let mut generator = WorkloadGenerator::new(&mut r);
    generator.generate(&mut r, 199);
    let txs = generator.ledger.log().to_vec();
    for (i, tx) in txs.into_iter().enumerate() {
        if i == 50 {
            cluster.crash(3);
        }
        if i == 150 {
            cluster.restart(3).map_err(|e| e.to_string())?;
        }
        client.submit(tx).map_err(|e| format!("tx {i}: {e}"))?;
    }
    let quiet = Instant::now();
    ensure!(cluster.wait_converged(Duration::from_secs(10)), "no convergence within 10 s");
    let took = quiet.elapsed();
    ensure!(took < Duration::from_secs(10), "convergence took {took:?}");
    let live = cluster.live();
    ensure!(live.len() == 4, "{} live nodes", live.len());
    ensure!(live.iter().all(|n| n.height() == 200), "heights {:?}", live.iter().map(|n| n.height()).collect::<Vec<_>>());
    ensure!(live.windows(2).all(|w| w[0].root_hash() == w[1].root_hash()), "root hashes differ");
    let conflicts = recorder.conflicts.lock().unwrap().clone();
    ensure!(conflicts.is_empty(), "seq_no conflicts: {conflicts:?}");
    Ok(format!(
        "4 HTTP nodes, node4 down for txs 51-150, converged at height 200 {} ms after the last submit, no seq_no conflict",
        took.as_millis()
    ))
}

fn quorum_arithmetic() -> Outcome_ {
    let options = NodeOptions {
        ordering_timeout: Duration::from_millis(500),
        ..NodeOptions::default()
    };
    let mut summary = Vec::new();
    for n in [1usize, 2, 3, 4, 5, 7] {
        let q = quorum(n);
        ensure!(q == n / 2 + 1, "quorum({n}) = {q}");
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cluster = Cluster::local(n, dir.path(), options.clone()).map_err(|e| e.to_string())?;
        ensure!(cluster.genesis.quorum() == q, "genesis quorum for n={n}");
        let leader = cluster.node(0).ok_or("no leader")?;
        let mut r = rng(n as u64);
        let mut generator = WorkloadGenerator::new(&mut r);
        generator.generate(&mut r, 1);
        let mut txs = generator.ledger.log().to_vec().into_iter();
        for i in q..n {
            cluster.crash(i);
        }
        leader
            .submit(txs.next().unwrap())
            .map_err(|e| format!("n={n}: write with {q} live nodes failed: {e}"))?;
        if q >= 2 {
            cluster.crash(q - 1);
            let err = leader.submit(txs.next().unwrap()).err().map(|e| e.code());
            ensure!(err == Some("NO_QUORUM"), "n={n}: write with {} live nodes gave {err:?}", q - 1);
        }
        summary.push(format!("{n}->{q}"));
    }
    Ok(format!("n->q {}; writes succeed at q live nodes, NO_QUORUM at q-1", summary.join(" ")))
}

// ----------------------------------------------------------- credentials

struct CredWorld {
    ledger: Ledger,
    issuer: Actor,
    holder: KeyPair,
    holder_did: Did,
    verifier: Did,
    schema: SchemaRecord,
    cred_def: CredDefRecord,
    registry: RevocationRegistryRecord,
}

impl CredWorld {
    fn new(attributes: &[&str], r: &mut ChaCha20Rng) -> Self {
        let authority = Actor::generate(r, Role::Authority);
        let issuer = Actor::generate(r, Role::Steward);
        let holder = KeyPair::generate(r);
        let verifier = KeyPair::generate(r);
        let mut ledger = Ledger::new();
        ledger.submit(authority.genesis_nym()).unwrap();
        ledger.submit(authority.sign(TxPayload::Nym(issuer.nym_record()))).unwrap();
        let schema = SchemaRecord::new("fixture", "1.0", &authority.did, attributes);
        ledger.submit(authority.sign(TxPayload::Schema(schema.clone()))).unwrap();
        let cred_def = CredDefRecord::new(&schema.schema_id, &issuer.did, issuer.keys.public_key);
        ledger.submit(issuer.sign(TxPayload::CredDef(cred_def.clone()))).unwrap();
        let registry = RevocationRegistryRecord::new(&cred_def.cred_def_id, "main", 1024);
        ledger.submit(issuer.sign(TxPayload::RevocInit(registry.clone()))).unwrap();
        Self {
            ledger,
            issuer,
            holder_did: Did::from_public_key(&holder.public_key),
            holder,
            verifier: Did::from_public_key(&verifier.public_key),
            schema,
            cred_def,
            registry,
        }
    }

    fn issue(&self, values: &BTreeMap<String, String>, index: u32, r: &mut ChaCha20Rng) -> Credential {
        let slot = RevocationSlot {
            registry: &self.registry,
            index,
        };
        issue_credential(&self.issuer.keys, &self.cred_def, &self.schema, &self.holder_did, values, slot, r).unwrap()
    }

    fn request(&self, attrs: &[String], r: &mut ChaCha20Rng) -> ProofRequest {
        let item = RequestedCredential {
            schema_id: self.schema.schema_id.clone(),
            attribute_names: attrs.to_vec(),
            cred_def_id: None,
        };
        ProofRequest::new(self.verifier.clone(), vec![item], r)
    }

    fn present(&self, credential: &Credential, request: &ProofRequest) -> Presentation {
        let keys = |did: &Did| (did == &self.holder_did).then(|| self.holder.clone());
        build_presentation(std::slice::from_ref(credential), request, &keys).unwrap()
    }
}

fn token(r: &mut ChaCha20Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    (0..len).map(|_| ALPHABET[r.gen_range(0..ALPHABET.len())] as char).collect()
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

fn credential_soundness() -> Outcome_ {
    let mut r = rng(0x7a3e);
    let attrs = ["drug", "dosage", "quantity", "posology", "patient_ref", "prescriber_ref"];
    let w = CredWorld::new(&attrs, &mut r);
    let values: BTreeMap<String, String> = attrs.iter().map(|a| (a.to_string(), format!("{a}:{}", token(&mut r, 8)))).collect();
    let credential = w.issue(&values, 3, &mut r);
    let disclosed = vec!["dosage".to_string(), "drug".to_string(), "posology".to_string()];
    let request = w.request(&disclosed, &mut r);
    let fixture = w.present(&credential, &request);
    let report = verify_presentation(&fixture, &request, &w.ledger);
    ensure!(report.verdict == Verdict::Valid, "untampered fixture: {report:?}");

    let mut mutations = 0usize;
    let mut check = |bad: Presentation, site: String| -> Result<(), String> {
        mutations += 1;
        let verdict = verify_presentation(&bad, &request, &w.ledger).verdict;
        ensure!(verdict == Verdict::Invalid, "mutation at {site} still verifies");
        Ok(())
    };
    for (i, entry) in fixture.credentials.iter().enumerate() {
        for (name, attr) in &entry.disclosed {
            for b in 0..attr.value.len() {
                let mut p = fixture.clone();
                let a = p.credentials[i].disclosed.get_mut(name).unwrap();
                let mut bytes = a.value.clone().into_bytes();
                bytes[b] ^= 0x01;
                a.value = String::from_utf8(bytes).unwrap();
                check(p, format!("value {name}[{b}]"))?;
            }
            for b in 0..attr.salt.0.len() {
                let mut p = fixture.clone();
                p.credentials[i].disclosed.get_mut(name).unwrap().salt.0[b] ^= 0x01;
                check(p, format!("salt {name}[{b}]"))?;
            }
        }
        for k in 0..entry.commitments.len() {
            for b in 0..32 {
                let mut p = fixture.clone();
                p.credentials[i].commitments[k].commitment.0[b] ^= 0x01;
                check(p, format!("commitment {k}[{b}]"))?;
            }
        }
        for b in 0..64 {
            let mut p = fixture.clone();
            p.credentials[i].issuer_signature.0[b] ^= 0x01;
            check(p, format!("issuer signature[{b}]"))?;
            let mut p = fixture.clone();
            p.holder_signatures[i].0[b] ^= 0x01;
            check(p, format!("holder signature[{b}]"))?;
        }
    }
    for b in 0..fixture.nonce.0.len() {
        let mut p = fixture.clone();
        p.nonce.0[b] ^= 0x01;
        check(p, format!("nonce[{b}]"))?;
    }
    Ok(format!("fixture VALID; {mutations} single-byte mutations, all INVALID"))
}

/// A four-agent network over one in-process node and an in-process hub
/// that records every envelope.
struct AgentWorld {
    _dir: tempfile::TempDir,
    _cluster: Cluster,
    hub: Arc<LocalHub>,
    issuer: Arc<Agent>,
    holder: Arc<Agent>,
    verifier: Arc<Agent>,
}

impl AgentWorld {
    fn new(attributes: &[&str], capacity: u32) -> Result<(Self, SchemaRecord), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cluster = Cluster::local(1, &dir.path().join("net"), NodeOptions::default()).map_err(|e| e.to_string())?;
        let ledger = cluster.client();
        let hub = LocalHub::new();
        let open = |label: &str, seed: u64| -> Result<Arc<Agent>, String> {
            let wallet = Wallet::open_with(dir.path().join(label), "acceptance", KdfParams::light())
                .map_err(|e| e.to_string())?;
            let endpoint = format!("local://{label}");
            let mut config = AgentConfig::new(label, &endpoint).seed(seed);
            config.flow_timeout = Duration::from_secs(10);
            let agent = Agent::open(config, wallet, ledger.clone(), hub.clone()).map_err(|e| e.to_string())?;
            hub.register(&endpoint, agent.inbox());
            Ok(agent)
        };
        let authority = open("authority", 11)?;
        let issuer = open("issuer", 12)?;
        let holder = open("holder", 13)?;
        let verifier = open("verifier", 14)?;
        let err = |e: AgentError| e.to_string();
        authority.bootstrap_authority().map_err(err)?;
        let issuer_did = issuer.ensure_public_did().map_err(err)?;
        authority.register_nym(&issuer_did, Role::Steward).map_err(err)?;
        let schema = authority.publish_schema("acceptance", "1.0", attributes).map_err(err)?;
        issuer.publish_cred_def(&schema.schema_id, Some(capacity)).map_err(err)?;
        holder.set_consent(Arc::new(ConsentPolicy::ApproveAll));
        Ok((
            Self {
                _dir: dir,
                _cluster: cluster,
                hub,
                issuer,
                holder,
                verifier,
            },
            schema,
        ))
    }

    fn connect(&self, inviter: &Agent, invitee: &Agent) -> Result<String, String> {
        let invitation = inviter.create_invitation(None).map_err(|e| e.to_string())?;
        let id = invitee.connect(&invitation, None).map_err(|e| e.to_string())?;
        wait_until(|| inviter.connection(&id).map(|c| c.state.as_str() == "COMPLETE").unwrap_or(false))?;
        Ok(id)
    }
}

fn wait_until(mut f: impl FnMut() -> bool) -> Result<(), String> {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !f() {
        ensure!(Instant::now() < deadline, "condition not reached within 10 s");
        std::thread::sleep(Duration::from_millis(2));
    }
    Ok(())
}

fn selective_disclosure() -> Outcome_ {
    const CREDENTIALS: usize = 500;
    const WIRE_FLOWS: usize = 100;
    let mut r = rng(0x5e1ec7);
    let names: Vec<String> = (0..8).map(|i| format!("field_{i}")).collect();
    let mut disclosed_total = 0;

    // serialized presentations, with commitment recomputation
    let all: Vec<&str> = names.iter().map(String::as_str).collect();
    let w = CredWorld::new(&all, &mut r);
    for n in 0..CREDENTIALS {
        let values: BTreeMap<String, String> = names.iter().map(|a| (a.clone(), token(&mut r, 20))).collect();
        let credential = w.issue(&values, n as u32, &mut r);
        let chosen: Vec<String> = names.iter().filter(|_| r.gen_bool(0.5)).cloned().collect();
        let request = w.request(&chosen, &mut r);
        let p = w.present(&credential, &request);
        let bytes = canonical::to_vec(&p).map_err(|e| e.to_string())?;
        for (name, value) in &values {
            let shown = contains(&bytes, value.as_bytes());
            ensure!(shown == chosen.contains(name), "credential {n}: `{name}` disclosed={shown}, requested={}", chosen.contains(name));
        }
        let entry = &p.credentials[0];
        ensure!(entry.disclosed.len() == chosen.len(), "credential {n}: disclosed set differs");
        for (name, attr) in &entry.disclosed {
            let committed = entry.commitments.iter().find(|c| &c.name == name).ok_or("commitment missing")?;
            ensure!(commit_attribute(name, &attr.value, &attr.salt) == committed.commitment, "credential {n}: `{name}` does not match its commitment");
            disclosed_total += 1;
        }
        ensure!(verify_presentation(&p, &request, &w.ledger).is_valid(), "credential {n}: presentation invalid");
    }

    // through agents: envelopes are sealed, so no attribute value may
    // cross the wire in clear
    let (world, schema) = AgentWorld::new(&all, WIRE_FLOWS as u32 + 8)?;
    let issuing = world.connect(&world.issuer, &world.holder)?;
    let verifying = world.connect(&world.verifier, &world.holder)?;
    let mut issued: Vec<String> = Vec::new();
    for n in 0..WIRE_FLOWS {
        let values: BTreeMap<String, String> = names.iter().map(|a| (a.clone(), format!("W{}", token(&mut r, 19)))).collect();
        world.issuer.issue(&issuing, &schema.schema_id, values.clone()).map_err(|e| format!("issue {n}: {e}"))?;
        issued.extend(values.into_values());
        let mut chosen = names.clone();
        chosen.shuffle(&mut r);
        chosen.truncate(r.gen_range(0..=names.len()));
        let requested = vec![RequestedCredential {
            schema_id: schema.schema_id.clone(),
            attribute_names: chosen,
            cred_def_id: None,
        }];
        let report = world.verifier.request_proof(&verifying, requested).map_err(|e| format!("proof {n}: {e}"))?;
        ensure!(report.is_valid(), "proof {n}: {report:?}");
    }
    let captured = world.hub.captured();
    for c in &captured {
        for value in &issued {
            ensure!(!contains(&c.bytes, value.as_bytes()), "an attribute value crossed the wire in clear to {}", c.to);
        }
    }
    Ok(format!(
        "{CREDENTIALS} credentials: {disclosed_total} disclosed values match their commitments, no undisclosed value serialized; {WIRE_FLOWS} agent issue/prove flows, {} envelopes carry no attribute value in clear",
        captured.len()
    ))
}

fn revocation() -> Outcome_ {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cluster = Cluster::local(1, &dir.path().join("net"), NodeOptions::default()).map_err(|e| e.to_string())?;
    let script = scenario("prescription_purchase").ok_or("scenario missing")?;
    let run = run_scenario(&script, cluster.client(), &dir.path().join("agents"), None);
    ensure!(run.passed(), "scenario failed: {:?}", run.result);
    let ops: Vec<(&str, &str, &[String])> = run
        .transcript
        .iter()
        .filter(|l| matches!(l.op.as_str(), "present_qr" | "revoke" | "issue"))
        .map(|l| (l.op.as_str(), l.outcome.as_str(), l.failed_checks.as_slice()))
        .collect();
    let issue = ops.iter().position(|(op, _, _)| *op == "issue").ok_or("no issue step")?;
    let revoke = ops.iter().position(|(op, _, _)| *op == "revoke").ok_or("no revoke step")?;
    let before = ops[issue..revoke].iter().find(|(op, _, _)| *op == "present_qr").ok_or("no presentation before revoke")?;
    let after = ops[revoke..].iter().find(|(op, _, _)| *op == "present_qr").ok_or("no presentation after revoke")?;
    ensure!(before.1 == "VALID", "before revocation: {}", before.1);
    ensure!(after.1 == "INVALID" && after.2 == ["revocation"], "after revocation: {} {:?}", after.1, after.2);
    Ok("issue, present VALID, revoke, present INVALID failing only the revocation check".into())
}

fn replay() -> Outcome_ {
    let attrs = ["vaccine", "dose_date", "lot_number"];
    let (w, schema) = AgentWorld::new(&attrs, 16)?;
    let issuing = w.connect(&w.issuer, &w.holder)?;
    let values: BTreeMap<String, String> = attrs.iter().map(|a| (a.to_string(), format!("{a}-value"))).collect();
    w.issuer.issue(&issuing, &schema.schema_id, values).map_err(|e| e.to_string())?;
    let conn = w.connect(&w.verifier, &w.holder)?;
    let requested = || {
        vec![RequestedCredential {
            schema_id: schema.schema_id.clone(),
            attribute_names: vec!["vaccine".into()],
            cred_def_id: None,
        }]
    };
    let start = w.hub.captured().len();
    let thread = w.verifier.start_proof_request(&conn, requested()).map_err(|e| e.to_string())?;
    ensure!(matches!(w.verifier.wait(&thread), Ok(Outcome::Verified { report }) if report.is_valid()), "first presentation did not verify");
    let captured = w.hub.captured()[start..]
        .iter()
        .find(|c| c.to == "local://verifier")
        .ok_or("presentation envelope not captured")?
        .bytes
        .clone();

    // the captured envelope again
    let err = w.verifier.receive(&captured).err().map(|e| e.code().to_string());
    ensure!(err.as_deref() == Some("NONCE_REUSED"), "re-sent envelope gave {err:?}");

    // the captured presentation as the answer to a fresh request
    let old_request = w.verifier.sent_request(&thread).ok_or("request not kept")?;
    let text = w.holder.present_qr(&old_request, None).map_err(|e| e.to_string())?;
    let old: QrPresentation = qr::decode(&text, QrKind::Presentation).map_err(|e| e.to_string())?;
    w.holder.set_consent(Arc::new(ConsentPolicy::Queue));
    let fresh = w.verifier.start_proof_request(&conn, requested()).map_err(|e| e.to_string())?;
    wait_until(|| !w.holder.pending().is_empty())?;
    let body = Payload::ProofPresentation(ProofPresentationBody {
        presentation: old.presentation,
    });
    w.holder.send_raw(&conn, ProtocolMessage::new(&fresh, body)).map_err(|e| e.to_string())?;
    let Ok(Outcome::Verified { report }) = w.verifier.wait(&fresh) else {
        return Err("no verdict for the replayed presentation".into());
    };
    ensure!(report.verdict == Verdict::Invalid, "replayed presentation verified");
    ensure!(report.failed().contains(&"nonce"), "nonce check passed: {report:?}");
    Ok(format!("re-sent envelope: NONCE_REUSED; old presentation under a fresh nonce: INVALID ({})", report.failed().join(",")))
}

// ---------------------------------------------------------------- wallet

fn wallet_secrecy() -> Outcome_ {
    const WALLETS: usize = 100;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(0x3a11e7);
    let mut flips = 0usize;
    let mut markers = 0usize;
    for i in 0..WALLETS {
        let path = dir.path().join(format!("w{i}.wallet"));
        let pass = format!("pass-{}", token(&mut r, 12));
        let mut secrets: Vec<Vec<u8>> = vec![pass.clone().into_bytes()];
        {
            let wallet = Wallet::open_with(&path, &pass, KdfParams::light()).map_err(|e| e.to_string())?;
            let mut seed = [0u8; 32];
            r.fill_bytes(&mut seed);
            let keys = KeyPair::from_seed(&seed);
            wallet
                .put(WalletRecord::new("key", RecordKind::Keypair, &keys).map_err(|e| e.to_string())?.tag("purpose", "public"))
                .map_err(|e| e.to_string())?;
            secrets.push(seed.to_vec());
            secrets.push(healthreg_core::bytes::b64_encode(&seed).into_bytes());
            for k in 0..r.gen_range(1..6) {
                let marker = format!("MARKER{}", token(&mut r, 18));
                let body = serde_json::json!({ "attribute_values": { "diagnosis": marker, "n": k } });
                wallet
                    .put(WalletRecord::new(format!("credential:{k}"), RecordKind::Credential, &body).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
                secrets.push(marker.into_bytes());
            }
        }
        let original = std::fs::read(&path).map_err(|e| e.to_string())?;
        for secret in &secrets {
            ensure!(!contains(&original, secret), "wallet {i}: a secret is on disk in clear");
            markers += 1;
        }
        let wrong = Wallet::open_with(&path, &format!("{pass}x"), KdfParams::light());
        ensure!(matches!(wrong, Err(WalletError::BadPassphrase)), "wallet {i}: wrong passphrase gave {:?}", wrong.err());
        for pos in SEALED_OFFSET..original.len() {
            let mut bytes = original.clone();
            bytes[pos] ^= 1 << (pos % 8);
            std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
            let result = Wallet::open_with(&path, &pass, KdfParams::light());
            ensure!(
                matches!(result, Err(WalletError::CorruptFile(_))),
                "wallet {i}: flip at byte {pos} gave {:?}",
                result.map(|_| "an open wallet").map_err(|e| e.code())
            );
            flips += 1;
        }
        std::fs::write(&path, &original).map_err(|e| e.to_string())?;
        ensure!(Wallet::open_with(&path, &pass, KdfParams::light()).is_ok(), "wallet {i}: restored file does not open");
    }
    Ok(format!(
        "{WALLETS} wallets: {markers} secrets absent from disk, wrong passphrase always refused, {flips} sealed-byte flips all CORRUPT_FILE"
    ))
}

// -------------------------------------------------------------- scenarios

fn scenarios() -> Outcome_ {
    let bin = env!("CARGO_BIN_EXE_healthreg");
    let mut slowest = (Duration::ZERO, String::new());
    for nodes in ["1", "4"] {
        for name in SCENARIO_NAMES {
            let start = Instant::now();
            let output = Command::new(bin)
                .args(["demo", name, "--nodes", nodes])
                .output()
                .map_err(|e| e.to_string())?;
            let took = start.elapsed();
            ensure!(
                output.status.code() == Some(0),
                "demo {name} on {nodes} node(s) exited {:?}: {}",
                output.status.code(),
                String::from_utf8_lossy(&output.stderr).trim()
            );
            ensure!(took < Duration::from_secs(30), "demo {name} on {nodes} node(s) took {took:?}");
            if took > slowest.0 {
                slowest = (took, format!("{name} on {nodes}"));
            }
        }
    }
    Ok(format!(
        "7 scenarios exit 0 on 1 in-process node and on 4 HTTP nodes; slowest {} ms ({})",
        slowest.0.as_millis(),
        slowest.1
    ))
}

fn issuance_path() -> Outcome_ {
    use MessageKind::*;
    let expected = [Invitation, ExchangeRequest, ExchangeResponse, Ack, CredOffer, CredRequest, CredIssue, Ack];
    ensure!(ISSUANCE_PATH == expected, "documented path is {ISSUANCE_PATH:?}");
    let attrs = ["drug", "dosage"];
    let (w, schema) = AgentWorld::new(&attrs, 8)?;
    let conn = w.connect(&w.issuer, &w.holder)?;
    let values: BTreeMap<String, String> = attrs.iter().map(|a| (a.to_string(), "x".to_string())).collect();
    w.issuer.issue(&conn, &schema.schema_id, values).map_err(|e| e.to_string())?;
    wait_until(|| !w.holder.credentials().is_empty())?;

    let sent = |agent: &Agent| -> Vec<MessageKind> {
        agent
            .events()
            .since(0)
            .into_iter()
            .filter_map(|e| match e.kind {
                EventKind::MessageSent { kind } if kind != Invitation => Some(kind),
                _ => None,
            })
            .collect()
    };
    let mut from_issuer = sent(&w.issuer).into_iter();
    let mut from_holder = sent(&w.holder).into_iter();
    let mut observed = vec![Invitation];
    let mut steps = Vec::new();
    for c in w.hub.captured() {
        let (side, kind) = if c.to == "local://holder" {
            (Side::Opener, from_issuer.next().ok_or("unmatched delivery")?)
        } else {
            (Side::Receiver, from_holder.next().ok_or("unmatched delivery")?)
        };
        observed.push(kind);
        if observed.len() > 4 {
            steps.push((side, kind));
        }
    }
    ensure!(observed == expected, "observed {observed:?}");
    ensure!(protocol::is_complete_path(Flow::Issuance, &steps), "issuance steps do not complete the automaton");
    let names: Vec<&str> = observed.iter().map(|k| k.as_str()).collect();
    Ok(names.join(" > "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome_); 10] = [
        ("ledger_determinism", ledger_determinism),
        ("consensus_synchronization", consensus_synchronization),
        ("quorum_arithmetic", quorum_arithmetic),
        ("credential_soundness", credential_soundness),
        ("selective_disclosure", selective_disclosure),
        ("revocation", revocation),
        ("replay", replay),
        ("wallet_at_rest_secrecy", wallet_secrecy),
        ("scenarios", scenarios),
        ("issuance_path_conformance", issuance_path),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {reason}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
