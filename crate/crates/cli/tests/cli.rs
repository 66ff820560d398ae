use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use healthreg_node::cluster::Cluster;
use healthreg_node::NodeOptions;

const BIN: &str = env!("CARGO_BIN_EXE_healthreg");

fn healthreg(args: &[&str]) -> Command {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for var in ["HEALTHREG_CONFIG", "HEALTHREG_PASSPHRASE", "HEALTHREG_API", "HEALTHREG_API_TOKEN", "HEALTHREG_GENESIS"] {
        cmd.env_remove(var);
    }
    cmd
}

fn stderr_json(output: &Output) -> Value {
    let text = String::from_utf8_lossy(&output.stderr);
    let line = text.lines().last().unwrap_or_else(|| panic!("no stderr"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn stdout_lines(output: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&output.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("stdout line is not JSON ({e}): {l}")))
        .collect()
}

#[test]
fn unknown_scenario_lists_valid_names() {
    let output = healthreg(&["demo", "no_such_scenario"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = stderr_json(&output);
    assert_eq!(err["error"], "UNKNOWN_SCENARIO");
    assert_eq!(err["valid"].as_array().unwrap().len(), 7);
    assert!(err["valid"].as_array().unwrap().contains(&json!("immunization_boarding")));
}

#[test]
fn demo_prints_transcript_and_is_reproducible() {
    let run = || healthreg(&["demo", "prescription_purchase", "--seed", "7"]).output().unwrap();
    let first = run();
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let lines = stdout_lines(&first);
    assert!(lines.iter().any(|l| l["op"] == "revoke"));
    assert_eq!(lines.last().unwrap()["outcome"], "INVALID");
    assert_eq!(first.stdout, run().stdout);
}

#[test]
fn scenarios_lists_seven_names() {
    let output = healthreg(&["scenarios"]).output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(stdout_lines(&output).len(), 7);
}

#[test]
fn human_output_is_a_table() {
    let output = healthreg(&["--human", "scenarios"]).output().unwrap();
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.starts_with("NAME"), "{text}");
    assert!(text.contains("allergy_admission"));
}

#[test]
fn passphrase_is_never_a_bare_argument() {
    for args in [
        &["node", "new-steward", "--wallet", "w", "--passphrase", "secret"][..],
        &["agent", "run", "--label", "a", "--wallet", "w", "--passphrase", "secret"],
    ] {
        let output = healthreg(args).output().unwrap();
        assert_eq!(output.status.code(), Some(1));
        assert_eq!(stderr_json(&output)["error"], "USAGE");
    }
}

#[test]
fn unreachable_node_is_a_connection_failure() {
    let output = healthreg(&["node", "status", "--endpoint", "http://127.0.0.1:9"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = stderr_json(&output);
    assert_eq!(err["error"], "CONNECTION_FAILED");
    assert_eq!(err["failed_endpoints"], json!(["http://127.0.0.1:9"]));
}

#[test]
fn steward_wallets_feed_a_genesis_file() {
    let dir = tempfile::tempdir().unwrap();
    let pass = dir.path().join("pass.txt");
    std::fs::write(&pass, "steward passphrase\n").unwrap();
    let mut nodes = Vec::new();
    for i in 1..=4 {
        let wallet = dir.path().join(format!("node{i}.wallet"));
        let output = healthreg(&["node", "new-steward", "--wallet", wallet.to_str().unwrap()])
            .args(["--passphrase-file", pass.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
        let created = &stdout_lines(&output)[0];
        let on_disk = std::fs::read(&wallet).unwrap();
        assert!(!on_disk.windows(18).any(|w| w == b"steward passphrase"));
        nodes.push(json!({
            "node_name": format!("node{i}"),
            "verification_key": created["verification_key"],
            "replication_endpoint": format!("http://127.0.0.1:{}", 9700 + i),
            "client_endpoint": format!("http://127.0.0.1:{}", 9800 + i),
        }));
    }
    let roster = dir.path().join("roster.json");
    std::fs::write(&roster, json!({ "network_id": "test", "nodes": nodes }).to_string()).unwrap();
    let init = |out: &Path| {
        let output = healthreg(&["node", "init-genesis", "--roster", roster.to_str().unwrap()])
            .args(["--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
        stdout_lines(&output).remove(0)
    };
    let a = init(&dir.path().join("a.json"));
    let b = init(&dir.path().join("b.json"));
    assert_eq!(a["nodes"], 4);
    assert_eq!(a["fingerprint"], b["fingerprint"]);
    let genesis = healthreg_node::GenesisFile::load(&dir.path().join("a.json")).unwrap();
    assert_eq!(json!(genesis.fingerprint()), a["fingerprint"]);

    // a duplicate node name is refused
    let mut bad: Value = serde_json::from_str(&std::fs::read_to_string(&roster).unwrap()).unwrap();
    bad["nodes"][1]["node_name"] = json!("node1");
    std::fs::write(&roster, bad.to_string()).unwrap();
    let output = healthreg(&["node", "init-genesis", "--roster", roster.to_str().unwrap()])
        .args(["--out", dir.path().join("c.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert_eq!(stderr_json(&output)["error"], "BAD_GENESIS");
}

/// An `agent run` process and its messaging API coordinates.
struct AgentProcess {
    child: Child,
    api: String,
    token: String,
}

impl AgentProcess {
    fn start(dir: &Path, label: &str, genesis: &Path) -> Self {
        let mut child = healthreg(&["agent", "run", "--label", label])
            .args(["--wallet", dir.join(format!("{label}.wallet")).to_str().unwrap()])
            .args(["--genesis", genesis.to_str().unwrap()])
            .env("HEALTHREG_PASSPHRASE", format!("{label} passphrase"))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let ready: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
        assert_eq!(ready["event"], "listening");
        assert_eq!(ready["consent"], "queue");
        // keep draining the event stream
        std::thread::spawn(move || for _ in lines {});
        Self {
            child,
            api: ready["api"].as_str().unwrap().to_string(),
            token: ready["api_token"].as_str().unwrap().to_string(),
        }
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut cmd = healthreg(&["agent"]);
        cmd.args(args).env("HEALTHREG_API", &self.api).env("HEALTHREG_API_TOKEN", &self.token);
        cmd
    }

    fn ok(&self, args: &[&str]) -> Vec<Value> {
        let output = self.cmd(args).output().unwrap();
        assert_eq!(output.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&output.stderr));
        stdout_lines(&output)
    }

    fn pending_thread(&self) -> String {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            if let Some(item) = self.ok(&["pending"])[0].as_array().and_then(|a| a.first().cloned()) {
                return item["thread_id"].as_str().unwrap().to_string();
            }
            assert!(Instant::now() < deadline, "nothing became pending");
            std::thread::sleep(Duration::from_millis(100));
        }
    }
}

impl Drop for AgentProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn agent_processes_issue_and_decline_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = Cluster::http(1, &dir.path().join("ledger"), NodeOptions::default()).unwrap();
    let genesis = dir.path().join("genesis.json");
    cluster.genesis.save(&genesis).unwrap();

    let authority = AgentProcess::start(dir.path(), "authority", &genesis);
    let clinic = AgentProcess::start(dir.path(), "clinic", &genesis);
    let patient = AgentProcess::start(dir.path(), "patient", &genesis);

    // the token is required
    let output = clinic.cmd(&["status"]).env("HEALTHREG_API_TOKEN", "wrong").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert_eq!(stderr_json(&output)["error"], "UNAUTHORIZED");

    authority.ok(&["ledger", "bootstrap"]);
    let schemas = authority.ok(&["ledger", "publish-schema", "--catalog"]);
    assert_eq!(schemas.len(), 7);
    let rx_schema = schemas.iter().find(|s| s["name"] == "drug_prescription").unwrap()["schema_id"]
        .as_str()
        .unwrap()
        .to_string();
    let clinic_did = clinic.ok(&["ledger", "public-did"])[0]["did"].as_str().unwrap().to_string();
    authority.ok(&["ledger", "register-nym", "--did", &clinic_did, "--role", "steward"]);
    clinic.ok(&["ledger", "publish-cred-def", "--schema", &rx_schema, "--capacity", "64"]);

    assert_eq!(patient.ok(&["credentials", "list"]), vec![json!([])]);

    let invitation = clinic.ok(&["invite"])[0]["url"].as_str().unwrap().to_string();
    let invite_file = dir.path().join("invitation.txt");
    std::fs::write(&invite_file, &invitation).unwrap();
    let connected = patient.ok(&["connect", "--invitation", &format!("@{}", invite_file.display())]);
    assert_eq!(connected[0]["state"], "COMPLETE");
    assert_eq!(connected[0]["alias"], "clinic");

    // issuance waits for the patient's consent
    let rx = dir.path().join("rx.json");
    let values = json!({
        "dosage": "500 mg",
        "drug_designation": "amoxicillin",
        "issued_date": "2026-04-12",
        "patient_ref": "p-0001",
        "posology": "1 capsule every 8 hours",
        "prescriber_ref": "dr-1",
        "quantity": "21",
    });
    std::fs::write(&rx, values.to_string()).unwrap();
    let issuing = clinic
        .cmd(&["issue", "--to", "patient", "--schema", "drug_prescription", "--values", &format!("@{}", rx.display())])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let thread = patient.pending_thread();
    patient.ok(&["approve", &thread]);
    let issued = issuing.wait_with_output().unwrap();
    assert_eq!(issued.status.code(), Some(0), "{}", String::from_utf8_lossy(&issued.stderr));
    let credential_id = stdout_lines(&issued)[0]["credential_id"].as_str().unwrap().to_string();
    assert!(!credential_id.is_empty());

    let held = patient.ok(&["credentials", "list"]);
    let held = held[0].as_array().unwrap();
    assert_eq!(held.len(), 1);
    assert_eq!(held[0]["attributes"]["drug_designation"], "amoxicillin");

    // a declined proof request is a protocol-level failure
    let requesting = clinic
        .cmd(&["request-proof", "--to", "patient", "--schema", &rx_schema, "--attributes", "drug_designation"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let thread = patient.pending_thread();
    patient.ok(&["decline", &thread]);
    let declined = requesting.wait_with_output().unwrap();
    assert_eq!(declined.status.code(), Some(3));
    assert_eq!(stderr_json(&declined)["error"], "PRESENTATION_DECLINED");

    // an approved one verifies
    let requesting = clinic
        .cmd(&["request-proof", "--to", "patient", "--schema", &rx_schema, "--attributes", "dosage,quantity"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let thread = patient.pending_thread();
    patient.ok(&["approve", &thread]);
    let verified = requesting.wait_with_output().unwrap();
    assert_eq!(verified.status.code(), Some(0));
    assert_eq!(stdout_lines(&verified)[0]["verdict"], "VALID");

    let statuses = healthreg(&["node", "status", "--genesis", genesis.to_str().unwrap()]).output().unwrap();
    assert_eq!(statuses.status.code(), Some(0));
    let status = &stdout_lines(&statuses)[0];
    assert!(status["height"].as_u64().unwrap() >= 11, "{status}");
}
