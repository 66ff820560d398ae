use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use healthreg_core::ledger::{chain_next, Ledger, LedgerRead, LedgerTransaction, Query, ReadError, Resolved};
use healthreg_core::wallet::Wallet;
use healthreg_core::{Digest, KeyPair};

use crate::client::{LedgerClient, NodeStatus, Receipt, SubmitError};
use crate::genesis::{GenesisFile, GenesisNode};
use crate::message::{ReplicationKind, ReplicationMessage};
use crate::steward;
use crate::store::Store;
use crate::NodeError;

/// Carries replication messages and forwarded submits between nodes.
pub trait Transport: Send + Sync {
    fn replicate(&self, to: &GenesisNode, msg: &ReplicationMessage) -> Result<ReplicationMessage, String>;
    fn forward_submit(&self, to: &GenesisNode, tx: &LedgerTransaction) -> Result<Receipt, SubmitError>;
}

/// Sees every local commit, in order.
pub trait CommitObserver: Send + Sync {
    fn on_commit(&self, node: &str, tx: &LedgerTransaction);
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub genesis: GenesisFile,
    pub own_name: String,
    pub steward_wallet_path: PathBuf,
    pub data_dir: PathBuf,
}

#[derive(Clone)]
pub struct NodeOptions {
    /// PROPOSE → quorum deadline.
    pub ordering_timeout: Duration,
    pub catchup_batch: usize,
    /// When false, followers answer submits with NOT_LEADER_REDIRECT.
    pub forward_submits: bool,
    /// Catch up with the most advanced peer while opening.
    pub boot_sync: bool,
    pub observer: Option<Arc<dyn CommitObserver>>,
}

impl Default for NodeOptions {
    fn default() -> Self {
        Self {
            ordering_timeout: Duration::from_secs(2),
            catchup_batch: 100,
            forward_submits: true,
            boot_sync: true,
            observer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatchUpError {
    #[error("transaction {seq_no} does not extend the local chain")]
    ChainMismatch { seq_no: u64 },
    #[error("peer unavailable: {0}")]
    PeerUnavailable(String),
}

impl CatchUpError {
    pub fn code(&self) -> &'static str {
        match self {
            CatchUpError::ChainMismatch { .. } => "CHAIN_MISMATCH",
            CatchUpError::PeerUnavailable(_) => "PEER_UNAVAILABLE",
        }
    }
}

struct Committed {
    ledger: Ledger,
    store: Store,
}

/// One ledger replica.
///
/// Ordering (submit, PROPOSE/COMMIT handling, catch-up, promotion) runs
/// under a single pipeline lock; reads and catch-up serving only take the
/// committed-state read lock.
pub struct Node {
    name: String,
    genesis: GenesisFile,
    fingerprint: Digest,
    keys: KeyPair,
    transport: Arc<dyn Transport>,
    options: NodeOptions,
    view: AtomicU64,
    pipeline: Mutex<()>,
    pending: Mutex<Option<LedgerTransaction>>,
    committed: RwLock<Committed>,
    _wallet: Wallet,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("name", &self.name).finish_non_exhaustive()
    }
}

impl Node {
    /// Opens the steward wallet, replays the persisted log and catches up
    /// with the most advanced reachable peer.
    pub fn open(
        config: &NodeConfig,
        passphrase: &str,
        transport: Arc<dyn Transport>,
        options: NodeOptions,
    ) -> Result<Arc<Self>, NodeError> {
        config.genesis.validate()?;
        let own = config
            .genesis
            .node(&config.own_name)
            .ok_or_else(|| NodeError::NotInGenesis(config.own_name.clone()))?;
        let wallet = steward::open_steward_wallet(&config.steward_wallet_path, passphrase)?;
        let keys = steward::steward_key(&wallet)?;
        if keys.public_key != own.verification_key {
            return Err(NodeError::KeyMismatch);
        }
        let fingerprint = config.genesis.fingerprint();
        let (store, txs) = Store::open(&config.data_dir, &fingerprint)?;
        let mut ledger = Ledger::new();
        for tx in txs {
            let seq = tx.seq_no;
            ledger
                .append(tx)
                .map_err(|r| NodeError::Store(format!("persisted tx {seq} does not replay: {r}")))?;
        }
        log::info!("{}: replayed {} transactions", config.own_name, ledger.height());

        let node = Arc::new(Self {
            name: config.own_name.clone(),
            genesis: config.genesis.clone(),
            fingerprint,
            keys,
            transport,
            options,
            view: AtomicU64::new(0),
            pipeline: Mutex::new(()),
            pending: Mutex::new(None),
            committed: RwLock::new(Committed { ledger, store }),
            _wallet: wallet,
        });
        if node.options.boot_sync && node.genesis.nodes.len() > 1 {
            let _guard = node.lock_pipeline();
            if let Err(e) = node.sync_with_best_peer() {
                log::warn!("{}: boot catch-up: {e}", node.name);
            }
        }
        Ok(node)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn genesis(&self) -> &GenesisFile {
        &self.genesis
    }

    pub fn fingerprint(&self) -> Digest {
        self.fingerprint
    }

    pub fn view(&self) -> u64 {
        self.view.load(Ordering::SeqCst)
    }

    pub fn leader(&self) -> &GenesisNode {
        self.genesis.leader_of(self.view())
    }

    pub fn is_leader(&self) -> bool {
        self.leader().node_name == self.name
    }

    pub fn height(&self) -> u64 {
        self.committed.read().unwrap().ledger.height()
    }

    pub fn root_hash(&self) -> Digest {
        self.committed.read().unwrap().ledger.root_hash()
    }

    /// Snapshot of the committed log.
    pub fn log(&self) -> Vec<LedgerTransaction> {
        self.committed.read().unwrap().ledger.log().to_vec()
    }

    pub fn status(&self) -> NodeStatus {
        let committed = self.committed.read().unwrap();
        let view = self.view();
        NodeStatus {
            name: self.name.clone(),
            network_id: self.genesis.network_id.clone(),
            fingerprint: self.fingerprint,
            height: committed.ledger.height(),
            root_hash: committed.ledger.root_hash(),
            view,
            leader: self.genesis.leader_of(view).node_name.clone(),
        }
    }

    pub fn read(&self, query: &Query) -> Result<Resolved, ReadError> {
        LedgerRead::resolve(self.committed.read().unwrap().ledger.state(), query)
    }

    fn lock_pipeline(&self) -> MutexGuard<'_, ()> {
        self.pipeline.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn adopt_view(&self, view: u64) {
        self.view.fetch_max(view, Ordering::SeqCst);
    }

    fn message(&self, kind: ReplicationKind, seq_no: u64) -> ReplicationMessage {
        ReplicationMessage::new(kind, self.view(), seq_no, &self.name, self.fingerprint)
    }

    fn peers(&self) -> impl Iterator<Item = &GenesisNode> {
        self.genesis.nodes.iter().filter(move |n| n.node_name != self.name)
    }

    /// Orders `tx` if this node leads, otherwise forwards it to the leader.
    pub fn submit(&self, tx: LedgerTransaction) -> Result<Receipt, SubmitError> {
        let leader = self.leader().clone();
        if leader.node_name != self.name {
            if !self.options.forward_submits {
                return Err(SubmitError::NotLeaderRedirect {
                    leader: leader.node_name,
                    endpoint: leader.client_endpoint,
                });
            }
            return self.transport.forward_submit(&leader, &tx);
        }
        self.submit_forwarded(tx)
    }

    /// Entry point for submits forwarded by a follower: orders `tx` here or
    /// redirects, never forwards again.
    pub fn submit_forwarded(&self, tx: LedgerTransaction) -> Result<Receipt, SubmitError> {
        let _guard = self.lock_pipeline();
        if !self.is_leader() {
            let leader = self.leader();
            return Err(SubmitError::NotLeaderRedirect {
                leader: leader.node_name.clone(),
                endpoint: leader.client_endpoint.clone(),
            });
        }
        self.order(tx)
    }

    fn order(&self, mut tx: LedgerTransaction) -> Result<Receipt, SubmitError> {
        {
            let committed = self.committed.read().unwrap();
            tx.seq_no = committed.ledger.height() + 1;
            tx.prev_hash = committed.ledger.root_hash();
            committed
                .ledger
                .state()
                .validate_transaction(&tx)
                .map_err(SubmitError::Rejected)?;
        }
        let seq = tx.seq_no;
        let propose = self.message(ReplicationKind::Propose, seq).with_tx(tx.clone()).sign(&self.keys);
        let acks = self
            .broadcast(&propose)
            .iter()
            .filter(|r| r.kind == ReplicationKind::Ack && r.accepted && r.seq_no == seq)
            .count();
        let quorum = self.genesis.quorum();
        if acks + 1 < quorum {
            log::warn!("{}: seq {seq} got {} of {quorum} acks", self.name, acks + 1);
            return Err(SubmitError::NoQuorum {
                acks: acks + 1,
                quorum,
            });
        }
        self.commit_local(&tx)
            .map_err(|e| SubmitError::PeerUnavailable { detail: e.to_string() })?;
        let commit = self.message(ReplicationKind::Commit, seq).with_tx(tx).sign(&self.keys);
        self.broadcast(&commit);
        let committed = self.committed.read().unwrap();
        Ok(Receipt {
            seq_no: seq,
            root_hash: committed.ledger.root_hash(),
        })
    }

    /// Sends `msg` to every peer in parallel and returns the authenticated
    /// replies that arrive within the ordering timeout.
    fn broadcast(&self, msg: &ReplicationMessage) -> Vec<ReplicationMessage> {
        let (sender, receiver) = mpsc::channel();
        let mut expected = 0;
        for peer in self.peers() {
            expected += 1;
            let (transport, peer, msg, sender) = (self.transport.clone(), peer.clone(), msg.clone(), sender.clone());
            thread::spawn(move || {
                let reply = transport.replicate(&peer, &msg);
                let _ = sender.send((peer.node_name, reply));
            });
        }
        let deadline = Instant::now() + self.options.ordering_timeout;
        let mut replies = Vec::new();
        for _ in 0..expected {
            let left = deadline.saturating_duration_since(Instant::now());
            match receiver.recv_timeout(left) {
                Ok((peer, Ok(reply))) => {
                    if reply.sender != peer {
                        continue;
                    }
                    match reply.authenticate(&self.genesis, &self.fingerprint) {
                        Ok(()) => {
                            if !reply.accepted {
                                log::debug!("{}: {peer} refused: {:?}", self.name, reply.detail);
                            }
                            replies.push(reply);
                        }
                        Err(code) => log::warn!("{}: reply from {peer}: {code}", self.name),
                    }
                }
                Ok((peer, Err(e))) => log::debug!("{}: {peer} unreachable: {e}", self.name),
                Err(_) => break,
            }
        }
        replies
    }

    fn commit_local(&self, tx: &LedgerTransaction) -> Result<(), NodeError> {
        let mut committed = self.committed.write().unwrap();
        committed
            .ledger
            .state()
            .validate_transaction(tx)
            .map_err(|r| NodeError::Store(format!("commit of seq {}: {r}", tx.seq_no)))?;
        committed.store.append(tx)?;
        committed.ledger.append(tx.clone()).expect("validated above");
        let height = committed.ledger.height();
        let mut pending = self.pending.lock().unwrap();
        if pending.as_ref().is_some_and(|p| p.seq_no <= height) {
            *pending = None;
        }
        drop(pending);
        drop(committed);
        if let Some(observer) = &self.options.observer {
            observer.on_commit(&self.name, tx);
        }
        Ok(())
    }

    /// Answers one replication message. Failures are signed refusals, never
    /// transport errors.
    pub fn handle(&self, msg: ReplicationMessage) -> ReplicationMessage {
        if let Err(code) = msg.authenticate(&self.genesis, &self.fingerprint) {
            return self.message(ReplicationKind::Ack, msg.seq_no).refused(code).sign(&self.keys);
        }
        let reply = match msg.kind {
            ReplicationKind::CatchupReq => self.serve_catchup(&msg),
            ReplicationKind::Propose => {
                let _guard = self.lock_pipeline();
                self.on_propose(&msg)
            }
            ReplicationKind::Commit => {
                let _guard = self.lock_pipeline();
                self.on_commit(&msg)
            }
            ReplicationKind::Ack | ReplicationKind::CatchupResp => {
                self.message(ReplicationKind::Ack, msg.seq_no).refused("UNEXPECTED_KIND")
            }
        };
        reply.sign(&self.keys)
    }

    fn serve_catchup(&self, msg: &ReplicationMessage) -> ReplicationMessage {
        if msg.view > self.view() && self.genesis.leader_of(msg.view).node_name == msg.sender {
            self.adopt_view(msg.view);
        }
        let committed = self.committed.read().unwrap();
        let log = committed.ledger.log();
        let from = (msg.seq_no as usize).min(log.len());
        let to = (from + self.options.catchup_batch).min(log.len());
        let mut reply = self.message(ReplicationKind::CatchupResp, log.len() as u64);
        reply.txs = log[from..to].to_vec();
        reply.pending = self.pending.lock().unwrap().clone();
        reply
    }

    /// Common checks for PROPOSE and COMMIT; returns a refusal code.
    fn check_leader_message(&self, msg: &ReplicationMessage) -> Result<LedgerTransaction, &'static str> {
        let Some(tx) = msg.tx.clone() else {
            return Err("MALFORMED");
        };
        if tx.seq_no != msg.seq_no {
            return Err("MALFORMED");
        }
        if msg.view < self.view() {
            return Err("STALE_VIEW");
        }
        if self.genesis.leader_of(msg.view).node_name != msg.sender {
            return Err("NOT_LEADER");
        }
        self.adopt_view(msg.view);
        Ok(tx)
    }

    /// Commits the pending proposal if `next_prev` (the prev_hash of the
    /// leader's next transaction) proves the leader committed it; otherwise
    /// drops a superseded proposal.
    fn settle_pending(&self, next_prev: &Digest) {
        let Some(pending) = self.pending.lock().unwrap().take() else {
            return;
        };
        let (height, root) = {
            let c = self.committed.read().unwrap();
            (c.ledger.height(), c.ledger.root_hash())
        };
        if pending.seq_no == height + 1 && chain_next(&root, &pending) == *next_prev {
            if let Err(e) = self.commit_local(&pending) {
                log::warn!("{}: implicit commit failed: {e}", self.name);
            }
        }
    }

    fn on_propose(&self, msg: &ReplicationMessage) -> ReplicationMessage {
        let ack = self.message(ReplicationKind::Ack, msg.seq_no);
        let tx = match self.check_leader_message(msg) {
            Ok(tx) => tx,
            Err(code) => return ack.refused(code),
        };
        self.settle_pending(&tx.prev_hash);
        let height = self.height();
        if tx.seq_no <= height {
            let same = self.committed.read().unwrap().ledger.log()[tx.seq_no as usize - 1] == tx;
            return if same { ack } else { ack.refused("CONFLICT") };
        }
        if tx.seq_no > height + 1 {
            if let Err(e) = self.catch_up_locked(&msg.sender) {
                return ack.refused(e.code());
            }
            if self.height() + 1 != tx.seq_no {
                return ack.refused("BEHIND");
            }
        }
        if let Err(rejection) = self.committed.read().unwrap().ledger.state().validate_transaction(&tx) {
            return ack.refused(rejection.code());
        }
        *self.pending.lock().unwrap() = Some(tx);
        ack
    }

    fn on_commit(&self, msg: &ReplicationMessage) -> ReplicationMessage {
        let ack = self.message(ReplicationKind::Ack, msg.seq_no);
        let tx = match self.check_leader_message(msg) {
            Ok(tx) => tx,
            Err(code) => return ack.refused(code),
        };
        if tx.seq_no > self.height() + 1 {
            if let Err(e) = self.catch_up_locked(&msg.sender) {
                return ack.refused(e.code());
            }
        }
        let height = self.height();
        if tx.seq_no <= height {
            let same = self.committed.read().unwrap().ledger.log()[tx.seq_no as usize - 1] == tx;
            return if same { ack } else { ack.refused("CONFLICT") };
        }
        match self.commit_local(&tx) {
            Ok(()) => ack,
            Err(e) => ack.refused(format!("COMMIT_FAILED: {e}")),
        }
    }

    /// Verifies and applies a fetched range in order, stopping at the first
    /// transaction that does not extend the chain or does not validate.
    pub fn apply_range(&self, txs: &[LedgerTransaction]) -> Result<u64, CatchUpError> {
        let mut applied = 0;
        for tx in txs {
            self.commit_local(tx)
                .map_err(|_| CatchUpError::ChainMismatch { seq_no: tx.seq_no })?;
            applied += 1;
        }
        Ok(applied)
    }

    /// Fetches the transactions after this node's height from `peer`.
    pub fn fetch_range(&self, peer: &str) -> Result<ReplicationMessage, CatchUpError> {
        let target = self
            .genesis
            .node(peer)
            .ok_or_else(|| CatchUpError::PeerUnavailable(format!("unknown peer {peer}")))?;
        let req = self.message(ReplicationKind::CatchupReq, self.height()).sign(&self.keys);
        let resp = self
            .transport
            .replicate(target, &req)
            .map_err(CatchUpError::PeerUnavailable)?;
        if resp.sender != peer || resp.kind != ReplicationKind::CatchupResp {
            return Err(CatchUpError::PeerUnavailable(
                resp.detail.unwrap_or_else(|| "unexpected reply".into()),
            ));
        }
        resp.authenticate(&self.genesis, &self.fingerprint)
            .map_err(|code| CatchUpError::PeerUnavailable(code.into()))?;
        Ok(resp)
    }

    /// Catches up with `peer` until this node reaches the peer's height.
    /// Returns the number of transactions appended.
    pub fn catch_up(&self, peer: &str) -> Result<u64, CatchUpError> {
        let _guard = self.lock_pipeline();
        self.catch_up_locked(peer)
    }

    fn catch_up_locked(&self, peer: &str) -> Result<u64, CatchUpError> {
        let mut total = 0;
        loop {
            let resp = self.fetch_range(peer)?;
            if resp.txs.is_empty() {
                return Ok(total);
            }
            total += self.apply_range(&resp.txs)?;
            if self.height() >= resp.seq_no {
                return Ok(total);
            }
        }
    }

    /// Catches up with the current leader; used by the periodic sync.
    pub fn sync_with_leader(&self) -> Result<u64, CatchUpError> {
        if self.is_leader() {
            return Ok(0);
        }
        let Ok(_guard) = self.pipeline.try_lock() else {
            return Ok(0);
        };
        let leader = self.leader().node_name.clone();
        self.catch_up_locked(&leader)
    }

    /// Polls every peer, adopts the highest view seen and catches up with
    /// the most advanced peer. Returns the peers' uncommitted proposals.
    fn sync_with_best_peer(&self) -> Result<Vec<LedgerTransaction>, CatchUpError> {
        let mut best: Option<(String, u64)> = None;
        let mut pendings = Vec::new();
        let peers: Vec<String> = self.peers().map(|p| p.node_name.clone()).collect();
        for peer in peers {
            let Ok(resp) = self.fetch_range(&peer) else {
                continue;
            };
            self.adopt_view(resp.view);
            pendings.extend(resp.pending.clone());
            if best.as_ref().is_none_or(|(_, h)| resp.seq_no > *h) {
                best = Some((peer, resp.seq_no));
            }
        }
        match best {
            Some((peer, height)) if height > self.height() => {
                self.catch_up_locked(&peer)?;
            }
            Some(_) => {}
            None => return Err(CatchUpError::PeerUnavailable("no peer reachable".into())),
        }
        Ok(pendings)
    }

    /// Static view change: this node takes over as leader of `view`. It
    /// first catches up with the most advanced peer, then re-proposes any
    /// outstanding proposal that extends its head, so a transaction the old
    /// leader may have acknowledged is not lost.
    pub fn promote(&self, view: u64) -> Result<NodeStatus, SubmitError> {
        let _guard = self.lock_pipeline();
        if self.genesis.leader_of(view).node_name != self.name {
            return Err(SubmitError::BadRequest {
                detail: format!("{} leads view {view}, not {}", self.genesis.leader_of(view).node_name, self.name),
            });
        }
        if view < self.view() {
            return Err(SubmitError::BadRequest {
                detail: format!("view {view} is older than current view {}", self.view()),
            });
        }
        self.adopt_view(view);
        let mut pendings = match self.sync_with_best_peer() {
            Ok(p) => p,
            Err(CatchUpError::PeerUnavailable(_)) if self.genesis.nodes.len() == 1 => Vec::new(),
            Err(e) => {
                return Err(SubmitError::PeerUnavailable { detail: e.to_string() });
            }
        };
        pendings.extend(self.pending.lock().unwrap().take());
        let (height, root) = (self.height(), self.root_hash());
        if let Some(tx) = pendings
            .into_iter()
            .find(|p| p.seq_no == height + 1 && p.prev_hash == root)
        {
            log::info!("{}: re-proposing outstanding seq {}", self.name, tx.seq_no);
            self.order(tx)?;
        }
        Ok(self.status())
    }
}

impl LedgerRead for Node {
    fn resolve(&self, query: &Query) -> Result<Resolved, ReadError> {
        self.read(query)
    }
}

impl LedgerClient for Node {
    fn submit(&self, tx: LedgerTransaction) -> Result<Receipt, SubmitError> {
        Node::submit(self, tx)
    }

    fn status(&self) -> Result<NodeStatus, SubmitError> {
        Ok(Node::status(self))
    }
}
