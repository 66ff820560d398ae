//! Randomized valid transaction workloads, for replay and replication
//! testing.

use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore};

use crate::crypto::KeyPair;
use crate::did::Did;
use crate::ledger::*;

/// A registered identity with its signing keys.
#[derive(Debug, Clone)]
pub struct Actor {
    pub did: Did,
    pub keys: KeyPair,
    pub role: Role,
}

impl Actor {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, role: Role) -> Self {
        let keys = KeyPair::generate(rng);
        Self {
            did: Did::from_public_key(&keys.public_key),
            keys,
            role,
        }
    }

    pub fn sign(&self, body: TxPayload) -> LedgerTransaction {
        LedgerTransaction::signed(body, self.did.clone(), &self.keys)
    }

    pub fn nym_record(&self) -> DidRecord {
        DidRecord {
            did: self.did.clone(),
            verification_key: self.keys.public_key,
            agent_endpoint: None,
            role: self.role,
        }
    }

    /// The self-signed AUTHORITY NYM that opens a ledger.
    pub fn genesis_nym(&self) -> LedgerTransaction {
        self.sign(TxPayload::Nym(self.nym_record()))
    }
}

/// Generates transactions that are valid in sequence, tracking a shadow
/// ledger so each one can be positioned and checked.
pub struct WorkloadGenerator {
    pub ledger: Ledger,
    pub actors: Vec<Actor>,
    schema_counter: u32,
    registry_capacity: u32,
}

impl WorkloadGenerator {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let authority = Actor::generate(rng, Role::Authority);
        let mut ledger = Ledger::new();
        ledger.submit(authority.genesis_nym()).expect("genesis NYM is valid");
        Self {
            ledger,
            actors: vec![authority],
            schema_counter: 0,
            registry_capacity: 64,
        }
    }

    pub fn authority(&self) -> &Actor {
        &self.actors[0]
    }

    fn pick<'a, R: Rng>(&'a self, rng: &mut R, min_role: Role) -> Option<&'a Actor> {
        let eligible: Vec<&Actor> = self.actors.iter().filter(|a| a.role >= min_role).collect();
        eligible.choose(rng).copied()
    }

    /// Produces and commits one more valid transaction; returns it positioned.
    pub fn next_tx<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> LedgerTransaction {
        loop {
            let candidate = match rng.gen_range(0..6) {
                0 => self.new_nym(rng),
                1 => self.new_schema(rng),
                2 => self.new_cred_def(rng),
                3 => self.new_registry(rng),
                _ => self.revoke_some(rng),
            };
            if let Some((tx, actor)) = candidate {
                let committed = self.ledger.submit(tx).expect("generator only emits valid transactions");
                if let Some(actor) = actor {
                    self.actors.push(actor);
                }
                return committed;
            }
        }
    }

    pub fn generate<R: RngCore + CryptoRng>(&mut self, rng: &mut R, count: usize) -> Vec<LedgerTransaction> {
        (0..count).map(|_| self.next_tx(rng)).collect()
    }

    fn new_nym<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Option<(LedgerTransaction, Option<Actor>)> {
        let role = *[Role::Member, Role::Member, Role::Steward, Role::Authority].choose(rng)?;
        let min = if role == Role::Member { Role::Member } else { Role::Authority };
        let submitter = self.pick(rng, min)?;
        let actor = Actor::generate(rng, role);
        let tx = submitter.sign(TxPayload::Nym(actor.nym_record()));
        Some((tx, Some(actor)))
    }

    fn new_schema<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Option<(LedgerTransaction, Option<Actor>)> {
        let author = self.pick(rng, Role::Authority)?.clone();
        self.schema_counter += 1;
        let n_attrs = rng.gen_range(1..8);
        let attrs: Vec<String> = (0..n_attrs).map(|i| format!("attr_{i}")).collect();
        let refs: Vec<&str> = attrs.iter().map(String::as_str).collect();
        let record = SchemaRecord::new(&format!("schema{}", self.schema_counter), "1.0", &author.did, &refs);
        Some((author.sign(TxPayload::Schema(record)), None))
    }

    fn new_cred_def<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Option<(LedgerTransaction, Option<Actor>)> {
        let issuer = self.pick(rng, Role::Steward)?;
        let state = self.ledger.state();
        let open: Vec<&String> = state
            .schemas
            .keys()
            .filter(|id| !state.cred_defs.contains_key(&CredDefRecord::derive_id(id, &issuer.did)))
            .collect();
        let schema_id = open.choose(rng)?;
        let record = CredDefRecord::new(schema_id, &issuer.did, issuer.keys.public_key);
        Some((issuer.sign(TxPayload::CredDef(record)), None))
    }

    fn new_registry<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Option<(LedgerTransaction, Option<Actor>)> {
        let state = self.ledger.state();
        let cred_def = state.cred_defs.values().collect::<Vec<_>>().choose(rng).copied()?;
        let issuer = self.actors.iter().find(|a| a.did == cred_def.issuer_did)?;
        let tag = format!("r{}", state.height);
        let record = RevocationRegistryRecord::new(&cred_def.cred_def_id, &tag, self.registry_capacity);
        Some((issuer.sign(TxPayload::RevocInit(record)), None))
    }

    fn revoke_some<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Option<(LedgerTransaction, Option<Actor>)> {
        let state = self.ledger.state();
        let registry = state.revocations.values().collect::<Vec<_>>().choose(rng).copied()?;
        let issuer_did = &state.cred_defs.get(&registry.cred_def_id)?.issuer_did;
        let issuer = self.actors.iter().find(|a| &a.did == issuer_did)?;
        let mut bitmap = registry.revoked_bitmap.clone();
        for _ in 0..rng.gen_range(1..4) {
            bitmap.set(rng.gen_range(0..registry.capacity));
        }
        let update = RevocationUpdate {
            registry_id: registry.registry_id.clone(),
            revoked_bitmap: bitmap,
        };
        Some((issuer.sign(TxPayload::RevocUpdate(update)), None))
    }
}
