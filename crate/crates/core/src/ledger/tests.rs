use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::workload::{Actor, WorkloadGenerator};

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

struct Fixture {
    ledger: Ledger,
    authority: Actor,
    steward: Actor,
    member: Actor,
    schema: SchemaRecord,
}

/// genesis authority, a steward, a member and one schema.
fn fixture() -> Fixture {
    let mut r = rng(7);
    let authority = Actor::generate(&mut r, Role::Authority);
    let steward = Actor::generate(&mut r, Role::Steward);
    let member = Actor::generate(&mut r, Role::Member);
    let mut ledger = Ledger::new();
    ledger.submit(authority.genesis_nym()).unwrap();
    ledger.submit(authority.sign(TxPayload::Nym(steward.nym_record()))).unwrap();
    ledger.submit(authority.sign(TxPayload::Nym(member.nym_record()))).unwrap();
    let schema = SchemaRecord::new("immunization", "1.0", &authority.did, &["vaccine", "dose", "date"]);
    ledger.submit(authority.sign(TxPayload::Schema(schema.clone()))).unwrap();
    Fixture {
        ledger,
        authority,
        steward,
        member,
        schema,
    }
}

fn positioned(ledger: &Ledger, mut tx: LedgerTransaction) -> LedgerTransaction {
    tx.seq_no = ledger.height() + 1;
    tx.prev_hash = ledger.root_hash();
    tx
}

fn validate(ledger: &Ledger, tx: LedgerTransaction) -> Result<(), Rejection> {
    ledger.state().validate_transaction(&positioned(ledger, tx))
}

#[test]
fn genesis_nym_bootstraps_empty_state() {
    let authority = Actor::generate(&mut rng(1), Role::Authority);
    let state = LedgerState::new();
    let tx = positioned(&Ledger::new(), authority.genesis_nym());
    state.validate_transaction(&tx).unwrap();
    let next = state.apply_transaction(&tx);
    assert_eq!(next.height, 1);
    assert_eq!(next.dids.len(), 1);
    assert_eq!(next.root_hash, chain_next(&Digest::ZERO, &tx));
}

#[test]
fn first_transaction_must_be_self_signed_authority() {
    let member = Actor::generate(&mut rng(1), Role::Member);
    assert_eq!(validate(&Ledger::new(), member.genesis_nym()), Err(Rejection::UnknownSubmitter));
}

#[test]
fn schema_by_member_is_unauthorized() {
    let f = fixture();
    let schema = SchemaRecord::new("notes", "1.0", &f.member.did, &["text"]);
    let err = validate(&f.ledger, f.member.sign(TxPayload::Schema(schema))).unwrap_err();
    assert_eq!(err.code(), "UNAUTHORIZED_ROLE");
}

#[test]
fn schema_by_steward_is_unauthorized() {
    let f = fixture();
    let schema = SchemaRecord::new("notes", "1.0", &f.steward.did, &["text"]);
    let err = validate(&f.ledger, f.steward.sign(TxPayload::Schema(schema))).unwrap_err();
    assert_eq!(err.code(), "UNAUTHORIZED_ROLE");
}

#[test]
fn elevated_nym_requires_authority() {
    let f = fixture();
    let newcomer = Actor::generate(&mut rng(99), Role::Steward);
    let err = validate(&f.ledger, f.steward.sign(TxPayload::Nym(newcomer.nym_record()))).unwrap_err();
    assert_eq!(err.code(), "UNAUTHORIZED_ROLE");
    let member = Actor::generate(&mut rng(98), Role::Member);
    validate(&f.ledger, f.steward.sign(TxPayload::Nym(member.nym_record()))).unwrap();
}

#[test]
fn cred_def_with_missing_schema() {
    let f = fixture();
    let record = CredDefRecord::new("nope:1.0:did:shr:x", &f.steward.did, f.steward.keys.public_key);
    let err = validate(&f.ledger, f.steward.sign(TxPayload::CredDef(record))).unwrap_err();
    assert_eq!(err, Rejection::MissingDependency("nope:1.0:did:shr:x".into()));
}

#[test]
fn cred_def_by_member_and_duplicate_pair() {
    let mut f = fixture();
    let by_member = CredDefRecord::new(&f.schema.schema_id, &f.member.did, f.member.keys.public_key);
    assert_eq!(
        validate(&f.ledger, f.member.sign(TxPayload::CredDef(by_member))).unwrap_err().code(),
        "UNAUTHORIZED_ROLE"
    );
    let record = CredDefRecord::new(&f.schema.schema_id, &f.steward.did, f.steward.keys.public_key);
    f.ledger.submit(f.steward.sign(TxPayload::CredDef(record.clone()))).unwrap();
    let mut again = record;
    again.issuance_key = f.member.keys.public_key;
    assert_eq!(
        validate(&f.ledger, f.steward.sign(TxPayload::CredDef(again))).unwrap_err().code(),
        "DUPLICATE_ID"
    );
}

#[test]
fn unknown_submitter_and_bad_signature() {
    let f = fixture();
    let stranger = Actor::generate(&mut rng(5), Role::Member);
    let other = Actor::generate(&mut rng(6), Role::Member);
    assert_eq!(
        validate(&f.ledger, stranger.sign(TxPayload::Nym(other.nym_record()))),
        Err(Rejection::UnknownSubmitter)
    );
    let mut tx = f.member.sign(TxPayload::Nym(other.nym_record()));
    tx.signature.0[10] ^= 1;
    assert_eq!(validate(&f.ledger, tx), Err(Rejection::BadSignature));
}

#[test]
fn duplicate_schema_and_nym() {
    let f = fixture();
    assert_eq!(
        validate(&f.ledger, f.authority.sign(TxPayload::Schema(f.schema.clone()))).unwrap_err().code(),
        "DUPLICATE_ID"
    );
    assert_eq!(
        validate(&f.ledger, f.authority.sign(TxPayload::Nym(f.member.nym_record()))).unwrap_err().code(),
        "DUPLICATE_ID"
    );
}

#[test]
fn schema_attributes_must_be_sorted_and_unique() {
    let f = fixture();
    let mut schema = SchemaRecord::new("labs", "2.1.0", &f.authority.did, &["a", "b"]);
    schema.attribute_names = vec!["b".into(), "a".into()];
    assert_eq!(
        validate(&f.ledger, f.authority.sign(TxPayload::Schema(schema.clone()))).unwrap_err().code(),
        "MALFORMED"
    );
    schema.attribute_names = vec!["a".into(), "a".into()];
    assert_eq!(
        validate(&f.ledger, f.authority.sign(TxPayload::Schema(schema))).unwrap_err().code(),
        "MALFORMED"
    );
}

#[test]
fn chain_position_is_enforced() {
    let f = fixture();
    let other = Actor::generate(&mut rng(12), Role::Member);
    let mut tx = positioned(&f.ledger, f.member.sign(TxPayload::Nym(other.nym_record())));
    tx.seq_no += 1;
    assert_eq!(f.ledger.state().validate_transaction(&tx), Err(Rejection::ChainMismatch));
    tx.seq_no -= 1;
    tx.prev_hash.0[0] ^= 1;
    assert_eq!(f.ledger.state().validate_transaction(&tx), Err(Rejection::ChainMismatch));
}

/// Issuer, cred-def and an empty registry on top of [`fixture`].
fn with_registry(f: &mut Fixture, capacity: u32) -> RevocationRegistryRecord {
    let cred_def = CredDefRecord::new(&f.schema.schema_id, &f.steward.did, f.steward.keys.public_key);
    f.ledger.submit(f.steward.sign(TxPayload::CredDef(cred_def.clone()))).unwrap();
    let registry = RevocationRegistryRecord::new(&cred_def.cred_def_id, "main", capacity);
    f.ledger.submit(f.steward.sign(TxPayload::RevocInit(registry.clone()))).unwrap();
    registry
}

fn update(f: &Fixture, registry_id: &str, bitmap: Bitmap) -> LedgerTransaction {
    f.steward.sign(TxPayload::RevocUpdate(RevocationUpdate {
        registry_id: registry_id.to_string(),
        revoked_bitmap: bitmap,
    }))
}

#[test]
fn revocation_update_clearing_a_bit_regresses() {
    let mut f = fixture();
    let registry = with_registry(&mut f, 16);
    let mut bits = Bitmap::zeroed(16);
    bits.set(3);
    f.ledger.submit(update(&f, &registry.registry_id, bits)).unwrap();
    let mut cleared = Bitmap::zeroed(16);
    cleared.set(4);
    assert_eq!(
        validate(&f.ledger, update(&f, &registry.registry_id, cleared)),
        Err(Rejection::BitmapRegression)
    );
}

#[test]
fn revocation_update_only_by_issuer() {
    let mut f = fixture();
    let registry = with_registry(&mut f, 16);
    let mut bits = Bitmap::zeroed(16);
    bits.set(1);
    let tx = f.authority.sign(TxPayload::RevocUpdate(RevocationUpdate {
        registry_id: registry.registry_id.clone(),
        revoked_bitmap: bits,
    }));
    assert_eq!(validate(&f.ledger, tx).unwrap_err().code(), "UNAUTHORIZED_ROLE");
}

#[test]
fn resolve_after_three_updates_is_union_of_deltas() {
    let mut f = fixture();
    let registry = with_registry(&mut f, 40);
    let deltas: [&[u32]; 3] = [&[1, 7], &[7, 20, 33], &[39, 0]];
    let mut current = Bitmap::zeroed(40);
    for delta in deltas {
        for &i in delta {
            current.set(i);
        }
        f.ledger.submit(update(&f, &registry.registry_id, current.clone())).unwrap();
    }
    // brute-force union over every index
    let expected: Vec<u32> = (0..40).filter(|i| deltas.iter().any(|d| d.contains(i))).collect();
    let resolved = f.ledger.state().resolve(&Query::RevocRegistry(registry.registry_id.clone())).unwrap();
    let Record::RevocRegistry(rec) = resolved.record else { panic!("wrong kind") };
    assert_eq!(rec.revoked_bitmap.ones().collect::<Vec<_>>(), expected);
    assert_eq!(rec.update_seq, 3);
    assert_eq!(resolved.height, f.ledger.height());
    assert_eq!(resolved.root_hash, f.ledger.root_hash());
}

#[test]
fn resolve_unknown_and_fresh_schema() {
    let f = fixture();
    let nobody = Actor::generate(&mut rng(77), Role::Member);
    assert_eq!(f.ledger.state().resolve(&Query::Did(nobody.did)), Err(NotFound));
    let resolved = f.ledger.state().resolve(&Query::Schema(f.schema.schema_id.clone())).unwrap();
    let Record::Schema(schema) = resolved.record else { panic!("wrong kind") };
    assert_eq!(schema.attribute_names, vec!["date", "dose", "vaccine"]);
}

#[test]
fn replaying_the_same_log_twice_gives_equal_roots() {
    let mut r = rng(3);
    let mut generator = WorkloadGenerator::new(&mut r);
    generator.generate(&mut r, 9);
    let log = generator.ledger.log();
    assert_eq!(log.len(), 10);
    let a = LedgerState::replay(log).unwrap();
    let b = LedgerState::replay(log).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.root_hash, generator.ledger.root_hash());
}

#[test]
fn root_hash_matches_independent_fold() {
    // fold_log.root is produced by scripts/oracle_fold.py over fold_log.jsonl
    let lines = include_str!("../../testdata/fold_log.jsonl");
    let expected = include_str!("../../testdata/fold_log.root").trim();
    let log: Vec<LedgerTransaction> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (tx, line) in log.iter().zip(lines.lines()) {
        assert_eq!(tx.canonical_bytes(), line.as_bytes());
    }
    let state = LedgerState::replay(&log).unwrap();
    let hex: String = state.root_hash.0.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, expected);
    assert_eq!(chain_head(&log), Some(state.root_hash));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fold_is_deterministic_and_append_only(seed in any::<u64>(), len in 1usize..60) {
        let mut r = rng(seed);
        let mut generator = WorkloadGenerator::new(&mut r);
        generator.generate(&mut r, len);
        let log = generator.ledger.log();
        let full = LedgerState::replay(log).unwrap();
        prop_assert_eq!(&full, &LedgerState::replay(log).unwrap());
        prop_assert_eq!(Some(full.root_hash), chain_head(log));

        let cut = len / 2;
        let prefix = LedgerState::replay(&log[..cut]).unwrap();
        for did in prefix.dids.keys() { prop_assert!(full.dids.contains_key(did)); }
        for id in prefix.schemas.keys() { prop_assert_eq!(&prefix.schemas[id], &full.schemas[id]); }
        for id in prefix.cred_defs.keys() { prop_assert_eq!(&prefix.cred_defs[id], &full.cred_defs[id]); }
        for (id, reg) in &prefix.revocations {
            prop_assert!(full.revocations[id].revoked_bitmap.covers(&reg.revoked_bitmap));
        }

        let mut pairs: Vec<_> = full.cred_defs.values().map(|c| (&c.schema_id, &c.issuer_did)).collect();
        let total = pairs.len();
        pairs.sort();
        pairs.dedup();
        prop_assert_eq!(pairs.len(), total);
    }

    #[test]
    fn any_byte_flip_breaks_the_signature(seed in any::<u64>(), pick in any::<prop::sample::Index>(), pos in any::<prop::sample::Index>()) {
        let mut r = rng(seed);
        let mut generator = WorkloadGenerator::new(&mut r);
        generator.generate(&mut r, 12);
        let log = generator.ledger.log();
        let i = pick.index(log.len());
        let before = LedgerState::replay(&log[..i]).unwrap();
        let tx = &log[i];
        prop_assert!(before.validate_transaction(tx).is_ok());

        // flip a signature byte
        let mut bad = tx.clone();
        bad.signature.0[pos.index(64)] ^= 0x01;
        prop_assert_eq!(before.validate_transaction(&bad), Err(Rejection::BadSignature));

        // flip a byte of the signed payload encoding, keep it parseable
        let bytes = tx.signing_bytes();
        let mut idx = pos.index(bytes.len());
        let mut mutated = None;
        for _ in 0..bytes.len() {
            let mut b = bytes.clone();
            b[idx] ^= 0x01;
            if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&b) {
                if let (Ok(body), Ok(submitter)) = (
                    serde_json::from_value::<TxPayload>(v.clone()),
                    serde_json::from_value::<crate::did::Did>(v["submitter_did"].clone()),
                ) {
                    mutated = Some((body, submitter));
                    break;
                }
            }
            idx = (idx + 1) % bytes.len();
        }
        if let Some((body, submitter)) = mutated {
            let mut bad = tx.clone();
            bad.body = body;
            bad.submitter_did = submitter;
            if bad.signing_bytes() != bytes {
                prop_assert!(before.validate_transaction(&bad).is_err());
                if bad.submitter_did == tx.submitter_did {
                    prop_assert_eq!(before.validate_transaction(&bad), Err(Rejection::BadSignature));
                }
            }
        }
    }
}
