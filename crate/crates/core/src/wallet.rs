//! Encrypted-at-rest wallet: one sealed file per wallet.
//!
//! On-disk layout (all integers big-endian):
//!
//! | offset | size | field                                              |
//! |-------:|-----:|----------------------------------------------------|
//! | 0      | 8    | magic `HRWALLET`                                   |
//! | 8      | 2    | format version (`1`)                               |
//! | 10     | 1    | KDF id (`1` = Argon2id v0x13)                      |
//! | 11     | 4    | Argon2 memory cost, KiB                            |
//! | 15     | 4    | Argon2 time cost                                   |
//! | 19     | 4    | Argon2 parallelism                                 |
//! | 23     | 16   | KDF salt                                           |
//! | 39     | 16   | key check: `SHA-256("healthreg-wallet-check" ‖ key)[..16]` |
//! | 55     | 24   | XChaCha20-Poly1305 nonce                           |
//! | 79     | n+16 | ciphertext ‖ tag, AAD = bytes `0..79`              |
//!
//! The key is Argon2id(passphrase, salt) → 32 bytes. The plaintext is the
//! canonical JSON of the record list sorted by `record_id`. A key-check
//! mismatch is reported as a bad passphrase; an authentication failure with
//! a matching key check means the sealed region (offset 55 onwards) was
//! damaged.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use argon2::{Algorithm, Argon2, Params, Version};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::canonical;
use crate::crypto::sha256_concat;

const MAGIC: &[u8; 8] = b"HRWALLET";
const FORMAT_VERSION: u16 = 1;
const KDF_ARGON2ID: u8 = 1;
const HEADER_LEN: usize = 79;
/// Start of the sealed region (nonce + ciphertext + tag).
pub const SEALED_OFFSET: usize = 55;
const MAX_MEMORY_KIB: u32 = 4 * 1024 * 1024;

/// Tag names a record may carry. Tags are stored sealed like everything
/// else, but they are meant for lookups, so only identifiers and aliases
/// are allowed, never attribute values.
pub const ALLOWED_TAGS: &[&str] = &[
    "alias",
    "cred_def_id",
    "issuer_did",
    "label",
    "purpose",
    "registry_id",
    "role",
    "schema_id",
    "state",
    "their_did",
    "thread_id",
];

#[derive(Debug, thiserror::Error)]
pub enum WalletError {
    #[error("wrong passphrase")]
    BadPassphrase,
    #[error("wallet file is corrupt: {0}")]
    CorruptFile(String),
    #[error("unsupported wallet format version {0}")]
    VersionUnsupported(u16),
    #[error("wallet is locked by another handle or process")]
    Locked,
    #[error("record `{0}` already exists")]
    DuplicateId(String),
    #[error("record `{0}` not found")]
    NotFound(String),
    #[error("tag `{0}` is not an allowed tag name")]
    InvalidTag(String),
    #[error("destination `{0}` already exists")]
    DestinationExists(PathBuf),
    #[error("record body: {0}")]
    Body(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl WalletError {
    pub fn code(&self) -> &'static str {
        match self {
            WalletError::BadPassphrase => "BAD_PASSPHRASE",
            WalletError::CorruptFile(_) => "CORRUPT_FILE",
            WalletError::VersionUnsupported(_) => "VERSION_UNSUPPORTED",
            WalletError::Locked => "WALLET_LOCKED",
            WalletError::DuplicateId(_) => "DUPLICATE_ID",
            WalletError::NotFound(_) => "NOT_FOUND",
            WalletError::InvalidTag(_) => "INVALID_TAG",
            WalletError::DestinationExists(_) => "DESTINATION_EXISTS",
            WalletError::Body(_) => "BAD_RECORD_BODY",
            WalletError::Io(_) => "IO",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordKind {
    Keypair,
    Credential,
    Connection,
    NonceLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalletRecord {
    pub record_id: String,
    pub kind: RecordKind,
    pub body: serde_json::Value,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl WalletRecord {
    pub fn new<T: Serialize>(record_id: impl Into<String>, kind: RecordKind, body: &T) -> Result<Self, WalletError> {
        Ok(Self {
            record_id: record_id.into(),
            kind,
            body: serde_json::to_value(body).map_err(|e| WalletError::Body(e.to_string()))?,
            tags: BTreeMap::new(),
        })
    }

    pub fn tag(mut self, name: &str, value: impl Into<String>) -> Self {
        self.tags.insert(name.to_string(), value.into());
        self
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, WalletError> {
        serde_json::from_value(self.body.clone()).map_err(|e| WalletError::Body(e.to_string()))
    }
}

/// Argon2id cost parameters, recorded in every file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KdfParams {
    pub memory_kib: u32,
    pub iterations: u32,
    pub parallelism: u32,
}

impl Default for KdfParams {
    fn default() -> Self {
        Self {
            memory_kib: 19 * 1024,
            iterations: 2,
            parallelism: 1,
        }
    }
}

impl KdfParams {
    /// Cheap parameters for tests and throwaway demo wallets.
    pub fn light() -> Self {
        Self {
            memory_kib: 64,
            iterations: 1,
            parallelism: 1,
        }
    }
}

struct Header {
    kdf: KdfParams,
    salt: [u8; 16],
    key_check: [u8; 16],
}

impl Header {
    fn encode(&self) -> [u8; SEALED_OFFSET] {
        let mut out = [0u8; SEALED_OFFSET];
        out[..8].copy_from_slice(MAGIC);
        out[8..10].copy_from_slice(&FORMAT_VERSION.to_be_bytes());
        out[10] = KDF_ARGON2ID;
        out[11..15].copy_from_slice(&self.kdf.memory_kib.to_be_bytes());
        out[15..19].copy_from_slice(&self.kdf.iterations.to_be_bytes());
        out[19..23].copy_from_slice(&self.kdf.parallelism.to_be_bytes());
        out[23..39].copy_from_slice(&self.salt);
        out[39..55].copy_from_slice(&self.key_check);
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self, WalletError> {
        if bytes.len() < HEADER_LEN + 16 {
            return Err(WalletError::CorruptFile("file too short".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(WalletError::CorruptFile("bad magic".into()));
        }
        let version = u16::from_be_bytes([bytes[8], bytes[9]]);
        if version != FORMAT_VERSION {
            return Err(WalletError::VersionUnsupported(version));
        }
        if bytes[10] != KDF_ARGON2ID {
            return Err(WalletError::CorruptFile(format!("unknown KDF id {}", bytes[10])));
        }
        let be = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
        let kdf = KdfParams {
            memory_kib: be(11),
            iterations: be(15),
            parallelism: be(19),
        };
        if kdf.memory_kib > MAX_MEMORY_KIB {
            return Err(WalletError::CorruptFile("KDF memory cost out of range".into()));
        }
        Ok(Self {
            kdf,
            salt: bytes[23..39].try_into().unwrap(),
            key_check: bytes[39..55].try_into().unwrap(),
        })
    }
}

type SealingKey = Zeroizing<[u8; 32]>;

fn derive_key(passphrase: &str, salt: &[u8; 16], kdf: KdfParams) -> Result<SealingKey, WalletError> {
    let params = Params::new(kdf.memory_kib, kdf.iterations, kdf.parallelism, Some(32))
        .map_err(|e| WalletError::CorruptFile(format!("KDF parameters: {e}")))?;
    let mut key = Zeroizing::new([0u8; 32]);
    Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
        .hash_password_into(passphrase.as_bytes(), salt, key.as_mut())
        .map_err(|e| WalletError::CorruptFile(format!("KDF: {e}")))?;
    Ok(key)
}

fn key_check(key: &[u8; 32]) -> [u8; 16] {
    sha256_concat(&[b"healthreg-wallet-check", key]).0[..16].try_into().unwrap()
}

/// Header fields plus the derived key; everything needed to seal.
struct Sealer {
    kdf: KdfParams,
    salt: [u8; 16],
    key: SealingKey,
}

impl Sealer {
    fn seal(&self, records: &BTreeMap<String, WalletRecord>) -> Vec<u8> {
        let header = Header {
            kdf: self.kdf,
            salt: self.salt,
            key_check: key_check(&self.key),
        }
        .encode();
        let mut nonce = [0u8; 24];
        rand::rngs::OsRng.fill_bytes(&mut nonce);
        let mut aad = Vec::with_capacity(HEADER_LEN);
        aad.extend_from_slice(&header);
        aad.extend_from_slice(&nonce);

        let list: Vec<&WalletRecord> = records.values().collect();
        let plaintext = Zeroizing::new(canonical::to_vec(&list).expect("wallet records hold no floats"));
        let cipher = XChaCha20Poly1305::new(self.key.as_ref().into());
        let ciphertext = cipher
            .encrypt(XNonce::from_slice(&nonce), Payload { msg: &plaintext, aad: &aad })
            .expect("encryption cannot fail for in-memory buffers");
        let mut out = aad;
        out.extend_from_slice(&ciphertext);
        out
    }

    fn unseal(bytes: &[u8], passphrase: &str) -> Result<(Self, BTreeMap<String, WalletRecord>), WalletError> {
        let header = Header::decode(bytes)?;
        let key = derive_key(passphrase, &header.salt, header.kdf)?;
        if key_check(&key) != header.key_check {
            return Err(WalletError::BadPassphrase);
        }
        let cipher = XChaCha20Poly1305::new(key.as_ref().into());
        let plaintext = cipher
            .decrypt(
                XNonce::from_slice(&bytes[SEALED_OFFSET..HEADER_LEN]),
                Payload {
                    msg: &bytes[HEADER_LEN..],
                    aad: &bytes[..HEADER_LEN],
                },
            )
            .map(Zeroizing::new)
            .map_err(|_| WalletError::CorruptFile("authentication failed".into()))?;
        let list: Vec<WalletRecord> =
            serde_json::from_slice(&plaintext).map_err(|e| WalletError::CorruptFile(e.to_string()))?;
        let records = list.into_iter().map(|r| (r.record_id.clone(), r)).collect();
        Ok((
            Self {
                kdf: header.kdf,
                salt: header.salt,
                key,
            },
            records,
        ))
    }
}

#[cfg(test)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FailPoint {
    /// temp file partially written, never renamed
    MidTempWrite,
    /// temp file complete, never renamed
    BeforeRename,
}

struct Inner {
    records: BTreeMap<String, WalletRecord>,
    #[cfg(test)]
    fail_at: Option<FailPoint>,
}

/// An open wallet. Operations are serialized internally, so the handle can
/// be shared across threads; a second handle on the same file (in this or
/// another process) is refused with [`WalletError::Locked`].
pub struct Wallet {
    path: PathBuf,
    sealer: Sealer,
    inner: Mutex<Inner>,
    _lock: File,
}

impl std::fmt::Debug for Wallet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Wallet").field("path", &self.path).finish_non_exhaustive()
    }
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".lock");
    path.with_file_name(name)
}

fn acquire_lock(path: &Path) -> Result<File, WalletError> {
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(lock_path(path))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(fs::TryLockError::WouldBlock) => Err(WalletError::Locked),
        Err(fs::TryLockError::Error(e)) => Err(e.into()),
    }
}

fn write_atomically(path: &Path, bytes: &[u8], #[cfg(test)] fail_at: Option<FailPoint>) -> Result<(), WalletError> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut file = File::create(&tmp)?;
        #[cfg(test)]
        if fail_at == Some(FailPoint::MidTempWrite) {
            file.write_all(&bytes[..bytes.len() / 2])?;
            return Err(WalletError::Io(std::io::Error::other("injected crash")));
        }
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    #[cfg(test)]
    if fail_at == Some(FailPoint::BeforeRename) {
        return Err(WalletError::Io(std::io::Error::other("injected crash")));
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        // directory fsync is best effort; not every platform supports it
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

impl Wallet {
    /// Opens the wallet at `path`, creating it with default KDF parameters
    /// when absent.
    pub fn open(path: impl AsRef<Path>, passphrase: &str) -> Result<Self, WalletError> {
        Self::open_with(path, passphrase, KdfParams::default())
    }

    /// Like [`open`](Self::open); `create_params` only apply when the file
    /// does not exist yet.
    pub fn open_with(path: impl AsRef<Path>, passphrase: &str, create_params: KdfParams) -> Result<Self, WalletError> {
        let path = path.as_ref().to_path_buf();
        let lock = acquire_lock(&path)?;
        if path.exists() {
            let bytes = fs::read(&path)?;
            let (sealer, records) = Sealer::unseal(&bytes, passphrase)?;
            Ok(Self::assemble(path, sealer, records, lock))
        } else {
            let mut salt = [0u8; 16];
            rand::rngs::OsRng.fill_bytes(&mut salt);
            let key = derive_key(passphrase, &salt, create_params)?;
            let sealer = Sealer {
                kdf: create_params,
                salt,
                key,
            };
            let wallet = Self::assemble(path, sealer, BTreeMap::new(), lock);
            wallet.persist(&wallet.inner.lock().unwrap())?;
            Ok(wallet)
        }
    }

    fn assemble(path: PathBuf, sealer: Sealer, records: BTreeMap<String, WalletRecord>, lock: File) -> Self {
        Self {
            path,
            sealer,
            inner: Mutex::new(Inner {
                records,
                #[cfg(test)]
                fail_at: None,
            }),
            _lock: lock,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn persist(&self, inner: &Inner) -> Result<(), WalletError> {
        let bytes = self.sealer.seal(&inner.records);
        write_atomically(
            &self.path,
            &bytes,
            #[cfg(test)]
            inner.fail_at,
        )
    }

    fn check_tags(record: &WalletRecord) -> Result<(), WalletError> {
        match record.tags.keys().find(|k| !ALLOWED_TAGS.contains(&k.as_str())) {
            Some(bad) => Err(WalletError::InvalidTag(bad.clone())),
            None => Ok(()),
        }
    }

    /// Inserts a new record and persists the wallet.
    pub fn put(&self, record: WalletRecord) -> Result<(), WalletError> {
        Self::check_tags(&record)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.records.contains_key(&record.record_id) {
            return Err(WalletError::DuplicateId(record.record_id));
        }
        let id = record.record_id.clone();
        inner.records.insert(id.clone(), record);
        if let Err(e) = self.persist(&inner) {
            inner.records.remove(&id);
            return Err(e);
        }
        Ok(())
    }

    /// Replaces an existing record and persists the wallet.
    pub fn update(&self, record: WalletRecord) -> Result<(), WalletError> {
        Self::check_tags(&record)?;
        let mut inner = self.inner.lock().unwrap();
        let Some(old) = inner.records.insert(record.record_id.clone(), record.clone()) else {
            inner.records.remove(&record.record_id);
            return Err(WalletError::NotFound(record.record_id));
        };
        if let Err(e) = self.persist(&inner) {
            inner.records.insert(old.record_id.clone(), old);
            return Err(e);
        }
        Ok(())
    }

    pub fn get(&self, record_id: &str) -> Option<WalletRecord> {
        self.inner.lock().unwrap().records.get(record_id).cloned()
    }

    /// All records of `kind` whose tags include every `(name, value)` pair.
    pub fn search(&self, kind: Option<RecordKind>, tags: &[(&str, &str)]) -> Vec<WalletRecord> {
        let inner = self.inner.lock().unwrap();
        inner
            .records
            .values()
            .filter(|r| kind.is_none_or(|k| r.kind == k))
            .filter(|r| tags.iter().all(|(k, v)| r.tags.get(*k).is_some_and(|t| t == v)))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes a self-contained sealed copy to `dest` (same passphrase, fresh
    /// nonce).
    pub fn export(&self, dest: impl AsRef<Path>) -> Result<(), WalletError> {
        let inner = self.inner.lock().unwrap();
        let bytes = self.sealer.seal(&inner.records);
        write_atomically(
            dest.as_ref(),
            &bytes,
            #[cfg(test)]
            None,
        )
    }

    /// Restores a backup made by [`export`](Self::export) into a fresh
    /// wallet at `dest` and opens it.
    pub fn import(backup: impl AsRef<Path>, dest: impl AsRef<Path>, passphrase: &str) -> Result<Self, WalletError> {
        let dest = dest.as_ref().to_path_buf();
        if dest.exists() {
            return Err(WalletError::DestinationExists(dest));
        }
        let bytes = fs::read(backup.as_ref())?;
        let (sealer, records) = Sealer::unseal(&bytes, passphrase)?;
        let lock = acquire_lock(&dest)?;
        let wallet = Self::assemble(dest, sealer, records, lock);
        wallet.persist(&wallet.inner.lock().unwrap())?;
        Ok(wallet)
    }

    /// Decrypts a wallet file without opening (or locking) it.
    pub fn read_records(path: impl AsRef<Path>, passphrase: &str) -> Result<Vec<WalletRecord>, WalletError> {
        let bytes = fs::read(path.as_ref())?;
        let (_, records) = Sealer::unseal(&bytes, passphrase)?;
        Ok(records.into_values().collect())
    }

    #[cfg(test)]
    fn inject_failure(&self, at: Option<FailPoint>) {
        self.inner.lock().unwrap().fail_at = at;
    }
}
