//! Steward wallets: the encrypted wallet that holds a node's signing key.

use std::path::Path;

use healthreg_core::wallet::{KdfParams, RecordKind, Wallet, WalletError, WalletRecord};
use healthreg_core::KeyPair;

use crate::NodeError;

pub const NODE_KEY_RECORD: &str = "node-key";

/// Creates a wallet at `path` holding `keys` as the node key. Fails with
/// DUPLICATE_ID if the wallet already has one.
pub fn create_steward_wallet(
    path: &Path,
    passphrase: &str,
    params: KdfParams,
    keys: &KeyPair,
) -> Result<Wallet, WalletError> {
    let wallet = Wallet::open_with(path, passphrase, params)?;
    wallet.put(WalletRecord::new(NODE_KEY_RECORD, RecordKind::Keypair, keys)?.tag("role", "steward"))?;
    Ok(wallet)
}

pub fn steward_key(wallet: &Wallet) -> Result<KeyPair, NodeError> {
    let record = wallet
        .get(NODE_KEY_RECORD)
        .ok_or_else(|| NodeError::Store("steward wallet holds no node key".into()))?;
    Ok(record.decode()?)
}

/// Opens an existing steward wallet; a missing file is an error rather
/// than an implicit create.
pub fn open_steward_wallet(path: &Path, passphrase: &str) -> Result<Wallet, NodeError> {
    if !path.exists() {
        return Err(NodeError::WalletMissing(path.to_path_buf()));
    }
    Wallet::open(path, passphrase).map_err(NodeError::from)
}
