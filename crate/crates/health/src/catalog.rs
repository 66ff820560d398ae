//! The versioned schema catalog (`catalog/schemas.json`, canonical JSON).

use serde::{Deserialize, Serialize};

use healthreg_core::ledger::{LedgerTransaction, SchemaRecord, TxPayload};
use healthreg_core::{Did, KeyPair};

pub const CATALOG_JSON: &str = include_str!("../catalog/schemas.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogSchema {
    pub name: String,
    pub version: String,
    pub attributes: Vec<String>,
    /// Where the attribute set comes from.
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub catalog_version: String,
    pub schemas: Vec<CatalogSchema>,
}

impl Catalog {
    pub fn get(&self, name: &str) -> Option<&CatalogSchema> {
        self.schemas.iter().find(|s| s.name == name)
    }
}

pub fn catalog() -> Catalog {
    serde_json::from_str(CATALOG_JSON).expect("bundled catalog parses")
}

impl CatalogSchema {
    pub fn record(&self, authority: &Did) -> SchemaRecord {
        let attrs: Vec<&str> = self.attributes.iter().map(String::as_str).collect();
        SchemaRecord::new(&self.name, &self.version, authority, &attrs)
    }
}

/// The catalog's schemas as authored by `authority`, in catalog order.
pub fn builtin_schemas(authority: &Did) -> Vec<SchemaRecord> {
    catalog().schemas.iter().map(|s| s.record(authority)).collect()
}

/// SCHEMA transactions registering every catalog schema, signed by the
/// AUTHORITY holding `keys`.
pub fn registration_transactions(keys: &KeyPair) -> Vec<LedgerTransaction> {
    let did = Did::from_public_key(&keys.public_key);
    builtin_schemas(&did)
        .into_iter()
        .map(|s| LedgerTransaction::signed(TxPayload::Schema(s), did.clone(), keys))
        .collect()
}
