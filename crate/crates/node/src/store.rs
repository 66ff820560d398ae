//! Per-node persistence: `ledger.log` holds one canonical-JSON transaction
//! per line, `genesis.fingerprint` the hex fingerprint the log belongs to.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use healthreg_core::ledger::LedgerTransaction;
use healthreg_core::Digest;

use crate::NodeError;

const LOG_FILE: &str = "ledger.log";
const FINGERPRINT_FILE: &str = "genesis.fingerprint";

fn hex(d: &Digest) -> String {
    d.as_bytes().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Store {
    log: File,
}

impl Store {
    /// Opens (or initializes) `dir` and returns the persisted log.
    pub fn open(dir: &Path, fingerprint: &Digest) -> Result<(Self, Vec<LedgerTransaction>), NodeError> {
        fs::create_dir_all(dir)?;
        let fp_path = dir.join(FINGERPRINT_FILE);
        match fs::read_to_string(&fp_path) {
            Ok(stored) if stored.trim() != hex(fingerprint) => return Err(NodeError::GenesisMismatch),
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => fs::write(&fp_path, hex(fingerprint) + "\n")?,
            Err(e) => return Err(e.into()),
        }

        let log_path = dir.join(LOG_FILE);
        let mut txs = Vec::new();
        let mut valid_len = 0u64;
        if log_path.exists() {
            let mut reader = BufReader::new(File::open(&log_path)?);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                if !line.ends_with('\n') {
                    // torn final write; drop it
                    log::warn!("dropping incomplete trailing record in {}", log_path.display());
                    break;
                }
                let tx: LedgerTransaction = serde_json::from_str(line.trim_end())
                    .map_err(|e| NodeError::Store(format!("line {}: {e}", txs.len() + 1)))?;
                txs.push(tx);
                valid_len += n as u64;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        log.set_len(valid_len)?;
        Ok((
            Self { log },
            txs,
        ))
    }

    pub fn append(&mut self, tx: &LedgerTransaction) -> Result<(), NodeError> {
        let mut line = tx.canonical_bytes();
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        Ok(())
    }
}
