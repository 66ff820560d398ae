//! Settings file and secret sources.
//!
//! Every setting can come from a flag, an environment variable or the
//! `--config` TOML file, in that order of precedence. Passphrases are read
//! from a file, an environment variable or an interactive prompt, never
//! from a command-line argument.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::output::CliError;

pub const PASSPHRASE_ENV: &str = "HEALTHREG_PASSPHRASE";

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub genesis: Option<PathBuf>,
    pub wallet: Option<PathBuf>,
    /// Name of an environment variable holding the passphrase.
    pub passphrase_env: Option<String>,
    pub passphrase_file: Option<PathBuf>,
    /// Ledger client endpoints.
    #[serde(default)]
    pub endpoints: Vec<String>,
    /// Messaging API base URL, for agent client commands.
    pub api: Option<String>,
    pub api_token: Option<String>,
    pub api_token_file: Option<PathBuf>,
    pub log_level: Option<String>,
    pub node_name: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub label: Option<String>,
    /// Agent inbox listen address.
    pub listen: Option<String>,
    /// Messaging API listen address.
    pub api_listen: Option<String>,
    /// Public inbox URL handed out in invitations.
    pub public_endpoint: Option<String>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// Where a passphrase comes from, by precedence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PassphraseSource {
    File(PathBuf),
    Env(String),
    Prompt,
}

pub fn passphrase_source(flag_file: Option<&Path>, config: &CliConfig) -> PassphraseSource {
    if let Some(path) = flag_file {
        return PassphraseSource::File(path.to_path_buf());
    }
    if std::env::var_os(PASSPHRASE_ENV).is_some() {
        return PassphraseSource::Env(PASSPHRASE_ENV.to_string());
    }
    if let Some(path) = &config.passphrase_file {
        return PassphraseSource::File(path.clone());
    }
    if let Some(var) = &config.passphrase_env {
        return PassphraseSource::Env(var.clone());
    }
    PassphraseSource::Prompt
}

/// Reads the passphrase. A prompt for a wallet about to be created asks
/// twice.
pub fn read_passphrase(source: &PassphraseSource, what: &str, confirm: bool) -> Result<String, CliError> {
    let pass = match source {
        PassphraseSource::File(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read passphrase file {}: {e}", path.display())))?;
            text.trim_end_matches(['\r', '\n']).to_string()
        }
        PassphraseSource::Env(var) => {
            std::env::var(var).map_err(|_| CliError::usage(format!("environment variable {var} is not set")))?
        }
        PassphraseSource::Prompt => {
            let first = rpassword::prompt_password(format!("{what} passphrase: "))
                .map_err(|e| CliError::usage(format!("cannot prompt for passphrase: {e}")))?;
            if confirm {
                let again = rpassword::prompt_password("repeat passphrase: ")
                    .map_err(|e| CliError::usage(format!("cannot prompt for passphrase: {e}")))?;
                if again != first {
                    return Err(CliError::usage("passphrases differ"));
                }
            }
            first
        }
    };
    if pass.is_empty() {
        return Err(CliError::usage("empty passphrase"));
    }
    Ok(pass)
}

/// API bearer token: flag file, `HEALTHREG_API_TOKEN`, then the config file.
pub fn api_token(flag_file: Option<&Path>, env: Option<String>, config: &CliConfig) -> Result<Option<String>, CliError> {
    let from_file = |path: &Path| {
        std::fs::read_to_string(path)
            .map(|t| t.trim().to_string())
            .map_err(|e| CliError::usage(format!("cannot read token file {}: {e}", path.display())))
    };
    if let Some(path) = flag_file {
        return from_file(path).map(Some);
    }
    if let Some(token) = env {
        return Ok(Some(token));
    }
    if let Some(path) = &config.api_token_file {
        return from_file(path).map(Some);
    }
    Ok(config.api_token.clone())
}
