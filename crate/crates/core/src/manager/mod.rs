//! Resource manager: executor registry, lease placement, heartbeat
//! liveness and the billing ledger.
//!
//! [`ResourceManager`] is a pure state machine driven by explicit
//! timestamps; [`ManagerService`] runs it behind a transport listener.

mod billing;
mod service;
mod state;

use std::time::Duration;

pub use billing::{BillingLedger, BillingRates, Usage};
pub use service::{ManagerService, ManagerStats};
pub use state::{ExecutorRecord, ExecutorStatus, Lease, LeaseState, Notice, Recipient, ResourceManager};

use crate::protocol::{ErrorCode, ProtocolError};

pub const DEFAULT_HEARTBEAT_MS: u64 = 500;
pub const MISSED_HEARTBEATS_FOR_DEAD: u64 = 3;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ManagerError {
    #[error("executor at {0} is already registered")]
    DuplicateExecutor(String),
    #[error("unknown executor {0}")]
    UnknownExecutor(u64),
    #[error("no executor can host {cores} cores / {memory_mb} MiB")]
    InsufficientResources { cores: u32, memory_mb: u32 },
    #[error("token rejected")]
    AuthRejected,
    #[error("unknown lease {0}")]
    UnknownLease(u64),
    #[error("lease {0} is no longer active")]
    LeaseClosed(u64),
    #[error("unknown client {0}")]
    UnknownClient(u64),
    #[error(transparent)]
    Invalid(#[from] ProtocolError),
}

impl ManagerError {
    pub fn code(&self) -> ErrorCode {
        match self {
            Self::DuplicateExecutor(_) => ErrorCode::DuplicateExecutor,
            Self::UnknownExecutor(_) => ErrorCode::UnknownExecutor,
            Self::InsufficientResources { .. } => ErrorCode::InsufficientResources,
            Self::AuthRejected => ErrorCode::AuthRejected,
            Self::UnknownLease(_) => ErrorCode::UnknownLease,
            Self::LeaseClosed(_) => ErrorCode::LeaseExpired,
            Self::UnknownClient(_) => ErrorCode::UnknownClient,
            Self::Invalid(_) => ErrorCode::BadRequest,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManagerConfig {
    pub listen: String,
    pub heartbeat_interval: Duration,
    pub oversubscription: f64,
    pub rates: BillingRates,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            listen: String::new(),
            heartbeat_interval: Duration::from_millis(DEFAULT_HEARTBEAT_MS),
            oversubscription: 1.0,
            rates: BillingRates::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl ManagerConfig {
    /// Applies `key=value` lines (`listen`, `heartbeat_ms`, `oversub`,
    /// `rates`) on top of `self`. Blank lines and `#` comments are skipped.
    pub fn merge_kv(mut self, text: &str) -> Result<Self, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key=value".into()))?;
            let value = value.trim();
            match key.trim() {
                "listen" => self.listen = value.to_string(),
                "heartbeat_ms" => {
                    let ms: u64 = value.parse().map_err(|_| err(format!("bad heartbeat_ms {value:?}")))?;
                    if ms == 0 {
                        return Err(err("heartbeat_ms must be positive".into()));
                    }
                    self.heartbeat_interval = Duration::from_millis(ms);
                }
                "oversub" => {
                    let f: f64 = value.parse().map_err(|_| err(format!("bad oversub {value:?}")))?;
                    if !(f >= 1.0) {
                        return Err(err("oversub must be at least 1".into()));
                    }
                    self.oversubscription = f;
                }
                "rates" => self.rates = value.parse().map_err(err)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        Ok(self)
    }
}

/// Decides whether a client's token is acceptable.
pub trait TokenVerifier: Send + Sync {
    fn verify(&self, client_id: u64, token: &[u8]) -> bool;

    /// Optimistic verifiers let the grant go out first and revoke it if
    /// verification later fails.
    fn optimistic(&self) -> bool {
        false
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AllowAll;

impl TokenVerifier for AllowAll {
    fn verify(&self, _: u64, _: &[u8]) -> bool {
        true
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DenyAll;

impl TokenVerifier for DenyAll {
    fn verify(&self, _: u64, _: &[u8]) -> bool {
        false
    }
}

/// Background verifier that takes `delay` and accepts exactly the tokens
/// listed in `accepted`.
#[derive(Debug, Clone)]
pub struct ScriptedDelay {
    pub delay: Duration,
    pub accepted: Vec<Vec<u8>>,
}

impl TokenVerifier for ScriptedDelay {
    fn verify(&self, _: u64, token: &[u8]) -> bool {
        std::thread::sleep(self.delay);
        self.accepted.iter().any(|t| t == token)
    }

    fn optimistic(&self) -> bool {
        true
    }
}
