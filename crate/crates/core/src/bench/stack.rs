use std::sync::Arc;
use std::time::Duration;

use super::BenchError;
use crate::client::{Invoker, InvokerConfig};
use crate::executor::{ExecutorConfig, ExecutorService, SandboxKind};
use crate::manager::{AllowAll, BillingRates, ManagerConfig, ManagerService};
use crate::transport::{BackendKind, Fabric};

/// Where benchmarks send their traffic.
#[derive(Clone)]
pub struct Target {
    pub fabric: Fabric,
    pub manager: String,
}

impl Target {
    pub fn invoker(&self, background_progress: bool) -> Result<Invoker, BenchError> {
        let mut cfg = InvokerConfig::new(self.manager.clone());
        cfg.background_progress = background_progress;
        Ok(Invoker::new(self.fabric.clone(), cfg)?)
    }
}

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub backend: BackendKind,
    /// Core count of each executor.
    pub executors: Vec<u32>,
    pub memory_mb: u32,
    pub oversubscription: f64,
    pub sandbox: SandboxKind,
    pub heartbeat_interval: Duration,
    pub rates: BillingRates,
    pub pin: bool,
}

impl StackConfig {
    pub fn new(backend: BackendKind, executors: Vec<u32>) -> Self {
        Self {
            backend,
            executors,
            memory_mb: 64 * 1024,
            oversubscription: 1.0,
            sandbox: SandboxKind::Inline,
            heartbeat_interval: Duration::from_millis(500),
            rates: BillingRates::from_dollars(1e-5, 1e-4, 5e-5),
            pin: false,
        }
    }
}

/// A manager and its executors running inside this process.
pub struct Stack {
    pub fabric: Fabric,
    pub manager: ManagerService,
    pub executors: Vec<ExecutorService>,
}

impl Stack {
    pub fn start(config: &StackConfig) -> Result<Self, BenchError> {
        let fabric = Fabric::for_backend(config.backend);
        let mcfg = ManagerConfig {
            oversubscription: config.oversubscription,
            heartbeat_interval: config.heartbeat_interval,
            rates: config.rates,
            ..ManagerConfig::default()
        };
        let manager = ManagerService::start(&fabric, mcfg, Arc::new(AllowAll))
            .map_err(|e| BenchError::Stack(e.to_string()))?;
        let mut executors = Vec::new();
        for &cores in &config.executors {
            let mut ecfg = ExecutorConfig::new(manager.address(), cores, config.memory_mb);
            ecfg.sandbox = config.sandbox.clone();
            ecfg.heartbeat_interval = config.heartbeat_interval;
            ecfg.pin = config.pin;
            executors.push(ExecutorService::start(&fabric, ecfg).map_err(|e| BenchError::Stack(e.to_string()))?);
        }
        Ok(Self {
            fabric,
            manager,
            executors,
        })
    }

    pub fn target(&self) -> Target {
        Target {
            fabric: self.fabric.clone(),
            manager: self.manager.address().to_string(),
        }
    }

    pub fn shutdown(self) {
        self.executors.into_iter().for_each(ExecutorService::shutdown);
        self.manager.shutdown();
    }
}
