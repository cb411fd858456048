use std::collections::{BTreeMap, HashMap};

use super::billing::{BillingLedger, Usage};
use super::{ManagerConfig, ManagerError, MISSED_HEARTBEATS_FOR_DEAD};
use crate::protocol::{AllocationRequest, ExecutorDescriptor, LeaseGrant, TerminationReason, WorkerSlot};
use crate::transport::{MemoryDomain, RemoteBufferRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutorStatus {
    Alive,
    Suspect,
    Dead,
}

#[derive(Debug, Clone)]
pub struct ExecutorRecord {
    pub descriptor: ExecutorDescriptor,
    pub last_heartbeat_ms: u64,
    pub status: ExecutorStatus,
    /// Placement capacity after oversubscription.
    pub capacity_cores: u32,
    pub capacity_memory_mb: u32,
    pub free_cores: u32,
    pub free_memory_mb: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaseState {
    Active,
    Expired,
    Released,
    TerminatedByEviction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub lease_id: u64,
    pub client_id: u64,
    pub executor_id: u64,
    pub cores: u32,
    pub memory_mb: u32,
    pub granted_at_ms: u64,
    pub expiry_ms: u64,
    pub state: LeaseState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Recipient {
    Executor(u64),
    Client(u64),
}

/// A lease-termination message the caller must deliver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Notice {
    pub to: Recipient,
    pub lease_id: u64,
    pub reason: TerminationReason,
}

#[derive(Debug)]
pub struct ResourceManager {
    config: ManagerConfig,
    executors: BTreeMap<u64, ExecutorRecord>,
    leases: HashMap<u64, Lease>,
    cursor: usize,
    next_executor: u64,
    next_lease: u64,
    ledger: BillingLedger,
}

impl ResourceManager {
    pub fn new(config: ManagerConfig, domain: MemoryDomain) -> Self {
        let ledger = BillingLedger::new(domain, config.rates);
        Self {
            config,
            executors: BTreeMap::new(),
            leases: HashMap::new(),
            cursor: 0,
            next_executor: 1,
            next_lease: 1,
            ledger,
        }
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    fn interval_ms(&self) -> u64 {
        self.config.heartbeat_interval.as_millis() as u64
    }

    pub fn executor(&self, id: u64) -> Option<&ExecutorRecord> {
        self.executors.get(&id)
    }

    pub fn executors(&self) -> impl Iterator<Item = &ExecutorRecord> {
        self.executors.values()
    }

    pub fn lease(&self, id: u64) -> Option<&Lease> {
        self.leases.get(&id)
    }

    pub fn leases(&self) -> impl Iterator<Item = &Lease> {
        self.leases.values()
    }

    pub fn ledger(&self) -> &BillingLedger {
        &self.ledger
    }

    pub fn register_executor(&mut self, now_ms: u64, desc: ExecutorDescriptor) -> Result<u64, ManagerError> {
        desc.validate()?;
        if let Some((&id, _)) = self
            .executors
            .iter()
            .find(|(_, r)| r.descriptor.address == desc.address)
        {
            if self.executors[&id].status != ExecutorStatus::Dead {
                return Err(ManagerError::DuplicateExecutor(desc.address));
            }
            self.executors.remove(&id);
        }
        let id = self.next_executor;
        self.next_executor += 1;
        let scale = |v: u32| (v as f64 * self.config.oversubscription).floor().min(u32::MAX as f64) as u32;
        let (cores, memory) = (scale(desc.total_cores), scale(desc.total_memory_mb));
        self.executors.insert(
            id,
            ExecutorRecord {
                descriptor: ExecutorDescriptor {
                    executor_id: id,
                    ..desc
                },
                last_heartbeat_ms: now_ms,
                status: ExecutorStatus::Alive,
                capacity_cores: cores,
                capacity_memory_mb: memory,
                free_cores: cores,
                free_memory_mb: memory,
            },
        );
        Ok(id)
    }

    pub fn deregister_executor(&mut self, id: u64) -> Result<Vec<Notice>, ManagerError> {
        if !self.executors.contains_key(&id) {
            return Err(ManagerError::UnknownExecutor(id));
        }
        let notices = self.terminate_executor_leases(id, TerminationReason::Evicted, true);
        self.executors.remove(&id);
        Ok(notices)
    }

    /// Places a lease with first-fit starting at the round-robin cursor.
    pub fn request_lease(
        &mut self,
        now_ms: u64,
        client_id: u64,
        req: &AllocationRequest,
    ) -> Result<LeaseGrant, ManagerError> {
        req.validate()?;
        let order: Vec<u64> = self.executors.keys().copied().collect();
        let n = order.len();
        let pick = (0..n).map(|k| (self.cursor + k) % n).find(|&i| {
            let r = &self.executors[&order[i]];
            r.status != ExecutorStatus::Dead && r.free_cores >= req.cores && r.free_memory_mb >= req.memory_mb
        });
        let Some(i) = pick else {
            return Err(ManagerError::InsufficientResources {
                cores: req.cores,
                memory_mb: req.memory_mb,
            });
        };
        self.ledger
            .open(client_id)
            .map_err(|_| ManagerError::InsufficientResources {
                cores: req.cores,
                memory_mb: req.memory_mb,
            })?;
        self.cursor = (i + 1) % n;
        let executor_id = order[i];
        let record = self.executors.get_mut(&executor_id).expect("picked");
        record.free_cores -= req.cores;
        record.free_memory_mb -= req.memory_mb;
        let address = record.descriptor.address.clone();
        let lease_id = self.next_lease;
        self.next_lease += 1;
        let expiry_ms = now_ms + req.timeout_s as u64 * 1000;
        self.leases.insert(
            lease_id,
            Lease {
                lease_id,
                client_id,
                executor_id,
                cores: req.cores,
                memory_mb: req.memory_mb,
                granted_at_ms: now_ms,
                expiry_ms,
                state: LeaseState::Active,
            },
        );
        Ok(LeaseGrant {
            lease_id,
            executor_id,
            executor_endpoints: (0..req.cores)
                .map(|worker_id| WorkerSlot {
                    address: address.clone(),
                    worker_id,
                })
                .collect(),
            expiry_ms,
        })
    }

    fn close_lease(&mut self, lease_id: u64, state: LeaseState) -> Result<&Lease, ManagerError> {
        let lease = self.leases.get_mut(&lease_id).ok_or(ManagerError::UnknownLease(lease_id))?;
        if lease.state != LeaseState::Active {
            return Err(ManagerError::LeaseClosed(lease_id));
        }
        lease.state = state;
        if let Some(r) = self.executors.get_mut(&lease.executor_id) {
            r.free_cores += lease.cores;
            r.free_memory_mb += lease.memory_mb;
        }
        Ok(lease)
    }

    /// Client-initiated release; the executor is told to tear down.
    pub fn release_lease(&mut self, lease_id: u64) -> Result<Vec<Notice>, ManagerError> {
        let lease = self.close_lease(lease_id, LeaseState::Released)?;
        Ok(vec![Notice {
            to: Recipient::Executor(lease.executor_id),
            lease_id,
            reason: TerminationReason::Released,
        }])
    }

    /// Executor-initiated end of a lease (idle timeout or local expiry).
    pub fn lease_ended_by_executor(&mut self, lease_id: u64, reason: TerminationReason) -> Result<Vec<Notice>, ManagerError> {
        let state = match reason {
            TerminationReason::Expired => LeaseState::Expired,
            _ => LeaseState::Released,
        };
        let lease = self.close_lease(lease_id, state)?;
        Ok(vec![Notice {
            to: Recipient::Client(lease.client_id),
            lease_id,
            reason,
        }])
    }

    /// Revocation after failed background verification.
    pub fn revoke_lease(&mut self, lease_id: u64) -> Result<Vec<Notice>, ManagerError> {
        let lease = self.close_lease(lease_id, LeaseState::TerminatedByEviction)?;
        Ok(both(lease, TerminationReason::AuthRejected).to_vec())
    }

    pub fn expire_leases(&mut self, now_ms: u64) -> Vec<Notice> {
        let due: Vec<u64> = self
            .leases
            .values()
            .filter(|l| l.state == LeaseState::Active && l.expiry_ms <= now_ms)
            .map(|l| l.lease_id)
            .collect();
        let mut notices = Vec::new();
        for id in due {
            let lease = self.close_lease(id, LeaseState::Expired).expect("active");
            notices.extend(both(lease, TerminationReason::Expired));
        }
        notices
    }

    /// Capacities in the heartbeat are informational; placement uses the
    /// manager's own accounting.
    pub fn heartbeat(&mut self, now_ms: u64, executor_id: u64, free_cores: u32, free_memory_mb: u32) -> Result<(), ManagerError> {
        let r = self
            .executors
            .get_mut(&executor_id)
            .filter(|r| r.status != ExecutorStatus::Dead)
            .ok_or(ManagerError::UnknownExecutor(executor_id))?;
        r.last_heartbeat_ms = now_ms;
        r.status = ExecutorStatus::Alive;
        r.descriptor.free_cores = free_cores.min(r.descriptor.total_cores);
        r.descriptor.free_memory_mb = free_memory_mb.min(r.descriptor.total_memory_mb);
        Ok(())
    }

    pub fn liveness_sweep(&mut self, now_ms: u64) -> Vec<Notice> {
        let interval = self.interval_ms();
        let mut dead = Vec::new();
        for (&id, r) in self.executors.iter_mut() {
            if r.status == ExecutorStatus::Dead {
                continue;
            }
            let silent = now_ms.saturating_sub(r.last_heartbeat_ms);
            if silent >= MISSED_HEARTBEATS_FOR_DEAD * interval {
                r.status = ExecutorStatus::Dead;
                dead.push(id);
            } else if silent >= interval {
                r.status = ExecutorStatus::Suspect;
            }
        }
        let mut notices = Vec::new();
        for id in dead {
            log::warn!("executor {id} missed {MISSED_HEARTBEATS_FOR_DEAD} heartbeats, marking dead");
            notices.extend(self.terminate_executor_leases(id, TerminationReason::ExecutorDead, false));
        }
        notices
    }

    fn terminate_executor_leases(&mut self, executor_id: u64, reason: TerminationReason, tell_executor: bool) -> Vec<Notice> {
        let ids: Vec<u64> = self
            .leases
            .values()
            .filter(|l| l.executor_id == executor_id && l.state == LeaseState::Active)
            .map(|l| l.lease_id)
            .collect();
        let mut notices = Vec::new();
        for id in ids {
            let lease = self.close_lease(id, LeaseState::TerminatedByEviction).expect("active");
            if tell_executor {
                notices.extend(both(lease, reason));
            } else {
                notices.push(Notice {
                    to: Recipient::Client(lease.client_id),
                    lease_id: id,
                    reason,
                });
            }
        }
        notices
    }

    /// Earliest instant at which a sweep could change state.
    pub fn next_deadline_ms(&self) -> Option<u64> {
        let dead_after = MISSED_HEARTBEATS_FOR_DEAD * self.interval_ms();
        let heartbeat = self
            .executors
            .values()
            .filter(|r| r.status != ExecutorStatus::Dead)
            .map(|r| r.last_heartbeat_ms + dead_after);
        let expiry = self
            .leases
            .values()
            .filter(|l| l.state == LeaseState::Active)
            .map(|l| l.expiry_ms);
        heartbeat.chain(expiry).min()
    }

    pub fn billing_slots(&self, client_id: u64) -> Result<[RemoteBufferRef; 3], ManagerError> {
        self.ledger.slots(client_id).ok_or(ManagerError::UnknownClient(client_id))
    }

    pub fn usage(&self, client_id: u64) -> Result<Usage, ManagerError> {
        self.ledger.usage(client_id).ok_or(ManagerError::UnknownClient(client_id))
    }

    pub fn cost_femto(&self, client_id: u64) -> Result<u128, ManagerError> {
        self.ledger.cost_femto(client_id).ok_or(ManagerError::UnknownClient(client_id))
    }

    /// Checks `capacity = free + sum(active grants)` for every executor.
    pub fn conservation_holds(&self) -> bool {
        self.executors.iter().all(|(&id, r)| {
            let (cores, mem) = self
                .leases
                .values()
                .filter(|l| l.executor_id == id && l.state == LeaseState::Active)
                .fold((0, 0), |(c, m), l| (c + l.cores, m + l.memory_mb));
            r.free_cores + cores == r.capacity_cores && r.free_memory_mb + mem == r.capacity_memory_mb
        })
    }
}

fn both(lease: &Lease, reason: TerminationReason) -> [Notice; 2] {
    [
        Notice {
            to: Recipient::Executor(lease.executor_id),
            lease_id: lease.lease_id,
            reason,
        },
        Notice {
            to: Recipient::Client(lease.client_id),
            lease_id: lease.lease_id,
            reason,
        },
    ]
}
