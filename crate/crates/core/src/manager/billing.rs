use std::collections::HashMap;
use std::str::FromStr;

use crate::transport::{MemoryDomain, RegisteredBuffer, RemoteBufferRef, TransportError};

/// Prices in femtodollars per milli-unit: per milli-GB-second for
/// allocation, per millisecond for compute and hot polling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BillingRates {
    pub ca_femto: u128,
    pub cc_femto: u128,
    pub ch_femto: u128,
}

const FEMTO_PER_MILLI: f64 = 1e12;

impl BillingRates {
    /// From dollars per GB-second, per second and per second.
    pub fn from_dollars(ca: f64, cc: f64, ch: f64) -> Self {
        let conv = |v: f64| (v * FEMTO_PER_MILLI).round() as u128;
        Self {
            ca_femto: conv(ca),
            cc_femto: conv(cc),
            ch_femto: conv(ch),
        }
    }
}

impl FromStr for BillingRates {
    type Err = String;

    /// `Ca,Cc,Ch` in dollars.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("bad rates {s:?}"))?;
        match parts[..] {
            [ca, cc, ch] if parts.iter().all(|v| *v >= 0.0 && v.is_finite()) => Ok(Self::from_dollars(ca, cc, ch)),
            _ => Err(format!("rates need three non-negative values, got {s:?}")),
        }
    }
}

/// Accumulated usage of one client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Usage {
    pub t_a_milli_gbs: u64,
    pub t_c_ms: u64,
    pub t_h_ms: u64,
}

impl Usage {
    pub fn cost_femto(&self, rates: &BillingRates) -> u128 {
        rates.ca_femto * self.t_a_milli_gbs as u128
            + rates.cc_femto * self.t_c_ms as u128
            + rates.ch_femto * self.t_h_ms as u128
    }
}

pub const SLOT_T_A: usize = 0;
pub const SLOT_T_C: usize = 1;
pub const SLOT_T_H: usize = 2;

/// Per-client counters living in registered memory, updated by executors
/// with remote fetch-and-add.
pub struct BillingLedger {
    domain: MemoryDomain,
    accounts: HashMap<u64, RegisteredBuffer>,
    rates: BillingRates,
}

impl std::fmt::Debug for BillingLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BillingLedger")
            .field("accounts", &self.accounts.len())
            .field("rates", &self.rates)
            .finish()
    }
}

impl BillingLedger {
    pub fn new(domain: MemoryDomain, rates: BillingRates) -> Self {
        Self {
            domain,
            accounts: HashMap::new(),
            rates,
        }
    }

    pub fn rates(&self) -> BillingRates {
        self.rates
    }

    pub fn open(&mut self, client_id: u64) -> Result<[RemoteBufferRef; 3], TransportError> {
        if !self.accounts.contains_key(&client_id) {
            let buf = self.domain.alloc_registered(24)?;
            self.accounts.insert(client_id, buf);
        }
        Ok(self.slots(client_id).expect("just opened"))
    }

    pub fn slots(&self, client_id: u64) -> Option<[RemoteBufferRef; 3]> {
        let r = self.accounts.get(&client_id)?.remote_ref();
        Some(std::array::from_fn(|i| r.slice(i as u32 * 8, 8).expect("24-byte account")))
    }

    pub fn usage(&self, client_id: u64) -> Option<Usage> {
        let buf = self.accounts.get(&client_id)?;
        Some(Usage {
            t_a_milli_gbs: buf.read_u64(SLOT_T_A * 8),
            t_c_ms: buf.read_u64(SLOT_T_C * 8),
            t_h_ms: buf.read_u64(SLOT_T_H * 8),
        })
    }

    pub fn cost_femto(&self, client_id: u64) -> Option<u128> {
        self.usage(client_id).map(|u| u.cost_femto(&self.rates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_example() {
        let rates: BillingRates = "1e-5,1e-4,5e-5".parse().unwrap();
        let usage = Usage {
            t_a_milli_gbs: 200_000,
            t_c_ms: 50_000,
            t_h_ms: 30_000,
        };
        // $0.0085
        assert_eq!(usage.cost_femto(&rates), 8_500_000_000_000);
        assert_eq!(Usage::default().cost_femto(&rates), 0);
        assert!("1,2".parse::<BillingRates>().is_err());
        assert!("1,-2,3".parse::<BillingRates>().is_err());
    }
}
