//! Fixtures shared by the criterion benches.

use std::time::Duration;

use spotlease::bench::{Stack, StackConfig};
use spotlease::transport::BackendKind;

pub const SIZES: [usize; 4] = [1, 128, 1024, 1 << 20];

/// A manager and one executor of `cores` cores in this process.
pub fn stack(backend: BackendKind, cores: u32) -> Stack {
    Stack::start(&StackConfig::new(backend, vec![cores])).expect("in-process stack")
}

/// Total of per-round-trip samples, for `iter_custom`.
pub fn total(samples_ns: &[u64]) -> Duration {
    Duration::from_nanos(samples_ns.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_sums_nanoseconds() {
        assert_eq!(total(&[1, 2, 3]), Duration::from_nanos(6));
        assert_eq!(total(&[]), Duration::ZERO);
    }
}
