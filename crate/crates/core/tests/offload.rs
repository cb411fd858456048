use std::cmp::Reverse;
use std::collections::BinaryHeap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use spotlease::offload::{
    fit_network_model, n_local_threshold, plan_split, LatencySamples, ModelSource, OffloadError, PlanInput,
};

const US: u64 = 1_000;
const MS: u64 = 1_000_000;

/// Discrete-event schedule: the local thread runs `n_local` tasks back to
/// back; remote requests leave one at a time over the link and each goes to
/// the earliest-free worker. Returns (local finish, last remote result).
fn simulate(input: &PlanInput, n_local: u64) -> (u64, u64) {
    let n_remote = input.total_tasks - n_local;
    let local_done = n_local * input.t_local_ns;
    if n_remote == 0 {
        return (local_done, 0);
    }
    let tau = (input.data_per_invocation as u128 * 1_000_000_000).div_ceil(input.bandwidth as u128) as u64;
    let mut workers: BinaryHeap<Reverse<u64>> = (0..input.remote_workers).map(|_| Reverse(0)).collect();
    let mut link = 0u64;
    let mut last = 0u64;
    for _ in 0..n_remote {
        let Reverse(free) = workers.pop().unwrap();
        let start = free.max(link);
        link = start + tau;
        let done = start + input.t_inv_ns + input.latency_ns;
        last = last.max(done);
        workers.push(Reverse(done));
    }
    (local_done, last)
}

fn admissible(input: &PlanInput, n_local: u64) -> bool {
    let n_remote = input.total_tasks - n_local;
    if n_remote == 0 {
        return true;
    }
    let (local, remote) = simulate(input, n_local);
    let link_budget = input.bandwidth as u128 * local as u128;
    let link_need = n_remote as u128 * input.data_per_invocation as u128 * 1_000_000_000;
    remote <= local && link_need <= link_budget && n_remote <= input.width.unwrap_or(u64::MAX)
}

/// Exhaustive search over every split for the smallest no-wait local share.
fn best_split(input: &PlanInput) -> u64 {
    (0..=input.total_tasks).find(|&n| admissible(input, n)).unwrap()
}

fn grid() -> Vec<(u64, u64, u64)> {
    let mut out = Vec::new();
    for t_local in [1, 2, 3, 5, 7, 10] {
        for t_inv in [1, 2, 4, 9, 12] {
            for l in [1, 3, 5] {
                out.push((t_local * MS, t_inv * MS, l * MS));
            }
        }
    }
    out
}

#[test]
fn threshold_matches_single_task_schedule_search() {
    for (t_local, t_inv, l) in grid() {
        let threshold = n_local_threshold(t_local, t_inv, l).unwrap();
        let input = PlanInput {
            total_tasks: 50,
            t_local_ns: t_local,
            t_inv_ns: t_inv,
            latency_ns: l,
            bandwidth: 1e15,
            data_per_invocation: 1,
            remote_workers: 1,
            width: None,
        };
        // one offloaded task: smallest local count that hides it
        let oracle = (1..=49)
            .find(|&n| {
                let (local, remote) = simulate(&PlanInput { total_tasks: n + 1, ..input }, n);
                remote <= local
            })
            .unwrap();
        assert_eq!(threshold, oracle, "T_local={t_local} T_inv={t_inv} L={l}");
    }
}

#[test]
fn plan_matches_exhaustive_search_and_never_waits() {
    for (t_local, t_inv, l) in grid() {
        for workers in [0, 1, 2, 3, 8] {
            for (bandwidth, data) in [(1e12, 1024), (1e6, 4096), (2e5, 1000)] {
                for total in 1..=50 {
                    let input = PlanInput {
                        total_tasks: total,
                        t_local_ns: t_local,
                        t_inv_ns: t_inv,
                        latency_ns: l,
                        bandwidth,
                        data_per_invocation: data,
                        remote_workers: workers,
                        width: None,
                    };
                    let plan = plan_split(&input).unwrap();
                    assert_eq!(plan.n_local + plan.n_remote, total);
                    let (local, remote) = simulate(&input, plan.n_local);
                    assert!(remote <= local, "local thread idles for {input:?}");
                    if workers > 0 {
                        assert_eq!(plan.n_local, best_split(&input), "{input:?}");
                    }
                    if plan.n_remote > 0 {
                        let threshold = n_local_threshold(t_local, t_inv, l).unwrap();
                        assert!(plan.n_local >= threshold);
                        assert!(plan.predicted_makespan_ns <= total * t_local);
                    }
                }
            }
        }
    }
}

#[test]
fn width_caps_offloaded_count() {
    let input = PlanInput {
        total_tasks: 40,
        t_local_ns: 5 * MS,
        t_inv_ns: 5 * MS,
        latency_ns: MS,
        bandwidth: 1e12,
        data_per_invocation: 8,
        remote_workers: 16,
        width: Some(4),
    };
    let plan = plan_split(&input).unwrap();
    assert_eq!(plan.n_remote, 4);
    assert_eq!(plan.n_local, best_split(&input));
}

#[test]
fn hundred_tasks_with_eight_workers_beats_local() {
    let input = PlanInput {
        total_tasks: 100,
        t_local_ns: 5 * MS,
        t_inv_ns: 12 * MS,
        latency_ns: 3 * MS,
        bandwidth: 1e12,
        data_per_invocation: 1 << 20,
        remote_workers: 8,
        width: None,
    };
    let plan = plan_split(&input).unwrap();
    assert!(plan.n_local >= 3);
    assert!(plan.n_remote > 0);
    assert!(plan.predicted_makespan_ns < 100 * 5 * MS);
    assert_eq!(plan.n_local, best_split(&input));
}

fn synthetic(latency: f64, bandwidth: f64, noise: f64, seed: u64) -> Vec<LatencySamples> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    [1u64, 64, 1024, 65536, 1 << 20]
        .iter()
        .map(|&size| LatencySamples {
            size,
            rtts: (0..101)
                .map(|_| (latency + size as f64 / bandwidth) * (1.0 + rng.random_range(-noise..noise)))
                .collect(),
        })
        .collect()
}

#[test]
fn recovers_linear_model() {
    let samples = synthetic(4e-6, 10e9, 0.01, 1);
    let model = fit_network_model(&samples, &[]).unwrap();
    assert_eq!(model.source, ModelSource::Measured);
    assert!((model.latency - 4e-6).abs() / 4e-6 < 0.05, "{model:?}");
    assert!((model.bandwidth - 10e9).abs() / 10e9 < 0.05, "{model:?}");
}

#[test]
fn constant_samples_have_no_overhead() {
    let samples = vec![
        LatencySamples { size: 8, rtts: vec![5e-6; 30] },
        LatencySamples { size: 4096, rtts: vec![5e-6; 30] },
    ];
    let model = fit_network_model(&samples, &[1e9; 30]).unwrap();
    assert_eq!(model.o_send, 0.0);
    assert_eq!(model.o_recv, 0.0);
}

#[test]
fn too_few_samples() {
    let one = vec![LatencySamples { size: 8, rtts: vec![5e-6] }];
    assert!(matches!(
        fit_network_model(&one, &[]),
        Err(OffloadError::InsufficientSamples { got: 1, .. })
    ));
    assert!(fit_network_model(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn threshold_monotonicity(t_local in 1u64..10_000, t_inv in 1u64..10_000, l in 1u64..10_000, d in 1u64..1000) {
        let base = n_local_threshold(t_local * US, t_inv * US, l * US).unwrap();
        prop_assert!(n_local_threshold((t_local + d) * US, t_inv * US, l * US).unwrap() <= base);
        prop_assert!(n_local_threshold(t_local * US, (t_inv + d) * US, l * US).unwrap() >= base);
        prop_assert!(n_local_threshold(t_local * US, t_inv * US, (l + d) * US).unwrap() >= base);
    }
}
