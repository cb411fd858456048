use criterion::{black_box, criterion_group, criterion_main, Criterion};
use spotlease::offload::{fit_network_model, n_local_threshold, plan_split, LatencySamples, PlanInput};

fn planner(c: &mut Criterion) {
    c.bench_function("n_local_threshold", |b| {
        b.iter(|| n_local_threshold(black_box(3_000), black_box(9_000), black_box(4_000)).unwrap())
    });
    let input = PlanInput {
        total_tasks: 10_000,
        t_local_ns: 2_000_000,
        t_inv_ns: 2_500_000,
        latency_ns: 5_000,
        bandwidth: 1.25e10,
        data_per_invocation: 64 << 10,
        remote_workers: 32,
        width: None,
    };
    c.bench_function("plan_split/10k_tasks", |b| b.iter(|| plan_split(black_box(&input)).unwrap()));
    let samples: Vec<LatencySamples> = (0..16)
        .map(|i| {
            let size = 64u64 << i;
            LatencySamples {
                size,
                rtts: (0..50).map(|k| 4e-6 + size as f64 * 1e-10 + k as f64 * 1e-9).collect(),
            }
        })
        .collect();
    c.bench_function("fit_network_model", |b| b.iter(|| fit_network_model(black_box(&samples), &[])));
}

criterion_group!(benches, planner);
criterion_main!(benches);
