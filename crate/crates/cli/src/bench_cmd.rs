use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Subcommand};
use spotlease::bench::{
    bench_bandwidth, bench_cold, bench_echo, bench_latency, bench_latency_paired, bench_offload, bench_parallel,
    median_spread, raw_saturation, BenchError, Demo, LatencyMode, OffloadParams, Report, Stack, StackConfig, Target,
    COLD_STEPS,
};
use spotlease::transport::Fabric;

use crate::{sandbox_kind, Backend, SandboxChoice};

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Backend::Loopback, global = true)]
    backend: Backend,
    /// Also write the results here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use a running manager instead of an in-process stack.
    #[arg(long, global = true)]
    manager: Option<String>,
    /// Executors of the in-process stack.
    #[arg(long, default_value_t = 1, global = true)]
    executors: usize,
    /// Cores per executor; defaults to what the run needs.
    #[arg(long, global = true)]
    cores: Option<u32>,
    #[arg(long, value_enum, default_value_t = SandboxChoice::Inline, global = true)]
    sandbox: SandboxChoice,
    #[command(subcommand)]
    kind: BenchKind,
}

#[derive(Subcommand)]
enum BenchKind {
    /// Echo round trips; `paired` runs raw, hot and warm back to back.
    Latency {
        #[arg(long, default_value = "paired")]
        mode: String,
        #[arg(long, default_value_t = 1024)]
        size: usize,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        #[arg(long, default_value_t = spotlease::bench::DEFAULT_WARMUPS)]
        warmups: usize,
    },
    /// Fresh lease, sandbox and first invocation per trial.
    Cold {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Concurrent hot invocations over 1..N workers.
    Parallel {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 1024)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        rounds: usize,
        #[arg(long, default_value_t = 10)]
        warmups: usize,
        /// Skip the transport-only saturation run.
        #[arg(long)]
        no_saturation: bool,
    },
    /// Hot latency and throughput over payload sizes.
    Bandwidth {
        #[arg(long, value_delimiter = ',', default_value = "1,128,1024,16384,131072,1048576")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = spotlease::bench::DEFAULT_WARMUPS)]
        warmups: usize,
    },
    /// Bit-exact echo check over payload sizes.
    Echo {
        #[arg(long, value_delimiter = ',', default_value = "1,128,1024,1048576,5242880")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
    },
    /// Hybrid local/remote demo against an all-local run.
    Offload {
        #[arg(long)]
        demo: String,
        #[arg(long, default_value_t = 0.5)]
        split: f64,
        #[arg(long, default_value_t = 1)]
        remote_workers: usize,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
    },
}

impl BenchKind {
    fn cores_needed(&self) -> u32 {
        match self {
            Self::Parallel { workers, .. } => workers.iter().copied().max().unwrap_or(1) as u32,
            Self::Offload { remote_workers, .. } => *remote_workers as u32,
            _ => 1,
        }
    }
}

enum Held {
    Local(Stack),
    Remote(Target),
}

impl Held {
    fn target(&self) -> Target {
        match self {
            Self::Local(s) => s.target(),
            Self::Remote(t) => t.clone(),
        }
    }
}

pub fn run(args: BenchArgs) -> ExitCode {
    match execute(&args) {
        Ok((report, ok)) => {
            let text = report.render();
            print!("{text}");
            if let Some(path) = &args.out {
                if let Err(e) = std::fs::write(path, &text) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::FAILURE;
                }
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(BenchError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn start(args: &BenchArgs) -> Result<Held, BenchError> {
    let fabric = Fabric::for_backend(args.backend.into());
    if let Some(manager) = &args.manager {
        return Ok(Held::Remote(Target {
            fabric,
            manager: manager.clone(),
        }));
    }
    if args.executors == 0 {
        return Err(BenchError::Usage("need at least one executor".into()));
    }
    let cores = args.cores.unwrap_or_else(|| args.kind.cores_needed()).max(1);
    let mut config = StackConfig::new(args.backend.into(), vec![cores; args.executors]);
    config.sandbox = sandbox_kind(args.sandbox).map_err(|e| BenchError::Stack(e.to_string()))?;
    Ok(Held::Local(Stack::start(&config)?))
}

/// The report and whether every checked property held.
fn execute(args: &BenchArgs) -> Result<(Report, bool), BenchError> {
    let mut report = Report::default();
    let held = start(args)?;
    let target = held.target();
    let ok = match &args.kind {
        BenchKind::Latency {
            mode,
            size,
            reps,
            warmups,
        } => {
            if mode == "paired" {
                let p = bench_latency_paired(&target, *size, *reps, *warmups)?;
                report.push(&p.raw);
                report.push(&p.hot);
                report.push(&p.warm);
                report.summarize("ordering", if p.ordered() { "ok" } else { "violated" });
                report.summarize("hot_overhead_s", p.overhead());
                report.summarize("warm_minus_hot_s", p.warm.median - p.hot.median);
                p.ordered()
            } else {
                let mode: LatencyMode = mode.parse()?;
                let s = bench_latency(&target, mode, *size, *reps, *warmups)?;
                report.push(&s);
                report.summarize("median_s", s.median);
                report.summarize("mean_s", s.mean);
                true
            }
        }
        BenchKind::Cold { trials } => {
            let stats = bench_cold(&target, *trials)?;
            for t in &stats.trials {
                report.push(t);
            }
            for (name, v) in COLD_STEPS.iter().zip(stats.median.steps()) {
                report.summarize(&format!("median_{name}_s"), v);
            }
            report.summarize("median_total_s", stats.median.total());
            report.summarize("largest_step", stats.median.largest_step());
            true
        }
        BenchKind::Parallel {
            workers,
            size,
            rounds,
            warmups,
            no_saturation,
        } => {
            let points = bench_parallel(&target, workers, *size, *rounds, *warmups)?;
            for p in &points {
                report.push(p);
            }
            report.summarize("median_spread", median_spread(&points));
            if !no_saturation {
                let n = workers.iter().copied().max().unwrap_or(1);
                let sat = raw_saturation(&target.fabric, n, *size, *rounds, *warmups)?;
                report.summarize("raw_saturation_bps", sat);
                if let Some(last) = points.iter().max_by_key(|p| p.workers) {
                    report.summarize("peak_to_saturation", last.throughput / sat);
                }
            }
            true
        }
        BenchKind::Bandwidth { sizes, reps, warmups } => {
            let points = bench_bandwidth(&target, sizes, *reps, *warmups)?;
            for p in &points {
                report.push(p);
            }
            let peak = points.iter().map(|p| p.throughput).fold(0.0, f64::max);
            report.summarize("peak_throughput_bps", peak);
            true
        }
        BenchKind::Echo { sizes, reps } => {
            let mut clean = true;
            for &size in sizes {
                let out = bench_echo(&target, size, *reps)?;
                clean &= out.clean();
                report.push(&out);
            }
            report.summarize("verdict", if clean { "pass" } else { "fail" });
            clean
        }
        BenchKind::Offload {
            demo,
            split,
            remote_workers,
            size,
            iterations,
        } => {
            let mut params = OffloadParams::new(demo.parse::<Demo>()?, *split);
            params.remote_workers = *remote_workers;
            params.iterations = *iterations;
            if let Some(s) = size {
                params.size = *s;
            }
            let out = bench_offload(&target, &params)?;
            report.push(&out);
            let correct = match out.demo {
                Demo::Jacobi => out.exact && out.residual_hybrid == out.residual_local,
                _ => out.exact,
            };
            report.summarize("speedup", out.speedup());
            report.summarize("verdict", if correct { "pass" } else { "fail" });
            correct
        }
    };
    if let Held::Local(stack) = held {
        stack.shutdown();
    }
    Ok((report, ok))
}
