use std::path::PathBuf;

use clap::Subcommand;
use spotlease::offload::{
    fit_network_model, n_local_threshold, n_remote_saturation, parse_samples, plan_split, NetworkModel, PlanInput,
};

#[derive(Subcommand)]
pub enum OffloadAction {
    /// Split a batch of independent tasks between local and remote workers.
    Plan {
        #[arg(long)]
        tasks: u64,
        /// Local task time in milliseconds.
        #[arg(long)]
        t_local: f64,
        /// Remote invocation time in milliseconds.
        #[arg(long)]
        t_inv: f64,
        /// Network latency in milliseconds; taken from `--samples` when absent.
        #[arg(long)]
        latency: Option<f64>,
        /// Link bandwidth in bytes per second; taken from `--samples` when absent.
        #[arg(long)]
        bandwidth: Option<f64>,
        /// `size=.. rtt_ns=..` and `throughput_bps=..` lines to fit the model from.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        data_bytes: u64,
        /// Remote workers available.
        #[arg(long, default_value_t = 1)]
        workers: u64,
        #[arg(long)]
        width: Option<u64>,
    },
    /// Local tasks needed to hide one remote round trip.
    Threshold {
        #[arg(long)]
        t_local: f64,
        #[arg(long)]
        t_inv: f64,
        #[arg(long)]
        latency: f64,
    },
}

fn ms_to_ns(ms: f64, flag: &str) -> Result<u64, String> {
    if ms.is_finite() && ms >= 0.0 {
        Ok((ms * 1e6).round() as u64)
    } else {
        Err(format!("--{flag} must be a non-negative number of milliseconds"))
    }
}

fn model(latency_ns: Option<u64>, bandwidth: Option<f64>, samples: Option<&PathBuf>) -> Result<NetworkModel, String> {
    let fitted = match samples {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let (lat, tput) = parse_samples(&text).map_err(|e| e.to_string())?;
            Some(fit_network_model(&lat, &tput).map_err(|e| e.to_string())?)
        }
        None => None,
    };
    let latency = latency_ns
        .map(|ns| ns as f64 / 1e9)
        .or(fitted.map(|m| m.latency))
        .ok_or("need --latency or --samples")?;
    let bandwidth = bandwidth
        .or(fitted.map(|m| m.bandwidth))
        .ok_or("need --bandwidth or --samples")?;
    NetworkModel::configured(latency, bandwidth).map_err(|e| e.to_string())
}

pub fn run(action: OffloadAction) -> Result<(), String> {
    match action {
        OffloadAction::Threshold { t_local, t_inv, latency } => {
            let n = n_local_threshold(
                ms_to_ns(t_local, "t-local")?,
                ms_to_ns(t_inv, "t-inv")?,
                ms_to_ns(latency, "latency")?,
            ).map_err(|e| e.to_string())?;
            println!("n_local_threshold={n}");
        }
        OffloadAction::Plan {
            tasks,
            t_local,
            t_inv,
            latency,
            bandwidth,
            samples,
            data_bytes,
            workers,
            width,
        } => {
            let t_local_ns = ms_to_ns(t_local, "t-local")?;
            let t_inv_ns = ms_to_ns(t_inv, "t-inv")?;
            let latency_ns = latency.map(|ms| ms_to_ns(ms, "latency")).transpose()?;
            let m = model(latency_ns, bandwidth, samples.as_ref())?;
            let input = PlanInput {
                total_tasks: tasks,
                t_local_ns,
                t_inv_ns,
                latency_ns: m.latency_ns().max(1),
                bandwidth: m.bandwidth,
                data_per_invocation: data_bytes,
                remote_workers: workers,
                width,
            };
            let plan = plan_split(&input).map_err(|e| e.to_string())?;
            let threshold = n_local_threshold(t_local_ns, t_inv_ns, input.latency_ns).map_err(|e| e.to_string())?;
            let saturation = n_remote_saturation(m.bandwidth, data_bytes).map_err(|e| e.to_string())?;
            println!("{plan}");
            println!("n_local_threshold={threshold}");
            println!("n_remote_saturation_per_s={saturation}");
            println!("latency_s={}", m.latency);
            println!("bandwidth_bps={}", m.bandwidth);
        }
    }
    Ok(())
}
