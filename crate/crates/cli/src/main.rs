use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use spotlease::executor::{ExecutorConfig, ExecutorService, SandboxKind};
use spotlease::manager::{AllowAll, BillingRates, ManagerConfig, ManagerService};
use spotlease::transport::{BackendKind, Fabric};

mod bench_cmd;
mod plan_cmd;

#[derive(Parser)]
#[command(name = "spotlease", version, about = "Lease-based serverless functions over a remote-memory transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resource manager daemon.
    Manager {
        #[command(subcommand)]
        action: ManagerAction,
    },
    /// Spot executor daemon.
    Executor {
        #[command(subcommand)]
        action: ExecutorAction,
    },
    /// Benchmarks; results go to stdout and `--out`.
    Bench(bench_cmd::BenchArgs),
    /// Offload model calculations.
    Offload {
        #[command(subcommand)]
        action: plan_cmd::OffloadAction,
    },
    /// Sandbox process body, started by executors.
    #[command(hide = true)]
    Sandbox,
}

#[derive(Subcommand)]
enum ManagerAction {
    Serve(ManagerArgs),
}

#[derive(Subcommand)]
enum ExecutorAction {
    Serve(ExecutorArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Backend {
    Loopback,
    Tcp,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Loopback => BackendKind::Loopback,
            Backend::Tcp => BackendKind::Tcp,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SandboxChoice {
    Inline,
    Process,
}

/// Process sandboxes re-run this binary with the hidden subcommand.
pub fn sandbox_kind(choice: SandboxChoice) -> std::io::Result<SandboxKind> {
    Ok(match choice {
        SandboxChoice::Inline => SandboxKind::Inline,
        SandboxChoice::Process => SandboxKind::Process {
            program: std::env::current_exe()?,
            args: vec!["sandbox".into()],
        },
    })
}

#[derive(clap::Args)]
struct ManagerArgs {
    #[arg(long, default_value = "127.0.0.1:7100")]
    listen: String,
    /// `key=value` file with listen, heartbeat_ms, oversub, rates.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    heartbeat_ms: Option<u64>,
    #[arg(long)]
    oversub: Option<f64>,
    /// `Ca,Cc,Ch` in dollars per GB-second, core-second and hot-second.
    #[arg(long)]
    rates: Option<BillingRates>,
}

#[derive(clap::Args)]
struct ExecutorArgs {
    #[arg(long)]
    manager: String,
    #[arg(long, default_value_t = 1)]
    cores: u32,
    #[arg(long, default_value_t = 4096)]
    memory_mb: u32,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long, default_value_t = spotlease::executor::DEFAULT_HOT_TIMEOUT_MS)]
    hot_timeout_ms: u64,
    #[arg(long, default_value_t = spotlease::executor::DEFAULT_IDLE_TIMEOUT_S)]
    idle_timeout_s: u64,
    #[arg(long, default_value_t = spotlease::manager::DEFAULT_HEARTBEAT_MS)]
    heartbeat_ms: u64,
    #[arg(long, value_enum, default_value_t = SandboxChoice::Process)]
    sandbox: SandboxChoice,
    /// Leave worker threads unpinned.
    #[arg(long)]
    no_pin: bool,
}

fn serve_manager(args: ManagerArgs) -> Result<(), String> {
    let mut config = ManagerConfig {
        listen: args.listen,
        ..ManagerConfig::default()
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        config = config.merge_kv(&text).map_err(|e| e.to_string())?;
    }
    if let Some(ms) = args.heartbeat_ms {
        config.heartbeat_interval = Duration::from_millis(ms.max(1));
    }
    if let Some(f) = args.oversub {
        config.oversubscription = f;
    }
    if let Some(rates) = args.rates {
        config.rates = rates;
    }
    let manager = ManagerService::start(&Fabric::tcp(), config, std::sync::Arc::new(AllowAll)).map_err(|e| e.to_string())?;
    println!("manager listening on {}", manager.address());
    loop {
        std::thread::park();
    }
}

fn serve_executor(args: ExecutorArgs) -> Result<(), String> {
    let mut config = ExecutorConfig::new(args.manager, args.cores, args.memory_mb);
    config.listen = args.listen;
    config.hot_timeout = Duration::from_millis(args.hot_timeout_ms);
    config.idle_timeout = Duration::from_secs(args.idle_timeout_s);
    config.heartbeat_interval = Duration::from_millis(args.heartbeat_ms.max(1));
    config.sandbox = sandbox_kind(args.sandbox).map_err(|e| e.to_string())?;
    config.pin = !args.no_pin;
    let executor = ExecutorService::start(&Fabric::tcp(), config).map_err(|e| e.to_string())?;
    println!("executor {} listening on {}", executor.executor_id(), executor.address());
    loop {
        std::thread::park();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Manager {
            action: ManagerAction::Serve(args),
        } => serve_manager(args),
        Command::Executor {
            action: ExecutorAction::Serve(args),
        } => serve_executor(args),
        Command::Bench(args) => return bench_cmd::run(args),
        Command::Offload { action } => plan_cmd::run(action),
        Command::Sandbox => {
            spotlease::executor::run_child(std::io::stdin(), std::io::stdout().lock()).map_err(|e| e.to_string())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
