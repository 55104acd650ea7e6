//! Command-line surface. Every override is optional so that values can fall
//! back to the config file and then to the built-in defaults noted in each
//! flag's help text.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use enroute_core::simulator::Strategy;
use enroute_core::ugd::RemainingMode;

#[derive(Parser, Debug)]
#[command(name = "enroute", version, about = "En-route travel-time estimation with uncertainty-guided re-estimation")]
pub struct Cli {
    /// TOML config file; flags override it, it overrides built-in defaults
    #[arg(long, global = true, env = "ENROUTE_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic route dataset
    Gen(GenArgs),
    /// Train the interval backbone and write a checkpoint plus metrics log
    Train(TrainArgs),
    /// Score a checkpoint on held-out routes
    Eval(EvalArgs),
    /// Replay a query workload under several serving strategies
    Simulate(SimulateArgs),
    /// Serve pre-route and en-route queries over line-delimited JSON
    Serve(ServeArgs),
    /// Print the counters of a running server
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    /// The seeded 10% test split
    Test,
    /// Every route in the file
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Quantile,
    Mis,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output route file, one JSON route per line
    #[arg(long, env = "ENROUTE_DATA")]
    pub out: PathBuf,
    /// Number of routes [default: 1000]
    #[arg(long)]
    pub routes: Option<usize>,
    /// Fewest segments per route [default: 20]
    #[arg(long)]
    pub min_segments: Option<usize>,
    /// Most segments per route [default: 40]
    #[arg(long)]
    pub max_segments: Option<usize>,
    /// Lognormal noise sigma for every road class [default: 0.2]
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// [default: 0]
    #[arg(long, env = "ENROUTE_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Route file with ground truth
    #[arg(long, env = "ENROUTE_DATA")]
    pub data: PathBuf,
    /// Checkpoint to write
    #[arg(long, env = "ENROUTE_MODEL")]
    pub out: PathBuf,
    /// Metrics log [default: checkpoint path with extension .log.ndjson]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Iterations per epoch [default: one pass over the training routes]
    #[arg(long)]
    pub iters: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Outer learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Inner step size [default: same as --lr]
    #[arg(long)]
    pub inner_lr: Option<f64>,
    /// [default: 0.001]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Interval-width penalty weight [default: 1.0]
    #[arg(long)]
    pub mpiw_weight: Option<f64>,
    /// Traveled fraction of each training route [default: 0.3]
    #[arg(long)]
    pub split_fraction: Option<f64>,
    /// Hidden layer width [default: 64]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Hidden layer count [default: 4]
    #[arg(long)]
    pub depth: Option<usize>,
    /// Train both losses at the current parameters, without the inner step
    #[arg(long)]
    pub no_ftml: bool,
    /// Interval objective [default: quantile]
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    /// Interval-score miscoverage rate for --loss mis [default: 0.2]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Seed for initialization and batching [default: 0]
    #[arg(long, env = "ENROUTE_SEED")]
    pub seed: Option<u64>,
    /// Seed of the train/validation/test split [default: 0]
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, env = "ENROUTE_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "ENROUTE_MODEL")]
    pub model: PathBuf,
    /// Write the JSON metrics here as well as to stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    /// Traveled fraction for remaining-route scoring [default: 0.3]
    #[arg(long)]
    pub split_fraction: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, env = "ENROUTE_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "ENROUTE_MODEL")]
    pub model: PathBuf,
    /// JSON report file
    #[arg(long, env = "ENROUTE_REPORT")]
    pub out: PathBuf,
    /// Flat strategy,metric,value table
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Per-checkpoint trace rows for every strategy
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    /// Routes in the workload [default: 100]
    #[arg(long)]
    pub routes: Option<usize>,
    /// Checkpoints per route [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated strategies [default: ugd,random,greedy]
    #[arg(long, value_delimiter = ',')]
    pub strategy: Option<Vec<Strategy>>,
    /// Fraction of routes with injected congestion [default: 0]
    #[arg(long)]
    pub congestion: Option<f64>,
    /// Travel-time multiplier after the congestion onset [default: 3.0]
    #[arg(long)]
    pub slowdown: Option<f64>,
    /// Mean gap between route departures in seconds [default: 30]
    #[arg(long)]
    pub mean_gap: Option<f64>,
    /// Simulated seconds per model call [default: 0.01]
    #[arg(long)]
    pub service_time: Option<f64>,
    /// Simultaneous model calls [default: 1]
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Lognormal service-time jitter [default: 0]
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Retained remaining estimate [default: profile]
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RemainingMode>,
    /// Seed for workload, congestion and jitter [default: 0]
    #[arg(long, env = "ENROUTE_SEED")]
    pub seed: Option<u64>,
    /// [default: 0]
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = "ENROUTE_MODEL")]
    pub model: PathBuf,
    /// Listen address [default: 127.0.0.1:7878]
    #[arg(long, env = "ENROUTE_ADDR")]
    pub addr: Option<String>,
    /// Concurrent connection limit [default: 64]
    #[arg(long)]
    pub max_connections: Option<usize>,
    /// Checkpoints when a pre-route request omits k [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Retained remaining estimate [default: profile]
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RemainingMode>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long, env = "ENROUTE_ADDR", default_value = "127.0.0.1:7878")]
    pub addr: String,
}

fn parse_mode(s: &str) -> Result<RemainingMode, String> {
    match s {
        "profile" => Ok(RemainingMode::Profile),
        "elapsed" => Ok(RemainingMode::Elapsed),
        other => Err(format!("unknown mode {other:?}, expected profile or elapsed")),
    }
}
