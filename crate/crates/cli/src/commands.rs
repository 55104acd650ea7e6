use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use enroute_core::backbone::{load_checkpoint, save_checkpoint, MlpConfig, ModelParams};
use enroute_core::datagen::{generate, load_routes, split_dataset, write_routes, LoadMode};
use enroute_core::ftml::{
    self, full_route_coverage, make_splits, predict_full, remaining_metrics, MetaMode, TrainConfig,
};
use enroute_core::losses::Objective;
use enroute_core::service::Server;
use enroute_core::simulator::{
    accuracy_metrics, congestion_scenario, report_table, run_all, trace_table, AccuracyMetrics, ServerModel, SimReport,
    Workload,
};
use enroute_core::ugd::RemainingMode;
use enroute_core::Route;
use serde::Serialize;

use crate::args::{Command, EvalArgs, GenArgs, LossKind, ServeArgs, SimulateArgs, StatsArgs, Subset, TrainArgs};
use crate::config::{FileConfig, NetworkConfig};
use crate::error::{CliError, Context, Result};

pub const SIM_REPORT_FORMAT: &str = "enroute-sim/1";

pub fn run(command: Command, file: FileConfig) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a, file),
        Command::Train(a) => train(a, file),
        Command::Eval(a) => eval(a, file),
        Command::Simulate(a) => simulate(a, file),
        Command::Serve(a) => serve(a, file),
        Command::Stats(a) => stats(a),
    }
}

fn io_error(path: &Path, err: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {err}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Vec<Route>> {
    if !path.is_file() {
        return Err(CliError::Data(format!("dataset {} not found", path.display())));
    }
    let report = load_routes(path, LoadMode::Strict).context(&path.display().to_string())?;
    if report.routes.is_empty() {
        return Err(CliError::Data(format!("dataset {} is empty", path.display())));
    }
    Ok(report.routes)
}

fn load_model(path: &Path) -> Result<ModelParams> {
    if !path.is_file() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    load_checkpoint(path).context(&path.display().to_string())
}

fn select(routes: Vec<Route>, subset: Subset, split_seed: u64) -> Vec<Route> {
    match subset {
        Subset::All => routes,
        Subset::Test => split_dataset(routes, split_seed).2,
    }
}

/// Writes through a sibling temp file so a failed write leaves no partial output.
fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        body(&mut w)?;
        w.flush()
    });
    if let Err(e) = result.and_then(|_| std::fs::rename(&tmp, path)) {
        let _ = std::fs::remove_file(&tmp);
        return Err(io_error(path, e));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(path, |w| writeln!(w, "{text}"))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn gen(args: GenArgs, file: FileConfig) -> Result<()> {
    let mut cfg = file.gen;
    if let Some(n) = args.routes {
        cfg.routes = n;
    }
    if let Some(n) = args.min_segments {
        cfg.min_segments = n;
    }
    if let Some(n) = args.max_segments {
        cfg.max_segments = n;
    }
    if let Some(s) = args.noise_sigma {
        cfg = cfg.with_noise(s);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate().context("gen")?;
    let routes = generate(&cfg).context("gen")?;
    let mut tmp = args.out.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    write_routes(&tmp, &routes).context(&args.out.display().to_string())?;
    std::fs::rename(&tmp, &args.out).map_err(|e| io_error(&args.out, e))?;
    print_json(&serde_json::json!({ "routes": routes.len(), "out": args.out, "seed": cfg.seed }));
    Ok(())
}

/// First line of the metrics log.
#[derive(Serialize)]
struct LogHeader<'a> {
    trainer: &'static str,
    network: MlpConfig,
    config: &'a TrainConfig,
    train_routes: usize,
    val_routes: usize,
    split_seed: u64,
}

fn train_config(args: &TrainArgs, file: &FileConfig) -> Result<(TrainConfig, NetworkConfig, u64)> {
    let mut cfg = file.train.clone();
    let mut net = file.network;
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.lr, args.lr);
    set(&mut cfg.weight_decay, args.weight_decay);
    set(&mut cfg.split_fraction, args.split_fraction);
    set(&mut cfg.quantiles.mpiw_weight, args.mpiw_weight);
    if args.inner_lr.is_some() {
        cfg.inner_lr = args.inner_lr;
    }
    if let Some(n) = args.epochs {
        cfg.epochs = n;
    }
    if args.iters.is_some() {
        cfg.iters_per_epoch = args.iters;
    }
    if let Some(n) = args.batch_size {
        cfg.batch_size = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_ftml {
        cfg.meta_mode = MetaMode::Joint;
    }
    match (args.loss, args.rho) {
        (Some(LossKind::Quantile), None) => cfg.objective = Objective::Quantile,
        (Some(LossKind::Quantile), Some(_)) => return Err(CliError::Config("--rho requires --loss mis".into())),
        (Some(LossKind::Mis), rho) => cfg.objective = Objective::Mis { rho: rho.unwrap_or(0.2) },
        (None, Some(rho)) => match cfg.objective {
            Objective::Mis { .. } => cfg.objective = Objective::Mis { rho },
            Objective::Quantile => return Err(CliError::Config("--rho requires --loss mis".into())),
        },
        (None, None) => {}
    }
    if let Objective::Mis { rho } = cfg.objective {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(CliError::Config(format!("rho must be in (0, 1), got {rho}")));
        }
    }
    if let Some(n) = args.hidden {
        net.hidden_width = n;
    }
    if let Some(n) = args.depth {
        net.depth = n;
    }
    cfg.validate().context("train")?;
    let split_seed = args.split_seed.unwrap_or(file.data.split_seed);
    Ok((cfg, net, split_seed))
}

fn train(args: TrainArgs, file: FileConfig) -> Result<()> {
    let (cfg, net, split_seed) = train_config(&args, &file)?;
    let network = MlpConfig::standard(net.hidden_width, net.depth);
    network.validate().context("network")?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log.ndjson"));

    let (train_routes, val_routes, _) = split_dataset(load_dataset(&args.data)?, split_seed);
    let train_set = make_splits(&train_routes, cfg.split_fraction).context("training routes")?;
    let val_set = make_splits(&val_routes, cfg.split_fraction).context("validation routes")?;
    let init = ModelParams::init(network, cfg.seed).context("init")?;
    let report = ftml::train(&init, &train_set, &val_set, &cfg).context("training")?;
    if !report.best.is_finite() {
        return Err(CliError::Numeric("training produced non-finite parameters".into()));
    }

    let trainer = if cfg.meta_mode == MetaMode::FirstOrder { "ftml" } else { "plain" };
    let header = LogHeader {
        trainer,
        network,
        config: &cfg,
        train_routes: train_set.len(),
        val_routes: val_set.len(),
        split_seed,
    };
    write_atomic(&log_path, |w| {
        serde_json::to_writer(&mut *w, &header)?;
        writeln!(w)?;
        for rec in &report.log {
            serde_json::to_writer(&mut *w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    save_checkpoint(&report.best, &args.out).context(&args.out.display().to_string())?;
    print_json(&serde_json::json!({
        "trainer": trainer,
        "checkpoint": args.out,
        "log": log_path,
        "outer_updates": report.outer_updates,
        "inner_updates": report.inner_updates,
        "best_epoch": report.best_epoch,
        "best_val_mape": report.best_val_mape,
    }));
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    routes: usize,
    split_fraction: f64,
    /// Remaining-route point accuracy given the traveled part.
    remaining: AccuracyMetrics,
    /// Pre-route full-route point accuracy.
    full_route: AccuracyMetrics,
    /// Fraction of full-route ground truths inside the pre-route interval.
    coverage: f64,
    mean_width_s: f64,
}

fn eval(args: EvalArgs, file: FileConfig) -> Result<()> {
    let split_fraction = args.split_fraction.unwrap_or(file.train.split_fraction);
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(CliError::Config(format!("split fraction must be in (0, 1), got {split_fraction}")));
    }
    let params = load_model(&args.model)?;
    let routes = select(load_dataset(&args.data)?, args.subset, args.split_seed.unwrap_or(file.data.split_seed));
    if routes.is_empty() {
        return Err(CliError::Data("no routes to evaluate".into()));
    }
    let splits = make_splits(&routes, split_fraction).context("evaluation routes")?;
    let full = predict_full(&params, &routes).context("prediction")?;
    let pairs: Vec<(f64, f64)> =
        full.iter().zip(&routes).map(|(p, r)| (p.point(), r.total_time_s().unwrap_or(f64::NAN))).collect();
    let report = EvalReport {
        routes: routes.len(),
        split_fraction,
        remaining: remaining_metrics(&params, &splits).context("remaining metrics")?,
        full_route: accuracy_metrics(&pairs).context("full-route metrics")?,
        coverage: full_route_coverage(&params, &routes).context("coverage")?,
        mean_width_s: full.iter().map(|t| t.width()).sum::<f64>() / full.len() as f64,
    };
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&report);
    Ok(())
}

/// Self-describing simulation output.
#[derive(Serialize)]
struct SimulationRecord<'a> {
    format: &'static str,
    routes: usize,
    k: usize,
    seed: u64,
    congestion_fraction: f64,
    slowdown: f64,
    mean_gap_s: f64,
    mode: RemainingMode,
    server: ServerModel,
    congested: Vec<&'a str>,
    reports: &'a [SimReport],
}

fn simulate(args: SimulateArgs, file: FileConfig) -> Result<()> {
    let mut cfg = file.simulate;
    if let Some(n) = args.routes {
        cfg.routes = n;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(s) = args.strategy {
        cfg.strategies = s;
    }
    if let Some(f) = args.congestion {
        cfg.congestion = f;
    }
    if let Some(s) = args.slowdown {
        cfg.slowdown = s;
    }
    if let Some(g) = args.mean_gap {
        cfg.mean_gap_s = g;
    }
    if let Some(t) = args.service_time {
        cfg.server.service_time_s = t;
    }
    if let Some(c) = args.concurrency {
        cfg.server.concurrency = c;
    }
    if let Some(j) = args.jitter {
        cfg.server.jitter_sigma = j;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.server.seed = s;
    }
    if cfg.routes == 0 || cfg.k == 0 || cfg.strategies.is_empty() {
        return Err(CliError::Config("routes, k and the strategy list must be non-empty".into()));
    }
    if !(cfg.mean_gap_s.is_finite() && cfg.mean_gap_s >= 0.0) {
        return Err(CliError::Config(format!("mean gap must be >= 0, got {}", cfg.mean_gap_s)));
    }
    cfg.server.validate().context("server")?;

    let params = load_model(&args.model)?;
    let pool = select(load_dataset(&args.data)?, args.subset, args.split_seed.unwrap_or(file.data.split_seed));
    if pool.len() < cfg.routes {
        return Err(CliError::Data(format!("workload needs {} routes, selection has {}", cfg.routes, pool.len())));
    }
    let picked: Vec<Route> = pool.into_iter().take(cfg.routes).collect();
    let base = Workload::new(picked, cfg.k, cfg.mean_gap_s, cfg.seed).context("workload")?;
    let workload = congestion_scenario(&base, cfg.congestion, cfg.slowdown, cfg.seed).context("congestion")?;
    let reports = run_all(&workload, &cfg.server, &cfg.strategies, &params, cfg.mode).context("simulation")?;

    let record = SimulationRecord {
        format: SIM_REPORT_FORMAT,
        routes: cfg.routes,
        k: cfg.k,
        seed: cfg.seed,
        congestion_fraction: cfg.congestion,
        slowdown: cfg.slowdown,
        mean_gap_s: cfg.mean_gap_s,
        mode: cfg.mode,
        server: cfg.server,
        congested: workload.congested.iter().map(String::as_str).collect(),
        reports: &reports,
    };
    write_json(&args.out, &record)?;
    let table = report_table(&reports);
    if let Some(path) = &args.table {
        write_atomic(path, |w| w.write_all(table.as_bytes()))?;
    }
    if let Some(path) = &args.trace {
        write_atomic(path, |w| {
            for (i, r) in reports.iter().enumerate() {
                let rows = trace_table(r, cfg.k);
                // one header for the whole file
                let body = if i == 0 { rows.as_str() } else { rows.split_once('\n').map_or("", |(_, rest)| rest) };
                w.write_all(body.as_bytes())?;
            }
            Ok(())
        })?;
    }
    for r in &reports {
        println!(
            "{:<7} calls={} retained={} reestimated={} throughput={:.3}/s mape={:.3}",
            r.strategy.name(),
            r.model_calls,
            r.retained,
            r.reestimated,
            r.throughput_qps,
            r.accuracy.mape
        );
    }
    Ok(())
}

fn serve(args: ServeArgs, file: FileConfig) -> Result<()> {
    let mut cfg = file.serve;
    if let Some(a) = args.addr {
        cfg.addr = a;
    }
    if let Some(n) = args.max_connections {
        cfg.max_connections = n;
    }
    if let Some(k) = args.k {
        cfg.default_k = k;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if cfg.max_connections == 0 || cfg.default_k == 0 {
        return Err(CliError::Config("max connections and k must be >= 1".into()));
    }
    let params = load_model(&args.model)?;
    let addr = cfg.addr.clone();
    let server = Server::bind(Arc::new(params), cfg).map_err(|e| CliError::Transport(format!("{addr}: {e}")))?;
    let local = server.local_addr().map_err(|e| CliError::Transport(e.to_string()))?;
    println!("listening on {local}");
    std::io::stdout().flush().map_err(|e| CliError::Transport(e.to_string()))?;
    let stats = server.run().map_err(|e| CliError::Transport(e.to_string()))?;
    print_json(&stats);
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let transport = |e: std::io::Error| CliError::Transport(format!("{}: {e}", args.addr));
    let mut stream = TcpStream::connect(&args.addr).map_err(transport)?;
    stream.write_all(b"{\"op\":\"stats\"}\n").map_err(transport)?;
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line).map_err(transport)?;
    if line.is_empty() {
        return Err(CliError::Transport(format!("{}: connection closed without a reply", args.addr)));
    }
    print!("{line}");
    Ok(())
}
