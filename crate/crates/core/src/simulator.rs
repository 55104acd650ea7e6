//! Discrete-event replay of pre-route and en-route query streams against a
//! capacity-limited model server.
//!
//! Prediction values depend only on the model and the query inputs, so each
//! run first answers every query in per-route order and then replays the
//! resulting model jobs through the server queue on a simulated clock.
//! Retained queries never reach the server and complete with zero latency.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{CountingModel, TravelTimeModel};
use crate::error::{Error, Result};
use crate::interval::IntervalTriple;
use crate::route::{checkpoint_boundaries, Route};
use crate::ugd::{Decision, EnRouteQuery, RemainingMode, TteStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every query invokes the model; first come, first served.
    Random,
    /// Every query invokes the model; longest remaining distance served first.
    Greedy,
    /// Only re-estimations invoke the model.
    Ugd,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Greedy, Strategy::Ugd];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Greedy => "greedy",
            Strategy::Ugd => "ugd",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(Strategy::Random),
            "greedy" => Ok(Strategy::Greedy),
            "ugd" => Ok(Strategy::Ugd),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerModel {
    /// Maximum simultaneous model invocations.
    pub concurrency: usize,
    pub service_time_s: f64,
    /// Lognormal jitter on service time (mean preserved); zero means fixed.
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for ServerModel {
    fn default() -> Self {
        ServerModel { concurrency: 1, service_time_s: 0.01, jitter_sigma: 0.0, seed: 0 }
    }
}

impl ServerModel {
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::Config("server concurrency must be >= 1".into()));
        }
        if !(self.service_time_s.is_finite() && self.service_time_s > 0.0) {
            return Err(Error::Config(format!("service time must be > 0, got {}", self.service_time_s)));
        }
        if self.jitter_sigma.is_nan() || self.jitter_sigma < 0.0 {
            return Err(Error::Config("jitter sigma must be >= 0".into()));
        }
        Ok(())
    }

    fn service_time(&self, job: usize) -> f64 {
        if self.jitter_sigma == 0.0 {
            return self.service_time_s;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (job as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        let z: f64 = StandardNormal.sample(&mut rng);
        self.service_time_s * (self.jitter_sigma * z - self.jitter_sigma.powi(2) / 2.0).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub routes: Vec<Arc<Route>>,
    pub k: usize,
    /// Simulated departure time of each route.
    pub start_s: Vec<f64>,
    /// Routes whose ground truth carries an injected slowdown.
    pub congested: BTreeSet<String>,
    pub seed: u64,
}

impl Workload {
    /// Routes depart with exponential gaps of mean `mean_gap_s`.
    pub fn new(routes: Vec<Route>, k: usize, mean_gap_s: f64, seed: u64) -> Result<Self> {
        if let Some(r) = routes.iter().find(|r| !r.has_ground_truth()) {
            return Err(Error::InvalidRoute(format!("route {} has no ground truth", r.route_id)));
        }
        if let Some(r) = routes.iter().find(|r| r.len() < k) {
            return Err(Error::InvalidPartition { n: r.len(), k });
        }
        if k == 0 {
            return Err(Error::InvalidPartition { n: 0, k });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0.0;
        let mut start_s = Vec::with_capacity(routes.len());
        let gap = if mean_gap_s > 0.0 {
            Some(Exp::new(1.0 / mean_gap_s).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        for _ in &routes {
            start_s.push(t);
            if let Some(g) = &gap {
                t += g.sample(&mut rng);
            }
        }
        Ok(Workload {
            routes: routes.into_iter().map(Arc::new).collect(),
            k,
            start_s,
            congested: BTreeSet::new(),
            seed,
        })
    }

    /// Number of en-route queries: one per completed part except the last.
    pub fn enroute_queries(&self) -> usize {
        self.routes.len() * (self.k - 1)
    }
}

/// Slows a contiguous window of ground-truth segment times on a seeded
/// fraction `f` of routes. Larger `f` congests a superset of the routes a
/// smaller `f` congests under the same seed.
pub fn congestion_scenario(workload: &Workload, fraction: f64, slowdown: f64, seed: u64) -> Result<Workload> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("congestion fraction must be in [0, 1], got {fraction}")));
    }
    if slowdown.is_nan() || slowdown <= 1.0 {
        return Err(Error::Config(format!("slowdown must be > 1, got {slowdown}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..workload.routes.len()).collect();
    order.shuffle(&mut rng);
    let window_starts: Vec<f64> = (0..workload.routes.len()).map(|_| rng.random_range(0.1..0.4)).collect();
    let count = (fraction * workload.routes.len() as f64).round() as usize;

    let mut out = workload.clone();
    for &idx in &order[..count] {
        let route = &workload.routes[idx];
        let n = route.len();
        let len = ((0.3 * n as f64).round() as usize).max(1);
        let start = ((window_starts[idx] * n as f64).floor() as usize).min(n - len);
        let mut times = route.seg_times_s().expect("workload routes carry ground truth").to_vec();
        times[start..start + len].iter_mut().for_each(|t| *t *= slowdown);
        out.routes[idx] = Arc::new(route.as_ref().clone().with_seg_times(times)?);
        out.congested.insert(route.route_id.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub mape: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Percentage of predictions within 10% relative error (inclusive).
    pub sr: f64,
}

/// MAPE, MAE, RMSE and SR over `(prediction, label)` pairs.
pub fn accuracy_metrics(pairs: &[(f64, f64)]) -> Result<AccuracyMetrics> {
    if pairs.is_empty() {
        return Err(Error::MetricDomain("no predictions".into()));
    }
    if let Some((_, y)) = pairs.iter().find(|(_, y)| !(*y > 0.0 && y.is_finite())) {
        return Err(Error::MetricDomain(format!("label must be > 0, got {y}")));
    }
    let n = pairs.len() as f64;
    let (mut ape, mut ae, mut se, mut hits) = (0.0, 0.0, 0.0, 0usize);
    for &(p, y) in pairs {
        let err = (p - y).abs();
        ape += err / y;
        ae += err;
        se += err * err;
        hits += usize::from(err / y <= 0.10);
    }
    Ok(AccuracyMetrics { mape: 100.0 * ape / n, mae: ae / n, rmse: (se / n).sqrt(), sr: 100.0 * hits as f64 / n })
}

/// One answered en-route query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub route_id: String,
    pub part: usize,
    pub elapsed_s: f64,
    pub y_re: f64,
    pub prediction: IntervalTriple,
    pub model_invoked: bool,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub strategy: Strategy,
    /// Pre-route plus en-route model invocations.
    pub model_calls: u64,
    pub enroute_queries: u64,
    pub retained: u64,
    pub reestimated: u64,
    pub latency_mean_s: f64,
    pub latency_median_s: f64,
    pub latency_p95_s: f64,
    /// Sum of service times divided by concurrency.
    pub busy_time_s: f64,
    /// Time of the last completion.
    pub makespan_s: f64,
    /// En-route queries answered per second of server busy time.
    pub throughput_qps: f64,
    pub accuracy: AccuracyMetrics,
    /// Fraction of remaining-route labels inside the answered interval.
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub queries: Vec<QueryOutcome>,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    arrival: f64,
    /// Greedy priority: remaining distance in meters.
    distance: f64,
    /// Index into the outcome list, `None` for pre-route jobs.
    outcome: Option<usize>,
}

/// Runs one strategy over the workload.
pub fn run_strategy<M: TravelTimeModel>(
    workload: &Workload,
    server: &ServerModel,
    strategy: Strategy,
    model: &M,
    mode: RemainingMode,
) -> Result<SimReport> {
    server.validate()?;
    let counting = CountingModel::new(model);
    let store = TteStore::new(mode);
    let mut jobs = Vec::new();
    let mut outcomes = Vec::new();

    for (route, &start) in workload.routes.iter().zip(&workload.start_s) {
        let parts = checkpoint_boundaries(route.len(), workload.k)?;
        let times = route.seg_times_s().expect("workload routes carry ground truth");
        let total_len = route.length_over(0..route.len());
        jobs.push(Job { arrival: start, distance: total_len, outcome: None });
        if strategy == Strategy::Ugd {
            store.preroute(&counting, Arc::clone(route), workload.k, route.departure_ts)?;
        } else {
            counting.predict_route(route.segments(), route.departure_ts)?;
        }
        let mut elapsed = 0.0;
        let mut seg = 0;
        for (i, part) in parts.iter().enumerate().take(workload.k - 1) {
            while seg < part.end {
                elapsed += times[seg];
                seg += 1;
            }
            let y_re: f64 = times[part.end..].iter().sum();
            let ts = route.departure_ts + elapsed.round() as i64;
            let (prediction, invoked) = match strategy {
                Strategy::Ugd => {
                    let query = EnRouteQuery { route_id: route.route_id.clone(), part: i + 1, y_tr: elapsed, ts };
                    let answer = store.enroute(&counting, &query)?;
                    (answer.remaining, answer.decision == Decision::Reestimated)
                }
                Strategy::Random | Strategy::Greedy => {
                    let (traveled, remaining) = route.segments().split_at(part.end);
                    (counting.predict_remaining(traveled, remaining, elapsed, ts)?.total(), true)
                }
            };
            if !(prediction.point().is_finite()) {
                return Err(Error::Numeric(format!("non-finite prediction on route {}", route.route_id)));
            }
            if invoked {
                jobs.push(Job {
                    arrival: start + elapsed,
                    distance: route.length_over(part.end..route.len()),
                    outcome: Some(outcomes.len()),
                });
            }
            outcomes.push(QueryOutcome {
                route_id: route.route_id.clone(),
                part: i + 1,
                elapsed_s: elapsed,
                y_re,
                prediction,
                model_invoked: invoked,
                latency_s: 0.0,
            });
        }
        if strategy == Strategy::Ugd {
            store.evict(&route.route_id);
        }
    }

    let schedule = simulate_queue(&jobs, server, strategy == Strategy::Greedy);
    for (job, completion) in jobs.iter().zip(&schedule.completions) {
        if let Some(o) = job.outcome {
            outcomes[o].latency_s = completion - job.arrival;
        }
    }

    let mut latencies: Vec<f64> = outcomes.iter().map(|o| o.latency_s).collect();
    latencies.sort_by(f64::total_cmp);
    let pairs: Vec<(f64, f64)> = outcomes.iter().map(|o| (o.prediction.point(), o.y_re)).collect();
    let accuracy = accuracy_metrics(&pairs)?;
    let covered = outcomes.iter().filter(|o| o.prediction.contains(o.y_re)).count();
    let queries = outcomes.len() as u64;
    let reestimated = outcomes.iter().filter(|o| o.model_invoked).count() as u64;
    Ok(SimReport {
        strategy,
        model_calls: counting.calls(),
        enroute_queries: queries,
        retained: queries - reestimated,
        reestimated,
        latency_mean_s: latencies.iter().sum::<f64>() / latencies.len() as f64,
        latency_median_s: percentile(&latencies, 0.5),
        latency_p95_s: percentile(&latencies, 0.95),
        busy_time_s: schedule.busy_time_s,
        makespan_s: schedule.makespan_s,
        throughput_qps: if schedule.busy_time_s > 0.0 { queries as f64 / schedule.busy_time_s } else { f64::INFINITY },
        accuracy,
        coverage: covered as f64 / outcomes.len() as f64,
        queries: outcomes,
    })
}

/// Runs several strategies on the same workload.
pub fn run_all<M: TravelTimeModel>(
    workload: &Workload,
    server: &ServerModel,
    strategies: &[Strategy],
    model: &M,
    mode: RemainingMode,
) -> Result<Vec<SimReport>> {
    strategies.iter().map(|s| run_strategy(workload, server, *s, model, mode)).collect()
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub completions: Vec<f64>,
    pub busy_time_s: f64,
    pub makespan_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Waiting {
    distance: f64,
    seq: usize,
}

impl Eq for Waiting {}

impl Ord for Waiting {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance.total_cmp(&other.distance).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Waiting {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Completion(f64);

impl Eq for Completion {}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Event loop over arrivals and completions with `server.concurrency` slots.
/// FIFO unless `longest_first`, which serves the largest remaining distance.
fn simulate_queue(jobs: &[Job], server: &ServerModel, longest_first: bool) -> Schedule {
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by(|&a, &b| jobs[a].arrival.total_cmp(&jobs[b].arrival).then(a.cmp(&b)));

    let mut completions = vec![0.0; jobs.len()];
    let mut fifo: VecDeque<usize> = VecDeque::new();
    let mut heap: BinaryHeap<Waiting> = BinaryHeap::new();
    let mut running: BinaryHeap<Reverse<Completion>> = BinaryHeap::new();
    let mut busy_sum = 0.0;
    let mut makespan: f64 = 0.0;
    let mut next = 0;
    let mut now = 0.0;

    loop {
        let next_arrival = order.get(next).map(|&j| jobs[j].arrival);
        let next_done = running.peek().map(|Reverse(Completion(t))| *t);
        let completion_first = match (next_arrival, next_done) {
            (None, None) => break,
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (Some(a), Some(d)) => d <= a,
        };
        if completion_first {
            if let Some(Reverse(Completion(d))) = running.pop() {
                now = d;
            }
        } else {
            let j = order[next];
            next += 1;
            now = jobs[j].arrival;
            if longest_first {
                heap.push(Waiting { distance: jobs[j].distance, seq: j });
            } else {
                fifo.push_back(j);
            }
        }
        while running.len() < server.concurrency {
            let job = if longest_first { heap.pop().map(|w| w.seq) } else { fifo.pop_front() };
            let Some(j) = job else { break };
            let service = server.service_time(j);
            busy_sum += service;
            let done = now + service;
            completions[j] = done;
            makespan = makespan.max(done);
            running.push(Reverse(Completion(done)));
        }
    }
    Schedule { completions, busy_time_s: busy_sum / server.concurrency as f64, makespan_s: makespan }
}

/// Wall-clock throughput of the real store driven by concurrent clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallClockReport {
    pub threads: usize,
    pub queries: u64,
    pub model_calls: u64,
    pub elapsed_s: f64,
    pub queries_per_s: f64,
}

/// Replays the workload through one shared store from `threads` client
/// threads, each owning a disjoint subset of routes.
pub fn wall_clock_benchmark<M: TravelTimeModel>(
    workload: &Workload,
    model: &M,
    threads: usize,
) -> Result<WallClockReport> {
    let threads = threads.max(1);
    let counting = CountingModel::new(model);
    let store = TteStore::new(RemainingMode::Profile);
    let began = Instant::now();
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (store, counting) = (&store, &counting);
                scope.spawn(move || -> Result<()> {
                    for route in workload.routes.iter().skip(t).step_by(threads) {
                        store.preroute(counting, Arc::clone(route), workload.k, route.departure_ts)?;
                        let parts = checkpoint_boundaries(route.len(), workload.k)?;
                        let times = route.seg_times_s().expect("workload routes carry ground truth");
                        for (i, part) in parts.iter().enumerate().take(workload.k - 1) {
                            let y_tr: f64 = times[..part.end].iter().sum();
                            let ts = route.departure_ts + y_tr.round() as i64;
                            let query = EnRouteQuery { route_id: route.route_id.clone(), part: i + 1, y_tr, ts };
                            store.enroute(counting, &query)?;
                        }
                        store.evict(&route.route_id);
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().map_err(|_| Error::State("benchmark client panicked".into()))??;
        }
        Ok(())
    })?;
    let elapsed_s = began.elapsed().as_secs_f64();
    let queries = store.call_stats().enroute_queries;
    Ok(WallClockReport {
        threads,
        queries,
        model_calls: counting.calls(),
        elapsed_s,
        queries_per_s: queries as f64 / elapsed_s.max(1e-12),
    })
}

/// Column set of the flat plot-data table.
pub const TABLE_HEADER: &str = "strategy,metric,value";

/// Flat `strategy,metric,value` rows for plotting.
pub fn report_table(reports: &[SimReport]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in reports {
        let rows: [(&str, f64); 14] = [
            ("calls", r.model_calls as f64),
            ("enroute_queries", r.enroute_queries as f64),
            ("retained", r.retained as f64),
            ("reestimated", r.reestimated as f64),
            ("latency_mean_s", r.latency_mean_s),
            ("latency_median_s", r.latency_median_s),
            ("latency_p95_s", r.latency_p95_s),
            ("busy_time_s", r.busy_time_s),
            ("throughput_qps", r.throughput_qps),
            ("mape", r.accuracy.mape),
            ("mae", r.accuracy.mae),
            ("rmse", r.accuracy.rmse),
            ("sr", r.accuracy.sr),
            ("coverage", r.coverage),
        ];
        for (metric, value) in rows {
            out.push_str(&format!("{},{metric},{value}\n", r.strategy.name()));
        }
    }
    out
}

/// Per-checkpoint trace rows: elapsed time and remaining estimate against completion percentage.
pub fn trace_table(report: &SimReport, k: usize) -> String {
    let mut out = String::from("strategy,route_id,completion_pct,elapsed_s,y_re,lower,point,upper,model_invoked\n");
    for q in &report.queries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            report.strategy.name(),
            q.route_id,
            100 * q.part / k,
            q.elapsed_s,
            q.y_re,
            q.prediction.lower(),
            q.prediction.point(),
            q.prediction.upper(),
            q.model_invoked
        ));
    }
    out
}
