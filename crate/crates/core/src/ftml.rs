//! Fine-tuning with meta-learning.
//!
//! Each iteration takes a pre-training gradient on the entire route and its
//! traveled prefix, forms inner parameters with one plain gradient step,
//! evaluates the remaining-route loss at the inner parameters, and applies
//! AdamW to the original parameters with the sum of both gradients. The inner
//! step is treated as identity when differentiating (first order).
//!
//! Per-route losses are divided by the route's free-flow time and averaged
//! over the batch, so gradients are dimensionless.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_batch, ForwardCache, Gradients, ModelParams, RouteContext, RowBatch};
use crate::error::{Error, Result};
use crate::interval::{IntervalTriple, QuantileConfig};
use crate::losses::Objective;
use crate::route::{Route, RouteSplit};
use crate::simulator::{accuracy_metrics, AccuracyMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    /// Fine-tune loss evaluated at the inner parameters, gradient applied to the outer ones.
    FirstOrder,
    /// Fine-tune loss evaluated at the outer parameters (no inner step).
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Inner step size; `None` reuses `lr`.
    pub inner_lr: Option<f64>,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Iterations per epoch; `None` means one pass over the training set.
    pub iters_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub split_fraction: f64,
    pub quantiles: QuantileConfig,
    pub objective: Objective,
    /// Multiplier on the fine-tune term of the outer gradient.
    pub finetune_weight: f64,
    pub meta_mode: MetaMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            inner_lr: None,
            weight_decay: 1e-3,
            epochs: 10,
            iters_per_epoch: None,
            batch_size: 32,
            split_fraction: 0.3,
            quantiles: QuantileConfig::default(),
            objective: Objective::Quantile,
            finetune_weight: 1.0,
            meta_mode: MetaMode::FirstOrder,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.quantiles.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.iters_per_epoch == Some(0) {
            return Err(Error::Config("epochs, iterations and batch size must be >= 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split fraction must be in (0, 1), got {}", self.split_fraction)));
        }
        if !(self.weight_decay >= 0.0 && self.finetune_weight >= 0.0) {
            return Err(Error::Config("weight decay and fine-tune weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn inner_lr(&self) -> f64 {
        self.inner_lr.unwrap_or(self.lr)
    }
}

/// Support (traveled) and query (remaining) views over a set of ground-truth splits.
#[derive(Debug, Clone)]
pub struct TaskBatch<'a> {
    splits: Vec<&'a RouteSplit>,
}

impl<'a> TaskBatch<'a> {
    pub fn new(splits: Vec<&'a RouteSplit>) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::Config("empty task batch".into()));
        }
        if let Some(s) = splits.iter().find(|s| !s.route.has_ground_truth()) {
            return Err(Error::InvalidRoute(format!("route {} has no ground truth", s.route.route_id)));
        }
        Ok(TaskBatch { splits })
    }

    pub fn splits(&self) -> &[&'a RouteSplit] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }
}

/// Loss weight for one route: batch mean of losses relative to free-flow time.
fn route_weight(route: &Route, batch_len: usize) -> f64 {
    let ff: f64 = route.segments().iter().map(|s| s.free_flow_s()).sum();
    1.0 / (ff * batch_len as f64)
}

fn ground_truth(split: &RouteSplit) -> (f64, f64, f64) {
    let y = split.y().expect("task batch routes carry ground truth");
    let y_tr = split.y_tr.expect("task batch routes carry ground truth");
    let y_re = split.y_re().expect("task batch routes carry ground truth");
    (y, y_tr, y_re)
}

fn check_finite(value: f64, split: &RouteSplit) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite loss on route {}", split.route.route_id)))
    }
}

/// Pre-training loss and its gradient. The traveled estimate reuses the
/// prefix of the entire-route pass since segment rows are position-free.
pub fn pretrain_objective(params: &ModelParams, batch: &TaskBatch, cfg: &TrainConfig) -> Result<(f64, Gradients)> {
    let mut rows = RowBatch::new();
    for s in batch.splits() {
        rows.push(s.route.segments(), s.route.departure_ts, &RouteContext::neutral());
    }
    let mut cache = ForwardCache::default();
    let out = forward_batch(params, &rows, Some(&mut cache))?;
    let mut d_triple = vec![[0.0; 3]; rows.rows()];
    let mut total = 0.0;
    for (s, span) in batch.splits().iter().zip(rows.spans()) {
        let (y, y_tr, _) = ground_truth(s);
        let entire = out.sum(span.clone());
        let traveled = out.sum(span.start..span.start + s.split_index);
        let loss = cfg.objective.pretrain(&entire, y, &traveled, y_tr, &cfg.quantiles)?;
        check_finite(loss.value, s)?;
        let w = route_weight(&s.route, batch.len());
        total += w * loss.value;
        for (j, row) in span.clone().enumerate() {
            let on_traveled = j < s.split_index;
            for (c, d) in d_triple[row].iter_mut().enumerate() {
                let traveled_part = if on_traveled { loss.grad_traveled[c] } else { 0.0 };
                *d = w * (loss.grad_entire[c] + traveled_part);
            }
        }
    }
    let grads = params.backward(&cache, &out.head_backward(&d_triple))?;
    Ok((total, grads))
}

/// Remaining-route rows with en-route context estimated by `context_params`.
pub fn finetune_rows(context_params: &ModelParams, splits: &[&RouteSplit]) -> Result<RowBatch> {
    let contexts = batch_contexts(context_params, splits.iter().copied(), |s| {
        s.y_tr.ok_or_else(|| Error::InvalidRoute(format!("route {} has no ground truth", s.route.route_id)))
    })?;
    let mut rows = RowBatch::new();
    for (s, (ctx, t)) in splits.iter().zip(contexts) {
        rows.push(s.remaining(), t, &ctx);
    }
    Ok(rows)
}

/// Context and current time for each split, estimating every traveled part in one pass.
fn batch_contexts<'s>(
    params: &ModelParams,
    splits: impl Iterator<Item = &'s RouteSplit> + Clone,
    elapsed: impl Fn(&RouteSplit) -> Result<f64>,
) -> Result<Vec<(RouteContext, i64)>> {
    let mut traveled_rows = RowBatch::new();
    for s in splits.clone() {
        traveled_rows.push(s.traveled(), s.route.departure_ts, &RouteContext::neutral());
    }
    let out = forward_batch(params, &traveled_rows, None)?;
    splits
        .zip(traveled_rows.spans())
        .map(|(s, span)| {
            let y_tr = elapsed(s)?;
            let predicted = out.sum(span.clone()).point();
            let ctx = RouteContext::observed(s.traveled(), y_tr, predicted)?;
            Ok((ctx, s.route.departure_ts + y_tr.round() as i64))
        })
        .collect()
}

/// Fine-tune loss and gradient at `params` over prepared remaining rows.
pub fn finetune_objective(
    params: &ModelParams,
    rows: &RowBatch,
    batch: &TaskBatch,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    let mut cache = ForwardCache::default();
    let out = forward_batch(params, rows, Some(&mut cache))?;
    let mut d_triple = vec![[0.0; 3]; rows.rows()];
    let mut total = 0.0;
    for (s, span) in batch.splits().iter().zip(rows.spans()) {
        let (_, _, y_re) = ground_truth(s);
        let remaining = out.sum(span.clone());
        let loss = cfg.objective.finetune(&remaining, y_re, &cfg.quantiles)?;
        check_finite(loss.value, s)?;
        let w = route_weight(&s.route, batch.len());
        total += w * loss.value;
        for row in span.clone() {
            d_triple[row] = loss.grad.map(|g| w * g);
        }
    }
    let grads = params.backward(&cache, &out.head_backward(&d_triple))?;
    Ok((total, grads))
}

/// Supplies the two gradients a meta step needs.
pub trait MetaTask {
    fn pretrain(&self, params: &ModelParams) -> Result<(f64, Gradients)>;

    fn finetune(&self, params: &ModelParams) -> Result<(f64, Gradients)>;
}

/// A batch of routes paired with the training configuration.
pub struct RouteTask<'b, 'a> {
    pub batch: &'b TaskBatch<'a>,
    pub cfg: &'b TrainConfig,
}

impl MetaTask for RouteTask<'_, '_> {
    fn pretrain(&self, params: &ModelParams) -> Result<(f64, Gradients)> {
        pretrain_objective(params, self.batch, self.cfg)
    }

    fn finetune(&self, params: &ModelParams) -> Result<(f64, Gradients)> {
        let rows = finetune_rows(params, self.batch.splits())?;
        finetune_objective(params, &rows, self.batch, self.cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLosses {
    pub pretrain: f64,
    pub finetune: f64,
}

/// One meta iteration over `task`, updating `params` in place.
pub fn meta_step<T: MetaTask>(params: &mut ModelParams, task: &T, cfg: &TrainConfig) -> Result<IterationLosses> {
    let (pre_loss, mut grads) = task.pretrain(params)?;
    let (ft_loss, ft_grads) = match cfg.meta_mode {
        MetaMode::FirstOrder => {
            let inner = params.sgd_stepped(&grads, cfg.inner_lr())?;
            task.finetune(&inner)?
        }
        MetaMode::Joint => task.finetune(params)?,
    };
    let mut ft_grads = ft_grads;
    ft_grads.scale(cfg.finetune_weight);
    grads.add_assign(&ft_grads);
    params.adam_step(&grads, cfg.lr, cfg.weight_decay)?;
    Ok(IterationLosses { pretrain: pre_loss, finetune: ft_loss })
}

/// One iteration on a batch; returns the updated parameters and both losses.
pub fn ftml_iteration(
    params: &ModelParams,
    batch: &TaskBatch,
    cfg: &TrainConfig,
) -> Result<(ModelParams, IterationLosses)> {
    let mut next = params.clone();
    let losses = meta_step(&mut next, &RouteTask { batch, cfg }, cfg)?;
    Ok((next, losses))
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub l_pre: f64,
    pub l_ft: f64,
    /// Present on the last iteration of each epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mape: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Parameters with the best validation MAPE.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_mape: Option<f64>,
    /// Parameters after the last iteration.
    pub last: ModelParams,
    pub last_val_mape: Option<f64>,
    pub log: Vec<MetricRecord>,
    pub outer_updates: usize,
    pub inner_updates: usize,
}

/// Splits every route with the configured fraction; routes without ground truth are rejected.
pub fn make_splits(routes: &[Route], fraction: f64) -> Result<Vec<RouteSplit>> {
    routes.iter().cloned().map(|r| crate::route::split_route(r, fraction)).collect()
}

/// Trains with the configured meta mode and keeps the parameters with the
/// best remaining-route validation MAPE.
pub fn train(
    params: &ModelParams,
    train_set: &[RouteSplit],
    val_set: &[RouteSplit],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let iters = cfg.iters_per_epoch.unwrap_or_else(|| train_set.len().div_ceil(cfg.batch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut current = params.clone();
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut last_val = None;
    let mut log = Vec::with_capacity(cfg.epochs * iters);
    let mut outer = 0;
    let mut inner = 0;
    for epoch in 0..cfg.epochs {
        for iteration in 0..iters {
            let mut picked = Vec::with_capacity(cfg.batch_size);
            while picked.len() < cfg.batch_size.min(train_set.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picked.push(&train_set[order[cursor]]);
                cursor += 1;
            }
            let batch = TaskBatch::new(picked)?;
            let losses = meta_step(&mut current, &RouteTask { batch: &batch, cfg }, cfg)?;
            outer += 1;
            if cfg.meta_mode == MetaMode::FirstOrder {
                inner += 1;
            }
            log.push(MetricRecord { epoch, iteration, l_pre: losses.pretrain, l_ft: losses.finetune, val_mape: None });
        }
        if !val_set.is_empty() {
            let mape = remaining_metrics(&current, val_set)?.mape;
            last_val = Some(mape);
            if let Some(rec) = log.last_mut() {
                rec.val_mape = Some(mape);
            }
            if best.as_ref().is_none_or(|(_, _, b)| mape < *b) {
                best = Some((current.clone(), epoch, mape));
            }
        }
    }
    let (best_params, best_epoch, best_val) = match best {
        Some((p, e, m)) => (p, e, Some(m)),
        None => (current.clone(), cfg.epochs - 1, None),
    };
    Ok(TrainReport {
        best: best_params,
        best_epoch,
        best_val_mape: best_val,
        last: current,
        last_val_mape: last_val,
        log,
        outer_updates: outer,
        inner_updates: inner,
    })
}

/// The ablation baseline: same data and budget, both losses at the current parameters.
pub fn train_plain(
    params: &ModelParams,
    train_set: &[RouteSplit],
    val_set: &[RouteSplit],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let cfg = TrainConfig { meta_mode: MetaMode::Joint, ..cfg.clone() };
    train(params, train_set, val_set, &cfg)
}

/// Remaining-route estimates for every split, conditioned on its ground-truth elapsed time.
/// Equivalent to calling `forward_with_context` per split, but batched.
pub fn predict_remaining(params: &ModelParams, splits: &[RouteSplit]) -> Result<Vec<IntervalTriple>> {
    let refs: Vec<&RouteSplit> = splits.iter().collect();
    let mut out = Vec::with_capacity(splits.len());
    for chunk in refs.chunks(256) {
        let rows = finetune_rows(params, chunk)?;
        let pred = forward_batch(params, &rows, None)?;
        out.extend(rows.spans().iter().map(|span| pred.sum(span.clone())));
    }
    Ok(out)
}

/// Pre-route full-route estimates, batched.
pub fn predict_full(params: &ModelParams, routes: &[Route]) -> Result<Vec<IntervalTriple>> {
    let mut out = Vec::with_capacity(routes.len());
    for chunk in routes.chunks(256) {
        let mut rows = RowBatch::new();
        for r in chunk {
            rows.push(r.segments(), r.departure_ts, &RouteContext::neutral());
        }
        let pred = forward_batch(params, &rows, None)?;
        out.extend(rows.spans().iter().map(|span| pred.sum(span.clone())));
    }
    Ok(out)
}

/// Accuracy of remaining-route point estimates over ground-truth splits.
pub fn remaining_metrics(params: &ModelParams, splits: &[RouteSplit]) -> Result<AccuracyMetrics> {
    let preds = predict_remaining(params, splits)?;
    let pairs: Vec<(f64, f64)> =
        preds.iter().zip(splits).map(|(p, s)| (p.point(), s.y_re().unwrap_or(f64::NAN))).collect();
    accuracy_metrics(&pairs)
}

/// Fraction of routes whose full-route ground truth lies in the closed pre-route interval.
pub fn full_route_coverage(params: &ModelParams, routes: &[Route]) -> Result<f64> {
    let preds = predict_full(params, routes)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, r) in preds.iter().zip(routes) {
        if let Some(y) = r.total_time_s() {
            total += 1;
            hits += usize::from(p.contains(y));
        }
    }
    if total == 0 {
        return Err(Error::MetricDomain("no routes with ground truth".into()));
    }
    Ok(hits as f64 / total as f64)
}
