//! Per-segment interval travel-time predictor.
//!
//! Each segment is mapped to raw outputs `(z_p, z_l, z_u)`; the head turns them
//! into `point = softplus(z_p) * ff`, `delta_lower = softplus(z_l) * ff` and
//! `delta_upper = softplus(z_u) * ff`, where `ff` is the segment's free-flow
//! time. Route estimates are componentwise sums of the derived per-segment
//! triples, so interval ordering and additivity hold for any weights.

mod checkpoint;
mod mlp;

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use mlp::{AdamState, ForwardCache, Gradients, MlpConfig, ModelParams, OUTPUT_DIM};

use crate::error::{Error, Result};
use crate::interval::IntervalTriple;
use crate::route::{Segment, FEATURE_DIM};

/// Context slots appended to every segment row: log pace ratio, elapsed hours,
/// and the mean traveled feature vector.
pub const CONTEXT_DIM: usize = FEATURE_DIM + 2;
pub const MODEL_INPUT_DIM: usize = FEATURE_DIM + CONTEXT_DIM;

const MAX_LOG_PACE: f64 = 3.0;

impl MlpConfig {
    /// Network shape over the standard segment + context input.
    pub fn standard(hidden_width: usize, depth: usize) -> Self {
        MlpConfig { input_dim: MODEL_INPUT_DIM, hidden_width, depth }
    }
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig::standard(64, 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentPrediction {
    pub point_s: f64,
    pub delta_lower_s: f64,
    pub delta_upper_s: f64,
}

impl SegmentPrediction {
    pub fn triple(&self) -> IntervalTriple {
        let lower = (self.point_s - self.delta_lower_s).max(0.0);
        IntervalTriple::new(lower, self.point_s, self.point_s + self.delta_upper_s)
            .expect("nonnegative head outputs always order")
    }
}

/// Per-segment outputs and their running sums.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutePrediction {
    pub segments: Vec<SegmentPrediction>,
    pub cumulative: Vec<IntervalTriple>,
}

impl RoutePrediction {
    pub fn total(&self) -> IntervalTriple {
        self.cumulative.last().copied().unwrap_or(IntervalTriple::ZERO)
    }

    pub fn per_segment(&self) -> Vec<IntervalTriple> {
        self.segments.iter().map(SegmentPrediction::triple).collect()
    }
}

/// En-route conditioning appended to each remaining-segment row.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteContext {
    pub log_pace: f64,
    pub elapsed_h: f64,
    pub traveled_mean: [f64; FEATURE_DIM],
}

impl RouteContext {
    /// No en-route information: pace ratio 1, nothing traveled.
    pub fn neutral() -> Self {
        RouteContext { log_pace: 0.0, elapsed_h: 0.0, traveled_mean: [0.0; FEATURE_DIM] }
    }

    /// Context from an observed elapsed time and the model's own estimate of
    /// the traveled part.
    pub fn observed(traveled: &[Segment], y_tr: f64, predicted_traveled_s: f64) -> Result<Self> {
        if traveled.is_empty() {
            return Ok(RouteContext::neutral());
        }
        if !(y_tr.is_finite() && y_tr >= 0.0) {
            return Err(Error::Numeric(format!("elapsed time must be finite and >= 0, got {y_tr}")));
        }
        let mut mean = [0.0; FEATURE_DIM];
        for seg in traveled {
            mean.iter_mut().zip(&seg.feature_vec).for_each(|(m, f)| *m += f);
        }
        mean.iter_mut().for_each(|m| *m /= traveled.len() as f64);
        let ratio = y_tr / predicted_traveled_s;
        let log_pace = if ratio > 0.0 { ratio.ln().clamp(-MAX_LOG_PACE, MAX_LOG_PACE) } else { -MAX_LOG_PACE };
        Ok(RouteContext { log_pace, elapsed_h: y_tr / 3600.0, traveled_mean: mean })
    }

    fn write(&self, out: &mut Vec<f64>) {
        out.push(self.log_pace);
        out.push(self.elapsed_h);
        out.extend_from_slice(&self.traveled_mean);
    }
}

/// Stacked input rows for several routes, kept together with each row's
/// free-flow scale and each route's row span.
#[derive(Debug, Clone, Default)]
pub struct RowBatch {
    inputs: Vec<f64>,
    scales: Vec<f64>,
    spans: Vec<Range<usize>>,
}

impl RowBatch {
    pub fn new() -> Self {
        RowBatch::default()
    }

    /// Appends one route's segments evaluated at time `ts`; returns the span index.
    pub fn push(&mut self, segments: &[Segment], ts: i64, ctx: &RouteContext) -> usize {
        let start = self.scales.len();
        for seg in segments {
            self.inputs.extend(seg.features_at(ts));
            ctx.write(&mut self.inputs);
            self.scales.push(seg.free_flow_s());
        }
        self.spans.push(start..self.scales.len());
        self.spans.len() - 1
    }

    pub fn rows(&self) -> usize {
        self.scales.len()
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }
}

/// Head outputs for every row of a [`RowBatch`].
#[derive(Debug, Clone)]
pub struct BatchOutput {
    raw: Vec<f64>,
    scales: Vec<f64>,
    pub predictions: Vec<SegmentPrediction>,
}

impl BatchOutput {
    /// Sum of derived triples over rows `range`.
    pub fn sum(&self, range: Range<usize>) -> IntervalTriple {
        self.predictions[range].iter().fold(IntervalTriple::ZERO, |acc, p| acc.add(&p.triple()))
    }

    pub fn route_prediction(&self, range: Range<usize>) -> RoutePrediction {
        let segments = self.predictions[range].to_vec();
        let mut cumulative = Vec::with_capacity(segments.len());
        let mut acc = IntervalTriple::ZERO;
        for p in &segments {
            acc = acc.add(&p.triple());
            cumulative.push(acc);
        }
        RoutePrediction { segments, cumulative }
    }

    /// Chains per-row gradients with respect to `(lower, point, upper)` of the
    /// derived triple back to the raw network outputs.
    pub fn head_backward(&self, d_triple: &[[f64; 3]]) -> Vec<f64> {
        let mut d_raw = vec![0.0; self.raw.len()];
        for (row, g) in d_triple.iter().enumerate() {
            if *g == [0.0; 3] {
                continue;
            }
            let pred = &self.predictions[row];
            let lower_active = pred.point_s - pred.delta_lower_s > 0.0;
            let d_point = g[1] + g[2] + if lower_active { g[0] } else { 0.0 };
            let d_dl = if lower_active { -g[0] } else { 0.0 };
            let d_du = g[2];
            let s = self.scales[row];
            let z = &self.raw[row * OUTPUT_DIM..(row + 1) * OUTPUT_DIM];
            d_raw[row * OUTPUT_DIM] = d_point * s * sigmoid(z[0]);
            d_raw[row * OUTPUT_DIM + 1] = d_dl * s * sigmoid(z[1]);
            d_raw[row * OUTPUT_DIM + 2] = d_du * s * sigmoid(z[2]);
        }
        d_raw
    }

    /// Smallest gap between `point` and `delta_lower` over rows; the lower
    /// floor is non-differentiable where it vanishes.
    pub fn min_floor_margin(&self) -> f64 {
        self.predictions.iter().map(|p| (p.point_s - p.delta_lower_s).abs()).fold(f64::INFINITY, f64::min)
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Runs the network over a batch, optionally caching activations for backprop.
pub fn forward_batch(params: &ModelParams, batch: &RowBatch, cache: Option<&mut ForwardCache>) -> Result<BatchOutput> {
    if params.config.input_dim != MODEL_INPUT_DIM {
        return Err(Error::Shape { expected: MODEL_INPUT_DIM, actual: params.config.input_dim });
    }
    let raw = params.forward(&batch.inputs, batch.rows(), cache)?;
    let predictions = raw
        .chunks_exact(OUTPUT_DIM)
        .zip(&batch.scales)
        .map(|(z, s)| SegmentPrediction {
            point_s: softplus(z[0]) * s,
            delta_lower_s: softplus(z[1]) * s,
            delta_upper_s: softplus(z[2]) * s,
        })
        .collect::<Vec<_>>();
    if predictions
        .iter()
        .any(|p| !(p.point_s.is_finite() && p.delta_lower_s.is_finite() && p.delta_upper_s.is_finite()))
    {
        return Err(Error::Numeric("non-finite segment prediction".into()));
    }
    Ok(BatchOutput { raw, scales: batch.scales.clone(), predictions })
}

/// Pre-route estimate over `segments` departing at `departure_ts`.
pub fn forward_route(params: &ModelParams, segments: &[Segment], departure_ts: i64) -> Result<RoutePrediction> {
    forward_in_context(params, segments, departure_ts, &RouteContext::neutral())
}

/// Estimate for `segments` under an explicit context.
pub fn forward_in_context(
    params: &ModelParams,
    segments: &[Segment],
    ts: i64,
    ctx: &RouteContext,
) -> Result<RoutePrediction> {
    if segments.is_empty() {
        return Err(Error::InvalidRoute("cannot predict an empty segment list".into()));
    }
    let mut batch = RowBatch::new();
    batch.push(segments, ts, ctx);
    let out = forward_batch(params, &batch, None)?;
    Ok(out.route_prediction(0..batch.rows()))
}

/// En-route estimate of the remaining segments at time `t`, conditioned on the
/// traveled part and the observed elapsed time `y_tr`.
pub fn forward_with_context(
    params: &ModelParams,
    traveled: &[Segment],
    remaining: &[Segment],
    y_tr: f64,
    t: i64,
) -> Result<RoutePrediction> {
    let ctx = context_for(params, traveled, y_tr, t - y_tr.round() as i64)?;
    forward_in_context(params, remaining, t, &ctx)
}

/// Builds the en-route context, estimating the traveled part with `params` at
/// its departure time.
pub fn context_for(params: &ModelParams, traveled: &[Segment], y_tr: f64, departure_ts: i64) -> Result<RouteContext> {
    if traveled.is_empty() {
        return Ok(RouteContext::neutral());
    }
    let predicted = forward_route(params, traveled, departure_ts)?.total().point();
    RouteContext::observed(traveled, y_tr, predicted)
}

/// The pluggable predictor interface consumed by the decision engine and the simulator.
pub trait TravelTimeModel: Send + Sync {
    fn predict_route(&self, segments: &[Segment], departure_ts: i64) -> Result<RoutePrediction>;

    fn predict_remaining(
        &self,
        traveled: &[Segment],
        remaining: &[Segment],
        y_tr: f64,
        t: i64,
    ) -> Result<RoutePrediction>;
}

impl TravelTimeModel for ModelParams {
    fn predict_route(&self, segments: &[Segment], departure_ts: i64) -> Result<RoutePrediction> {
        forward_route(self, segments, departure_ts)
    }

    fn predict_remaining(
        &self,
        traveled: &[Segment],
        remaining: &[Segment],
        y_tr: f64,
        t: i64,
    ) -> Result<RoutePrediction> {
        forward_with_context(self, traveled, remaining, y_tr, t)
    }
}

/// Counts every invocation of the wrapped model.
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicU64,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: TravelTimeModel> TravelTimeModel for CountingModel<M> {
    fn predict_route(&self, segments: &[Segment], departure_ts: i64) -> Result<RoutePrediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_route(segments, departure_ts)
    }

    fn predict_remaining(
        &self,
        traveled: &[Segment],
        remaining: &[Segment],
        y_tr: f64,
        t: i64,
    ) -> Result<RoutePrediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_remaining(traveled, remaining, y_tr, t)
    }
}

impl<M: TravelTimeModel + ?Sized> TravelTimeModel for &M {
    fn predict_route(&self, segments: &[Segment], departure_ts: i64) -> Result<RoutePrediction> {
        (**self).predict_route(segments, departure_ts)
    }

    fn predict_remaining(
        &self,
        traveled: &[Segment],
        remaining: &[Segment],
        y_tr: f64,
        t: i64,
    ) -> Result<RoutePrediction> {
        (**self).predict_remaining(traveled, remaining, y_tr, t)
    }
}

impl<M: TravelTimeModel + ?Sized> TravelTimeModel for std::sync::Arc<M> {
    fn predict_route(&self, segments: &[Segment], departure_ts: i64) -> Result<RoutePrediction> {
        (**self).predict_route(segments, departure_ts)
    }

    fn predict_remaining(
        &self,
        traveled: &[Segment],
        remaining: &[Segment],
        y_tr: f64,
        t: i64,
    ) -> Result<RoutePrediction> {
        (**self).predict_remaining(traveled, remaining, y_tr, t)
    }
}

#[cfg(test)]
mod tests;
