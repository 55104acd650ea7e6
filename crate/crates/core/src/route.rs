//! Routes, segments and the traveled/remaining partition.

use std::f64::consts::TAU;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of every segment feature vector.
pub const FEATURE_DIM: usize = 9;

/// Indices of the departure-time encodings inside a feature vector.
const TIME_SLOTS: Range<usize> = 5..9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Motorway,
    Arterial,
    Local,
}

impl RoadClass {
    pub const ALL: [RoadClass; 3] = [RoadClass::Motorway, RoadClass::Arterial, RoadClass::Local];

    pub fn index(self) -> usize {
        match self {
            RoadClass::Motorway => 0,
            RoadClass::Arterial => 1,
            RoadClass::Local => 2,
        }
    }
}

/// Wire representation of a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: String,
    pub length_m: f64,
    pub road_class: RoadClass,
    pub speed_limit_mps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub length_m: f64,
    pub road_class: RoadClass,
    pub speed_limit_mps: f64,
    pub feature_vec: Vec<f64>,
}

impl Segment {
    pub fn new(
        id: impl Into<String>,
        length_m: f64,
        road_class: RoadClass,
        speed_limit_mps: f64,
        departure_ts: i64,
    ) -> Result<Self> {
        let id = id.into();
        if !(length_m.is_finite() && length_m > 0.0) {
            return Err(Error::InvalidRoute(format!("segment {id}: length_m must be > 0, got {length_m}")));
        }
        if !(speed_limit_mps.is_finite() && speed_limit_mps > 0.0) {
            return Err(Error::InvalidRoute(format!(
                "segment {id}: speed_limit_mps must be > 0, got {speed_limit_mps}"
            )));
        }
        let mut seg = Segment { id, length_m, road_class, speed_limit_mps, feature_vec: Vec::new() };
        seg.feature_vec = seg.features_at(departure_ts);
        Ok(seg)
    }

    /// Time to traverse the segment at the speed limit.
    pub fn free_flow_s(&self) -> f64 {
        self.length_m / self.speed_limit_mps
    }

    /// Feature vector with the time encodings evaluated at `ts`.
    pub fn features_at(&self, ts: i64) -> Vec<f64> {
        let mut f = vec![0.0; FEATURE_DIM];
        f[0] = self.length_m / 1000.0;
        f[1 + self.road_class.index()] = 1.0;
        f[4] = self.speed_limit_mps / 30.0;
        f[TIME_SLOTS].copy_from_slice(&time_encoding(ts));
        f
    }

    pub fn record(&self) -> SegmentRecord {
        SegmentRecord {
            id: self.id.clone(),
            length_m: self.length_m,
            road_class: self.road_class,
            speed_limit_mps: self.speed_limit_mps,
        }
    }
}

/// sin/cos of hour-of-day and day-of-week (UTC, Monday = 0).
pub fn time_encoding(ts: i64) -> [f64; 4] {
    let hour = ts.rem_euclid(86_400) as f64 / 3600.0;
    let dow = ((ts as f64 / 86_400.0) + 3.0).rem_euclid(7.0);
    let h = TAU * hour / 24.0;
    let d = TAU * dow / 7.0;
    [h.sin(), h.cos(), d.sin(), d.cos()]
}

/// Hour of day in `[0, 24)` for an epoch timestamp.
pub fn hour_of_day(ts: i64) -> f64 {
    ts.rem_euclid(86_400) as f64 / 3600.0
}

/// Wire representation of a route: one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub route_id: String,
    pub departure_ts: i64,
    pub segments: Vec<SegmentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_times_s: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RouteRecord", into = "RouteRecord")]
pub struct Route {
    pub route_id: String,
    pub departure_ts: i64,
    segments: Vec<Segment>,
    seg_times_s: Option<Vec<f64>>,
}

impl Route {
    pub fn new(
        route_id: impl Into<String>,
        departure_ts: i64,
        segments: Vec<Segment>,
        seg_times_s: Option<Vec<f64>>,
    ) -> Result<Self> {
        let route_id = route_id.into();
        if segments.len() < 2 {
            return Err(Error::InvalidRoute(format!(
                "route {route_id}: needs at least 2 segments, got {}",
                segments.len()
            )));
        }
        if let Some(times) = &seg_times_s {
            if times.len() != segments.len() {
                return Err(Error::InvalidRoute(format!(
                    "route {route_id}: {} segment times for {} segments",
                    times.len(),
                    segments.len()
                )));
            }
            if let Some((i, t)) = times.iter().enumerate().find(|(_, t)| !(t.is_finite() && **t > 0.0)) {
                return Err(Error::InvalidRoute(format!("route {route_id}: segment time {i} must be > 0, got {t}")));
            }
        }
        Ok(Route { route_id, departure_ts, segments, seg_times_s })
    }

    pub fn from_record(rec: RouteRecord) -> Result<Self> {
        let segments = rec
            .segments
            .into_iter()
            .map(|s| Segment::new(s.id, s.length_m, s.road_class, s.speed_limit_mps, rec.departure_ts))
            .collect::<Result<Vec<_>>>()?;
        Route::new(rec.route_id, rec.departure_ts, segments, rec.seg_times_s)
    }

    pub fn record(&self) -> RouteRecord {
        RouteRecord {
            route_id: self.route_id.clone(),
            departure_ts: self.departure_ts,
            segments: self.segments.iter().map(Segment::record).collect(),
            seg_times_s: self.seg_times_s.clone(),
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn seg_times_s(&self) -> Option<&[f64]> {
        self.seg_times_s.as_deref()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.seg_times_s.is_some()
    }

    /// Replaces the ground truth, re-validating it.
    pub fn with_seg_times(self, times: Vec<f64>) -> Result<Self> {
        Route::new(self.route_id, self.departure_ts, self.segments, Some(times))
    }

    pub fn total_time_s(&self) -> Option<f64> {
        self.seg_times_s.as_ref().map(|t| t.iter().sum())
    }

    /// Ground-truth time over a range of segments.
    pub fn time_over(&self, range: Range<usize>) -> Option<f64> {
        self.seg_times_s.as_ref().map(|t| t[range].iter().sum())
    }

    pub fn length_over(&self, range: Range<usize>) -> f64 {
        self.segments[range].iter().map(|s| s.length_m).sum()
    }
}

impl TryFrom<RouteRecord> for Route {
    type Error = Error;

    fn try_from(rec: RouteRecord) -> Result<Self> {
        Route::from_record(rec)
    }
}

impl From<Route> for RouteRecord {
    fn from(route: Route) -> Self {
        route.record()
    }
}

/// A route partitioned at `split_index` into traveled and remaining parts.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteSplit {
    pub route: Route,
    pub split_index: usize,
    pub y_tr: Option<f64>,
}

impl RouteSplit {
    pub fn at(route: Route, split_index: usize) -> Result<Self> {
        let n = route.len();
        if split_index == 0 || split_index >= n {
            return Err(Error::InvalidRoute(format!(
                "route {}: split index {split_index} outside 1..{n}",
                route.route_id
            )));
        }
        let y_tr = route.time_over(0..split_index);
        Ok(RouteSplit { route, split_index, y_tr })
    }

    pub fn traveled(&self) -> &[Segment] {
        &self.route.segments()[..self.split_index]
    }

    pub fn remaining(&self) -> &[Segment] {
        &self.route.segments()[self.split_index..]
    }

    /// Ground-truth remaining time.
    pub fn y_re(&self) -> Option<f64> {
        self.route.time_over(self.split_index..self.route.len())
    }

    pub fn y(&self) -> Option<f64> {
        self.route.total_time_s()
    }
}

/// Splits a route so that `round(fraction * n)` segments count as traveled,
/// clamped so both parts are non-empty.
pub fn split_route(route: Route, fraction: f64) -> Result<RouteSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let n = route.len();
    if n < 2 {
        return Err(Error::InvalidRoute(format!("route {}: n = {n} < 2", route.route_id)));
    }
    // round-half-up
    let m = (fraction * n as f64 + 0.5).floor() as usize;
    let m = m.clamp(1, n - 1);
    RouteSplit::at(route, m)
}

/// Partitions `0..n` into `k` contiguous ranges whose sizes differ by at most
/// one; the earliest parts take the remainder.
pub fn checkpoint_boundaries(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || k > n {
        return Err(Error::InvalidPartition { n, k });
    }
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}
