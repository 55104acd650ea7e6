//! Uncertainty-guided decision engine.
//!
//! A pre-route estimate is stored as a profile of cumulative interval triples
//! at `k` checkpoints. An en-route query at checkpoint `i` whose observed
//! elapsed time falls inside the stored cumulative interval is answered from
//! the profile without touching the model; otherwise the model re-estimates
//! the remaining route and the profile's later checkpoints are rebuilt.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::backbone::TravelTimeModel;
use crate::error::{Error, Result};
use crate::interval::{CheckpointProfile, IntervalTriple};
use crate::route::{checkpoint_boundaries, Route};

/// How a retained answer derives the remaining point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemainingMode {
    /// `total.point - traveled.point`.
    #[default]
    Profile,
    /// `total.point - observed elapsed`.
    Elapsed,
}

/// Remaining-route triple from a stored total and the stored cumulative
/// estimate at the current checkpoint. Bounds subtract componentwise; the
/// result is sorted and floored at zero when subtraction breaks ordering.
pub fn remaining_from_profile(
    total: &IntervalTriple,
    traveled_cum: &IntervalTriple,
    y_tr: f64,
    mode: RemainingMode,
) -> Result<IntervalTriple> {
    if !traveled_cum.componentwise_le(total) {
        return Err(Error::Invariant(format!("traveled estimate {traveled_cum:?} exceeds total {total:?}")));
    }
    let point = match mode {
        RemainingMode::Profile => total.point() - traveled_cum.point(),
        RemainingMode::Elapsed => total.point() - y_tr,
    };
    IntervalTriple::repaired(total.lower() - traveled_cum.lower(), point, total.upper() - traveled_cum.upper())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnRouteQuery {
    pub route_id: String,
    /// 1-based index of the part just completed.
    pub part: usize,
    /// Observed elapsed seconds since departure.
    pub y_tr: f64,
    pub ts: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Retained,
    Reestimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnRouteAnswer {
    pub remaining: IntervalTriple,
    pub decision: Decision,
    /// Generation of the profile the decision was made against.
    pub generation: u64,
    pub model_invoked: bool,
    /// The stored cumulative interval the observation was compared with.
    pub checked: IntervalTriple,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CallStats {
    pub preroute_calls: u64,
    pub enroute_queries: u64,
    pub retained: u64,
    pub reestimated: u64,
    pub retain_fraction: f64,
}

#[derive(Debug, Default)]
struct Counters {
    preroute: u64,
    queries: u64,
    retained: u64,
    reestimated: u64,
}

#[derive(Debug)]
struct Entry {
    route: Arc<Route>,
    parts: Vec<Range<usize>>,
    profile: CheckpointProfile,
}

/// Concurrent store of checkpoint profiles keyed by route id.
///
/// Queries on distinct routes never contend beyond a brief map read lock; a
/// re-estimation holds its route's lock so concurrent queries on that route
/// observe either the old or the new generation.
#[derive(Debug, Default)]
pub struct TteStore {
    profiles: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
    counters: Mutex<Counters>,
    mode: RemainingMode,
}

impl TteStore {
    pub fn new(mode: RemainingMode) -> Self {
        TteStore { mode, ..TteStore::default() }
    }

    pub fn mode(&self) -> RemainingMode {
        self.mode
    }

    /// Pre-route estimate: one model call, aggregated at `k` checkpoints and stored at generation 0.
    pub fn preroute<M: TravelTimeModel + ?Sized>(
        &self,
        model: &M,
        route: Arc<Route>,
        k: usize,
        created_at: i64,
    ) -> Result<CheckpointProfile> {
        let parts = checkpoint_boundaries(route.len(), k)?;
        if self.profiles.read().contains_key(&route.route_id) {
            return Err(Error::Conflict(route.route_id.clone()));
        }
        let pred = model.predict_route(route.segments(), route.departure_ts)?;
        let cum = parts.iter().map(|p| pred.cumulative[p.end - 1]).collect();
        let profile = CheckpointProfile::new(route.route_id.clone(), cum, created_at)?;

        let mut map = self.profiles.write();
        if map.contains_key(&route.route_id) {
            return Err(Error::Conflict(route.route_id.clone()));
        }
        map.insert(route.route_id.clone(), Arc::new(Mutex::new(Entry { route, parts, profile: profile.clone() })));
        drop(map);
        self.counters.lock().preroute += 1;
        Ok(profile)
    }

    /// Answers an en-route query, retaining the stored estimate when the
    /// observed elapsed time lies inside the closed stored interval.
    pub fn enroute<M: TravelTimeModel + ?Sized>(&self, model: &M, query: &EnRouteQuery) -> Result<EnRouteAnswer> {
        let entry = self
            .profiles
            .read()
            .get(&query.route_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(query.route_id.clone()))?;
        let mut entry = entry.lock();
        let k = entry.profile.k;
        if query.part == 0 || query.part > k {
            return Err(Error::Range { index: query.part, k });
        }
        if !(query.y_tr.is_finite() && query.y_tr >= 0.0) {
            return Err(Error::Numeric(format!("elapsed time must be finite and >= 0, got {}", query.y_tr)));
        }
        let idx = query.part - 1;
        let checked = entry.profile.cum[idx];
        let generation = entry.profile.generation;

        let answer = if checked.contains(query.y_tr) {
            let remaining = remaining_from_profile(&entry.profile.total, &checked, query.y_tr, self.mode)?;
            EnRouteAnswer { remaining, decision: Decision::Retained, generation, model_invoked: false, checked }
        } else {
            let fresh = reestimate(&mut entry, model, idx, query)?;
            EnRouteAnswer {
                remaining: fresh.unwrap_or(IntervalTriple::ZERO),
                decision: Decision::Reestimated,
                generation,
                model_invoked: fresh.is_some(),
                checked,
            }
        };
        let last = query.part == k;
        drop(entry);
        if last {
            self.evict(&query.route_id);
        }

        let mut c = self.counters.lock();
        c.queries += 1;
        match answer.decision {
            Decision::Retained => c.retained += 1,
            Decision::Reestimated => c.reestimated += 1,
        }
        Ok(answer)
    }

    pub fn evict(&self, route_id: &str) -> bool {
        self.profiles.write().remove(route_id).is_some()
    }

    pub fn profile(&self, route_id: &str) -> Option<CheckpointProfile> {
        let entry = self.profiles.read().get(route_id).cloned()?;
        let profile = entry.lock().profile.clone();
        Some(profile)
    }

    pub fn len(&self) -> usize {
        self.profiles.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.read().is_empty()
    }

    /// All live profiles, sorted by route id.
    pub fn snapshot(&self) -> Vec<CheckpointProfile> {
        let entries: Vec<_> = self.profiles.read().values().cloned().collect();
        let mut out: Vec<_> = entries.iter().map(|e| e.lock().profile.clone()).collect();
        out.sort_by(|a, b| a.route_id.cmp(&b.route_id));
        out
    }

    pub fn call_stats(&self) -> CallStats {
        let c = self.counters.lock();
        let retain_fraction = if c.queries == 0 { 0.0 } else { c.retained as f64 / c.queries as f64 };
        CallStats {
            preroute_calls: c.preroute,
            enroute_queries: c.queries,
            retained: c.retained,
            reestimated: c.reestimated,
            retain_fraction,
        }
    }
}

/// Re-estimates the remaining route after checkpoint `idx` and rebuilds the
/// profile from the observed elapsed time. Returns the fresh remaining
/// estimate, or `None` when nothing remains and the model was not called.
fn reestimate<M: TravelTimeModel + ?Sized>(
    entry: &mut Entry,
    model: &M,
    idx: usize,
    query: &EnRouteQuery,
) -> Result<Option<IntervalTriple>> {
    let y = query.y_tr;
    let split = entry.parts[idx].end;
    let route = Arc::clone(&entry.route);
    let observed = IntervalTriple::degenerate(y)?;

    let mut cum = entry.profile.cum.clone();
    for past in &mut cum[..idx] {
        *past = IntervalTriple::new(past.lower().min(y), past.point().min(y), past.upper().min(y))?;
    }
    cum[idx] = observed;

    let mut fresh = None;
    if split < route.len() {
        let (traveled, remaining) = route.segments().split_at(split);
        let pred = model.predict_remaining(traveled, remaining, y, query.ts)?;
        for (slot, part) in cum.iter_mut().zip(&entry.parts).skip(idx + 1) {
            *slot = observed.add(&pred.cumulative[part.end - split - 1]);
        }
        fresh = Some(pred.total());
    }
    let mut profile = CheckpointProfile::new(entry.profile.route_id.clone(), cum, entry.profile.created_at)?;
    profile.generation = entry.profile.generation + 1;
    entry.profile = profile;
    Ok(fresh)
}

#[cfg(test)]
mod tests;
