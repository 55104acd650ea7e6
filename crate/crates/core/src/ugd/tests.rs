use approx::assert_relative_eq;

use super::*;
use crate::backbone::{CountingModel, RoutePrediction, SegmentPrediction};
use crate::route::tests::toy_route;
use crate::route::Segment;

/// Every segment gets the same triple; remaining-route estimates use a second one.
struct Flat {
    seg: [f64; 3],
    rem: [f64; 3],
}

fn constant_prediction(n: usize, t: [f64; 3]) -> RoutePrediction {
    let sp = SegmentPrediction { point_s: t[1], delta_lower_s: t[1] - t[0], delta_upper_s: t[2] - t[1] };
    let mut acc = IntervalTriple::ZERO;
    let cumulative = (0..n)
        .map(|_| {
            acc = acc.add(&sp.triple());
            acc
        })
        .collect();
    RoutePrediction { segments: vec![sp; n], cumulative }
}

impl TravelTimeModel for Flat {
    fn predict_route(&self, segments: &[Segment], _: i64) -> Result<RoutePrediction> {
        Ok(constant_prediction(segments.len(), self.seg))
    }

    fn predict_remaining(&self, _: &[Segment], remaining: &[Segment], _: f64, _: i64) -> Result<RoutePrediction> {
        Ok(constant_prediction(remaining.len(), self.rem))
    }
}

fn model() -> CountingModel<Flat> {
    CountingModel::new(Flat { seg: [50.0, 60.0, 70.0], rem: [40.0, 45.0, 55.0] })
}

fn triple(l: f64, p: f64, u: f64) -> IntervalTriple {
    IntervalTriple::new(l, p, u).unwrap()
}

/// Six segments in three parts of two: first checkpoint (100,120,140), total (300,360,420).
fn store_with_route(mode: RemainingMode) -> (TteStore, CountingModel<Flat>) {
    let store = TteStore::new(mode);
    let m = model();
    store.preroute(&m, Arc::new(toy_route(6, false)), 3, 0).unwrap();
    (store, m)
}

fn query(part: usize, y_tr: f64) -> EnRouteQuery {
    EnRouteQuery { route_id: "r0".into(), part, y_tr, ts: 1_700_000_000 }
}

#[test]
fn preroute_profile_aggregates_at_checkpoints() {
    let (store, m) = store_with_route(RemainingMode::Profile);
    let p = store.profile("r0").unwrap();
    assert_eq!(p.cum, vec![triple(100.0, 120.0, 140.0), triple(200.0, 240.0, 280.0), triple(300.0, 360.0, 420.0)]);
    assert_eq!(p.total, triple(300.0, 360.0, 420.0));
    assert_eq!(p.generation, 0);
    assert_eq!(m.calls(), 1);
}

#[test]
fn inside_interval_retains_without_model_call() {
    let (store, m) = store_with_route(RemainingMode::Profile);
    let a = store.enroute(&m, &query(1, 130.0)).unwrap();
    assert_eq!(a.decision, Decision::Retained);
    assert!(!a.model_invoked);
    assert_eq!(a.remaining, triple(200.0, 240.0, 280.0));
    assert_eq!(a.checked, triple(100.0, 120.0, 140.0));
    assert_eq!(m.calls(), 1);
    assert_eq!(store.profile("r0").unwrap().generation, 0);
}

#[test]
fn elapsed_mode_subtracts_observation() {
    let (store, m) = store_with_route(RemainingMode::Elapsed);
    let a = store.enroute(&m, &query(1, 130.0)).unwrap();
    assert_eq!(a.remaining, triple(200.0, 230.0, 280.0));
}

#[test]
fn interval_bounds_are_inclusive() {
    for y in [100.0, 140.0] {
        let (store, m) = store_with_route(RemainingMode::Profile);
        assert_eq!(store.enroute(&m, &query(1, y)).unwrap().decision, Decision::Retained, "y = {y}");
    }
    for y in [99.999, 140.001] {
        let (store, m) = store_with_route(RemainingMode::Profile);
        assert_eq!(store.enroute(&m, &query(1, y)).unwrap().decision, Decision::Reestimated, "y = {y}");
    }
}

#[test]
fn deviation_reestimates_and_rebuilds_profile() {
    let (store, m) = store_with_route(RemainingMode::Profile);
    let a = store.enroute(&m, &query(1, 141.0)).unwrap();
    assert_eq!(a.decision, Decision::Reestimated);
    assert!(a.model_invoked);
    assert_eq!(a.generation, 0);
    // four remaining segments at (40, 45, 55)
    assert_eq!(a.remaining, triple(160.0, 180.0, 220.0));
    assert_eq!(m.calls(), 2);

    let p = store.profile("r0").unwrap();
    assert_eq!(p.generation, 1);
    assert_eq!(p.cum[0], IntervalTriple::degenerate(141.0).unwrap());
    assert_eq!(p.cum[1], triple(221.0, 231.0, 251.0));
    assert_eq!(p.total, triple(301.0, 321.0, 361.0));

    // the next checkpoint is judged against the rebuilt profile
    let b = store.enroute(&m, &query(2, 225.0)).unwrap();
    assert_eq!(b.decision, Decision::Retained);
    assert_eq!(b.generation, 1);
    assert_eq!(b.remaining, triple(80.0, 90.0, 110.0));
}

#[test]
fn final_checkpoint_evicts() {
    let (store, m) = store_with_route(RemainingMode::Profile);
    store.enroute(&m, &query(1, 120.0)).unwrap();
    store.enroute(&m, &query(2, 240.0)).unwrap();
    assert_eq!(store.len(), 1);
    let last = store.enroute(&m, &query(3, 360.0)).unwrap();
    assert_eq!(last.remaining, IntervalTriple::ZERO);
    assert!(store.is_empty());
    assert!(matches!(store.enroute(&m, &query(3, 360.0)), Err(Error::NotFound(_))));
}

#[test]
fn single_checkpoint_deviation_needs_no_model() {
    let store = TteStore::new(RemainingMode::Profile);
    let m = model();
    store.preroute(&m, Arc::new(toy_route(4, false)), 1, 0).unwrap();
    let a = store.enroute(&m, &query(1, 999.0)).unwrap();
    assert_eq!(a.decision, Decision::Reestimated);
    assert!(!a.model_invoked);
    assert_eq!(a.remaining, IntervalTriple::ZERO);
    assert_eq!(m.calls(), 1);
    assert!(store.is_empty());
}

#[test]
fn request_errors() {
    let (store, m) = store_with_route(RemainingMode::Profile);
    assert!(matches!(store.preroute(&m, Arc::new(toy_route(6, false)), 3, 0), Err(Error::Conflict(_))));
    assert!(matches!(store.enroute(&m, &query(0, 10.0)), Err(Error::Range { index: 0, k: 3 })));
    assert!(matches!(store.enroute(&m, &query(4, 10.0)), Err(Error::Range { index: 4, k: 3 })));
    assert!(matches!(store.enroute(&m, &query(1, -1.0)), Err(Error::Numeric(_))));
    assert!(matches!(store.enroute(&m, &query(1, f64::INFINITY)), Err(Error::Numeric(_))));
    let missing = EnRouteQuery { route_id: "nope".into(), ..query(1, 1.0) };
    assert!(matches!(store.enroute(&m, &missing), Err(Error::NotFound(_))));
    assert!(matches!(store.preroute(&m, Arc::new(toy_route(2, false)), 3, 0), Err(Error::InvalidPartition { .. })));
    // failed requests leave no trace in the counters
    assert_eq!(store.call_stats().enroute_queries, 0);
    assert_eq!(store.profile("r0").unwrap().generation, 0);
}

#[test]
fn call_stats_track_decisions() {
    let (store, m) = store_with_route(RemainingMode::Profile);
    store.enroute(&m, &query(1, 120.0)).unwrap();
    store.enroute(&m, &query(2, 500.0)).unwrap();
    store.enroute(&m, &query(3, 700.0)).unwrap();
    let s = store.call_stats();
    assert_eq!((s.preroute_calls, s.enroute_queries, s.retained, s.reestimated), (1, 3, 1, 2));
    assert_relative_eq!(s.retain_fraction, 1.0 / 3.0);
}

#[test]
fn remaining_from_profile_examples() {
    let total = triple(300.0, 360.0, 420.0);
    let r = remaining_from_profile(&total, &triple(100.0, 120.0, 140.0), 130.0, RemainingMode::Profile).unwrap();
    assert_eq!(r, triple(200.0, 240.0, 280.0));
    // upper subtraction below point: (200, 240, 220) repaired by sorting
    let r = remaining_from_profile(&total, &triple(100.0, 120.0, 200.0), 130.0, RemainingMode::Profile).unwrap();
    assert_eq!(r, triple(200.0, 220.0, 240.0));
    let r = remaining_from_profile(&total, &total, 360.0, RemainingMode::Profile).unwrap();
    assert_eq!(r, IntervalTriple::ZERO);
    let err = remaining_from_profile(&triple(1.0, 2.0, 3.0), &triple(1.0, 2.5, 3.0), 2.0, RemainingMode::Profile);
    assert!(matches!(err, Err(Error::Invariant(_))));
}

#[test]
fn snapshot_is_sorted() {
    let store = TteStore::default();
    let m = model();
    for id in ["c", "a", "b"] {
        let r = toy_route(3, false);
        let r = Route::new(id, r.departure_ts, r.segments().to_vec(), None).unwrap();
        store.preroute(&m, Arc::new(r), 3, 0).unwrap();
    }
    let ids: Vec<_> = store.snapshot().into_iter().map(|p| p.route_id).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert!(store.evict("b"));
    assert!(!store.evict("b"));
    assert_eq!(store.len(), 2);
}

#[test]
fn concurrent_queries_stay_consistent() {
    let store = TteStore::default();
    let m = model();
    let n_routes = 32;
    for i in 0..n_routes {
        let r = toy_route(6, false);
        let r = Route::new(format!("r{i}"), r.departure_ts, r.segments().to_vec(), None).unwrap();
        store.preroute(&m, Arc::new(r), 3, 0).unwrap();
    }
    std::thread::scope(|s| {
        for t in 0..4 {
            let (store, m) = (&store, &m);
            s.spawn(move || {
                for i in (t..n_routes).step_by(4) {
                    // odd routes deviate at the first checkpoint
                    let y1 = if i % 2 == 0 { 120.0 } else { 150.0 };
                    for (part, y) in [(1, y1), (2, y1 + 100.0)] {
                        let q = EnRouteQuery { route_id: format!("r{i}"), part, y_tr: y, ts: 0 };
                        store.enroute(m, &q).unwrap();
                    }
                }
            });
        }
        // concurrent readers on the same routes
        s.spawn(|| {
            for _ in 0..50 {
                for p in store.snapshot() {
                    assert!(p.generation <= 2);
                    p.validate().unwrap();
                }
            }
        });
    });
    let s = store.call_stats();
    assert_eq!(s.enroute_queries, 2 * n_routes as u64);
    assert_eq!(s.retained + s.reestimated, s.enroute_queries);
    assert_eq!(m.calls(), n_routes as u64 + s.reestimated);
    for i in 0..n_routes {
        let expected = if i % 2 == 0 { 0 } else { 1 };
        assert_eq!(store.profile(&format!("r{i}")).unwrap().generation, expected, "route r{i}");
    }
}
