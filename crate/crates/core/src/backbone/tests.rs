use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;
use crate::route::tests::toy_route;
use crate::route::RoadClass;

const T0: i64 = 1_700_000_000;

fn small_config() -> MlpConfig {
    MlpConfig::standard(8, 2)
}

fn zero_params() -> ModelParams {
    let cfg = small_config();
    ModelParams::from_values(cfg, 0, vec![0.0; cfg.param_count()]).unwrap()
}

fn seg(id: &str, len: f64, speed: f64) -> Segment {
    Segment::new(id, len, RoadClass::Arterial, speed, T0).unwrap()
}

#[test]
fn zero_weights_give_softplus_zero_scaled_by_free_flow() {
    let segs = vec![seg("a", 300.0, 15.0), seg("b", 450.0, 10.0)];
    let pred = forward_route(&zero_params(), &segs, T0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let ff = [20.0, 45.0];
    for (p, f) in pred.segments.iter().zip(ff) {
        assert_relative_eq!(p.point_s, ln2 * f, max_relative = 1e-12);
        assert_relative_eq!(p.delta_lower_s, ln2 * f, max_relative = 1e-12);
        assert_relative_eq!(p.delta_upper_s, ln2 * f, max_relative = 1e-12);
    }
    let total = pred.total();
    assert_eq!(total.lower(), 0.0);
    assert_relative_eq!(total.point(), ln2 * 65.0, max_relative = 1e-12);
    assert_relative_eq!(total.upper(), 2.0 * ln2 * 65.0, max_relative = 1e-12);
}

#[test]
fn single_segment_cumulative_is_its_triple() {
    let p = ModelParams::init(small_config(), 4).unwrap();
    let pred = forward_route(&p, &[seg("a", 500.0, 12.0)], T0).unwrap();
    assert_eq!(pred.cumulative.len(), 1);
    assert_eq!(pred.total(), pred.per_segment()[0]);
}

#[test]
fn identical_segments_double_the_single_estimate() {
    let p = ModelParams::init(small_config(), 5).unwrap();
    let one = forward_route(&p, &[seg("a", 500.0, 12.0)], T0).unwrap().total();
    let two = forward_route(&p, &[seg("a", 500.0, 12.0), seg("b", 500.0, 12.0)], T0).unwrap().total();
    assert_relative_eq!(two.lower(), 2.0 * one.lower(), max_relative = 1e-12);
    assert_relative_eq!(two.point(), 2.0 * one.point(), max_relative = 1e-12);
    assert_relative_eq!(two.upper(), 2.0 * one.upper(), max_relative = 1e-12);
}

#[test]
fn empty_traveled_context_matches_preroute() {
    let p = ModelParams::init(small_config(), 6).unwrap();
    let route = toy_route(6, false);
    let a = forward_with_context(&p, &[], route.segments(), 0.0, T0 + 900).unwrap();
    let b = forward_route(&p, route.segments(), T0 + 900).unwrap();
    assert_eq!(a, b);
}

#[test]
fn context_changes_remaining_estimate() {
    let p = ModelParams::init(small_config(), 6).unwrap();
    let route = toy_route(6, false);
    let (tr, re) = route.segments().split_at(2);
    let slow = forward_with_context(&p, tr, re, 400.0, T0 + 400).unwrap().total();
    let fast = forward_with_context(&p, tr, re, 20.0, T0 + 20).unwrap().total();
    assert_ne!(slow, fast);
}

#[test]
fn batched_and_single_forward_agree_bitwise() {
    let p = ModelParams::init(small_config(), 7).unwrap();
    let a = toy_route(5, false);
    let b = toy_route(9, false);
    let mut batch = RowBatch::new();
    batch.push(a.segments(), T0, &RouteContext::neutral());
    batch.push(b.segments(), T0 + 60, &RouteContext::neutral());
    let out = forward_batch(&p, &batch, None).unwrap();
    assert_eq!(out.route_prediction(batch.spans()[0].clone()), forward_route(&p, a.segments(), T0).unwrap());
    assert_eq!(out.route_prediction(batch.spans()[1].clone()), forward_route(&p, b.segments(), T0 + 60).unwrap());
}

#[test]
fn same_seed_same_predictions() {
    let route = toy_route(7, false);
    let a = forward_route(&ModelParams::init(small_config(), 11).unwrap(), route.segments(), T0).unwrap();
    let b = forward_route(&ModelParams::init(small_config(), 11).unwrap(), route.segments(), T0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_route_rejected() {
    let err = forward_route(&zero_params(), &[], T0).unwrap_err();
    assert!(matches!(err, Error::InvalidRoute(_)));
}

#[test]
fn wrong_input_width_rejected() {
    let p = ModelParams::init(MlpConfig { input_dim: 7, hidden_width: 4, depth: 1 }, 0).unwrap();
    let err = forward_route(&p, toy_route(3, false).segments(), T0).unwrap_err();
    assert!(matches!(err, Error::Shape { expected: MODEL_INPUT_DIM, actual: 7 }));
}

#[test]
fn observed_context_pace() {
    let segs = vec![seg("a", 300.0, 15.0)];
    let ctx = RouteContext::observed(&segs, 120.0, 60.0).unwrap();
    assert_relative_eq!(ctx.log_pace, 2.0f64.ln(), max_relative = 1e-12);
    assert_relative_eq!(ctx.elapsed_h, 120.0 / 3600.0);
    assert_eq!(&ctx.traveled_mean[..], &segs[0].feature_vec[..]);
    assert_eq!(RouteContext::observed(&segs, 0.0, 60.0).unwrap().log_pace, -3.0);
    assert_eq!(RouteContext::observed(&segs, 1e9, 1.0).unwrap().log_pace, 3.0);
    assert!(matches!(RouteContext::observed(&segs, -1.0, 60.0), Err(Error::Numeric(_))));
    assert!(matches!(RouteContext::observed(&segs, f64::NAN, 60.0), Err(Error::Numeric(_))));
}

#[test]
fn softplus_is_stable() {
    assert_eq!(softplus(1000.0), 1000.0);
    assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    assert_relative_eq!(softplus(0.0), std::f64::consts::LN_2);
}

#[test]
fn counting_model_counts_both_entry_points() {
    let m = CountingModel::new(ModelParams::init(small_config(), 1).unwrap());
    let route = toy_route(4, false);
    m.predict_route(route.segments(), T0).unwrap();
    let (tr, re) = route.segments().split_at(2);
    m.predict_remaining(tr, re, 30.0, T0 + 30).unwrap();
    assert_eq!(m.calls(), 2);
}

/// Linear functional of the route triples: L = sum_r c . total_r.
fn linear_loss(p: &ModelParams, batch: &RowBatch, c: [f64; 3]) -> f64 {
    let out = forward_batch(p, batch, None).unwrap();
    batch
        .spans()
        .iter()
        .map(|s| {
            let t = out.sum(s.clone());
            c[0] * t.lower() + c[1] * t.point() + c[2] * t.upper()
        })
        .sum()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let p = ModelParams::init(small_config(), 21).unwrap();
    let mut batch = RowBatch::new();
    batch.push(toy_route(4, false).segments(), T0, &RouteContext::neutral());
    let ctx = RouteContext::observed(toy_route(2, false).segments(), 40.0, 30.0).unwrap();
    batch.push(toy_route(3, false).segments(), T0 + 3600 * 8, &ctx);
    let c = [0.7, -0.4, 1.3];

    let mut cache = ForwardCache::default();
    let out = forward_batch(&p, &batch, Some(&mut cache)).unwrap();
    assert!(cache.min_hidden_margin() > 1e-4, "test point too close to a ReLU kink");
    assert!(out.min_floor_margin() > 1e-3, "test point too close to the lower floor");
    let d_raw = out.head_backward(&vec![c; batch.rows()]);
    let grads = p.backward(&cache, &d_raw).unwrap();

    let h = 1e-6;
    for i in (0..p.len()).step_by(7) {
        let mut plus = p.clone();
        plus.values_mut()[i] += h;
        let mut minus = p.clone();
        minus.values_mut()[i] -= h;
        let fd = (linear_loss(&plus, &batch, c) - linear_loss(&minus, &batch, c)) / (2.0 * h);
        let g = grads.0[i];
        assert!((fd - g).abs() <= 1e-5 * (1.0 + g.abs()), "param {i}: analytic {g} vs fd {fd}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut p = ModelParams::init(small_config(), 33).unwrap();
    let g = Gradients(p.values().iter().map(|v| v.sin() * 1e-2).collect());
    p.adam_step(&g, 1e-3, 1e-3).unwrap();
    save_checkpoint(&p, &path).unwrap();
    let q = load_checkpoint(&path).unwrap();
    assert_eq!(p, q);
    let route = toy_route(8, false);
    assert_eq!(forward_route(&p, route.segments(), T0).unwrap(), forward_route(&q, route.segments(), T0).unwrap());
}

#[test]
fn checkpoint_rejects_foreign_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut ck = Checkpoint::new(zero_params());
    ck.format = "other/9".into();
    std::fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Config(_))));

    ck.format = CHECKPOINT_FORMAT.into();
    ck.feature_dim = 4;
    std::fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Shape { .. })));

    std::fs::write(&path, "{not json").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Json(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictions_are_ordered_and_additive(seed in 0u64..1000, n in 2usize..25, hour in 0i64..168) {
        let p = ModelParams::init(small_config(), seed).unwrap();
        let route = toy_route(n, false);
        let pred = forward_route(&p, route.segments(), T0 + hour * 3600).unwrap();
        let mut acc = IntervalTriple::ZERO;
        let mut prev = IntervalTriple::ZERO;
        for (triple, cum) in pred.per_segment().iter().zip(&pred.cumulative) {
            prop_assert!(triple.lower() >= 0.0);
            prop_assert!(triple.lower() <= triple.point() && triple.point() <= triple.upper());
            acc = acc.add(triple);
            prop_assert_eq!(acc, *cum);
            prop_assert!(prev.componentwise_le(cum));
            prev = *cum;
        }
    }
}
