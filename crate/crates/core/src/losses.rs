//! Training objectives over interval triples.
//!
//! Every loss returns its value together with the gradient with respect to the
//! `(lower, point, upper)` components of each triple it consumes. Pinball uses
//! the standard quantile-regression orientation: underestimates cost `alpha`
//! per second, overestimates `1 - alpha`.

use crate::error::{Error, Result};
use crate::interval::{IntervalTriple, QuantileConfig};

/// A scalar loss and its gradient with respect to one `(lower, point, upper)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    pub grad: [f64; 3],
}

impl LossValue {
    fn plus(self, other: LossValue) -> LossValue {
        LossValue {
            value: self.value + other.value,
            grad: [self.grad[0] + other.grad[0], self.grad[1] + other.grad[1], self.grad[2] + other.grad[2]],
        }
    }

    pub fn scaled(self, c: f64) -> LossValue {
        LossValue { value: self.value * c, grad: self.grad.map(|g| g * c) }
    }
}

/// Loss over a pair of triples (the entire route and its traveled prefix).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairLoss {
    pub value: f64,
    pub grad_entire: [f64; 3],
    pub grad_traveled: [f64; 3],
}

/// Scalar pinball loss and its derivative with respect to `pred`.
pub fn pinball(pred: f64, label: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("quantile must be in (0, 1), got {alpha}")));
    }
    if label >= pred {
        // ties take the underestimate branch
        Ok((alpha * (label - pred), -alpha))
    } else {
        Ok(((1.0 - alpha) * (pred - label), 1.0 - alpha))
    }
}

pub fn quantile_triple_loss(triple: &IntervalTriple, label: f64, cfg: &QuantileConfig) -> Result<LossValue> {
    let (l, dl) = pinball(triple.lower(), label, cfg.alpha_lower)?;
    let (p, dp) = pinball(triple.point(), label, cfg.alpha_point)?;
    let (u, du) = pinball(triple.upper(), label, cfg.alpha_upper)?;
    Ok(LossValue { value: l + p + u, grad: [dl, dp, du] })
}

/// Prediction interval width `upper - lower`.
pub fn mpiw(triple: &IntervalTriple) -> LossValue {
    LossValue { value: triple.width(), grad: [-1.0, 0.0, 1.0] }
}

/// Mean width over a batch of intervals.
pub fn mean_mpiw(triples: &[IntervalTriple]) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    triples.iter().map(IntervalTriple::width).sum::<f64>() / triples.len() as f64
}

/// Pre-training objective: quantile loss on the entire route, quantile loss on
/// the traveled prefix, plus the weighted traveled-interval width.
pub fn pretrain_loss(
    entire: &IntervalTriple,
    y: f64,
    traveled: &IntervalTriple,
    y_tr: f64,
    cfg: &QuantileConfig,
) -> Result<PairLoss> {
    let en = quantile_triple_loss(entire, y, cfg)?;
    let tr = quantile_triple_loss(traveled, y_tr, cfg)?.plus(mpiw(traveled).scaled(cfg.mpiw_weight));
    Ok(PairLoss { value: en.value + tr.value, grad_entire: en.grad, grad_traveled: tr.grad })
}

/// Fine-tuning objective on the remaining route (no width term).
pub fn finetune_loss(remaining: &IntervalTriple, y_re: f64, cfg: &QuantileConfig) -> Result<LossValue> {
    quantile_triple_loss(remaining, y_re, cfg)
}

/// Interval score at confidence `rho` plus absolute error of the point estimate.
pub fn mis_loss(triple: &IntervalTriple, label: f64, rho: f64) -> Result<LossValue> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("confidence level must be in (0, 1), got {rho}")));
    }
    let penalty = 2.0 / (1.0 - rho);
    let (l, p, u) = (triple.lower(), triple.point(), triple.upper());
    let mut value = u - l;
    let mut grad = [-1.0, 0.0, 1.0];
    if l > label {
        value += penalty * (l - label);
        grad[0] += penalty;
    }
    if label > u {
        value += penalty * (label - u);
        grad[2] -= penalty;
    }
    value += (label - p).abs();
    grad[1] = if label >= p { -1.0 } else { 1.0 };
    Ok(LossValue { value, grad })
}

/// Which interval objective drives training.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Quantile,
    Mis {
        rho: f64,
    },
}

impl Objective {
    /// The per-triple interval loss this objective uses in place of the quantile loss.
    pub fn triple_loss(&self, triple: &IntervalTriple, label: f64, cfg: &QuantileConfig) -> Result<LossValue> {
        match self {
            Objective::Quantile => quantile_triple_loss(triple, label, cfg),
            Objective::Mis { rho } => mis_loss(triple, label, *rho),
        }
    }

    pub fn pretrain(
        &self,
        entire: &IntervalTriple,
        y: f64,
        traveled: &IntervalTriple,
        y_tr: f64,
        cfg: &QuantileConfig,
    ) -> Result<PairLoss> {
        match self {
            Objective::Quantile => pretrain_loss(entire, y, traveled, y_tr, cfg),
            Objective::Mis { .. } => {
                let en = self.triple_loss(entire, y, cfg)?;
                let tr = self.triple_loss(traveled, y_tr, cfg)?.plus(mpiw(traveled).scaled(cfg.mpiw_weight));
                Ok(PairLoss { value: en.value + tr.value, grad_entire: en.grad, grad_traveled: tr.grad })
            }
        }
    }

    pub fn finetune(&self, remaining: &IntervalTriple, y_re: f64, cfg: &QuantileConfig) -> Result<LossValue> {
        self.triple_loss(remaining, y_re, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(l: f64, p: f64, u: f64) -> IntervalTriple {
        IntervalTriple::new(l, p, u).unwrap()
    }

    fn cfg() -> QuantileConfig {
        QuantileConfig::default()
    }

    #[test]
    fn pinball_zero_at_label() {
        for a in [0.1, 0.5, 0.9] {
            assert_eq!(pinball(7.0, 7.0, a).unwrap().0, 0.0);
            assert_eq!(pinball(7.0, 7.0, a).unwrap().1, -a);
        }
    }

    #[test]
    fn pinball_symmetric_median() {
        assert_eq!(pinball(14.0, 10.0, 0.5).unwrap().0, 2.0);
    }

    #[test]
    fn pinball_rejects_bad_alpha() {
        assert!(matches!(pinball(1.0, 2.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(pinball(1.0, 2.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn pinball_grid_minimizer_is_quantile() {
        // Oracle: grid search over constant predictions, step 0.01.
        let labels: Vec<f64> = (1..=100).map(f64::from).collect();
        let mean_loss = |c: f64| labels.iter().map(|&y| pinball(c, y, 0.1).unwrap().0).sum::<f64>() / 100.0;
        let (best, _) = (0..=10_000)
            .map(|i| f64::from(i) * 0.01)
            .map(|c| (c, mean_loss(c)))
            .fold((0.0, f64::INFINITY), |acc, (c, l)| if l < acc.1 { (c, l) } else { acc });
        assert!((10.0..=11.0).contains(&best), "argmin {best}");
    }

    #[test]
    fn triple_loss_examples() {
        assert_eq!(quantile_triple_loss(&t(5.0, 5.0, 5.0), 5.0, &cfg()).unwrap().value, 0.0);
        // 0.1*2 + 0 + 0.1*2
        assert_abs_diff_eq!(
            quantile_triple_loss(&t(8.0, 10.0, 12.0), 10.0, &cfg()).unwrap().value,
            0.4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn inside_interval_terms_weight() {
        // Label inside: lower term alpha_lower * w_l, upper term (1 - alpha_upper) * w_u.
        for (wl, wu) in [(1.0, 3.0), (5.0, 0.5), (0.0, 2.0)] {
            let loss = quantile_triple_loss(&t(10.0 - wl, 10.0, 10.0 + wu), 10.0, &cfg()).unwrap();
            assert_abs_diff_eq!(loss.value, 0.1 * (wl + wu), epsilon = 1e-12);
        }
    }

    #[test]
    fn mpiw_examples() {
        assert_eq!(mpiw(&t(8.0, 10.0, 12.0)).value, 4.0);
        assert_eq!(mpiw(&t(10.0, 10.0, 10.0)).value, 0.0);
        assert_eq!(mean_mpiw(&[t(0.0, 1.0, 2.0), t(0.0, 2.0, 6.0)]), 4.0);
    }

    #[test]
    fn pretrain_examples() {
        let c = cfg();
        assert_eq!(pretrain_loss(&t(9.0, 9.0, 9.0), 9.0, &t(3.0, 3.0, 3.0), 3.0, &c).unwrap().value, 0.0);
        // exact points, traveled interval (2, 4, 6) around y_tr = 4: 0.1*2 + 0.1*2 + 4
        let l = pretrain_loss(&t(9.0, 9.0, 9.0), 9.0, &t(2.0, 4.0, 6.0), 4.0, &c).unwrap();
        assert_abs_diff_eq!(l.value, 0.2 + 0.2 + 4.0, epsilon = 1e-12);
        let c0 = QuantileConfig { mpiw_weight: 0.0, ..c };
        let l0 = pretrain_loss(&t(9.0, 9.0, 9.0), 9.0, &t(2.0, 4.0, 6.0), 4.0, &c0).unwrap();
        assert_abs_diff_eq!(l0.value, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn finetune_examples() {
        assert_eq!(finetune_loss(&t(3.0, 3.0, 3.0), 3.0, &cfg()).unwrap().value, 0.0);
        assert_abs_diff_eq!(finetune_loss(&t(8.0, 10.0, 12.0), 10.0, &cfg()).unwrap().value, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn mis_examples() {
        let tr = t(8.0, 10.0, 12.0);
        assert_abs_diff_eq!(mis_loss(&tr, 11.0, 0.8).unwrap().value, 4.0 + 1.0, epsilon = 1e-12);
        // label = upper + 1: width 4 + 10 * 1 + |13 - 10|
        assert_abs_diff_eq!(mis_loss(&tr, 13.0, 0.8).unwrap().value, 4.0 + 10.0 + 3.0, epsilon = 1e-12);
        assert_eq!(mis_loss(&t(5.0, 5.0, 5.0), 5.0, 0.8).unwrap().value, 0.0);
        assert!(mis_loss(&tr, 1.0, 1.0).is_err());
    }

    fn fd_check(f: impl Fn(&IntervalTriple) -> LossValue, base: [f64; 3]) {
        let h = 1e-6;
        let at = |v: [f64; 3]| f(&IntervalTriple::repaired(v[0], v[1], v[2]).unwrap());
        let analytic = at(base).grad;
        for c in 0..3 {
            let (mut up, mut dn) = (base, base);
            up[c] += h;
            dn[c] -= h;
            let numeric = (at(up).value - at(dn).value) / (2.0 * h);
            assert!((numeric - analytic[c]).abs() < 1e-6, "component {c}: {numeric} vs {}", analytic[c]);
        }
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            l in 1.0f64..50.0, dp in 0.01f64..20.0, du in 0.01f64..20.0, label in 0.0f64..100.0, rho in 0.05f64..0.95,
        ) {
            let base = [l, l + dp, l + dp + du];
            prop_assume!(base.iter().all(|v| (v - label).abs() > 1e-3));
            prop_assume!(dp > 1e-3 && du > 1e-3);
            let c = cfg();
            fd_check(|tr| quantile_triple_loss(tr, label, &c).unwrap(), base);
            fd_check(|tr| mis_loss(tr, label, rho).unwrap(), base);
            fd_check(mpiw, base);
        }

        #[test]
        fn positive_homogeneity(l in 0.0f64..50.0, dp in 0.0f64..20.0, du in 0.0f64..20.0,
                                label in 0.0f64..100.0, c in 0.01f64..100.0) {
            let tr = t(l, l + dp, l + dp + du);
            let sc = tr.scaled(c).unwrap();
            let q = cfg();
            let pairs = [
                (quantile_triple_loss(&tr, label, &q).unwrap().value, quantile_triple_loss(&sc, c * label, &q).unwrap().value),
                (finetune_loss(&tr, label, &q).unwrap().value, finetune_loss(&sc, c * label, &q).unwrap().value),
                (mis_loss(&tr, label, 0.8).unwrap().value, mis_loss(&sc, c * label, 0.8).unwrap().value),
                (pretrain_loss(&tr, label, &tr, label, &q).unwrap().value,
                 pretrain_loss(&sc, c * label, &sc, c * label, &q).unwrap().value),
            ];
            for (base, scaled) in pairs {
                prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
            }
        }

        #[test]
        fn losses_nonnegative(l in 0.0f64..50.0, dp in 0.0f64..20.0, du in 0.0f64..20.0, label in 0.0f64..100.0) {
            let tr = t(l, l + dp, l + dp + du);
            prop_assert!(pretrain_loss(&tr, label, &tr, label, &cfg()).unwrap().value >= 0.0);
            prop_assert!(finetune_loss(&tr, label, &cfg()).unwrap().value >= 0.0);
            prop_assert!(mis_loss(&tr, label, 0.8).unwrap().value >= 0.0);
        }
    }
}
