use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(lower, point, upper)` travel-time estimate in seconds.
///
/// Constructors enforce `0 <= lower <= point <= upper`, all finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTriple", into = "RawTriple")]
pub struct IntervalTriple {
    lower: f64,
    point: f64,
    upper: f64,
}

#[derive(Serialize, Deserialize)]
struct RawTriple {
    lower: f64,
    point: f64,
    upper: f64,
}

impl TryFrom<RawTriple> for IntervalTriple {
    type Error = Error;

    fn try_from(raw: RawTriple) -> Result<Self> {
        IntervalTriple::new(raw.lower, raw.point, raw.upper)
    }
}

impl From<IntervalTriple> for RawTriple {
    fn from(t: IntervalTriple) -> Self {
        RawTriple { lower: t.lower, point: t.point, upper: t.upper }
    }
}

impl IntervalTriple {
    pub const ZERO: IntervalTriple = IntervalTriple { lower: 0.0, point: 0.0, upper: 0.0 };

    pub fn new(lower: f64, point: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && point.is_finite() && upper.is_finite()) {
            return Err(Error::InvalidInterval(format!("non-finite triple ({lower}, {point}, {upper})")));
        }
        if lower < 0.0 {
            return Err(Error::InvalidInterval(format!("negative lower bound {lower}")));
        }
        if !(lower <= point && point <= upper) {
            return Err(Error::InvalidInterval(format!("unordered triple ({lower}, {point}, {upper})")));
        }
        Ok(IntervalTriple { lower, point, upper })
    }

    /// Sorts the three values and floors them at zero.
    pub fn repaired(a: f64, b: f64, c: f64) -> Result<Self> {
        let mut v = [a.max(0.0), b.max(0.0), c.max(0.0)];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInterval(format!("non-finite triple ({a}, {b}, {c})")));
        }
        v.sort_by(f64::total_cmp);
        Ok(IntervalTriple { lower: v[0], point: v[1], upper: v[2] })
    }

    pub fn degenerate(value: f64) -> Result<Self> {
        IntervalTriple::new(value, value, value)
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn point(&self) -> f64 {
        self.point
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Closed-interval membership of `[lower, upper]`.
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    /// Componentwise sum; ordering is preserved.
    pub fn add(&self, other: &IntervalTriple) -> IntervalTriple {
        IntervalTriple {
            lower: self.lower + other.lower,
            point: self.point + other.point,
            upper: self.upper + other.upper,
        }
    }

    /// Shifts all three components by a nonnegative offset.
    pub fn shifted(&self, offset: f64) -> Result<IntervalTriple> {
        IntervalTriple::new(self.lower + offset, self.point + offset, self.upper + offset)
    }

    pub fn scaled(&self, c: f64) -> Result<IntervalTriple> {
        IntervalTriple::new(self.lower * c, self.point * c, self.upper * c)
    }

    /// `true` when every component of `self` is at most the matching one of `other`.
    pub fn componentwise_le(&self, other: &IntervalTriple) -> bool {
        self.lower <= other.lower && self.point <= other.point && self.upper <= other.upper
    }
}

/// Cumulative interval estimates at the end of each of the `k` route parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointProfile {
    pub route_id: String,
    pub k: usize,
    pub cum: Vec<IntervalTriple>,
    pub total: IntervalTriple,
    pub created_at: i64,
    pub generation: u64,
}

impl CheckpointProfile {
    pub fn new(route_id: impl Into<String>, cum: Vec<IntervalTriple>, created_at: i64) -> Result<Self> {
        let route_id = route_id.into();
        let total =
            *cum.last().ok_or_else(|| Error::Invariant(format!("profile for {route_id} has no checkpoints")))?;
        let profile = CheckpointProfile { route_id, k: cum.len(), cum, total, created_at, generation: 0 };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cum.len() != self.k || self.k == 0 {
            return Err(Error::Invariant(format!(
                "profile {}: {} checkpoints, k = {}",
                self.route_id,
                self.cum.len(),
                self.k
            )));
        }
        if let Some(i) = self.cum.windows(2).position(|w| !w[0].componentwise_le(&w[1])) {
            return Err(Error::Invariant(format!("profile {}: checkpoint {} decreases", self.route_id, i + 1)));
        }
        if self.cum[self.k - 1] != self.total {
            return Err(Error::Invariant(format!("profile {}: last checkpoint differs from total", self.route_id)));
        }
        Ok(())
    }
}

/// Quantile levels for the lower/point/upper heads and the interval-width weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileConfig {
    pub alpha_lower: f64,
    pub alpha_point: f64,
    pub alpha_upper: f64,
    pub mpiw_weight: f64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig { alpha_lower: 0.1, alpha_point: 0.5, alpha_upper: 0.9, mpiw_weight: 1.0 }
    }
}

impl QuantileConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = 0.0 < self.alpha_lower
            && self.alpha_lower < self.alpha_point
            && self.alpha_point < self.alpha_upper
            && self.alpha_upper < 1.0;
        if !ordered {
            return Err(Error::Config(format!(
                "quantiles must satisfy 0 < {} < {} < {} < 1",
                self.alpha_lower, self.alpha_point, self.alpha_upper
            )));
        }
        if !(self.mpiw_weight.is_finite() && self.mpiw_weight >= 0.0) {
            return Err(Error::Config(format!("mpiw_weight must be >= 0, got {}", self.mpiw_weight)));
        }
        Ok(())
    }

    /// Nominal coverage of `[lower, upper]`.
    pub fn nominal_coverage(&self) -> f64 {
        self.alpha_upper - self.alpha_lower
    }
}
