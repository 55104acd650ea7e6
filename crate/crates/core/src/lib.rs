//! En-route travel-time estimation with interval outputs.
//!
//! A per-segment network predicts `(lower, point, upper)` travel times,
//! trained with a meta-learning loop over traveled/remaining route splits. The
//! decision engine stores pre-route interval profiles and answers en-route
//! queries from them whenever the observed elapsed time stays inside the
//! stored interval, invoking the model only on deviations. A discrete-event
//! simulator measures the resulting saving in model calls.

pub mod backbone;
pub mod datagen;
pub mod error;
pub mod ftml;
pub mod interval;
pub mod losses;
pub mod route;
pub mod service;
pub mod simulator;
pub mod ugd;

pub use error::{Error, Result};
pub use interval::{CheckpointProfile, IntervalTriple, QuantileConfig};
pub use route::{checkpoint_boundaries, split_route, RoadClass, Route, RouteSplit, Segment};
