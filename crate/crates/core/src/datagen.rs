//! Synthetic route generation and the line-delimited route format.
//!
//! Ground-truth segment time is
//! `length / (base_speed * pace * time_of_day) * exp(sigma * Z)`, where `pace`
//! is drawn once per route and `Z` once per segment.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::route::{hour_of_day, RoadClass, Route, RouteRecord, Segment};

/// Monday 2023-11-13 00:00 UTC.
pub const DEFAULT_EPOCH: i64 = 1_699_833_600;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub base_speed_mps: f64,
    pub speed_limit_mps: f64,
    pub min_length_m: f64,
    pub max_length_m: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub routes: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub motorway: ClassProfile,
    pub arterial: ClassProfile,
    pub local: ClassProfile,
    /// Probability that consecutive segments share a road class.
    pub class_stickiness: f64,
    /// Route-level pace multiplier drawn uniformly from this range.
    pub pace_min: f64,
    pub pace_max: f64,
    /// Fractional speed loss at the morning and evening peaks.
    pub rush_hour_slowdown: f64,
    pub departure_start_ts: i64,
    pub departure_span_s: i64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            routes: 1000,
            min_segments: 20,
            max_segments: 40,
            motorway: ClassProfile {
                base_speed_mps: 24.0,
                speed_limit_mps: 30.0,
                min_length_m: 400.0,
                max_length_m: 2000.0,
                noise_sigma: 0.2,
            },
            arterial: ClassProfile {
                base_speed_mps: 12.0,
                speed_limit_mps: 17.0,
                min_length_m: 200.0,
                max_length_m: 900.0,
                noise_sigma: 0.2,
            },
            local: ClassProfile {
                base_speed_mps: 7.0,
                speed_limit_mps: 12.0,
                min_length_m: 60.0,
                max_length_m: 400.0,
                noise_sigma: 0.2,
            },
            class_stickiness: 0.7,
            pace_min: 0.6,
            pace_max: 1.4,
            rush_hour_slowdown: 0.3,
            departure_start_ts: DEFAULT_EPOCH,
            departure_span_s: 7 * 86_400,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn class(&self, class: RoadClass) -> &ClassProfile {
        match class {
            RoadClass::Motorway => &self.motorway,
            RoadClass::Arterial => &self.arterial,
            RoadClass::Local => &self.local,
        }
    }

    /// Sets the same noise scale on every road class.
    pub fn with_noise(mut self, sigma: f64) -> Self {
        for c in [&mut self.motorway, &mut self.arterial, &mut self.local] {
            c.noise_sigma = sigma;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_segments < 2 || self.max_segments < self.min_segments {
            return Err(Error::Config(format!(
                "segment count range {}..={} must start at >= 2",
                self.min_segments, self.max_segments
            )));
        }
        for class in RoadClass::ALL {
            let c = self.class(class);
            let ok = c.base_speed_mps > 0.0
                && c.speed_limit_mps > 0.0
                && c.min_length_m > 0.0
                && c.max_length_m >= c.min_length_m
                && c.noise_sigma >= 0.0;
            if !ok {
                return Err(Error::Config(format!("invalid {class:?} profile {c:?}")));
            }
        }
        if !(self.pace_min > 0.0 && self.pace_max >= self.pace_min) {
            return Err(Error::Config(format!("pace range [{}, {}] must be positive", self.pace_min, self.pace_max)));
        }
        if !(0.0..1.0).contains(&self.rush_hour_slowdown) {
            return Err(Error::Config("rush_hour_slowdown must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.class_stickiness) || self.departure_span_s < 0 {
            return Err(Error::Config("class_stickiness must be in [0, 1] and departure span >= 0".into()));
        }
        Ok(())
    }
}

/// Speed multiplier for the time of day; dips at 08:00 and 17:30.
pub fn time_of_day_factor(ts: i64, slowdown: f64) -> f64 {
    let h = hour_of_day(ts);
    let bump = |peak: f64| (-(h - peak).powi(2) / 2.0).exp();
    1.0 - slowdown * (bump(8.0) + bump(17.5)).min(1.0)
}

fn route_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generates one route; depends only on `(cfg, index)`.
pub fn generate_route(cfg: &GenConfig, index: usize) -> Result<Route> {
    let mut rng = route_rng(cfg.seed, index);
    let n = rng.random_range(cfg.min_segments..=cfg.max_segments);
    let departure_ts = cfg.departure_start_ts + rng.random_range(0..=cfg.departure_span_s);
    let pace = if cfg.pace_max > cfg.pace_min { rng.random_range(cfg.pace_min..cfg.pace_max) } else { cfg.pace_min };
    let tod = time_of_day_factor(departure_ts, cfg.rush_hour_slowdown);

    let mut class = *RoadClass::ALL.choose(&mut rng).expect("non-empty");
    let mut segments = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && !rng.random_bool(cfg.class_stickiness) {
            class = *RoadClass::ALL.choose(&mut rng).expect("non-empty");
        }
        let p = cfg.class(class);
        let length = if p.max_length_m > p.min_length_m {
            rng.random_range(p.min_length_m..p.max_length_m)
        } else {
            p.min_length_m
        };
        let z: f64 = StandardNormal.sample(&mut rng);
        let deterministic = length / (p.base_speed_mps * pace * tod);
        times.push(deterministic * (p.noise_sigma * z).exp());
        segments.push(Segment::new(format!("r{index}s{i}"), length, class, p.speed_limit_mps, departure_ts)?);
    }
    Route::new(format!("r{index}"), departure_ts, segments, Some(times))
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<Route>> {
    cfg.validate()?;
    (0..cfg.routes).map(|i| generate_route(cfg, i)).collect()
}

pub fn write_routes(path: impl AsRef<Path>, routes: &[Route]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for route in routes {
        serde_json::to_writer(&mut w, &route.record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Any malformed line rejects the whole file.
    #[default]
    Strict,
    /// Malformed lines are skipped and reported.
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub routes: Vec<Route>,
    /// `(line number, message)` of every skipped line.
    pub skipped: Vec<(usize, String)>,
}

pub fn parse_routes(reader: impl BufRead, mode: LoadMode) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RouteRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|rec| Route::from_record(rec).map_err(|e| e.to_string()));
        match (parsed, mode) {
            (Ok(route), _) => report.routes.push(route),
            (Err(message), LoadMode::Strict) => return Err(Error::Parse { line: line_no, message }),
            (Err(message), LoadMode::Lenient) => report.skipped.push((line_no, message)),
        }
    }
    Ok(report)
}

pub fn load_routes(path: impl AsRef<Path>, mode: LoadMode) -> Result<LoadReport> {
    parse_routes(BufReader::new(File::open(path)?), mode)
}

/// Seeded 80/10/10 train/validation/test split over routes.
pub fn split_dataset(routes: Vec<Route>, seed: u64) -> (Vec<Route>, Vec<Route>, Vec<Route>) {
    let mut routes = routes;
    routes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = routes.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = routes.split_off(n_train + n_val);
    let val = routes.split_off(n_train);
    (routes, val, test)
}
