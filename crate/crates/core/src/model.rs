//! Domain types shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("distance must be finite and > 0, got {0}")]
    InvalidDistance(f64),
    #[error("mean speed must be finite and > 0, got {0}")]
    InvalidSpeed(f64),
    #[error("weights must be finite, non-negative and not both zero (w1={w1}, w2={w2})")]
    InvalidWeights { w1: f64, w2: f64 },
    #[error("similarity threshold must lie in [-1, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("time window must be finite and > 0, got {0}")]
    InvalidTimeWindow(f64),
    #[error("{0} lane set is empty")]
    EmptyLaneSet(ZonePoint),
    #[error("expected travel time is not finite and positive ({0})")]
    InvalidTravelTime(f64),
}

/// Which end of the weaving zone a camera covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ZonePoint {
    /// P1, upstream merge.
    #[serde(rename = "P1")]
    Entry,
    /// P2, downstream diverge.
    #[serde(rename = "P2")]
    Exit,
}

impl fmt::Display for ZonePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZonePoint::Entry => f.write_str("entry"),
            ZonePoint::Exit => f.write_str("exit"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Car,
    Truck,
}

impl VehicleClass {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Car => "car",
            VehicleClass::Truck => "truck",
        }
    }
}

impl std::str::FromStr for VehicleClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "car" => Ok(VehicleClass::Car),
            "truck" => Ok(VehicleClass::Truck),
            other => Err(format!("unknown vehicle class {other:?} (expected \"car\" or \"truck\")")),
        }
    }
}

/// Appearance embedding produced by an upstream re-identification model.
///
/// Construction does not check the values; [`validate_dataset`] reports bad
/// vectors and the similarity kernel rejects zero-norm input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn from_f32(values: &[f32]) -> Self {
        Embedding(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Embedding(values)
    }
}

/// One sighting of a vehicle at P1 or P2.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub camera_id: String,
    pub zone_point: ZonePoint,
    pub track_id: String,
    /// Seconds since epoch.
    pub timestamp: f64,
    pub lane_id: u32,
    pub vehicle_class: VehicleClass,
    pub embedding: Embedding,
}

/// Form of the travel-time term in the pairing cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeTerm {
    /// `|(t_exit - t_entry) - T_a|`: deviation of the observed trip from the prior.
    #[default]
    Deviation,
    /// `|t_entry - t_exit - T_a|` as literally written, which equals
    /// `(t_exit - t_entry) + T_a` on every time-feasible pair.
    Literal,
}

impl std::str::FromStr for TimeTerm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deviation" => Ok(TimeTerm::Deviation),
            "literal" => Ok(TimeTerm::Literal),
            other => Err(format!("unknown time term {other:?} (expected deviation|literal)")),
        }
    }
}

pub const DEFAULT_W1: f64 = 0.3;
pub const DEFAULT_W2: f64 = 0.75;
pub const DEFAULT_TAU: f64 = 0.8;

/// Weaving-zone geometry and matching parameters. Validated on construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneConfig {
    distance_m: f64,
    speed_mps: f64,
    entry_lanes: BTreeSet<u32>,
    exit_lanes: BTreeSet<u32>,
    w1: f64,
    w2: f64,
    tau: f64,
    delta_s: f64,
    time_term: TimeTerm,
}

impl ZoneConfig {
    pub fn builder(distance_m: f64, speed_mps: f64) -> ZoneConfigBuilder {
        ZoneConfigBuilder {
            distance_m,
            speed_mps,
            entry_lanes: BTreeSet::new(),
            exit_lanes: BTreeSet::new(),
            w1: DEFAULT_W1,
            w2: DEFAULT_W2,
            tau: DEFAULT_TAU,
            delta_s: None,
            time_term: TimeTerm::Deviation,
        }
    }

    pub fn distance_m(&self) -> f64 {
        self.distance_m
    }

    pub fn speed_mps(&self) -> f64 {
        self.speed_mps
    }

    pub fn entry_lanes(&self) -> &BTreeSet<u32> {
        &self.entry_lanes
    }

    pub fn exit_lanes(&self) -> &BTreeSet<u32> {
        &self.exit_lanes
    }

    pub fn lanes(&self, point: ZonePoint) -> &BTreeSet<u32> {
        match point {
            ZonePoint::Entry => &self.entry_lanes,
            ZonePoint::Exit => &self.exit_lanes,
        }
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn w2(&self) -> f64 {
        self.w2
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Half-width of the exit-time window centred on `t_entry + T_a`.
    pub fn time_window(&self) -> f64 {
        self.delta_s
    }

    pub fn time_term(&self) -> TimeTerm {
        self.time_term
    }

    /// Prior travel time through the zone, `S / V`.
    pub fn expected_travel_time(&self) -> f64 {
        self.distance_m / self.speed_mps
    }

    /// Copy of this configuration with different cost weights.
    pub fn with_weights(&self, w1: f64, w2: f64) -> Result<ZoneConfig, ModelError> {
        self.to_builder().weights(w1, w2).build()
    }

    pub fn to_builder(&self) -> ZoneConfigBuilder {
        ZoneConfigBuilder {
            distance_m: self.distance_m,
            speed_mps: self.speed_mps,
            entry_lanes: self.entry_lanes.clone(),
            exit_lanes: self.exit_lanes.clone(),
            w1: self.w1,
            w2: self.w2,
            tau: self.tau,
            delta_s: Some(self.delta_s),
            time_term: self.time_term,
        }
    }
}

/// Free-function form of [`ZoneConfig::expected_travel_time`].
pub fn expected_travel_time(zone: &ZoneConfig) -> f64 {
    zone.expected_travel_time()
}

#[derive(Debug, Clone)]
pub struct ZoneConfigBuilder {
    distance_m: f64,
    speed_mps: f64,
    entry_lanes: BTreeSet<u32>,
    exit_lanes: BTreeSet<u32>,
    w1: f64,
    w2: f64,
    tau: f64,
    delta_s: Option<f64>,
    time_term: TimeTerm,
}

impl ZoneConfigBuilder {
    pub fn entry_lanes(mut self, lanes: impl IntoIterator<Item = u32>) -> Self {
        self.entry_lanes = lanes.into_iter().collect();
        self
    }

    pub fn exit_lanes(mut self, lanes: impl IntoIterator<Item = u32>) -> Self {
        self.exit_lanes = lanes.into_iter().collect();
        self
    }

    pub fn weights(mut self, w1: f64, w2: f64) -> Self {
        self.w1 = w1;
        self.w2 = w2;
        self
    }

    pub fn tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    /// Defaults to half the expected travel time when unset.
    pub fn time_window(mut self, delta_s: f64) -> Self {
        self.delta_s = Some(delta_s);
        self
    }

    pub fn time_term(mut self, term: TimeTerm) -> Self {
        self.time_term = term;
        self
    }

    pub fn build(self) -> Result<ZoneConfig, ModelError> {
        if !(self.distance_m.is_finite() && self.distance_m > 0.0) {
            return Err(ModelError::InvalidDistance(self.distance_m));
        }
        if !(self.speed_mps.is_finite() && self.speed_mps > 0.0) {
            return Err(ModelError::InvalidSpeed(self.speed_mps));
        }
        let travel = self.distance_m / self.speed_mps;
        if !(travel.is_finite() && travel > 0.0) {
            return Err(ModelError::InvalidTravelTime(travel));
        }
        let weights_ok = self.w1.is_finite()
            && self.w2.is_finite()
            && self.w1 >= 0.0
            && self.w2 >= 0.0
            && self.w1 + self.w2 > 0.0;
        if !weights_ok {
            return Err(ModelError::InvalidWeights { w1: self.w1, w2: self.w2 });
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(ModelError::InvalidThreshold(self.tau));
        }
        let delta_s = self.delta_s.unwrap_or(0.5 * travel);
        if !(delta_s.is_finite() && delta_s > 0.0) {
            return Err(ModelError::InvalidTimeWindow(delta_s));
        }
        if self.entry_lanes.is_empty() {
            return Err(ModelError::EmptyLaneSet(ZonePoint::Entry));
        }
        if self.exit_lanes.is_empty() {
            return Err(ModelError::EmptyLaneSet(ZonePoint::Exit));
        }
        Ok(ZoneConfig {
            distance_m: self.distance_m,
            speed_mps: self.speed_mps,
            entry_lanes: self.entry_lanes,
            exit_lanes: self.exit_lanes,
            w1: self.w1,
            w2: self.w2,
            tau: self.tau,
            delta_s,
            time_term: self.time_term,
        })
    }
}

/// An accepted entry/exit correspondence with its cost breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub entry_track: String,
    pub exit_track: String,
    pub total_cost: f64,
    pub appearance_cost: f64,
    pub time_cost: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    InvalidTimestamp { value: f64 },
    DuplicateTrack { first_index: usize },
    UnknownLane { lane: u32 },
    EmptyEmbedding,
    NonFiniteEmbedding,
    ZeroNormEmbedding,
    DimensionMismatch { expected: usize, found: usize },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::InvalidTimestamp { value } => {
                write!(f, "timestamp {value} is not finite and non-negative")
            }
            ViolationKind::DuplicateTrack { first_index } => {
                write!(f, "duplicate (camera, zone point, track) key, first seen at record {first_index}")
            }
            ViolationKind::UnknownLane { lane } => write!(f, "lane {lane} is not declared for this zone point"),
            ViolationKind::EmptyEmbedding => f.write_str("embedding is empty"),
            ViolationKind::NonFiniteEmbedding => f.write_str("embedding has non-finite entries"),
            ViolationKind::ZeroNormEmbedding => f.write_str("embedding has zero norm"),
            ViolationKind::DimensionMismatch { expected, found } => {
                write!(f, "embedding dimension {found} differs from dataset dimension {expected}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Position of the offending record in the input slice.
    pub index: usize,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub record_count: usize,
    /// N_a: observations per entry lane.
    pub entry_lane_counts: BTreeMap<u32, u64>,
    /// N_b: observations per exit lane.
    pub exit_lane_counts: BTreeMap<u32, u64>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn lane_counts(&self, point: ZonePoint) -> &BTreeMap<u32, u64> {
        match point {
            ZonePoint::Entry => &self.entry_lane_counts,
            ZonePoint::Exit => &self.exit_lane_counts,
        }
    }
}

/// Checks every dataset invariant and tallies per-lane totals.
///
/// Violations are returned as data in input order. Every observation is
/// counted toward its lane total, including ones with violations.
pub fn validate_dataset(observations: &[Observation], zone: &ZoneConfig) -> ValidationReport {
    let mut report = ValidationReport {
        record_count: observations.len(),
        ..Default::default()
    };
    let mut seen: HashMap<(&str, ZonePoint, &str), usize> = HashMap::new();
    let mut dim: Option<usize> = None;

    for (index, obs) in observations.iter().enumerate() {
        let mut flag = |kind| report.violations.push(Violation { index, kind });

        if !(obs.timestamp.is_finite() && obs.timestamp >= 0.0) {
            flag(ViolationKind::InvalidTimestamp { value: obs.timestamp });
        }
        let key = (obs.camera_id.as_str(), obs.zone_point, obs.track_id.as_str());
        if let Some(&first_index) = seen.get(&key) {
            flag(ViolationKind::DuplicateTrack { first_index });
        } else {
            seen.insert(key, index);
        }
        if !zone.lanes(obs.zone_point).contains(&obs.lane_id) {
            flag(ViolationKind::UnknownLane { lane: obs.lane_id });
        }

        let values = obs.embedding.as_slice();
        if values.is_empty() {
            flag(ViolationKind::EmptyEmbedding);
        } else if values.iter().any(|v| !v.is_finite()) {
            flag(ViolationKind::NonFiniteEmbedding);
        } else if values.iter().all(|&v| v == 0.0) {
            flag(ViolationKind::ZeroNormEmbedding);
        }
        match dim {
            None => dim = Some(values.len()),
            Some(expected) if expected != values.len() => flag(ViolationKind::DimensionMismatch {
                expected,
                found: values.len(),
            }),
            Some(_) => {}
        }

        let counts = match obs.zone_point {
            ZonePoint::Entry => &mut report.entry_lane_counts,
            ZonePoint::Exit => &mut report.exit_lane_counts,
        };
        *counts.entry(obs.lane_id).or_insert(0) += 1;
    }
    report
}
