//! Synthetic weaving scenarios with known ground truth, and an exhaustive
//! matching oracle for small instances.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{build_cost_matrix, extract_matches, AssignError, Assignment, CostMatrix};
use crate::model::{Embedding, MatchedPair, Observation, VehicleClass, ZoneConfig, ZonePoint};

/// Largest side the exhaustive oracle accepts.
pub const ENUMERATION_LIMIT: usize = 8;

pub const ENTRY_CAMERA: &str = "cam-p1";
pub const EXIT_CAMERA: &str = "cam-p2";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("{rows}x{cols} exceeds the {ENUMERATION_LIMIT}x{ENUMERATION_LIMIT} enumeration bound")]
    TooLargeForEnumeration { rows: usize, cols: usize },
    #[error(transparent)]
    Assign(#[from] AssignError),
}

/// Parameters of a generated scenario. Lane vectors follow the ascending
/// order of the zone's lane sets; empty vectors mean uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    /// Vehicles seen at both ends.
    pub vehicle_count: usize,
    pub entry_lane_probs: Vec<f64>,
    /// `transition[a][b]` = P(exit lane b | entry lane a).
    pub transition: Vec<Vec<f64>>,
    /// Defaults to the zone's mean speed.
    pub speed_mean_mps: Option<f64>,
    pub speed_stddev_mps: f64,
    pub embedding_dim: usize,
    /// Norm of each identity's mean embedding.
    pub identity_scale: f64,
    /// Per-component stddev of view noise.
    pub noise_stddev: f64,
    pub truck_fraction: f64,
    pub clutter_entry: usize,
    pub clutter_exit: usize,
    pub mean_headway_s: f64,
    pub start_time_s: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            vehicle_count: 100,
            entry_lane_probs: Vec::new(),
            transition: Vec::new(),
            speed_mean_mps: None,
            speed_stddev_mps: 0.0,
            embedding_dim: 128,
            identity_scale: 1.0,
            noise_stddev: 0.0,
            truck_fraction: 0.1,
            clutter_entry: 0,
            clutter_exit: 0,
            mean_headway_s: 2.0,
            start_time_s: 0.0,
            seed: 0,
        }
    }
}

/// Noise stddev at which two independent views of one identity have
/// expected cosine similarity close to `target`.
///
/// With mean norm `s` and noise `σ` over `D` components, the views' cosine
/// concentrates near `s² / (s² + D σ²)`.
pub fn noise_for_similarity(target: f64, dim: usize, identity_scale: f64) -> f64 {
    assert!(target > 0.0 && target <= 1.0, "target similarity must be in (0, 1]");
    identity_scale * ((1.0 / target - 1.0) / dim as f64).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// (entry track, exit track) of every vehicle seen at both ends.
    pub pairs: BTreeSet<(String, String)>,
    /// True lane-pair flows of those vehicles.
    pub flows: BTreeMap<(u32, u32), u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub entries: Vec<Observation>,
    pub exits: Vec<Observation>,
    pub truth: GroundTruth,
}

fn check_probs(p: &[f64], len: usize, what: &str) -> Result<(), SynthError> {
    if p.len() != len {
        return Err(SynthError::InvalidSpec(format!("{what} has {} entries, expected {len}", p.len())));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(SynthError::InvalidSpec(format!("{what} has a probability outside [0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::InvalidSpec(format!("{what} sums to {sum}")));
    }
    Ok(())
}

struct Resolved {
    entry_probs: Vec<f64>,
    transition: Vec<Vec<f64>>,
    speed_mean: f64,
}

fn resolve(spec: &ScenarioSpec, zone: &ZoneConfig) -> Result<Resolved, SynthError> {
    let (n_in, n_out) = (zone.entry_lanes().len(), zone.exit_lanes().len());
    let entry_probs = if spec.entry_lane_probs.is_empty() {
        vec![1.0 / n_in as f64; n_in]
    } else {
        spec.entry_lane_probs.clone()
    };
    check_probs(&entry_probs, n_in, "entry lane distribution")?;
    let transition = if spec.transition.is_empty() {
        vec![vec![1.0 / n_out as f64; n_out]; n_in]
    } else {
        spec.transition.clone()
    };
    if transition.len() != n_in {
        return Err(SynthError::InvalidSpec(format!("transition has {} rows, expected {n_in}", transition.len())));
    }
    for (a, row) in transition.iter().enumerate() {
        check_probs(row, n_out, &format!("transition row {a}"))?;
    }

    let speed_mean = spec.speed_mean_mps.unwrap_or(zone.speed_mps());
    let checks = [
        (speed_mean.is_finite() && speed_mean > 0.0, "speed mean must be > 0"),
        (spec.speed_stddev_mps.is_finite() && spec.speed_stddev_mps >= 0.0, "speed stddev must be >= 0"),
        (spec.embedding_dim > 0, "embedding dimension must be > 0"),
        (spec.identity_scale.is_finite() && spec.identity_scale > 0.0, "identity scale must be > 0"),
        (spec.noise_stddev.is_finite() && spec.noise_stddev >= 0.0, "noise stddev must be >= 0"),
        ((0.0..=1.0).contains(&spec.truck_fraction), "truck fraction must be in [0, 1]"),
        (spec.mean_headway_s.is_finite() && spec.mean_headway_s > 0.0, "mean headway must be > 0"),
        (spec.start_time_s.is_finite() && spec.start_time_s >= 0.0, "start time must be >= 0"),
    ];
    if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
        return Err(SynthError::InvalidSpec((*msg).to_string()));
    }
    Ok(Resolved { entry_probs, transition, speed_mean })
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Mean plus noise, renormalized and rounded to f32 precision so the
/// binary sidecar format stores it exactly.
fn view(rng: &mut ChaCha8Rng, mean: &[f64], noise: Option<&Normal<f64>>) -> Embedding {
    let mut v: Vec<f64> = match noise {
        Some(n) => mean.iter().map(|m| m + n.sample(rng)).collect(),
        None => mean.to_vec(),
    };
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Embedding::new(v.into_iter().map(|x| f64::from(x as f32)).collect())
}

fn sample_speed(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, sd).expect("validated speed distribution");
    let (lo, hi) = (0.5 * mean, 1.5 * mean);
    for _ in 0..64 {
        let s = normal.sample(rng);
        if (lo..=hi).contains(&s) {
            return s;
        }
    }
    normal.sample(rng).clamp(lo, hi)
}

fn class(rng: &mut ChaCha8Rng, truck_fraction: f64) -> VehicleClass {
    if rng.random_bool(truck_fraction) {
        VehicleClass::Truck
    } else {
        VehicleClass::Car
    }
}

struct Draft {
    timestamp: f64,
    lane: u32,
    class: VehicleClass,
    embedding: Embedding,
    vehicle: Option<usize>,
}

fn finalize(mut drafts: Vec<Draft>, point: ZonePoint) -> (Vec<Observation>, BTreeMap<usize, usize>) {
    drafts.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let (camera, prefix) = match point {
        ZonePoint::Entry => (ENTRY_CAMERA, "P1"),
        ZonePoint::Exit => (EXIT_CAMERA, "P2"),
    };
    let mut vehicle_index = BTreeMap::new();
    let obs = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            if let Some(v) = d.vehicle {
                vehicle_index.insert(v, i);
            }
            Observation {
                camera_id: camera.to_string(),
                zone_point: point,
                track_id: format!("{prefix}-{i:06}"),
                timestamp: d.timestamp,
                lane_id: d.lane,
                vehicle_class: d.class,
                embedding: d.embedding,
            }
        })
        .collect();
    (obs, vehicle_index)
}

/// Draws a scenario; identical inputs give bit-identical output.
///
/// Vehicles arrive at P1 with exponential headways. Each gets an entry lane,
/// an exit lane from the transition row, a class, a truncated-normal speed
/// and one identity embedding; its two views add independent noise. Clutter
/// vehicles appear on one side only and have no ground-truth pair.
pub fn generate_scenario(spec: &ScenarioSpec, zone: &ZoneConfig) -> Result<Scenario, SynthError> {
    let r = resolve(spec, zone)?;
    let entry_lanes: Vec<u32> = zone.entry_lanes().iter().copied().collect();
    let exit_lanes: Vec<u32> = zone.exit_lanes().iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let headway = Exp::new(1.0 / spec.mean_headway_s).expect("validated headway");
    let noise = (spec.noise_stddev > 0.0).then(|| Normal::new(0.0, spec.noise_stddev).expect("validated noise"));
    let entry_pick = WeightedIndex::new(&r.entry_probs).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let exit_picks = r
        .transition
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| SynthError::InvalidSpec(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;

    let mut entry_drafts = Vec::new();
    let mut exit_drafts = Vec::new();
    let mut lane_of = Vec::with_capacity(spec.vehicle_count);
    let mut t = spec.start_time_s;
    for v in 0..spec.vehicle_count {
        t += headway.sample(&mut rng);
        let a = entry_pick.sample(&mut rng);
        let b = exit_picks[a].sample(&mut rng);
        let c = class(&mut rng, spec.truck_fraction);
        let speed = sample_speed(&mut rng, r.speed_mean, spec.speed_stddev_mps);
        let mean: Vec<f64> = unit_vector(&mut rng, spec.embedding_dim)
            .into_iter()
            .map(|x| x * spec.identity_scale)
            .collect();
        let entry_view = view(&mut rng, &mean, noise.as_ref());
        let exit_view = view(&mut rng, &mean, noise.as_ref());
        entry_drafts.push(Draft { timestamp: t, lane: entry_lanes[a], class: c, embedding: entry_view, vehicle: Some(v) });
        exit_drafts.push(Draft {
            timestamp: t + zone.distance_m() / speed,
            lane: exit_lanes[b],
            class: c,
            embedding: exit_view,
            vehicle: Some(v),
        });
        lane_of.push((entry_lanes[a], exit_lanes[b]));
    }

    let span_end = if spec.vehicle_count > 0 { t } else { spec.start_time_s + spec.mean_headway_s * spec.clutter_entry.max(spec.clutter_exit) as f64 };
    let span = (spec.start_time_s, span_end.max(spec.start_time_s));
    let travel = zone.expected_travel_time();
    let marginal_exit: Vec<f64> = (0..exit_lanes.len())
        .map(|b| r.entry_probs.iter().zip(&r.transition).map(|(p, row)| p * row[b]).sum())
        .collect();
    let exit_marginal_pick =
        WeightedIndex::new(&marginal_exit).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let clutter = |point: ZonePoint, count: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Draft>| {
        for _ in 0..count {
            let u: f64 = rng.random();
            let base = span.0 + u * (span.1 - span.0);
            let (timestamp, lane) = match point {
                ZonePoint::Entry => (base, entry_lanes[entry_pick.sample(rng)]),
                ZonePoint::Exit => (base + travel, exit_lanes[exit_marginal_pick.sample(rng)]),
            };
            let c = class(rng, spec.truck_fraction);
            let mean: Vec<f64> =
                unit_vector(rng, spec.embedding_dim).into_iter().map(|x| x * spec.identity_scale).collect();
            let embedding = view(rng, &mean, noise.as_ref());
            out.push(Draft { timestamp, lane, class: c, embedding, vehicle: None });
        }
    };
    clutter(ZonePoint::Entry, spec.clutter_entry, &mut rng, &mut entry_drafts);
    clutter(ZonePoint::Exit, spec.clutter_exit, &mut rng, &mut exit_drafts);

    let (entries, entry_index) = finalize(entry_drafts, ZonePoint::Entry);
    let (exits, exit_index) = finalize(exit_drafts, ZonePoint::Exit);
    let mut truth = GroundTruth::default();
    for (v, lanes) in lane_of.into_iter().enumerate() {
        let (i, j) = (entry_index[&v], exit_index[&v]);
        truth.pairs.insert((entries[i].track_id.clone(), exits[j].track_id.clone()));
        *truth.flows.entry(lanes).or_insert(0) += 1;
    }
    Ok(Scenario { entries, exits, truth })
}

/// Exhaustive reference for [`crate::assign::solve_assignment`].
///
/// Enumerates every partial matching of maximum cardinality, rows in order
/// and columns ascending before "unmatched", which visits pair lists in
/// lexicographic order. Returns the first one within the tie tolerance of
/// the minimum cost.
pub fn brute_force_assignment(m: &CostMatrix) -> Result<Assignment, SynthError> {
    if m.rows() > ENUMERATION_LIMIT || m.cols() > ENUMERATION_LIMIT {
        return Err(SynthError::TooLargeForEnumeration { rows: m.rows(), cols: m.cols() });
    }
    let target = max_cardinality(m);
    if target == 0 {
        return Ok(Assignment::default());
    }

    let mut best = f64::INFINITY;
    enumerate(m, target, &mut |_, cost| best = best.min(cost));
    let tol = m.tie_tolerance();
    let mut chosen: Option<Vec<(usize, usize)>> = None;
    enumerate(m, target, &mut |pairs, cost| {
        if chosen.is_none() && cost <= best + tol {
            chosen = Some(pairs.to_vec());
        }
    });
    Ok(Assignment::from_pairs(chosen.expect("a maximum matching exists"), m))
}

/// Called with each complete pair list and its total cost.
type Visitor<'a> = dyn FnMut(&[(usize, usize)], f64) + 'a;

fn enumerate(m: &CostMatrix, target: usize, visit: &mut Visitor<'_>) {
    fn go(
        m: &CostMatrix,
        target: usize,
        row: usize,
        used: &mut [bool],
        pairs: &mut Vec<(usize, usize)>,
        cost: f64,
        visit: &mut Visitor<'_>,
    ) {
        if pairs.len() == target {
            visit(pairs, cost);
            return;
        }
        if row == m.rows() || pairs.len() + (m.rows() - row) < target {
            return;
        }
        for c in 0..m.cols() {
            if let (false, Some(w)) = (used[c], m.get(row, c)) {
                used[c] = true;
                pairs.push((row, c));
                go(m, target, row + 1, used, pairs, cost + w, visit);
                pairs.pop();
                used[c] = false;
            }
        }
        go(m, target, row + 1, used, pairs, cost, visit);
    }
    go(m, target, 0, &mut vec![false; m.cols()], &mut Vec::new(), 0.0, visit);
}

/// Size of a maximum matching over feasible cells (simple augmenting paths).
fn max_cardinality(m: &CostMatrix) -> usize {
    fn augment(m: &CostMatrix, r: usize, seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for c in 0..m.cols() {
            if m.is_feasible(r, c) && !seen[c] {
                seen[c] = true;
                if owner[c].is_none_or(|o| augment(m, o, seen, owner)) {
                    owner[c] = Some(r);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; m.cols()];
    (0..m.rows())
        .filter(|&r| augment(m, r, &mut vec![false; m.cols()], &mut owner))
        .count()
}

/// Matches a small instance by enumeration under the same feasibility rules
/// as [`build_cost_matrix`].
pub fn brute_force_match(
    entries: &[Observation],
    exits: &[Observation],
    zone: &ZoneConfig,
) -> Result<Vec<MatchedPair>, SynthError> {
    if entries.len() > ENUMERATION_LIMIT || exits.len() > ENUMERATION_LIMIT {
        return Err(SynthError::TooLargeForEnumeration { rows: entries.len(), cols: exits.len() });
    }
    let m = build_cost_matrix(entries, exits, zone)?;
    let a = brute_force_assignment(&m)?;
    Ok(extract_matches(&a, &m, entries, exits)?)
}
