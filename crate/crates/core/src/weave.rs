//! Lane-level weaving flows from a matched sample.
//!
//! Matched pairs are treated as a sample of each entry lane's traffic. Within
//! an entry lane `a`, the share of matches ending in exit lane `b` is scaled by
//! the lane's full count `N_a`:
//!
//! ```text
//! F(a, b) = N_a * m(a, b) / sum_b m(a, b)
//! ```
//!
//! Entry lanes without matches are left unestimated. Exit-lane counts are
//! only compared against the column sums of `F`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::MatchMetrics;
use crate::model::{MatchedPair, Observation};

pub const REPORT_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeaveError {
    #[error("matched {side} track {track:?} is not among the observations")]
    UnknownTrackId { side: &'static str, track: String },
    #[error("{side} track id {track:?} occurs more than once")]
    AmbiguousTrackId { side: &'static str, track: String },
    #[error("{side} lane {lane}: {matched} matches exceed the {counted} vehicles counted")]
    InconsistentCounts { side: &'static str, lane: u32, matched: u64, counted: u64 },
}

/// Matched-pair counts indexed by (entry lane, exit lane).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LanePairCounts {
    counts: BTreeMap<(u32, u32), u64>,
    entry_lanes: BTreeSet<u32>,
    exit_lanes: BTreeSet<u32>,
}

impl LanePairCounts {
    /// Counts over explicit lane sets; lanes appearing in `counts` are added.
    pub fn new(
        counts: BTreeMap<(u32, u32), u64>,
        entry_lanes: impl IntoIterator<Item = u32>,
        exit_lanes: impl IntoIterator<Item = u32>,
    ) -> Self {
        let mut entry_lanes: BTreeSet<u32> = entry_lanes.into_iter().collect();
        let mut exit_lanes: BTreeSet<u32> = exit_lanes.into_iter().collect();
        for &(a, b) in counts.keys() {
            entry_lanes.insert(a);
            exit_lanes.insert(b);
        }
        let counts = counts.into_iter().filter(|&(_, n)| n > 0).collect();
        LanePairCounts { counts, entry_lanes, exit_lanes }
    }

    pub fn get(&self, entry_lane: u32, exit_lane: u32) -> u64 {
        self.counts.get(&(entry_lane, exit_lane)).copied().unwrap_or(0)
    }

    pub fn total_matched(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn entry_total(&self, entry_lane: u32) -> u64 {
        self.counts.range((entry_lane, 0)..=(entry_lane, u32::MAX)).map(|(_, n)| n).sum()
    }

    pub fn exit_total(&self, exit_lane: u32) -> u64 {
        self.counts.iter().filter(|((_, b), _)| *b == exit_lane).map(|(_, n)| n).sum()
    }

    pub fn entry_lanes(&self) -> &BTreeSet<u32> {
        &self.entry_lanes
    }

    pub fn exit_lanes(&self) -> &BTreeSet<u32> {
        &self.exit_lanes
    }

    /// Non-zero cells.
    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    /// Multiplies every cell by `k`.
    pub fn scaled(&self, k: u64) -> LanePairCounts {
        LanePairCounts {
            counts: self.counts.iter().map(|(&key, &n)| (key, n * k)).collect(),
            ..self.clone()
        }
    }
}

fn index_by_track<'a>(
    obs: &'a [Observation],
    side: &'static str,
) -> Result<HashMap<&'a str, &'a Observation>, WeaveError> {
    let mut map = HashMap::with_capacity(obs.len());
    for o in obs {
        if map.insert(o.track_id.as_str(), o).is_some() {
            return Err(WeaveError::AmbiguousTrackId { side, track: o.track_id.clone() });
        }
    }
    Ok(map)
}

/// Tallies matches by the lanes of their entry and exit observations.
///
/// The lane sets cover every lane seen in `entries` and `exits`.
pub fn lane_pair_counts(
    matches: &[MatchedPair],
    entries: &[Observation],
    exits: &[Observation],
) -> Result<LanePairCounts, WeaveError> {
    let by_entry = index_by_track(entries, "entry")?;
    let by_exit = index_by_track(exits, "exit")?;
    let mut counts = BTreeMap::new();
    for p in matches {
        let a = by_entry
            .get(p.entry_track.as_str())
            .ok_or_else(|| WeaveError::UnknownTrackId { side: "entry", track: p.entry_track.clone() })?;
        let b = by_exit
            .get(p.exit_track.as_str())
            .ok_or_else(|| WeaveError::UnknownTrackId { side: "exit", track: p.exit_track.clone() })?;
        *counts.entry((a.lane_id, b.lane_id)).or_insert(0) += 1;
    }
    Ok(LanePairCounts::new(
        counts,
        entries.iter().map(|o| o.lane_id),
        exits.iter().map(|o| o.lane_id),
    ))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowEstimate {
    /// `None` marks an unestimated cell (its entry lane had no matches).
    pub flows: BTreeMap<(u32, u32), Option<f64>>,
    pub entry_totals: BTreeMap<u32, u64>,
    pub exit_totals: BTreeMap<u32, u64>,
    pub warnings: Vec<String>,
}

impl FlowEstimate {
    pub fn get(&self, entry_lane: u32, exit_lane: u32) -> Option<f64> {
        self.flows.get(&(entry_lane, exit_lane)).copied().flatten()
    }

    /// `sum_a F(a, b) - N_b` per exit lane, over estimated cells only.
    pub fn exit_discrepancy(&self) -> BTreeMap<u32, f64> {
        let mut exit_lanes: BTreeSet<u32> = self.exit_totals.keys().copied().collect();
        exit_lanes.extend(self.flows.keys().map(|&(_, b)| b));
        exit_lanes
            .into_iter()
            .map(|b| {
                let estimated: f64 = self
                    .flows
                    .iter()
                    .filter(|((_, lane), _)| *lane == b)
                    .filter_map(|(_, f)| *f)
                    .sum();
                let counted = self.exit_totals.get(&b).copied().unwrap_or(0) as f64;
                (b, estimated - counted)
            })
            .collect()
    }
}

/// Scales each entry lane's matched proportions by that lane's total.
pub fn estimate_flows(
    counts: &LanePairCounts,
    entry_totals: &BTreeMap<u32, u64>,
    exit_totals: &BTreeMap<u32, u64>,
) -> Result<FlowEstimate, WeaveError> {
    let mut entry_lanes = counts.entry_lanes().clone();
    entry_lanes.extend(entry_totals.keys());
    let mut exit_lanes = counts.exit_lanes().clone();
    exit_lanes.extend(exit_totals.keys());

    for &a in &entry_lanes {
        let (matched, counted) = (counts.entry_total(a), entry_totals.get(&a).copied().unwrap_or(0));
        if matched > counted {
            return Err(WeaveError::InconsistentCounts { side: "entry", lane: a, matched, counted });
        }
    }
    for &b in &exit_lanes {
        let (matched, counted) = (counts.exit_total(b), exit_totals.get(&b).copied().unwrap_or(0));
        if matched > counted {
            return Err(WeaveError::InconsistentCounts { side: "exit", lane: b, matched, counted });
        }
    }

    let mut estimate = FlowEstimate {
        entry_totals: entry_lanes.iter().map(|&a| (a, entry_totals.get(&a).copied().unwrap_or(0))).collect(),
        exit_totals: exit_lanes.iter().map(|&b| (b, exit_totals.get(&b).copied().unwrap_or(0))).collect(),
        ..Default::default()
    };
    for &a in &entry_lanes {
        let row_sum = counts.entry_total(a);
        if row_sum == 0 {
            estimate.warnings.push(format!("entry lane {a}: no matched vehicles, flows unestimated"));
        }
        let n_a = estimate.entry_totals[&a] as f64;
        for &b in &exit_lanes {
            let flow = (row_sum > 0).then(|| n_a * counts.get(a, b) as f64 / row_sum as f64);
            estimate.flows.insert((a, b), flow);
        }
    }
    Ok(estimate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePairRow {
    pub entry_lane: u32,
    pub exit_lane: u32,
    pub matched: u64,
    /// `null` when unestimated.
    pub estimated_flow: Option<f64>,
}

/// Serializable summary of one zone's analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeavingReport {
    pub schema_version: String,
    pub total_matched: u64,
    pub total_entry: u64,
    pub total_exit: u64,
    /// `total_matched / total_entry`, 0 when nothing was counted.
    pub sampling_rate: f64,
    pub lane_pairs: Vec<LanePairRow>,
    pub entry_totals: BTreeMap<u32, u64>,
    pub exit_totals: BTreeMap<u32, u64>,
    pub exit_discrepancy: BTreeMap<u32, f64>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MatchMetrics>,
    #[serde(default)]
    pub matches: Vec<MatchedPair>,
}

impl WeavingReport {
    pub fn with_matches(mut self, matches: Vec<MatchedPair>) -> Self {
        self.matches = matches;
        self
    }

    /// Plot-friendly CSV of the lane-pair matrix.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("entry_lane,exit_lane,matched,estimated_flow\n");
        for row in &self.lane_pairs {
            let flow = row.estimated_flow.map_or_else(|| "NA".to_string(), |f| f.to_string());
            out.push_str(&format!("{},{},{},{}\n", row.entry_lane, row.exit_lane, row.matched, flow));
        }
        out
    }
}

pub fn build_report(
    flows: &FlowEstimate,
    counts: &LanePairCounts,
    metrics: Option<MatchMetrics>,
) -> WeavingReport {
    let total_matched = counts.total_matched();
    let total_entry: u64 = flows.entry_totals.values().sum();
    let total_exit: u64 = flows.exit_totals.values().sum();
    let sampling_rate = if total_entry == 0 { 0.0 } else { total_matched as f64 / total_entry as f64 };

    let mut keys: BTreeSet<(u32, u32)> = flows.flows.keys().copied().collect();
    keys.extend(counts.iter().map(|(k, _)| k));
    let lane_pairs = keys
        .into_iter()
        .map(|(a, b)| LanePairRow {
            entry_lane: a,
            exit_lane: b,
            matched: counts.get(a, b),
            estimated_flow: flows.get(a, b),
        })
        .collect();

    WeavingReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        total_matched,
        total_entry,
        total_exit,
        sampling_rate,
        lane_pairs,
        entry_totals: flows.entry_totals.clone(),
        exit_totals: flows.exit_totals.clone(),
        exit_discrepancy: flows.exit_discrepancy(),
        warnings: flows.warnings.clone(),
        metrics,
        matches: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Embedding, VehicleClass, ZonePoint};
    use proptest::prelude::*;

    fn obs(track: &str, point: ZonePoint, lane: u32) -> Observation {
        Observation {
            camera_id: "c".into(),
            zone_point: point,
            track_id: track.into(),
            timestamp: 0.0,
            lane_id: lane,
            vehicle_class: VehicleClass::Car,
            embedding: Embedding::new(vec![1.0]),
        }
    }

    fn pair(e: &str, x: &str) -> MatchedPair {
        MatchedPair {
            entry_track: e.into(),
            exit_track: x.into(),
            total_cost: 0.0,
            appearance_cost: 0.0,
            time_cost: 0.0,
            similarity: 1.0,
        }
    }

    fn counts(cells: &[((u32, u32), u64)]) -> LanePairCounts {
        LanePairCounts::new(cells.iter().copied().collect(), [], [])
    }

    #[test]
    fn counting() {
        let entries: Vec<_> = (0..5).map(|i| obs(&format!("e{i}"), ZonePoint::Entry, [1, 1, 2, 2, 2][i])).collect();
        let exits: Vec<_> = (0..5).map(|i| obs(&format!("x{i}"), ZonePoint::Exit, [1, 2, 2, 1, 2][i])).collect();
        assert_eq!(lane_pair_counts(&[], &entries, &exits).unwrap().total_matched(), 0);

        let all_1_to_2: Vec<_> = (0..3).map(|i| pair(&format!("e{}", i % 2), &format!("x{}", [1, 2, 4][i]))).collect();
        let c = lane_pair_counts(&all_1_to_2, &entries, &exits).unwrap();
        assert_eq!(c.get(1, 2), 3);
        assert_eq!(c.total_matched(), 3);

        // Hand tally: e0(1)->x0(1), e1(1)->x1(2), e2(2)->x2(2), e3(2)->x3(1), e4(2)->x4(2)
        let mixed: Vec<_> = (0..5).map(|i| pair(&format!("e{i}"), &format!("x{i}"))).collect();
        let c = lane_pair_counts(&mixed, &entries, &exits).unwrap();
        assert_eq!((c.get(1, 1), c.get(1, 2), c.get(2, 1), c.get(2, 2)), (1, 1, 1, 2));
        assert_eq!(c.total_matched(), 5);
    }

    #[test]
    fn counting_errors() {
        let entries = [obs("e", ZonePoint::Entry, 1)];
        let exits = [obs("x", ZonePoint::Exit, 1)];
        assert!(matches!(
            lane_pair_counts(&[pair("nope", "x")], &entries, &exits),
            Err(WeaveError::UnknownTrackId { side: "entry", .. })
        ));
        assert!(matches!(
            lane_pair_counts(&[pair("e", "nope")], &entries, &exits),
            Err(WeaveError::UnknownTrackId { side: "exit", .. })
        ));
        let dup = [obs("e", ZonePoint::Entry, 1), obs("e", ZonePoint::Entry, 2)];
        assert!(matches!(lane_pair_counts(&[], &dup, &exits), Err(WeaveError::AmbiguousTrackId { .. })));
    }

    fn l1_l2() -> (LanePairCounts, BTreeMap<u32, u64>) {
        (counts(&[((1, 1), 20), ((1, 2), 10), ((2, 2), 10)]), BTreeMap::from([(1, 100), (2, 50)]))
    }

    #[test]
    fn two_lane_estimate() {
        let (c, n) = l1_l2();
        let f = estimate_flows(&c, &n, &BTreeMap::new()).unwrap_err();
        // Exit totals are required to cover matched exits.
        assert!(matches!(f, WeaveError::InconsistentCounts { side: "exit", .. }));

        let f = estimate_flows(&c, &n, &BTreeMap::from([(1, 70), (2, 80)])).unwrap();
        assert!((f.get(1, 1).unwrap() - 66.67).abs() < 0.01);
        assert!((f.get(1, 2).unwrap() - 33.33).abs() < 0.01);
        assert_eq!(f.get(2, 2), Some(50.0));
        assert_eq!(f.get(2, 1), Some(0.0));
        assert!(f.warnings.is_empty());
        let d = f.exit_discrepancy();
        assert!((d[&1] - (200.0 / 3.0 - 70.0)).abs() < 1e-9);
    }

    #[test]
    fn all_zero_is_unestimated() {
        let c = LanePairCounts::new(BTreeMap::new(), [1, 2], [1]);
        let f = estimate_flows(&c, &BTreeMap::from([(1, 5), (2, 3)]), &BTreeMap::from([(1, 4)])).unwrap();
        assert_eq!(f.flows.len(), 2);
        assert!(f.flows.values().all(Option::is_none));
        assert_eq!(f.warnings.len(), 2);
        assert!(f.warnings[0].contains("entry lane 1"));
        assert!(f.warnings[1].contains("entry lane 2"));
    }

    #[test]
    fn single_pair_gets_whole_lane() {
        let c = counts(&[((3, 4), 7)]);
        let f = estimate_flows(&c, &BTreeMap::from([(3, 91)]), &BTreeMap::from([(4, 91)])).unwrap();
        assert_eq!(f.get(3, 4), Some(91.0));
    }

    #[test]
    fn over_matched_lane_is_rejected() {
        let c = counts(&[((1, 1), 5)]);
        assert_eq!(
            estimate_flows(&c, &BTreeMap::from([(1, 4)]), &BTreeMap::from([(1, 9)])),
            Err(WeaveError::InconsistentCounts { side: "entry", lane: 1, matched: 5, counted: 4 })
        );
    }

    #[test]
    fn report_fields() {
        let empty = build_report(&FlowEstimate::default(), &LanePairCounts::default(), None);
        assert_eq!(empty.total_matched, 0);
        assert_eq!(empty.sampling_rate, 0.0);
        assert_eq!(empty.schema_version, "1");

        let (c, n) = l1_l2();
        let f = estimate_flows(&c, &n, &BTreeMap::from([(1, 70), (2, 80)])).unwrap();
        let metrics = MatchMetrics::from_counts(6, 2, 100).unwrap();
        let r = build_report(&f, &c, Some(metrics.clone()));
        assert!((r.sampling_rate - 40.0 / 150.0).abs() < 1e-12);
        assert_eq!(r.metrics, Some(metrics));
        assert_eq!(r.lane_pairs.len(), 4);
        let csv = r.to_csv();
        assert!(csv.starts_with("entry_lane,exit_lane,matched,estimated_flow\n1,1,20,66.66"));
        assert!(csv.contains("\n2,2,10,50\n"));
    }

    #[test]
    fn csv_marks_unestimated() {
        let c = LanePairCounts::new(BTreeMap::new(), [1], [2]);
        let f = estimate_flows(&c, &BTreeMap::from([(1, 3)]), &BTreeMap::new()).unwrap();
        let csv = build_report(&f, &c, None).to_csv();
        assert_eq!(csv, "entry_lane,exit_lane,matched,estimated_flow\n1,2,0,NA\n");
    }

    fn cells() -> impl Strategy<Value = BTreeMap<(u32, u32), u64>> {
        proptest::collection::btree_map((0u32..4, 0u32..4), 0u64..50, 0..12)
    }

    proptest! {
        #[test]
        fn conservation_and_scale(cells in cells(), extra in proptest::collection::vec(0u64..100, 4), k in 1u64..20) {
            let c = LanePairCounts::new(cells, [], []);
            let scaled = c.scaled(k);
            // Totals large enough for both the original and the scaled sample.
            let n_a: BTreeMap<u32, u64> = (0..4).map(|a| (a, scaled.entry_total(a) + extra[a as usize])).collect();
            let n_b: BTreeMap<u32, u64> = (0..4).map(|b| (b, scaled.exit_total(b))).collect();
            let f = estimate_flows(&c, &n_a, &n_b).unwrap();
            for a in 0..4 {
                let row: Vec<_> = f.flows.iter().filter(|((x, _), _)| *x == a).map(|(_, v)| *v).collect();
                if c.entry_total(a) > 0 {
                    let sum: f64 = row.iter().map(|v| v.unwrap()).sum();
                    let target = n_a[&a] as f64;
                    prop_assert!((sum - target).abs() <= 1e-9 * target.max(1.0));
                } else {
                    prop_assert!(row.iter().all(Option::is_none));
                }
            }
            let g = estimate_flows(&scaled, &n_a, &n_b).unwrap();
            prop_assert_eq!(f.flows, g.flows);
        }

        #[test]
        fn perfect_sampling_is_exact(cells in cells()) {
            let c = LanePairCounts::new(cells, [], []);
            let n_a: BTreeMap<u32, u64> = (0..4).map(|a| (a, c.entry_total(a))).collect();
            let n_b: BTreeMap<u32, u64> = (0..4).map(|b| (b, c.exit_total(b))).collect();
            let f = estimate_flows(&c, &n_a, &n_b).unwrap();
            for ((a, b), n) in c.iter() {
                prop_assert_eq!(f.get(a, b), Some(n as f64));
            }
        }
    }
}
