use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use weaving::evalkit::match_metrics;
use weaving::synth::{brute_force_assignment, brute_force_match, generate_scenario, ScenarioSpec};
use weaving::weave::{build_report, estimate_flows, lane_pair_counts};
use weaving::{build_cost_matrix, match_zone, solve_assignment, CostMatrix, Observation, ZoneConfig, ZonePoint};

fn zone() -> ZoneConfig {
    ZoneConfig::builder(500.0, 25.0).entry_lanes([1, 2]).exit_lanes([1, 2, 3]).build().unwrap()
}

fn lane_totals(obs: &[Observation]) -> BTreeMap<u32, u64> {
    let mut out = BTreeMap::new();
    for o in obs {
        *out.entry(o.lane_id).or_insert(0) += 1;
    }
    out
}

fn pair_set(matches: &[weaving::MatchedPair]) -> BTreeSet<(String, String)> {
    matches.iter().map(|p| (p.entry_track.clone(), p.exit_track.clone())).collect()
}

fn cost_matrix() -> impl Strategy<Value = CostMatrix> {
    (0usize..=7, 0usize..=7, 0.2f64..=1.0).prop_flat_map(|(rows, cols, density)| {
        proptest::collection::vec((proptest::bool::weighted(density), -5.0f64..20.0), rows * cols).prop_map(
            move |cells| {
                let cells = cells.into_iter().map(|(on, c)| on.then_some(c)).collect();
                CostMatrix::from_cells(rows, cols, cells).unwrap()
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn solver_matches_enumeration(m in cost_matrix()) {
        let fast = solve_assignment(&m);
        let slow = brute_force_assignment(&m).unwrap();
        prop_assert_eq!(fast.len(), slow.len());
        prop_assert!((fast.objective - slow.objective).abs() <= 1e-9);
    }

    #[test]
    fn matched_pairs_satisfy_every_constraint(seed in any::<u64>()) {
        let z = zone();
        let spec = ScenarioSpec {
            vehicle_count: 6,
            noise_stddev: 0.08,
            embedding_dim: 8,
            speed_stddev_mps: 6.0,
            truck_fraction: 0.5,
            mean_headway_s: 0.5,
            clutter_entry: 2,
            clutter_exit: 2,
            seed,
            ..Default::default()
        };
        let s = generate_scenario(&spec, &z).unwrap();
        let by_entry: BTreeMap<_, _> = s.entries.iter().map(|o| (o.track_id.clone(), o)).collect();
        let by_exit: BTreeMap<_, _> = s.exits.iter().map(|o| (o.track_id.clone(), o)).collect();
        for p in match_zone(&s.entries, &s.exits, &z).unwrap() {
            let (a, b) = (by_entry[&p.entry_track], by_exit[&p.exit_track]);
            prop_assert_eq!(a.vehicle_class, b.vehicle_class);
            prop_assert!(a.timestamp < b.timestamp);
            prop_assert!(p.similarity >= z.tau());
            let t = z.expected_travel_time();
            prop_assert!(b.timestamp >= a.timestamp + t - z.time_window());
            prop_assert!(b.timestamp <= a.timestamp + t + z.time_window());
        }
    }
}

#[test]
fn enumeration_over_observations_agrees_with_solver() {
    let z = zone();
    for seed in 0..40 {
        let spec = ScenarioSpec {
            vehicle_count: 6,
            noise_stddev: 0.1,
            embedding_dim: 8,
            speed_stddev_mps: 5.0,
            clutter_entry: 1,
            clutter_exit: 2,
            mean_headway_s: 1.0,
            seed,
            ..Default::default()
        };
        let s = generate_scenario(&spec, &z).unwrap();
        let m = build_cost_matrix(&s.entries, &s.exits, &z).unwrap();
        let fast = solve_assignment(&m);
        let slow = brute_force_match(&s.entries, &s.exits, &z).unwrap();
        assert_eq!(fast.len(), slow.len(), "seed {seed}");
        let slow_total: f64 = slow.iter().map(|p| p.total_cost).sum();
        assert!((fast.objective - slow_total).abs() <= 1e-9, "seed {seed}");
    }
}

#[test]
fn perfect_scenario_recovers_pairs_and_flows() {
    let z = zone();
    let spec = ScenarioSpec { vehicle_count: 120, seed: 11, ..Default::default() };
    let s = generate_scenario(&spec, &z).unwrap();
    let matches = match_zone(&s.entries, &s.exits, &z).unwrap();
    assert_eq!(pair_set(&matches), s.truth.pairs);

    let metrics = match_metrics(&matches, &s.truth.pairs, s.truth.pairs.len() as u64).unwrap();
    assert_eq!((metrics.tpr, metrics.precision), (1.0, 1.0));

    let counts = lane_pair_counts(&matches, &s.entries, &s.exits).unwrap();
    let flows = estimate_flows(&counts, &lane_totals(&s.entries), &lane_totals(&s.exits)).unwrap();
    for (&(a, b), &n) in &s.truth.flows {
        assert_eq!(flows.get(a, b), Some(n as f64));
    }
    let report = build_report(&flows, &counts, Some(metrics));
    assert_eq!(report.sampling_rate, 1.0);
    assert!(report.exit_discrepancy.values().all(|&d| d == 0.0));
}

#[test]
fn result_is_independent_of_input_order() {
    let z = zone();
    let spec = ScenarioSpec {
        vehicle_count: 80,
        noise_stddev: 0.03,
        speed_stddev_mps: 2.5,
        clutter_entry: 16,
        clutter_exit: 16,
        seed: 4,
        ..Default::default()
    };
    let s = generate_scenario(&spec, &z).unwrap();
    let forward = match_zone(&s.entries, &s.exits, &z).unwrap();
    let mut entries = s.entries.clone();
    let mut exits = s.exits.clone();
    entries.reverse();
    let third = exits.len() / 3;
    exits.rotate_left(third);
    assert_eq!(forward, match_zone(&entries, &exits, &z).unwrap());
}

#[test]
fn precision_falls_as_noise_grows() {
    // A small dimension and a loose gate let impostors through as noise rises.
    let z = zone().to_builder().tau(0.3).build().unwrap();
    let sigmas = [0.0, 0.15, 0.3, 0.6];
    let seeds = 0..8u64;
    let mean_precision: Vec<f64> = sigmas
        .iter()
        .map(|&sigma| {
            seeds
                .clone()
                .map(|seed| {
                    let spec = ScenarioSpec {
                        vehicle_count: 80,
                        embedding_dim: 4,
                        noise_stddev: sigma,
                        speed_stddev_mps: 2.5,
                        mean_headway_s: 0.5,
                        seed,
                        ..Default::default()
                    };
                    let s = generate_scenario(&spec, &z).unwrap();
                    let matches = match_zone(&s.entries, &s.exits, &z).unwrap();
                    match_metrics(&matches, &s.truth.pairs, s.entries.len() as u64).unwrap().precision
                })
                .sum::<f64>()
                / seeds.clone().count() as f64
        })
        .collect();
    for w in mean_precision.windows(2) {
        assert!(w[1] <= w[0] + 0.02, "{mean_precision:?}");
    }
    assert!(mean_precision[sigmas.len() - 1] < mean_precision[0] - 0.05, "{mean_precision:?}");
}

#[test]
fn clutter_stays_out_of_ground_truth() {
    let spec = ScenarioSpec { vehicle_count: 10, clutter_entry: 5, clutter_exit: 3, seed: 2, ..Default::default() };
    let s = generate_scenario(&spec, &zone()).unwrap();
    let paired_entries: BTreeSet<_> = s.truth.pairs.iter().map(|(e, _)| e.as_str()).collect();
    let paired_exits: BTreeSet<_> = s.truth.pairs.iter().map(|(_, x)| x.as_str()).collect();
    assert_eq!(s.entries.iter().filter(|o| !paired_entries.contains(o.track_id.as_str())).count(), 5);
    assert_eq!(s.exits.iter().filter(|o| !paired_exits.contains(o.track_id.as_str())).count(), 3);
    assert!(s.entries.iter().all(|o| o.zone_point == ZonePoint::Entry));
    assert!(s.exits.iter().all(|o| o.zone_point == ZonePoint::Exit));
}
