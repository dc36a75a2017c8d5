//! Subcommand implementations. Each returns its result and the text printed
//! on stdout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use weaving::evalkit::{cmc_map, match_metrics, MatchMetrics, ReidMetrics};
use weaving::synth::{generate_scenario, noise_for_similarity, ScenarioSpec};
use weaving::weave::{build_report, estimate_flows, lane_pair_counts, WeavingReport};
use weaving::{match_zone, validate_dataset, Embedding, Observation, ZoneConfig, ZonePoint};

use crate::config::{ZoneArgs, ZoneFile};
use crate::error::{CliError, Result};
use crate::io::{
    default_sidecar, read_json, read_jsonl, read_observations, to_json_bytes, write_atomic, write_observations,
    GroundTruthFile, IdentityRecord, LoadedObservations,
};

pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const EXITS_FILE: &str = "exits.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const ZONE_FILE: &str = "zone.json";

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    /// Observations at the entry point (P1), JSON lines.
    #[arg(long)]
    pub entries: PathBuf,
    /// Observations at the exit point (P2), JSON lines.
    #[arg(long)]
    pub exits: PathBuf,
    /// Embedding sidecar for `--entries` (default: same name, .wemb).
    #[arg(long)]
    pub entries_emb: Option<PathBuf>,
    /// Embedding sidecar for `--exits` (default: same name, .wemb).
    #[arg(long)]
    pub exits_emb: Option<PathBuf>,
    #[command(flatten)]
    pub zone: ZoneArgs,
    /// Report JSON path.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Lane-pair CSV path (default: the report path with a .csv extension).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Ground truth; when given, match metrics are added to the report.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Denominator for TPR (default: entry observation count).
    #[arg(long)]
    pub total_detected: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Report written by `match`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Denominator for TPR (default: the report's entry count).
    #[arg(long)]
    pub total_detected: Option<u64>,
    /// Also write the metrics as JSON.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Scenario JSON; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub vehicles: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Per-component embedding noise stddev.
    #[arg(long, conflicts_with = "target_similarity")]
    pub noise: Option<f64>,
    /// Pick the noise level so same-vehicle views average this similarity.
    #[arg(long)]
    pub target_similarity: Option<f64>,
    /// Speed stddev, m/s.
    #[arg(long)]
    pub speed_stddev: Option<f64>,
    #[arg(long)]
    pub truck_fraction: Option<f64>,
    /// Vehicles seen only at the entry.
    #[arg(long)]
    pub clutter_entry: Option<usize>,
    /// Vehicles seen only at the exit.
    #[arg(long)]
    pub clutter_exit: Option<usize>,
    /// Store embeddings in .wemb sidecars instead of inline.
    #[arg(long)]
    pub binary: bool,
    /// Zone used for generation; lanes default to 1,2 on both sides.
    #[command(flatten)]
    pub zone: ZoneArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReidArgs {
    /// Query identities, JSON lines of {"identity", "embedding"}.
    #[arg(long)]
    pub query: PathBuf,
    /// Gallery identities, same format.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Length of the CMC curve in the JSON output.
    #[arg(long, default_value_t = 10)]
    pub max_rank: usize,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn load_side(path: &Path, sidecar: Option<&Path>, point: ZonePoint) -> Result<LoadedObservations> {
    let loaded = read_observations(path, sidecar)?;
    if let Some(i) = loaded.observations.iter().position(|o| o.zone_point != point) {
        let found = loaded.observations[i].zone_point;
        return Err(CliError::input(format!(
            "{}: line {}: zone_point {found} found in the {point} file",
            path.display(),
            loaded.lines[i]
        )));
    }
    Ok(loaded)
}

fn check_valid(
    path: &Path,
    loaded: &LoadedObservations,
    zone: &ZoneConfig,
    point: ZonePoint,
) -> Result<BTreeMap<u32, u64>> {
    let report = validate_dataset(&loaded.observations, zone);
    if let Some(v) = report.violations.first() {
        return Err(CliError::input(format!(
            "{}: line {}: track {:?}: {}",
            path.display(),
            loaded.lines[v.index],
            loaded.observations[v.index].track_id,
            v.kind
        )));
    }
    // Declared lanes with no traffic still get a report row.
    let mut totals: BTreeMap<u32, u64> = zone.lanes(point).iter().map(|&l| (l, 0)).collect();
    totals.extend(report.lane_counts(point));
    Ok(totals)
}

fn lanes_of(obs: &[Observation]) -> BTreeSet<u32> {
    obs.iter().map(|o| o.lane_id).collect()
}

fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn with_ground_truth(
    matches: &[weaving::MatchedPair],
    truth: &Path,
    total_detected: u64,
) -> Result<MatchMetrics> {
    let gt: GroundTruthFile = read_json(truth)?;
    match_metrics(matches, &gt.pair_set(), total_detected).map_err(|e| CliError::input(e.to_string()))
}

pub fn cmd_match(args: &MatchArgs) -> Result<(WeavingReport, String)> {
    let entries = load_side(&args.entries, args.entries_emb.as_deref(), ZonePoint::Entry)?;
    let exits = load_side(&args.exits, args.exits_emb.as_deref(), ZonePoint::Exit)?;
    let zone = args.zone.resolve((lanes_of(&entries.observations), lanes_of(&exits.observations)))?;
    let entry_totals = check_valid(&args.entries, &entries, &zone, ZonePoint::Entry)?;
    let exit_totals = check_valid(&args.exits, &exits, &zone, ZonePoint::Exit)?;
    if let (Some(a), Some(b)) = (entries.observations.first(), exits.observations.first()) {
        if a.embedding.dim() != b.embedding.dim() {
            return Err(CliError::input(format!(
                "{}: line {}: embedding dimension {} differs from the entry dimension {}",
                args.exits.display(),
                exits.lines[0],
                b.embedding.dim(),
                a.embedding.dim()
            )));
        }
    }
    info!(
        "matching {} entries against {} exits (travel time {:.3} s, window ±{:.3} s)",
        entries.observations.len(),
        exits.observations.len(),
        zone.expected_travel_time(),
        zone.time_window()
    );

    let matches = match_zone(&entries.observations, &exits.observations, &zone)
        .map_err(|e| CliError::internal(format!("matching failed: {e}")))?;
    let counts = lane_pair_counts(&matches, &entries.observations, &exits.observations)
        .map_err(|e| CliError::input(e.to_string()))?;
    let flows = estimate_flows(&counts, &entry_totals, &exit_totals).map_err(|e| CliError::input(e.to_string()))?;
    let metrics = match &args.ground_truth {
        Some(p) => {
            let total = args.total_detected.unwrap_or(entries.observations.len() as u64);
            Some(with_ground_truth(&matches, p, total)?)
        }
        None => None,
    };
    let report = build_report(&flows, &counts, metrics).with_matches(matches);
    for w in &report.warnings {
        warn!("{w}");
    }

    let csv_path = args.csv.clone().unwrap_or_else(|| args.output.with_extension("csv"));
    write_atomic(&args.output, &to_json_bytes(&report))?;
    write_atomic(&csv_path, report.to_csv().as_bytes())?;

    let mut summary = format!(
        "matched {} of {} entries (sampling rate {}%)\n",
        report.total_matched,
        report.total_entry,
        percent(report.sampling_rate)
    );
    if let Some(m) = &report.metrics {
        summary.push_str(&metrics_text(m));
    }
    summary.push_str(&format!("report: {}\ncsv: {}\n", args.output.display(), csv_path.display()));
    Ok((report, summary))
}

fn metrics_text(m: &MatchMetrics) -> String {
    format!("TPR: {}%\nPrecision: {}%\n", percent(m.tpr), percent(m.precision))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(MatchMetrics, String)> {
    let report: WeavingReport = read_json(&args.report)?;
    let total = args.total_detected.unwrap_or(report.total_entry);
    let metrics = with_ground_truth(&report.matches, &args.ground_truth, total)?;
    if let Some(p) = &args.output {
        write_atomic(p, &to_json_bytes(&metrics))?;
    }
    let text = metrics_text(&metrics);
    Ok((metrics, text))
}

/// Scenario parameters from the scenario file and flags.
pub fn resolve_spec(args: &SynthArgs) -> Result<ScenarioSpec> {
    let mut spec: ScenarioSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => ScenarioSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { spec.$field = v; })*
        };
    }
    set!(vehicles => vehicle_count, seed => seed, dim => embedding_dim, noise => noise_stddev,
         speed_stddev => speed_stddev_mps, truck_fraction => truck_fraction,
         clutter_entry => clutter_entry, clutter_exit => clutter_exit);
    if let Some(t) = args.target_similarity {
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::input(format!("target similarity {t} must be in (0, 1]")));
        }
        spec.noise_stddev = noise_for_similarity(t, spec.embedding_dim.max(1), spec.identity_scale);
    }
    Ok(spec)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    let spec = resolve_spec(args)?;
    let zone = args.zone.resolve((BTreeSet::from([1, 2]), BTreeSet::from([1, 2])))?;
    let scenario = generate_scenario(&spec, &zone).map_err(|e| CliError::input(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::internal(format!("creating {}: {e}", args.out_dir.display())))?;

    let entries = args.out_dir.join(ENTRIES_FILE);
    let exits = args.out_dir.join(EXITS_FILE);
    let (entry_emb, exit_emb) = (default_sidecar(&entries), default_sidecar(&exits));
    write_observations(&entries, &scenario.entries, args.binary.then_some(entry_emb.as_path()))?;
    write_observations(&exits, &scenario.exits, args.binary.then_some(exit_emb.as_path()))?;
    write_atomic(&args.out_dir.join(GROUND_TRUTH_FILE), &to_json_bytes(&GroundTruthFile::from(&scenario.truth)))?;
    write_atomic(&args.out_dir.join(ZONE_FILE), &to_json_bytes(&ZoneFile::from(&zone)))?;
    Ok(format!(
        "wrote {} entries, {} exits, {} true pairs to {}\n",
        scenario.entries.len(),
        scenario.exits.len(),
        scenario.truth.pairs.len(),
        args.out_dir.display()
    ))
}

fn read_identities(path: &Path) -> Result<Vec<(Embedding, String)>> {
    Ok(read_jsonl::<IdentityRecord>(path)?
        .into_iter()
        .map(|(_, r)| (Embedding::new(r.embedding), r.identity))
        .collect())
}

pub fn cmd_reid_eval(args: &ReidArgs) -> Result<(ReidMetrics, String)> {
    let query = read_identities(&args.query)?;
    let gallery = read_identities(&args.gallery)?;
    let metrics = cmc_map(&query, &gallery, args.max_rank.max(10)).map_err(|e| CliError::input(e.to_string()))?;
    let reported = ReidMetrics { map: metrics.map, cmc: metrics.cmc[..args.max_rank.max(1).min(metrics.cmc.len())].to_vec() };
    if let Some(p) = &args.output {
        write_atomic(p, &to_json_bytes(&reported))?;
    }
    let text = format!(
        "mAP: {}%\nRank-1: {}%\nRank-5: {}%\nRank-10: {}%\n",
        percent(metrics.map),
        percent(metrics.rank(1)),
        percent(metrics.rank(5)),
        percent(metrics.rank(10))
    );
    Ok((reported, text))
}
