//! Zone configuration from a JSON file plus command-line overrides.

use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use weaving::{TimeTerm, ZoneConfig};

use crate::error::{CliError, Result};
use crate::io::read_json;

/// Zone config document. Every field is optional so flags can fill gaps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_mps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_lanes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_lanes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_term: Option<TimeTerm>,
}

impl From<&ZoneConfig> for ZoneFile {
    fn from(z: &ZoneConfig) -> Self {
        ZoneFile {
            distance_m: Some(z.distance_m()),
            speed_mps: Some(z.speed_mps()),
            entry_lanes: Some(z.entry_lanes().iter().copied().collect()),
            exit_lanes: Some(z.exit_lanes().iter().copied().collect()),
            w1: Some(z.w1()),
            w2: Some(z.w2()),
            tau: Some(z.tau()),
            delta_s: Some(z.time_window()),
            time_term: Some(z.time_term()),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ZoneArgs {
    /// Zone config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Distance between the two cameras, metres.
    #[arg(long)]
    pub distance_m: Option<f64>,
    /// Mean speed through the zone, m/s.
    #[arg(long)]
    pub speed_mps: Option<f64>,
    /// Appearance weight.
    #[arg(long)]
    pub w1: Option<f64>,
    /// Travel-time weight.
    #[arg(long)]
    pub w2: Option<f64>,
    /// Minimum cosine similarity for a candidate pair.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Half-width of the exit-time window, seconds (default: half the travel time).
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_parser = parse_time_term)]
    pub time_term: Option<TimeTerm>,
    /// Comma-separated entry lane ids.
    #[arg(long, value_delimiter = ',')]
    pub entry_lanes: Option<Vec<u32>>,
    /// Comma-separated exit lane ids.
    #[arg(long, value_delimiter = ',')]
    pub exit_lanes: Option<Vec<u32>>,
}

fn parse_time_term(s: &str) -> std::result::Result<TimeTerm, String> {
    s.parse()
}

impl ZoneArgs {
    /// Merges file and flags. Lanes missing from both come from `fallback`.
    pub fn resolve(&self, fallback: (BTreeSet<u32>, BTreeSet<u32>)) -> Result<ZoneConfig> {
        let file = match &self.config {
            Some(p) => read_json::<ZoneFile>(p)?,
            None => ZoneFile::default(),
        };
        let distance = self.distance_m.or(file.distance_m);
        let speed = self.speed_mps.or(file.speed_mps);
        let (Some(distance), Some(speed)) = (distance, speed) else {
            return Err(CliError::input("zone distance and speed are required (--distance-m, --speed-mps or --config)"));
        };
        let entry_lanes = self.entry_lanes.clone().or(file.entry_lanes).map_or(fallback.0, |v| v.into_iter().collect());
        let exit_lanes = self.exit_lanes.clone().or(file.exit_lanes).map_or(fallback.1, |v| v.into_iter().collect());

        let mut b = ZoneConfig::builder(distance, speed)
            .entry_lanes(entry_lanes)
            .exit_lanes(exit_lanes)
            .weights(
                self.w1.or(file.w1).unwrap_or(weaving::model::DEFAULT_W1),
                self.w2.or(file.w2).unwrap_or(weaving::model::DEFAULT_W2),
            )
            .tau(self.tau.or(file.tau).unwrap_or(weaving::model::DEFAULT_TAU))
            .time_term(self.time_term.or(file.time_term).unwrap_or_default());
        if let Some(d) = self.delta.or(file.delta_s) {
            b = b.time_window(d);
        }
        b.build().map_err(|e| CliError::input(format!("invalid zone configuration: {e}")))
    }
}
