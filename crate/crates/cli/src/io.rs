//! Observation files, the binary embedding sidecar, and atomic output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use weaving::synth::GroundTruth;
use weaving::{Embedding, Observation, VehicleClass, ZonePoint};

use crate::error::{CliError, Result};

pub const SIDECAR_MAGIC: &[u8; 4] = b"WEMB";
pub const SIDECAR_EXTENSION: &str = "wemb";

/// One line of an observation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    pub camera_id: String,
    pub zone_point: ZonePoint,
    pub track_id: String,
    pub class: VehicleClass,
    pub timestamp_s: f64,
    pub lane_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<u64>,
}

/// Parsed observations with the 1-based source line of each.
#[derive(Debug, Clone, Default)]
pub struct LoadedObservations {
    pub observations: Vec<Observation>,
    pub lines: Vec<usize>,
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Parses a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line)
            .map_err(|e| CliError::input(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push((i + 1, record));
    }
    Ok(out)
}

/// Default sidecar location: the observation file with a `.wemb` extension.
pub fn default_sidecar(path: &Path) -> PathBuf {
    path.with_extension(SIDECAR_EXTENSION)
}

/// Reads an observation file. Records using `embedding_ref` resolve against
/// `sidecar`, or the default sidecar path when none is given.
pub fn read_observations(path: &Path, sidecar: Option<&Path>) -> Result<LoadedObservations> {
    let records = read_jsonl::<ObservationRecord>(path)?;
    let mut vectors: Option<Vec<Vec<f32>>> = None;
    let mut loaded = LoadedObservations::default();
    for (line, r) in records {
        let at = |msg: String| CliError::input(format!("{}: line {line}: {msg}", path.display()));
        let embedding = match (r.embedding, r.embedding_ref) {
            (Some(v), None) => Embedding::new(v),
            (None, Some(idx)) => {
                if vectors.is_none() {
                    let p = sidecar.map_or_else(|| default_sidecar(path), Path::to_path_buf);
                    vectors = Some(read_sidecar(&p)?.1);
                }
                let all = vectors.as_ref().expect("loaded above");
                let v = usize::try_from(idx).ok().and_then(|i| all.get(i)).ok_or_else(|| {
                    at(format!("embedding_ref {idx} is out of range ({} records in sidecar)", all.len()))
                })?;
                Embedding::from_f32(v)
            }
            (Some(_), Some(_)) => return Err(at("record has both embedding and embedding_ref".into())),
            (None, None) => return Err(at("record has neither embedding nor embedding_ref".into())),
        };
        loaded.observations.push(Observation {
            camera_id: r.camera_id,
            zone_point: r.zone_point,
            track_id: r.track_id,
            timestamp: r.timestamp_s,
            lane_id: r.lane_id,
            vehicle_class: r.class,
            embedding,
        });
        loaded.lines.push(line);
    }
    Ok(loaded)
}

fn record(o: &Observation, embedding: Option<Vec<f64>>, embedding_ref: Option<u64>) -> ObservationRecord {
    ObservationRecord {
        camera_id: o.camera_id.clone(),
        zone_point: o.zone_point,
        track_id: o.track_id.clone(),
        class: o.vehicle_class,
        timestamp_s: o.timestamp,
        lane_id: o.lane_id,
        embedding,
        embedding_ref,
    }
}

fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

/// Writes observations with inline embeddings, or with references into a
/// sidecar written alongside when `sidecar` is given.
pub fn write_observations(path: &Path, observations: &[Observation], sidecar: Option<&Path>) -> Result<()> {
    let body = match sidecar {
        None => jsonl(observations.iter().map(|o| record(o, Some(o.embedding.as_slice().to_vec()), None))),
        Some(p) => {
            let dim = observations.first().map_or(0, |o| o.embedding.dim());
            let embeddings: Vec<&Embedding> = observations.iter().map(|o| &o.embedding).collect();
            write_atomic(p, &encode_sidecar(dim, &embeddings)?)?;
            jsonl(observations.iter().enumerate().map(|(i, o)| record(o, None, Some(i as u64))))
        }
    };
    write_atomic(path, &body)
}

/// Sidecar bytes: magic, little-endian u32 dimension, then f32 records.
pub fn encode_sidecar(dim: usize, embeddings: &[&Embedding]) -> Result<Vec<u8>> {
    let d = u32::try_from(dim).map_err(|_| CliError::internal(format!("dimension {dim} does not fit in u32")))?;
    let mut out = Vec::with_capacity(8 + 4 * dim * embeddings.len());
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&d.to_le_bytes());
    for e in embeddings {
        if e.dim() != dim {
            return Err(CliError::internal(format!("embedding dimension {} differs from {dim}", e.dim())));
        }
        for &x in e.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_sidecar(bytes: &[u8]) -> std::result::Result<(usize, Vec<Vec<f32>>), String> {
    if bytes.len() < 8 || &bytes[..4] != SIDECAR_MAGIC {
        return Err("missing WEMB header".into());
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if dim == 0 {
        return if body.is_empty() { Ok((0, Vec::new())) } else { Err("dimension 0 with trailing data".into()) };
    }
    let stride = 4 * dim;
    if !body.len().is_multiple_of(stride) {
        return Err(format!("{} payload bytes are not a multiple of the {stride}-byte record", body.len()));
    }
    let records = body
        .chunks_exact(stride)
        .map(|rec| rec.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
        .collect();
    Ok((dim, records))
}

pub fn read_sidecar(path: &Path) -> Result<(usize, Vec<Vec<f32>>)> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    decode_sidecar(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let fail = |e: std::io::Error| CliError::internal(format!("writing {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub entry_lane: u32,
    pub exit_lane: u32,
    pub count: u64,
}

/// On-disk ground truth: true pairs as `[entry_track, exit_track]` arrays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub pairs: Vec<(String, String)>,
    #[serde(default)]
    pub flows: Vec<FlowRow>,
}

impl From<&GroundTruth> for GroundTruthFile {
    fn from(t: &GroundTruth) -> Self {
        GroundTruthFile {
            pairs: t.pairs.iter().cloned().collect(),
            flows: t
                .flows
                .iter()
                .map(|(&(entry_lane, exit_lane), &count)| FlowRow { entry_lane, exit_lane, count })
                .collect(),
        }
    }
}

impl GroundTruthFile {
    pub fn pair_set(&self) -> BTreeSet<(String, String)> {
        self.pairs.iter().cloned().collect()
    }

    pub fn flow_map(&self) -> BTreeMap<(u32, u32), u64> {
        self.flows.iter().map(|r| ((r.entry_lane, r.exit_lane), r.count)).collect()
    }
}

/// One line of a re-identification query or gallery file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityRecord {
    pub identity: String,
    pub embedding: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_layout_is_exact() {
        let a = Embedding::new(vec![1.0, -0.5]);
        let b = Embedding::new(vec![0.25, 3.0]);
        let bytes = encode_sidecar(2, &[&a, &b]).unwrap();
        assert_eq!(&bytes[..4], b"WEMB");
        assert_eq!(&bytes[4..8], &[2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 16);
        let (dim, recs) = decode_sidecar(&bytes).unwrap();
        assert_eq!(dim, 2);
        assert_eq!(recs, vec![vec![1.0, -0.5], vec![0.25, 3.0]]);
    }

    #[test]
    fn sidecar_rejects_bad_input() {
        assert!(decode_sidecar(b"WEM").is_err());
        assert!(decode_sidecar(b"XEMB\x01\0\0\0").is_err());
        assert!(decode_sidecar(b"WEMB\x02\0\0\0\0\0\x80\x3f").is_err());
        assert_eq!(decode_sidecar(b"WEMB\x01\0\0\0").unwrap(), (1, Vec::new()));
    }

    #[test]
    fn record_parses_spec_fields() {
        let line = r#"{"camera_id":"c1","zone_point":"P2","track_id":"t","class":"truck","timestamp_s":3.5,"lane_id":2,"embedding":[1,0]}"#;
        let r: ObservationRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.zone_point, ZonePoint::Exit);
        assert_eq!(r.class, VehicleClass::Truck);
        assert_eq!(r.embedding, Some(vec![1.0, 0.0]));
        let bad = line.replace("truck", "bus");
        assert!(serde_json::from_str::<ObservationRecord>(&bad).is_err());
    }
}
