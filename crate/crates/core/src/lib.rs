//! Cross-camera vehicle matching for highway weaving zones.
//!
//! Vehicles observed at a zone's entry (P1) and exit (P2) cameras are paired
//! by appearance embeddings under class, timing and travel-time constraints.
//! The matched sample is then scaled into lane-to-lane flow estimates.
//!
//! Module map:
//! - [`model`]: observations, zone configuration, dataset validation.
//! - [`embed`]: cosine similarity kernel and threshold masks.
//! - [`assign`]: constrained cost matrix and the assignment solver.
//! - [`weave`]: lane-pair counts, flow estimation, reports.
//! - [`evalkit`]: match metrics, CMC/mAP and loss diagnostics.
//! - [`synth`]: synthetic scenarios and a brute-force matching oracle.

pub mod assign;
pub mod embed;
pub mod evalkit;
pub mod model;
pub mod synth;
pub mod weave;

pub use assign::{
    build_cost_matrix, extract_matches, match_zone, solve_assignment, Assignment, AssignError,
    CostMatrix,
};
pub use embed::{cosine_distance, cosine_similarity, similarity_matrix, EmbedError, SimilarityMatrix};
pub use model::{
    validate_dataset, Embedding, MatchedPair, ModelError, Observation, TimeTerm, ValidationReport,
    VehicleClass, ZoneConfig, ZonePoint,
};
