//! Matching and retrieval metrics, plus the re-identification training
//! losses evaluated as plain scalars.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine_similarity, EmbedError};
use crate::model::{Embedding, MatchedPair};

/// Probabilities are clamped to this floor before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("total detected vehicles must be > 0")]
    ZeroDetected,
    #[error("{matches} system matches exceed {detected} detected vehicles")]
    MatchesExceedDetected { matches: u64, detected: u64 },
    #[error("query set is empty")]
    EmptyQuery,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query {0} has no gallery item with its identity")]
    QueryIdentityAbsentFromGallery(usize),
    #[error("row {row}: {reason}")]
    InvalidDistribution { row: usize, reason: String },
    #[error("batch sizes differ ({0:?})")]
    CountMismatch(Vec<usize>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("embedding dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Counts behind the TPR and precision figures.
///
/// TPR here is coverage: system matches over all detected vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchMetrics {
    pub true_positives: u64,
    pub false_positives: u64,
    pub system_matches: u64,
    pub total_detected: u64,
    pub tpr: f64,
    pub precision: f64,
}

impl MatchMetrics {
    pub fn from_counts(true_positives: u64, false_positives: u64, total_detected: u64) -> Result<Self, EvalError> {
        if total_detected == 0 {
            return Err(EvalError::ZeroDetected);
        }
        let system_matches = true_positives + false_positives;
        if system_matches > total_detected {
            return Err(EvalError::MatchesExceedDetected { matches: system_matches, detected: total_detected });
        }
        let precision = if system_matches == 0 { 0.0 } else { true_positives as f64 / system_matches as f64 };
        Ok(MatchMetrics {
            true_positives,
            false_positives,
            system_matches,
            total_detected,
            tpr: system_matches as f64 / total_detected as f64,
            precision,
        })
    }
}

pub fn match_metrics(
    predicted: &[MatchedPair],
    ground_truth: &BTreeSet<(String, String)>,
    total_detected: u64,
) -> Result<MatchMetrics, EvalError> {
    let tp = predicted
        .iter()
        .filter(|p| ground_truth.contains(&(p.entry_track.clone(), p.exit_track.clone())))
        .count() as u64;
    MatchMetrics::from_counts(tp, predicted.len() as u64 - tp, total_detected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k - 1]` is the rank-k hit rate.
    pub cmc: Vec<f64>,
}

impl ReidMetrics {
    /// Rank-k hit rate, 1-based. Ranks past the computed range repeat the last value.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }
}

/// CMC curve and mean average precision for cosine-similarity retrieval.
///
/// Each query ranks the whole gallery by descending similarity (ties keep
/// gallery order). Average precision is taken over all gallery items sharing
/// the query's identity.
pub fn cmc_map<I: PartialEq>(
    query: &[(Embedding, I)],
    gallery: &[(Embedding, I)],
    max_rank: usize,
) -> Result<ReidMetrics, EvalError> {
    if query.is_empty() {
        return Err(EvalError::EmptyQuery);
    }
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    for (qi, (q, id)) in query.iter().enumerate() {
        let mut scored = gallery
            .iter()
            .enumerate()
            .map(|(gi, (g, gid))| Ok((cosine_similarity(q, g)?, gi, gid == id)))
            .collect::<Result<Vec<_>, EvalError>>()?;
        let relevant = scored.iter().filter(|s| s.2).count();
        if relevant == 0 {
            return Err(EvalError::QueryIdentityAbsentFromGallery(qi));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let first_hit = scored.iter().position(|s| s.2).expect("relevant item exists");
        for h in hits.iter_mut().skip(first_hit) {
            *h += 1;
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, s) in scored.iter().enumerate() {
            if s.2 {
                found += 1;
                precision_sum += found as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += precision_sum / relevant as f64;
    }
    let n = query.len() as f64;
    Ok(ReidMetrics {
        map: ap_sum / n,
        cmc: hits.into_iter().map(|h| h as f64 / n).collect(),
    })
}

/// Cross-entropy against one-hot labels, summed over the batch.
pub fn id_loss(predicted: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    if predicted.len() != labels.len() {
        return Err(EvalError::CountMismatch(vec![predicted.len(), labels.len()]));
    }
    let mut loss = 0.0;
    for (row, (p, &label)) in predicted.iter().zip(labels).enumerate() {
        let bad = |reason: String| EvalError::InvalidDistribution { row, reason };
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(bad("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(bad(format!("probabilities sum to {sum}")));
        }
        let Some(&p_true) = p.get(label) else {
            return Err(bad(format!("label {label} out of range for {} classes", p.len())));
        };
        loss -= p_true.max(PROBABILITY_FLOOR).ln();
    }
    Ok(loss)
}

fn euclidean(a: &Embedding, b: &Embedding) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `ln(1 + sum_j exp(x_j))` without overflow.
fn log1p_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(0.0, f64::max);
    if m == 0.0 {
        return xs.iter().map(|x| x.exp()).sum::<f64>().ln_1p();
    }
    m + ((-m).exp() + xs.iter().map(|x| (x - m).exp()).sum::<f64>()).ln()
}

/// Batch soft-margin triplet loss with Euclidean distances; every negative
/// in the batch is contrasted with every anchor.
pub fn soft_triplet_loss(
    anchors: &[Embedding],
    positives: &[Embedding],
    negatives: &[Embedding],
) -> Result<f64, EvalError> {
    let n = anchors.len();
    if positives.len() != n || negatives.len() != n {
        return Err(EvalError::CountMismatch(vec![n, positives.len(), negatives.len()]));
    }
    if n == 0 {
        return Err(EvalError::EmptyBatch);
    }
    let mut total = 0.0;
    for (a, p) in anchors.iter().zip(positives) {
        let d_ap = euclidean(a, p)?;
        let margins = negatives
            .iter()
            .map(|neg| Ok(d_ap - euclidean(a, neg)?))
            .collect::<Result<Vec<_>, EvalError>>()?;
        total += log1p_sum_exp(&margins);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    fn pair(a: &str, b: &str) -> MatchedPair {
        MatchedPair {
            entry_track: a.into(),
            exit_track: b.into(),
            total_cost: 0.0,
            appearance_cost: 0.0,
            time_cost: 0.0,
            similarity: 1.0,
        }
    }

    #[test]
    fn metrics_from_pairs() {
        let truth: BTreeSet<_> = (0..6).map(|i| (format!("e{i}"), format!("x{i}"))).collect();
        let mut predicted: Vec<_> = (0..6).map(|i| pair(&format!("e{i}"), &format!("x{i}"))).collect();
        predicted.push(pair("e6", "x0"));
        predicted.push(pair("e7", "x9"));
        let m = match_metrics(&predicted, &truth, 100).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.system_matches), (6, 2, 8));
        assert!((m.tpr - 0.08).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);

        let m = match_metrics(&[], &truth, 10).unwrap();
        assert_eq!((m.tpr, m.precision), (0.0, 0.0));
        assert_eq!(match_metrics(&[], &truth, 0), Err(EvalError::ZeroDetected));
    }

    #[test]
    fn precision_counts_correct_share_of_system_matches() {
        // 947 of 1000 system matches correct reads as 94.7% precision.
        let m = MatchMetrics::from_counts(947, 53, 2208).unwrap();
        assert!((m.precision * 100.0 - 94.7).abs() < 1e-9);
        assert!(matches!(MatchMetrics::from_counts(5, 5, 9), Err(EvalError::MatchesExceedDetected { .. })));
    }

    #[test]
    fn cmc_examples() {
        let r = cmc_map(&[(e(&[1.0, 0.0]), 7)], &[(e(&[1.0, 0.0]), 7)], 1).unwrap();
        assert_eq!((r.cmc.clone(), r.map), (vec![1.0], 1.0));

        // Correct item second of three.
        let gallery = [(e(&[1.0, 0.1]), 'b'), (e(&[0.9, 0.5]), 'a'), (e(&[0.0, 1.0]), 'c')];
        let r = cmc_map(&[(e(&[1.0, 0.0]), 'a')], &gallery, 3).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
        assert!((r.map - 0.5).abs() < 1e-12);

        // One rank-1 hit, one rank-3 hit.
        let gallery = [(e(&[1.0, 0.0]), 'a'), (e(&[0.8, 0.6]), 'x'), (e(&[0.6, 0.8]), 'b')];
        let queries = [(e(&[1.0, 0.0]), 'a'), (e(&[1.0, 0.05]), 'b')];
        let r = cmc_map(&queries, &gallery, 3).unwrap();
        assert_eq!(r.rank(1), 0.5);
        assert_eq!(r.rank(3), 1.0);
        assert!((r.map - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.rank(10), 1.0);
    }

    #[test]
    fn cmc_errors() {
        let g = [(e(&[1.0]), 1)];
        assert_eq!(cmc_map::<i32>(&[], &g, 1), Err(EvalError::EmptyQuery));
        assert_eq!(cmc_map(&[(e(&[1.0]), 1)], &[], 1), Err(EvalError::EmptyGallery));
        assert_eq!(
            cmc_map(&[(e(&[1.0]), 1), (e(&[1.0]), 2)], &g, 1),
            Err(EvalError::QueryIdentityAbsentFromGallery(1))
        );
    }

    #[test]
    fn id_loss_examples() {
        assert_eq!(id_loss(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        assert!((id_loss(&[vec![0.25; 4]], &[2]).unwrap() - 4f64.ln()).abs() < 1e-9);
        let l = id_loss(&[vec![0.5, 0.5], vec![0.25, 0.75]], &[0, 0]).unwrap();
        assert!((l - (2f64.ln() + 4f64.ln())).abs() < 1e-9);
        // Clamped before the log.
        assert!((id_loss(&[vec![1.0, 0.0]], &[1]).unwrap() - (-PROBABILITY_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn id_loss_rejects_bad_rows() {
        assert!(matches!(id_loss(&[vec![0.5, 0.4]], &[0]), Err(EvalError::InvalidDistribution { row: 0, .. })));
        assert!(matches!(id_loss(&[vec![1.5, -0.5]], &[0]), Err(EvalError::InvalidDistribution { .. })));
        assert!(matches!(id_loss(&[vec![1.0]], &[3]), Err(EvalError::InvalidDistribution { .. })));
        assert!(matches!(id_loss(&[vec![1.0]], &[]), Err(EvalError::CountMismatch(_))));
    }

    #[test]
    fn triplet_examples() {
        // d(a,p) = d(a,n) = 1
        let l = soft_triplet_loss(&[e(&[0.0, 0.0])], &[e(&[1.0, 0.0])], &[e(&[0.0, 1.0])]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-9);
        // d(a,p) = 0, d(a,n) = 10
        let l = soft_triplet_loss(&[e(&[0.0, 0.0])], &[e(&[0.0, 0.0])], &[e(&[6.0, 8.0])]).unwrap();
        assert!((l - (-10f64).exp().ln_1p()).abs() < 1e-12);
        assert!((l - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn triplet_batch_against_scalar_sums() {
        let a = [e(&[0.0, 0.0]), e(&[1.0, 1.0])];
        let p = [e(&[0.0, 1.0]), e(&[1.0, 3.0])];
        let n = [e(&[3.0, 4.0]), e(&[1.0, 1.5])];
        // d(a1,p1)=1; d(a1,n1)=5, d(a1,n2)=sqrt(3.25)
        let s1 = (1.0f64 - 5.0).exp() + (1.0 - 3.25f64.sqrt()).exp();
        // d(a2,p2)=2; d(a2,n1)=sqrt(13), d(a2,n2)=0.5
        let s2 = (2.0 - 13f64.sqrt()).exp() + (2.0f64 - 0.5).exp();
        let expected = ((1.0 + s1).ln() + (1.0 + s2).ln()) / 2.0;
        assert!((soft_triplet_loss(&a, &p, &n).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn triplet_errors_and_extremes() {
        let one = [e(&[0.0])];
        assert!(matches!(soft_triplet_loss(&one, &[], &one), Err(EvalError::CountMismatch(_))));
        assert_eq!(soft_triplet_loss(&[], &[], &[]), Err(EvalError::EmptyBatch));
        assert!(matches!(
            soft_triplet_loss(&one, &[e(&[0.0, 1.0])], &one),
            Err(EvalError::DimensionMismatch { .. })
        ));
        // Huge positive margin stays finite: ln(1 + e^1000) ~ 1000
        let l = soft_triplet_loss(&[e(&[0.0])], &[e(&[1000.0])], &[e(&[0.0])]).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn id_loss_is_non_negative(rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..6)) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            }).collect();
            let labels: Vec<usize> = (0..probs.len()).map(|i| i % 3).collect();
            prop_assert!(id_loss(&probs, &labels).unwrap() > 0.0);
        }

        #[test]
        fn triplet_loss_falls_as_negatives_move_away(
            pts in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 9),
            stretch in 1.01f64..3.0,
            which in 0usize..3,
        ) {
            let v: Vec<_> = pts.iter().map(|p| e(p)).collect();
            let (a, p, n) = (&v[0..3], &v[3..6], &v[6..9]);
            let base = soft_triplet_loss(a, p, n).unwrap();
            // Shift one negative far away from every anchor.
            let mut moved = n.to_vec();
            let far: Vec<f64> = n[which].as_slice().iter().map(|x| x + 100.0 * stretch).collect();
            moved[which] = e(&far);
            prop_assert!(soft_triplet_loss(a, p, &moved).unwrap() < base);
        }

        #[test]
        fn cmc_is_monotone(
            query in proptest::collection::vec((proptest::collection::vec(-1.0f64..1.0, 3), 0u8..4), 1..8),
            extra in proptest::collection::vec((proptest::collection::vec(-1.0f64..1.0, 3), 0u8..4), 0..12),
        ) {
            let mut gallery: Vec<(Embedding, u8)> = (0..4).map(|i| (e(&[1.0, f64::from(i), 0.5]), i)).collect();
            gallery.extend(extra.iter().map(|(v, i)| (e(v), *i)));
            let query: Vec<_> = query
                .iter()
                .filter(|(v, _)| v.iter().any(|x| x.abs() > 1e-6))
                .map(|(v, i)| (e(v), *i))
                .collect();
            prop_assume!(!query.is_empty() && gallery.iter().all(|(v, _)| v.norm() > 1e-6));
            let m = cmc_map(&query, &gallery, gallery.len()).unwrap();
            prop_assert!(m.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*m.cmc.last().unwrap(), 1.0);
            prop_assert!((0.0..=1.0).contains(&m.map));
        }

        #[test]
        fn metrics_ignore_prediction_order(
            hits in proptest::collection::vec(proptest::bool::ANY, 0..20),
            seed in proptest::prelude::any::<u64>(),
        ) {
            let predicted: Vec<_> = hits
                .iter()
                .enumerate()
                .map(|(i, &hit)| pair(&format!("e{i}"), &format!("{}{i}", if hit { "x" } else { "y" })))
                .collect();
            let truth: BTreeSet<_> = (0..20).map(|i| (format!("e{i}"), format!("x{i}"))).collect();
            let mut shuffled = predicted.clone();
            shuffled.rotate_left((seed as usize) % predicted.len().max(1));
            shuffled.reverse();
            prop_assert_eq!(match_metrics(&predicted, &truth, 40).unwrap(), match_metrics(&shuffled, &truth, 40).unwrap());
        }
    }
}
