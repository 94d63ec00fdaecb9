//! The training objectives: binary cross entropy, the top likelihood loss
//! over the highest-scored anchors of an unannotated image, the composite
//! RPN loss, the cosine similarity loss over paired classification
//! vectors, and the composite detection-head loss.

use serde::{Deserialize, Serialize};

use crate::anchors::{sample_top_likelihood, top_k_indices};
use crate::autodiff::{Graph, Var, CLAMP_EPS};
use crate::{Error, Result};

/// Balancing parameters for the composite losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.1,
        }
    }
}

/// K feature-vector pairs: rows of X1 come from the annotated image's
/// foreground proposals, rows of X2 from the unannotated image's
/// top-K-scored anchor proposals. Every row is a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPairs {
    pub x1: Vec<Vec<f64>>,
    pub x2: Vec<Vec<f64>>,
}

impl SimilarityPairs {
    pub fn empty() -> Self {
        SimilarityPairs {
            x1: Vec::new(),
            x2: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.x1.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1.len() != self.x2.len() {
            return Err(Error::Shape(format!(
                "pair count mismatch: {} vs {}",
                self.x1.len(),
                self.x2.len()
            )));
        }
        for row in self.x1.iter().chain(self.x2.iter()) {
            if row.len() != self.x1.first().map_or(0, Vec::len) {
                return Err(Error::Shape("pair vector dimension mismatch".into()));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!(
                    "pair vector is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(())
    }
}

/// Binary cross entropy of a single probability against a 0/1 label,
/// with the probability clamped to [CLAMP_EPS, 1 - CLAMP_EPS].
pub fn binary_ce(p: f64, label: f64) -> f64 {
    let pc = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    -label * pc.ln() - (1.0 - label) * (1.0 - pc).ln()
}

/// Plain (non-graph) top likelihood loss: mean background cross entropy
/// over the top-256 scores.
pub fn top_likelihood_loss_value(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("top likelihood loss on empty scores".into()));
    }
    let idx = sample_top_likelihood(scores);
    let n = idx.len() as f64;
    Ok(idx.iter().map(|&i| binary_ce(scores[i], 0.0)).sum::<f64>() / n)
}

/// Plain (non-graph) similarity loss: mean cosine over the K pairs,
/// 0 when K = 0.
pub fn similarity_loss_value(pairs: &SimilarityPairs) -> Result<f64> {
    pairs.validate()?;
    if pairs.k() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (a, b) in pairs.x1.iter().zip(&pairs.x2) {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += dot / (na * nb);
    }
    Ok(total / pairs.k() as f64)
}

// ---- graph-building variants used by training ----

/// Mean background cross entropy over the 256 highest scores of an
/// unannotated image (all scores when fewer than 256 exist). Gradient is
/// zero for the unselected anchors.
pub fn top_likelihood_loss(g: &mut Graph, scores: Var) -> Result<Var> {
    let values = g.value(scores);
    if values.is_empty() {
        return Err(Error::Invalid("top likelihood loss on empty scores".into()));
    }
    let idx = sample_top_likelihood(values.data());
    let n = idx.len();
    let sel = g.index_select(scores, vec![n], idx);
    Ok(g.bce_mean(sel, vec![0.0; n]))
}

/// RPN loss of the annotated image: mean classification cross entropy
/// over the 256 sampled anchors plus lambda1 times the smooth-L1
/// regression term over the sampled positive anchors, normalized by the
/// anchor-location count.
pub struct RpnPositiveTerms {
    /// Scores of the 256 sampled anchors with their 0/1 labels.
    pub sampled_scores: Var,
    pub sampled_labels: Vec<f64>,
    /// Predicted deltas of the sampled positive anchors, [P, 4]; empty
    /// positive set is represented as `None`.
    pub positive_deltas: Option<Var>,
    pub positive_targets: Vec<f64>,
    /// Number of anchor locations (feature-grid cells), the regression
    /// normalizer.
    pub location_count: usize,
}

pub struct RpnPositiveLoss {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
}

pub fn rpn_positive_loss(
    g: &mut Graph,
    terms: &RpnPositiveTerms,
    lambda1: f64,
) -> RpnPositiveLoss {
    let cls = g.bce_mean(terms.sampled_scores, terms.sampled_labels.clone());
    let reg = match terms.positive_deltas {
        Some(deltas) => {
            let sum = g.smooth_l1_sum(deltas, terms.positive_targets.clone());
            g.scale(sum, 1.0 / terms.location_count as f64)
        }
        None => g.constant_scalar(0.0),
    };
    let total = g.weighted_sum(&[(cls, 1.0), (reg, lambda1)]);
    RpnPositiveLoss { cls, reg, total }
}

/// Composite RPN loss over the pair: positive-image classification and
/// regression plus lambda2 times the top likelihood loss of the
/// unannotated image.
pub fn rpn_total_loss(
    g: &mut Graph,
    pos: &RpnPositiveLoss,
    tlloss: Var,
    w: &LossWeights,
) -> Var {
    g.weighted_sum(&[(pos.cls, 1.0), (pos.reg, w.lambda1), (tlloss, w.lambda2)])
}

/// Composite detection-head loss: classification plus lambda3 times
/// regression plus lambda4 times the similarity loss.
pub fn fast_rcnn_total_loss(g: &mut Graph, cls: Var, reg: Var, sim: Var, w: &LossWeights) -> Var {
    g.weighted_sum(&[(cls, 1.0), (reg, w.lambda3), (sim, w.lambda4)])
}

/// Pick the pair indices for the similarity loss: the i-th foreground
/// proposal of the annotated image against the i-th highest-scored anchor
/// of the unannotated image. K is the foreground count, capped by `k_cap`
/// and by the number of available anchors.
pub fn select_similarity_indices(
    foreground_rows: &[usize],
    neg_anchor_scores: &[f64],
    k_cap: usize,
) -> (Vec<usize>, Vec<usize>) {
    let k = foreground_rows.len().min(k_cap).min(neg_anchor_scores.len());
    let pos_rows = foreground_rows[..k].to_vec();
    let neg_anchors = top_k_indices(neg_anchor_scores, k);
    (pos_rows, neg_anchors)
}

/// Graph similarity loss over paired probability rows; constant 0 when
/// there are no pairs.
pub fn similarity_loss(g: &mut Graph, x1: Option<Var>, x2: Option<Var>) -> Var {
    match (x1, x2) {
        (Some(a), Some(b)) => g.cosine_pairs_mean(a, b),
        _ => g.constant_scalar(0.0),
    }
}
