//! Dense anchor generation, binary label assignment against ground truth,
//! and the two sampling procedures: the standard 256-anchor sampler for
//! annotated images and the top-likelihood sampler that concentrates on
//! the highest-scored anchors of an unannotated image.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, BoxDelta};
use crate::{Error, Result};

pub const RPN_BATCH: usize = 256;
pub const RPN_MAX_POSITIVE: usize = 128;
pub const POSITIVE_IOU: f64 = 0.7;
pub const NEGATIVE_IOU: f64 = 0.3;

/// Anchor grid configuration. Scales are square side lengths in pixels;
/// the (scale s, ratio r) anchor has width s*sqrt(r) and height s/sqrt(r),
/// preserving area s^2.
///
/// The default scales read the usual (4^2 .. 64^2) notation as anchor
/// areas, i.e. side lengths 4..64 px; on 512 px inputs larger sides would
/// be implausible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride: 16,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Dense anchors for one image together with labels, model-filled
/// objectness scores, and regression targets for the positive anchors.
#[derive(Debug, Clone)]
pub struct AnchorField {
    pub anchors: Vec<BBox>,
    pub labels: Vec<AnchorLabel>,
    pub scores: Vec<f64>,
    /// Regression target per anchor; meaningful only where the label is
    /// positive.
    pub reg_targets: Vec<BoxDelta>,
}

impl AnchorField {
    pub fn build(image_side: usize, config: &AnchorConfig, gt: &[BBox]) -> Result<Self> {
        let anchors = generate_anchors(image_side, config)?;
        let labels = assign_labels(&anchors, gt);
        let mut reg_targets = vec![BoxDelta::ZERO; anchors.len()];
        for (i, label) in labels.iter().enumerate() {
            if *label == AnchorLabel::Positive {
                // best-overlapping ground truth defines the target
                let best = gt
                    .iter()
                    .max_by(|a, b| {
                        iou(&anchors[i], a).partial_cmp(&iou(&anchors[i], b)).unwrap()
                    })
                    .expect("positive label requires ground truth");
                reg_targets[i] = crate::geometry::encode(best, &anchors[i])?;
            }
        }
        let n = anchors.len();
        Ok(AnchorField {
            anchors,
            labels,
            scores: vec![0.0; n],
            reg_targets,
        })
    }
}

/// Tile anchors over the stride grid of a square image. Anchors are
/// ordered location-major (row, column), then scale-major, ratio-minor
/// within a location. Cross-boundary anchors are kept.
pub fn generate_anchors(image_side: usize, config: &AnchorConfig) -> Result<Vec<BBox>> {
    if config.stride == 0 || image_side % config.stride != 0 {
        return Err(Error::Config(format!(
            "stride {} does not divide image side {}",
            config.stride, image_side
        )));
    }
    let grid = image_side / config.stride;
    let mut anchors = Vec::with_capacity(grid * grid * config.anchors_per_location());
    for gy in 0..grid {
        for gx in 0..grid {
            let cx = (gx as f64 + 0.5) * config.stride as f64;
            let cy = (gy as f64 + 0.5) * config.stride as f64;
            for &s in &config.scales {
                for &r in &config.aspect_ratios {
                    let w = s * r.sqrt();
                    let h = s / r.sqrt();
                    anchors.push(BBox {
                        x_min: cx - 0.5 * w,
                        y_min: cy - 0.5 * h,
                        x_max: cx + 0.5 * w,
                        y_max: cy + 0.5 * h,
                    });
                }
            }
        }
    }
    Ok(anchors)
}

/// Assign a binary label per anchor. Positive: the anchor attains the
/// maximum IoU for some ground-truth box (when that maximum is nonzero),
/// or overlaps any ground truth above 0.7. Negative: maximum overlap over
/// all ground truth below 0.3. Everything else is ignored. With no ground
/// truth, every anchor is negative.
pub fn assign_labels(anchors: &[BBox], gt: &[BBox]) -> Vec<AnchorLabel> {
    if gt.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut max_iou = vec![0.0f64; anchors.len()];
    let mut gt_max = vec![0.0f64; gt.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let v = iou(a, g);
            if v > max_iou[ai] {
                max_iou[ai] = v;
            }
            if v > gt_max[gi] {
                gt_max[gi] = v;
            }
        }
    }
    for (ai, &m) in max_iou.iter().enumerate() {
        labels[ai] = if m > POSITIVE_IOU {
            AnchorLabel::Positive
        } else if m < NEGATIVE_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    // argmax clause: each ground truth promotes its best anchors
    for (gi, g) in gt.iter().enumerate() {
        if gt_max[gi] <= 0.0 {
            continue;
        }
        for (ai, a) in anchors.iter().enumerate() {
            if iou(a, g) == gt_max[gi] {
                labels[ai] = AnchorLabel::Positive;
            }
        }
    }
    labels
}

/// Sample the standard 256-anchor RPN batch for an annotated image:
/// up to 128 positives uniformly without replacement, padded with
/// uniformly drawn negatives to exactly 256. Ignored anchors are never
/// sampled. Returns (positive indices, negative indices).
pub fn sample_positive_image<R: Rng>(
    labels: &[AnchorLabel],
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut positives: Vec<usize> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive => positives.push(i),
            AnchorLabel::Negative => negatives.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    if positives.len() + negatives.len() < RPN_BATCH {
        return Err(Error::Invalid(format!(
            "only {} non-ignore anchors, need {}",
            positives.len() + negatives.len(),
            RPN_BATCH
        )));
    }
    positives.shuffle(rng);
    positives.truncate(RPN_MAX_POSITIVE);
    let need_neg = RPN_BATCH - positives.len();
    if negatives.len() < need_neg {
        return Err(Error::Invalid(format!(
            "only {} negative anchors, need {}",
            negatives.len(),
            need_neg
        )));
    }
    negatives.shuffle(rng);
    negatives.truncate(need_neg);
    Ok((positives, negatives))
}

/// Indices of the 256 highest scores (all of them when fewer than 256
/// anchors exist). Ties are broken by lower anchor index so the result is
/// deterministic.
pub fn sample_top_likelihood(scores: &[f64]) -> Vec<usize> {
    top_k_indices(scores, RPN_BATCH)
}

/// Indices of the k largest scores, ties broken by lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    order.truncate(k);
    order
}
