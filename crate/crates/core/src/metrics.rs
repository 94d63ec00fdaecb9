//! Both evaluation protocols: detection average precision at a fixed IoU
//! match threshold, and patient-level screening metrics (confusion
//! counts, sensitivity/specificity/accuracy, ROC and AUC).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Polarity};
use crate::geometry::{iou, BBox};
use crate::model::Detection;
use crate::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;
pub const PATIENT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// True when there were no ground truths and no detections, in which
    /// case mAP is reported as 1.0 by convention.
    pub map_degenerate: bool,
    pub confusion: ConfusionCounts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

pub struct ApOutcome {
    pub ap: f64,
    pub degenerate: bool,
}

/// Average precision with all-point interpolation. Detections and ground
/// truths are aligned per image; matching is greedy by descending score,
/// each ground truth matched at most once, IoU at or above the threshold.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<BBox>],
    iou_threshold: f64,
) -> Result<ApOutcome> {
    if detections.len() != ground_truths.len() {
        return Err(Error::Shape(format!(
            "average_precision: {} detection lists vs {} ground-truth lists",
            detections.len(),
            ground_truths.len()
        )));
    }
    let total_gt: usize = ground_truths.iter().map(Vec::len).sum();
    let total_det: usize = detections.iter().map(Vec::len).sum();
    if total_gt == 0 && total_det == 0 {
        return Ok(ApOutcome {
            ap: 1.0,
            degenerate: true,
        });
    }
    if total_gt == 0 {
        return Ok(ApOutcome {
            ap: 0.0,
            degenerate: false,
        });
    }

    // flatten, sort by descending score (stable on ties)
    let mut flat: Vec<(usize, &Detection)> = Vec::with_capacity(total_det);
    for (img, dets) in detections.iter().enumerate() {
        for d in dets {
            flat.push((img, d));
        }
    }
    flat.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());

    let mut matched: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
    let mut tps = Vec::with_capacity(flat.len());
    for (img, det) in flat {
        let gts = &ground_truths[img];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let v = iou(&det.bbox, g);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[img][gi] = true;
                tps.push(true);
            }
            None => tps.push(false),
        }
    }

    // precision-recall curve, then the area under the interpolated curve
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tps.len());
    for (i, &is_tp) in tps.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut prev_recall = 0.0;
    let mut idx = 0;
    while idx < points.len() {
        let recall = points[idx].0;
        if recall > prev_recall {
            let p_interp = points[idx..]
                .iter()
                .map(|&(_, p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            ap += (recall - prev_recall) * p_interp;
            prev_recall = recall;
        }
        idx += 1;
    }
    Ok(ApOutcome {
        ap,
        degenerate: false,
    })
}

/// Max detection confidence per patient; 0 for patients with no
/// detections. `patients` is the full patient roster; a detection carrying
/// an unknown patient id is rejected.
pub fn patient_score(
    patients: &[String],
    detections: &[(String, f64)],
) -> Result<BTreeMap<String, f64>> {
    let mut scores: BTreeMap<String, f64> =
        patients.iter().map(|p| (p.clone(), 0.0)).collect();
    for (pid, s) in detections {
        match scores.get_mut(pid) {
            Some(v) => *v = v.max(*s),
            None => {
                return Err(Error::Invalid(format!(
                    "detection references unknown patient id {pid}"
                )))
            }
        }
    }
    Ok(scores)
}

/// Tally patient-level confusion counts. A patient is predicted positive
/// when their score strictly exceeds the threshold.
pub fn classify_patients(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "classify_patients: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fn_: 0,
        tn: 0,
        fp: 0,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > threshold, y) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
        }
    }
    Ok(c)
}

/// Sensitivity, specificity and accuracy. A metric with a zero
/// denominator is reported as `None` rather than silently 0.
pub fn sens_spec_acc(c: &ConfusionCounts) -> (Option<f64>, Option<f64>, Option<f64>) {
    let frac = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    (
        frac(c.tp, c.tp + c.fn_),
        frac(c.tn, c.tn + c.fp),
        frac(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
    )
}

/// ROC curve by threshold sweep over the distinct scores (plus sentinels)
/// and its trapezoidal area. Requires at least one positive and one
/// negative label.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "roc_auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid(
            "roc_auc needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        // consume the whole tie group at this threshold
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    if let Some(last) = points.last() {
        if last.fpr < 1.0 || last.tpr < 1.0 {
            points.push(RocPoint {
                fpr: 1.0,
                tpr: 1.0,
                threshold: f64::NEG_INFINITY,
            });
        } else {
            points.last_mut().unwrap().threshold = f64::NEG_INFINITY;
        }
    }
    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * 0.5 * (w[0].tpr + w[1].tpr);
    }
    Ok((points, auc))
}

/// Run the whole evaluation protocol over per-image detections aligned
/// with the manifest records.
pub fn evaluate_detections(
    records: &[ImageRecord],
    detections: &[Vec<Detection>],
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Invalid("evaluation over an empty record set".into()));
    }
    if records.len() != detections.len() {
        return Err(Error::Shape(format!(
            "{} records vs {} detection lists",
            records.len(),
            detections.len()
        )));
    }
    let gts: Vec<Vec<BBox>> = records.iter().map(|r| r.boxes.clone()).collect();
    let ap = average_precision(detections, &gts, MATCH_IOU)?;

    let mut patients: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    patients.sort();
    patients.dedup();
    let mut patient_label: BTreeMap<&str, bool> = BTreeMap::new();
    for r in records {
        let e = patient_label.entry(&r.patient_id).or_insert(false);
        *e |= r.polarity == Polarity::Positive;
    }
    let flat: Vec<(String, f64)> = records
        .iter()
        .zip(detections)
        .flat_map(|(r, dets)| dets.iter().map(|d| (r.patient_id.clone(), d.score)))
        .collect();
    let score_map = patient_score(&patients, &flat)?;
    let scores: Vec<f64> = patients.iter().map(|p| score_map[p]).collect();
    let labels: Vec<bool> = patients.iter().map(|p| patient_label[p.as_str()]).collect();

    let confusion = classify_patients(&scores, &labels, PATIENT_THRESHOLD)?;
    let (sensitivity, specificity, accuracy) = sens_spec_acc(&confusion);
    let (roc, auc) = roc_auc(&scores, &labels)?;
    Ok(EvalReport {
        map: ap.ap,
        map_degenerate: ap.degenerate,
        confusion,
        sensitivity,
        specificity,
        accuracy,
        auc,
        roc,
    })
}
