//! The paired training loop: each iteration draws one annotated and one
//! unannotated image, builds the full two-stage loss over the pair, and
//! takes one Adam step. All randomness is derived from (seed, iteration),
//! so runs are bitwise reproducible and resumable.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{sample_positive_image, AnchorConfig, AnchorField};
use crate::autodiff::{AdamConfig, Graph, Tensor};
use crate::dataset::{self, ImageRecord, Manifest};
use crate::geometry::{decode, encode, iou, BBox, BoxDelta};
use crate::losses::{
    fast_rcnn_total_loss, rpn_positive_loss, rpn_total_loss, select_similarity_indices,
    similarity_loss, top_likelihood_loss, LossWeights, RpnPositiveTerms,
};
use crate::model::{
    backbone_forward, detection_head_forward, propose, roi_pool, rpn_forward, Checkpoint,
    Detector, ModelConfig, CHECKPOINT_VERSION,
};
use crate::{Error, Result};

pub const LOSS_CSV_HEADER: &str =
    "iteration,lr,pclsloss,pregloss,tlloss,clsloss,regloss,simloss,total";

const SAMPLER_SALT: u64 = 0xA076_1D64_78BD_642F;
const POS_EPOCH_SALT: u64 = 0xE703_7ED1_A0B4_28DB;
const NEG_EPOCH_SALT: u64 = 0x8EBC_6AF0_9C88_C6E3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub image_side: usize,
    pub iterations: u64,
    pub base_lr: f64,
    /// Learning rate is divided by this factor every `lr_decay_period`
    /// iterations.
    pub lr_decay_factor: f64,
    pub lr_decay_period: u64,
    pub weights: LossWeights,
    pub anchors: AnchorConfig,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Proposals kept after RPN suppression during training.
    pub proposal_top_n: usize,
    pub proposal_nms: f64,
    /// Region batch size of the detection head.
    pub head_batch: usize,
    /// Overlap at which a proposal counts as foreground for the head.
    pub head_fg_iou: f64,
    /// Cap on the number of similarity pairs per iteration.
    pub sim_pair_cap: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_side: 512,
            iterations: 45_000,
            base_lr: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_period: 9_000,
            weights: LossWeights::default(),
            anchors: AnchorConfig::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            grad_clip: Some(10.0),
            seed: 0,
            proposal_top_n: 2000,
            proposal_nms: 0.7,
            head_batch: 64,
            head_fg_iou: 0.5,
            sim_pair_cap: 32,
            checkpoint_every: 1000,
            log_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.stride != self.model.backbone.stride() {
            return Err(Error::Config(format!(
                "anchor stride {} does not match backbone stride {}",
                self.anchors.stride,
                self.model.backbone.stride()
            )));
        }
        if self.model.anchors_per_location != self.anchors.anchors_per_location() {
            return Err(Error::Config(format!(
                "model expects {} anchors per location, anchor config defines {}",
                self.model.anchors_per_location,
                self.anchors.anchors_per_location()
            )));
        }
        if self.image_side % self.anchors.stride != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by stride {}",
                self.image_side, self.anchors.stride
            )));
        }
        if self.base_lr <= 0.0 || self.lr_decay_factor < 1.0 || self.lr_decay_period == 0 {
            return Err(Error::Config("bad learning-rate schedule".into()));
        }
        if self.head_batch == 0 || self.proposal_top_n == 0 {
            return Err(Error::Config("head batch and proposal count must be positive".into()));
        }
        Ok(())
    }

    /// Step learning-rate schedule: base divided by the decay factor once
    /// per completed decay period.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let drops = (iteration / self.lr_decay_period) as i32;
        self.base_lr / self.lr_decay_factor.powi(drops)
    }

    /// Whether this configuration uses the unannotated stream at all.
    /// With both of its weights at zero, training reduces exactly to the
    /// annotated-only pipeline.
    pub fn uses_negatives(&self) -> bool {
        self.weights.lambda2 != 0.0 || self.weights.lambda4 != 0.0
    }
}

/// Deterministic pair schedule: both streams are shuffled once per epoch
/// (independently, with epoch-specific permutations) and the shorter
/// stream simply recycles.
pub fn pair_at(seed: u64, iteration: u64, n_pos: usize, n_neg: usize) -> (usize, Option<usize>) {
    let pick = |n: usize, salt: u64| -> usize {
        let epoch = iteration / n as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        perm[(iteration % n as u64) as usize]
    };
    assert!(n_pos > 0, "pair_at needs at least one annotated image");
    let pos = pick(n_pos, POS_EPOCH_SALT);
    let neg = if n_neg > 0 {
        Some(pick(n_neg, NEG_EPOCH_SALT))
    } else {
        None
    };
    (pos, neg)
}

/// Per-iteration loss components in the order they appear in the CSV log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepComponents {
    pub pclsloss: f64,
    pub pregloss: f64,
    pub tlloss: f64,
    pub clsloss: f64,
    pub regloss: f64,
    pub simloss: f64,
    pub total: f64,
}

impl StepComponents {
    pub fn is_finite(&self) -> bool {
        [
            self.pclsloss,
            self.pregloss,
            self.tlloss,
            self.clsloss,
            self.regloss,
            self.simloss,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn dump(&self) -> String {
        format!(
            "pclsloss={} pregloss={} tlloss={} clsloss={} regloss={} simloss={} total={}",
            self.pclsloss,
            self.pregloss,
            self.tlloss,
            self.clsloss,
            self.regloss,
            self.simloss,
            self.total
        )
    }
}

struct HeadBatch {
    boxes: Vec<BBox>,
    labels: Vec<usize>,
    /// Rows of `boxes` that are foreground; always a prefix.
    foreground: Vec<usize>,
    /// Flattened regression targets, 4 per foreground row.
    reg_targets: Vec<f64>,
}

/// Assemble the detection-head region batch for the annotated image:
/// RPN proposals plus the ground-truth boxes, split by overlap into
/// foreground and background, foreground first.
fn build_head_batch(
    proposals: &[BBox],
    gt: &[BBox],
    fg_iou: f64,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<HeadBatch> {
    let mut fg: Vec<(BBox, usize)> = Vec::new();
    let mut bg: Vec<BBox> = Vec::new();
    for b in proposals.iter().chain(gt.iter()) {
        if b.width() <= 1e-6 || b.height() <= 1e-6 {
            continue;
        }
        let (best, best_iou) = gt
            .iter()
            .enumerate()
            .map(|(i, g)| (i, iou(b, g)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap_or((0, 0.0));
        if best_iou >= fg_iou {
            fg.push((*b, best));
        } else {
            bg.push(*b);
        }
    }
    fg.shuffle(rng);
    fg.truncate(batch / 2);
    if fg.is_empty() {
        return Err(Error::Invalid(
            "no foreground regions for the detection head".into(),
        ));
    }
    bg.shuffle(rng);
    bg.truncate(batch - fg.len());

    let mut boxes = Vec::with_capacity(fg.len() + bg.len());
    let mut labels = Vec::with_capacity(fg.len() + bg.len());
    let mut reg_targets = Vec::with_capacity(4 * fg.len());
    for (b, gi) in &fg {
        let d = encode(&gt[*gi], b)?;
        reg_targets.extend_from_slice(&[d.dx, d.dy, d.dw, d.dh]);
        boxes.push(*b);
        labels.push(1);
    }
    let foreground: Vec<usize> = (0..fg.len()).collect();
    for b in bg {
        boxes.push(b);
        labels.push(0);
    }
    Ok(HeadBatch {
        boxes,
        labels,
        foreground,
        reg_targets,
    })
}

/// Decode the given anchors of the unannotated image into region boxes
/// using the RPN's predicted deltas.
fn decode_anchor_boxes(
    anchor_idx: &[usize],
    deltas: &[f64],
    anchors: &[BBox],
    image_side: f64,
) -> Result<Vec<BBox>> {
    anchor_idx
        .iter()
        .map(|&i| {
            let d = BoxDelta {
                dx: deltas[4 * i],
                dy: deltas[4 * i + 1],
                dw: deltas[4 * i + 2].clamp(-6.0, 6.0),
                dh: deltas[4 * i + 3].clamp(-6.0, 6.0),
            };
            decode(&d, &anchors[i], Some(image_side))
        })
        .collect()
}

/// One optimization step over an image pair. The unannotated image is
/// ignored entirely when both of its loss weights are zero, so such a
/// configuration follows the annotated-only trajectory exactly.
pub fn train_step(
    detector: &mut Detector,
    cfg: &TrainConfig,
    pos_image: &Tensor,
    gt: &[BBox],
    neg_image: Option<&Tensor>,
    iteration: u64,
) -> Result<StepComponents> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ iteration.wrapping_mul(SAMPLER_SALT));
    let side = pos_image.shape()[1];
    let mut g = Graph::new();
    let bp = detector.params.bind(&mut g);

    // annotated image: RPN forward and the sampled classification batch
    let img = g.leaf(pos_image.clone());
    let feat_p = backbone_forward(&mut g, &bp, &cfg.model, img)?;
    let (scores_p, deltas_p) = rpn_forward(&mut g, &bp, &cfg.model, feat_p);
    let field = AnchorField::build(side, &cfg.anchors, gt)?;
    let (pos_idx, neg_idx) = sample_positive_image(&field.labels, &mut rng)?;
    let mut sampled = pos_idx.clone();
    sampled.extend_from_slice(&neg_idx);
    let mut sampled_labels = vec![1.0; pos_idx.len()];
    sampled_labels.extend(vec![0.0; neg_idx.len()]);
    let n_sampled = sampled.len();
    let sampled_scores = g.index_select(scores_p, vec![n_sampled], sampled);

    let (positive_deltas, positive_targets) = if pos_idx.is_empty() {
        (None, Vec::new())
    } else {
        let rows = g.gather_rows(deltas_p, &pos_idx);
        let targets: Vec<f64> = pos_idx
            .iter()
            .flat_map(|&i| {
                let t = field.reg_targets[i];
                [t.dx, t.dy, t.dw, t.dh]
            })
            .collect();
        (Some(rows), targets)
    };
    let grid = side / cfg.anchors.stride;
    let terms = RpnPositiveTerms {
        sampled_scores,
        sampled_labels,
        positive_deltas,
        positive_targets,
        location_count: grid * grid,
    };
    let rpn_pos = rpn_positive_loss(&mut g, &terms, cfg.weights.lambda1);

    // unannotated image: RPN forward, skipped entirely when unused
    let neg_branch = match (cfg.uses_negatives(), neg_image) {
        (true, Some(neg)) => {
            let img_n = g.leaf(neg.clone());
            let feat_n = backbone_forward(&mut g, &bp, &cfg.model, img_n)?;
            let (scores_n, deltas_n) = rpn_forward(&mut g, &bp, &cfg.model, feat_n);
            let tll = top_likelihood_loss(&mut g, scores_n)?;
            Some((feat_n, scores_n, deltas_n, tll))
        }
        (true, None) => {
            return Err(Error::Invalid(
                "configuration uses unannotated images but none was provided".into(),
            ))
        }
        (false, _) => None,
    };
    let rpn_total = match &neg_branch {
        Some((_, _, _, tll)) => rpn_total_loss(&mut g, &rpn_pos, *tll, &cfg.weights),
        None => rpn_pos.total,
    };

    // detection head over the annotated image's region batch
    let score_data = g.value(scores_p).data().to_vec();
    let delta_data = g.value(deltas_p).data().to_vec();
    let proposals = propose(
        &score_data,
        &delta_data,
        &field.anchors,
        side as f64,
        cfg.proposal_top_n,
        cfg.proposal_nms,
    )?;
    let prop_boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let batch = build_head_batch(&prop_boxes, gt, cfg.head_fg_iou, cfg.head_batch, &mut rng)?;
    let roi = roi_pool(&mut g, &cfg.model, feat_p, &batch.boxes);
    let (probs, head_deltas) = detection_head_forward(&mut g, &bp, &cfg.model, roi);
    let clsloss = g.cross_entropy_rows(probs, batch.labels.clone());
    let nc = cfg.model.num_classes;
    let r_count = batch.boxes.len();
    let reg_src: Vec<usize> = batch
        .foreground
        .iter()
        .flat_map(|&r| (0..4).map(move |j| r * 4 * nc + 4 + j))
        .collect();
    let fg_deltas = g.index_select(head_deltas, vec![batch.foreground.len(), 4], reg_src);
    let reg_sum = g.smooth_l1_sum(fg_deltas, batch.reg_targets.clone());
    let regloss = g.scale(reg_sum, 1.0 / r_count as f64);

    // similarity term: foreground regions of the annotated image paired
    // with the highest-scored anchor regions of the unannotated image
    let simloss = match &neg_branch {
        Some((feat_n, scores_n, deltas_n, _)) => {
            let neg_scores = g.value(*scores_n).data().to_vec();
            let (pos_rows, neg_anchors) =
                select_similarity_indices(&batch.foreground, &neg_scores, cfg.sim_pair_cap);
            if pos_rows.is_empty() {
                similarity_loss(&mut g, None, None)
            } else {
                let neg_delta_data = g.value(*deltas_n).data().to_vec();
                let neg_boxes =
                    decode_anchor_boxes(&neg_anchors, &neg_delta_data, &field.anchors, side as f64)?;
                let roi_n = roi_pool(&mut g, &cfg.model, *feat_n, &neg_boxes);
                let (probs_n, _) = detection_head_forward(&mut g, &bp, &cfg.model, roi_n);
                let x1 = g.gather_rows(probs, &pos_rows);
                similarity_loss(&mut g, Some(x1), Some(probs_n))
            }
        }
        None => similarity_loss(&mut g, None, None),
    };
    let head_total = fast_rcnn_total_loss(&mut g, clsloss, regloss, simloss, &cfg.weights);
    let total = g.weighted_sum(&[(rpn_total, 1.0), (head_total, 1.0)]);

    let components = StepComponents {
        pclsloss: g.value(rpn_pos.cls).item(),
        pregloss: g.value(rpn_pos.reg).item(),
        tlloss: neg_branch
            .as_ref()
            .map_or(0.0, |(_, _, _, tll)| g.value(*tll).item()),
        clsloss: g.value(clsloss).item(),
        regloss: g.value(regloss).item(),
        simloss: g.value(simloss).item(),
        total: g.value(total).item(),
    };
    if !components.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            dump: components.dump(),
        });
    }

    let grads = g.backward(total);
    detector.params.adam_step(
        &bp,
        &grads,
        cfg.lr_at(iteration),
        &cfg.adam,
        cfg.grad_clip,
    );
    Ok(components)
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_iteration: u64,
}

struct ImageCache {
    manifest_path: PathBuf,
    cache: HashMap<usize, Tensor>,
}

impl ImageCache {
    fn get(&mut self, index: usize, record: &ImageRecord) -> Result<&Tensor> {
        if !self.cache.contains_key(&index) {
            let t = dataset::load_image(&dataset::image_path(&self.manifest_path, record))?;
            self.cache.insert(index, t);
        }
        Ok(&self.cache[&index])
    }
}

/// Run (or resume) training against a dataset manifest. Writes a CSV loss
/// log and periodic checkpoints under `out_dir` and returns the path of
/// the final checkpoint.
pub fn train(
    cfg: &TrainConfig,
    manifest_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    let manifest = Manifest::load(manifest_path)?;
    let positives: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.polarity == crate::dataset::Polarity::Positive)
        .map(|(i, _)| i)
        .collect();
    let negatives: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.polarity == crate::dataset::Polarity::Negative)
        .map(|(i, _)| i)
        .collect();
    if positives.is_empty() {
        return Err(Error::Invalid("manifest has no annotated images".into()));
    }
    if cfg.uses_negatives() && negatives.is_empty() {
        return Err(Error::Invalid(
            "configuration uses unannotated images but the manifest has none".into(),
        ));
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io("creating output directory", out_dir, e))?;
    let (mut detector, start) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != cfg.model || ck.anchors != cfg.anchors {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different configuration".into(),
                ));
            }
            (
                Detector {
                    config: ck.model,
                    params: ck.params,
                },
                ck.iteration,
            )
        }
        None => (Detector::new(cfg.model.clone(), cfg.seed), 0),
    };

    let loss_csv = out_dir.join("loss.csv");
    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&loss_csv)
        .map_err(|e| Error::io("opening loss log", &loss_csv, e))?;
    if start == 0 {
        writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| Error::io("writing loss log", &loss_csv, e))?;
    }

    let mut cache = ImageCache {
        manifest_path: manifest_path.to_path_buf(),
        cache: HashMap::new(),
    };
    let checkpoint_path = out_dir.join("checkpoint.json");
    let save = |detector: &Detector, iteration: u64| -> Result<()> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            iteration,
            image_side: cfg.image_side,
            model: cfg.model.clone(),
            anchors: cfg.anchors.clone(),
            params: detector.params.clone(),
        }
        .save(&checkpoint_path)
    };

    for it in start..cfg.iterations {
        let (pi, ni) = pair_at(cfg.seed, it, positives.len(), negatives.len());
        let pos_rec = &manifest.records[positives[pi]];
        let gt = pos_rec.boxes.clone();
        let pos_img = cache.get(positives[pi], pos_rec)?.clone();
        let neg_img = match ni {
            Some(ni) if cfg.uses_negatives() => {
                let idx = negatives[ni];
                let rec = manifest.records[idx].clone();
                Some(cache.get(idx, &rec)?.clone())
            }
            _ => None,
        };
        let comps = train_step(&mut detector, cfg, &pos_img, &gt, neg_img.as_ref(), it)?;
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                it,
                cfg.lr_at(it),
                comps.pclsloss,
                comps.pregloss,
                comps.tlloss,
                comps.clsloss,
                comps.regloss,
                comps.simloss,
                comps.total
            )
            .map_err(|e| Error::io("writing loss log", &loss_csv, e))?;
        }
        if (it + 1) % cfg.checkpoint_every == 0 {
            save(&detector, it + 1)?;
        }
    }
    save(&detector, cfg.iterations)?;
    Ok(TrainOutputs {
        checkpoint: checkpoint_path,
        loss_csv,
        final_iteration: cfg.iterations,
    })
}
