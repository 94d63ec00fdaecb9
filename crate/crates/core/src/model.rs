//! The two-stage detector: a small stage-wise convolutional backbone,
//! the RPN head (per-anchor objectness scores and regression deltas),
//! quantized max RoI pooling, and the detection head with softmax
//! classification and per-class regression branches.
//!
//! The backbone is a configurable stand-in with the interface of a large
//! residual network: output stride and channel contract are fixed by
//! configuration, so a heavier backbone can be dropped in unchanged.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::geometry::{decode, nms, BBox, BoxDelta};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels per stage; every stage halves the spatial side, so
    /// the output stride is 2^stages.
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            widths: vec![16, 32, 64, 64],
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("backbone needs at least one stage")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rpn_channels: usize,
    pub head_hidden: usize,
    pub roi_pool: usize,
    /// Class count including background; class 1 is the lesion class.
    pub num_classes: usize,
    pub anchors_per_location: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            rpn_channels: 64,
            head_hidden: 64,
            roi_pool: 4,
            num_classes: 2,
            anchors_per_location: AnchorConfig::default().anchors_per_location(),
        }
    }
}

impl ModelConfig {
    pub fn head_input(&self) -> usize {
        self.backbone.out_channels() * self.roi_pool * self.roi_pool
    }
}

/// One scored detection after inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// An RPN proposal with its originating anchor.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub anchor_index: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PredictOptions {
    /// Detections below this confidence are dropped (kept low so the
    /// precision-recall sweep for mAP sees low-confidence detections).
    pub score_floor: f64,
    /// Proposals whose objectness falls below this floor never reach the
    /// detection head; regions the RPN has learned to suppress therefore
    /// produce no detections at all.
    pub proposal_score_floor: f64,
    pub proposal_top_n: usize,
    pub proposal_nms: f64,
    pub detection_nms: f64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            score_floor: 0.05,
            proposal_score_floor: 0.25,
            proposal_top_n: 2000,
            proposal_nms: 0.7,
            detection_nms: 0.3,
        }
    }
}

pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Detector {
    /// Fresh detector with He-style random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Detector {
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
        let mut init = |params: &mut ParamStore, name: &str, shape: Vec<usize>, fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            params.insert(name, Tensor::new(shape.clone(), data));
            let out = shape[0.min(shape.len() - 1)];
            let bias_dim = match shape.len() {
                4 => shape[0],
                2 => shape[1],
                _ => out,
            };
            params.insert(format!("{name}_b"), Tensor::zeros(vec![bias_dim]));
        };

        let mut prev = config.backbone.in_channels;
        for (i, &wd) in config.backbone.widths.iter().enumerate() {
            init(&mut params, &format!("backbone.stage{i}.w"), vec![wd, prev, 3, 3], prev * 9);
            prev = wd;
        }
        let c = config.backbone.out_channels();
        let a = config.anchors_per_location;
        init(&mut params, "rpn.conv.w", vec![config.rpn_channels, c, 3, 3], c * 9);
        init(&mut params, "rpn.score.w", vec![a, config.rpn_channels, 1, 1], config.rpn_channels);
        init(&mut params, "rpn.delta.w", vec![4 * a, config.rpn_channels, 1, 1], config.rpn_channels);
        init(&mut params, "head.fc1.w", vec![config.head_input(), config.head_hidden], config.head_input());
        init(&mut params, "head.cls.w", vec![config.head_hidden, config.num_classes], config.head_hidden);
        init(
            &mut params,
            "head.reg.w",
            vec![config.head_hidden, 4 * config.num_classes],
            config.head_hidden,
        );
        Detector { config, params }
    }
}

/// Backbone forward pass. Input is [C, S, S] with S divisible by the
/// output stride; output is [C_out, S/stride, S/stride].
pub fn backbone_forward(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Var> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != cfg.backbone.in_channels {
        return Err(Error::Shape(format!(
            "backbone expects [{}, S, S], got {:?}",
            cfg.backbone.in_channels, shape
        )));
    }
    if shape[1] != shape[2] || shape[1] % cfg.backbone.stride() != 0 {
        return Err(Error::Shape(format!(
            "image side {} not square or not divisible by stride {}",
            shape[1],
            cfg.backbone.stride()
        )));
    }
    let mut x = image;
    for i in 0..cfg.backbone.widths.len() {
        let w = bp.var(&format!("backbone.stage{i}.w"));
        let b = bp.var(&format!("backbone.stage{i}.w_b"));
        x = g.conv2d(x, w, b, 2, 1);
        x = g.relu(x);
    }
    Ok(x)
}

/// RPN forward pass: per-anchor objectness scores in [0, 1] (flat, in
/// anchor order) and per-anchor regression deltas [N, 4].
pub fn rpn_forward(g: &mut Graph, bp: &BoundParams, _cfg: &ModelConfig, feat: Var) -> (Var, Var) {
    let w = bp.var("rpn.conv.w");
    let b = bp.var("rpn.conv.w_b");
    let mid = g.conv2d(feat, w, b, 1, 1);
    let mid = g.relu(mid);
    let sw = bp.var("rpn.score.w");
    let sb = bp.var("rpn.score.w_b");
    let logits = g.conv2d(mid, sw, sb, 1, 0);
    let logits = g.anchor_major(logits, 1);
    let n = g.value(logits).len();
    let logits = g.index_select(logits, vec![n], (0..n).collect());
    let scores = g.sigmoid(logits);
    let dw = bp.var("rpn.delta.w");
    let db = bp.var("rpn.delta.w_b");
    let deltas = g.conv2d(mid, dw, db, 1, 0);
    let deltas = g.anchor_major(deltas, 4);
    (scores, deltas)
}

/// Decode, clip, suppress and truncate RPN output into proposals.
pub fn propose(
    scores: &[f64],
    deltas: &[f64],
    anchors: &[BBox],
    image_side: f64,
    top_n: usize,
    nms_threshold: f64,
) -> Result<Vec<Proposal>> {
    if scores.len() != anchors.len() || deltas.len() != 4 * anchors.len() {
        return Err(Error::Shape(format!(
            "propose: {} scores, {} deltas, {} anchors",
            scores.len(),
            deltas.len(),
            anchors.len()
        )));
    }
    let mut boxes = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let d = BoxDelta {
            dx: deltas[4 * i],
            dy: deltas[4 * i + 1],
            dw: deltas[4 * i + 2].clamp(-6.0, 6.0),
            dh: deltas[4 * i + 3].clamp(-6.0, 6.0),
        };
        boxes.push(decode(&d, anchor, Some(image_side))?);
    }
    let kept = nms(&boxes, scores, nms_threshold)?;
    Ok(kept
        .into_iter()
        .take(top_n)
        .map(|i| Proposal {
            bbox: boxes[i],
            score: scores[i],
            anchor_index: i,
        })
        .collect())
}

/// Pool fixed-size region features for proposals given in image
/// coordinates.
pub fn roi_pool(
    g: &mut Graph,
    cfg: &ModelConfig,
    feat: Var,
    proposals: &[BBox],
) -> Var {
    let stride = cfg.backbone.stride() as f64;
    let rois: Vec<[f64; 4]> = proposals
        .iter()
        .map(|b| {
            [
                b.x_min / stride,
                b.y_min / stride,
                b.x_max / stride,
                b.y_max / stride,
            ]
        })
        .collect();
    g.roi_maxpool(feat, &rois, cfg.roi_pool)
}

/// Detection head: softmax class probabilities [R, C] and per-class
/// regression deltas [R, 4C].
pub fn detection_head_forward(
    g: &mut Graph,
    bp: &BoundParams,
    _cfg: &ModelConfig,
    roi_feats: Var,
) -> (Var, Var) {
    let w1 = bp.var("head.fc1.w");
    let b1 = bp.var("head.fc1.w_b");
    let h = g.linear(roi_feats, w1, b1);
    let h = g.relu(h);
    let wc = bp.var("head.cls.w");
    let bc = bp.var("head.cls.w_b");
    let logits = g.linear(h, wc, bc);
    let probs = g.softmax_rows(logits);
    let wr = bp.var("head.reg.w");
    let br = bp.var("head.reg.w_b");
    let deltas = g.linear(h, wr, br);
    (probs, deltas)
}

/// Full inference on one image tensor [C, S, S].
pub fn predict(
    detector: &Detector,
    anchor_cfg: &AnchorConfig,
    image: &Tensor,
    opts: &PredictOptions,
) -> Result<Vec<Detection>> {
    if detector.params.is_empty() {
        return Err(Error::Invalid("detector has no loaded parameters".into()));
    }
    let side = image.shape()[1];
    let anchors = crate::anchors::generate_anchors(side, anchor_cfg)?;
    let mut g = Graph::new();
    let bp = detector.params.bind(&mut g);
    let img = g.leaf(image.clone());
    let feat = backbone_forward(&mut g, &bp, &detector.config, img)?;
    let (scores, deltas) = rpn_forward(&mut g, &bp, &detector.config, feat);
    let score_data = g.value(scores).data();
    let delta_data = g.value(deltas).data();
    let mut kept_scores = Vec::new();
    let mut kept_deltas = Vec::new();
    let mut kept_anchors = Vec::new();
    for (i, &s) in score_data.iter().enumerate() {
        if s >= opts.proposal_score_floor {
            kept_scores.push(s);
            kept_deltas.extend_from_slice(&delta_data[4 * i..4 * i + 4]);
            kept_anchors.push(anchors[i]);
        }
    }
    let proposals = propose(
        &kept_scores,
        &kept_deltas,
        &kept_anchors,
        side as f64,
        opts.proposal_top_n,
        opts.proposal_nms,
    )?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let feats = roi_pool(&mut g, &detector.config, feat, &boxes);
    let (probs, head_deltas) = detection_head_forward(&mut g, &bp, &detector.config, feats);
    let pv = g.value(probs).data();
    let dv = g.value(head_deltas).data();
    let nc = detector.config.num_classes;

    let mut detections = Vec::new();
    for class in 1..nc {
        let mut cls_boxes = Vec::new();
        let mut cls_scores = Vec::new();
        for (r, proposal) in boxes.iter().enumerate() {
            let score = pv[r * nc + class];
            if score < opts.score_floor {
                continue;
            }
            if proposal.width() <= 0.0 || proposal.height() <= 0.0 {
                continue;
            }
            let d = BoxDelta {
                dx: dv[r * 4 * nc + 4 * class],
                dy: dv[r * 4 * nc + 4 * class + 1],
                dw: dv[r * 4 * nc + 4 * class + 2].clamp(-6.0, 6.0),
                dh: dv[r * 4 * nc + 4 * class + 3].clamp(-6.0, 6.0),
            };
            cls_boxes.push(decode(&d, proposal, Some(side as f64))?);
            cls_scores.push(score);
        }
        for i in nms(&cls_boxes, &cls_scores, opts.detection_nms)? {
            detections.push(Detection {
                bbox: cls_boxes[i],
                score: cls_scores[i],
                class_id: class,
            });
        }
    }
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok(detections)
}

// ---- checkpoints ----

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-contained snapshot: parameters plus everything needed to rebuild
/// the inference path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub image_side: usize,
    pub model: ModelConfig,
    pub anchors: AnchorConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io("creating checkpoint", path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io("opening checkpoint", path, e))?;
        let ck: Checkpoint =
            serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {})",
                ck.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ck)
    }
}
