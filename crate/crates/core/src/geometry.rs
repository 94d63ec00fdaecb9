//! Pure box arithmetic: IoU, box regression encode/decode, NMS.
//!
//! Boxes use corner (min, max) representation in continuous pixel
//! coordinates. Area is (max - min) * (max - min) with no +1 pixel
//! convention; the same convention is used everywhere (label assignment,
//! proposal decoding, evaluation).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min <= x_max && y_min <= y_max)
            || !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite())
        {
            return Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Clip to the square image extent [0, side] x [0, side].
    pub fn clip(&self, side: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, side),
            y_min: self.y_min.clamp(0.0, side),
            x_max: self.x_max.clamp(0.0, side),
            y_max: self.y_max.clamp(0.0, side),
        }
    }
}

/// Center/log-size regression offsets relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };
}

/// Intersection over union of two boxes. Returns 0 when the union has
/// zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Encode a ground-truth box as offsets from an anchor.
pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::DegenerateAnchor);
    }
    let (gw, gh) = (gt.width(), gt.height());
    if gw <= 0.0 || gh <= 0.0 {
        return Err(Error::DegenerateAnchor);
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        dx: (gcx - acx) / aw,
        dy: (gcy - acy) / ah,
        dw: (gw / aw).ln(),
        dh: (gh / ah).ln(),
    })
}

/// Invert [`encode`]. When `clip_to` is given, the decoded box is clipped
/// to the square image extent.
pub fn decode(delta: &BoxDelta, anchor: &BBox, clip_to: Option<f64>) -> Result<BBox> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::DegenerateAnchor);
    }
    let (acx, acy) = anchor.center();
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    let w = aw * delta.dw.exp();
    let h = ah * delta.dh.exp();
    let b = BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)?;
    Ok(match clip_to {
        Some(side) => b.clip(side),
        None => b,
    })
}

/// Greedy non-maximum suppression. Returns indices of the kept boxes in
/// descending score order; no two kept boxes overlap above
/// `iou_threshold`. Score ties are broken by lower index.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Shape(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}
