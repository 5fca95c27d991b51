//! Box arithmetic shared by every other module.
//!
//! Boxes are stored in center form `(cx, cy, w, h)`. Corner form
//! `[x_min, y_min, w, h]` only appears at the file boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound applied to `dw`/`dh` before exponentiation in [`decode_delta`].
/// `exp(4.135) ≈ 62.5`.
pub const DELTA_LOG_SIZE_CLAMP: f64 = 4.135;

/// Axis-aligned rectangle in center form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { cx, cy, w, h })
        }
    }

    /// Builds a box from `[x_min, y_min, w, h]`.
    pub fn from_corner_form(xywh: [f64; 4]) -> Result<Self> {
        let [x, y, w, h] = xywh;
        Self::new(x + 0.5 * w, y + 0.5 * h, w, h)
    }

    pub fn to_corner_form(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.w,
            self.h,
        ]
    }

    /// Returns `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }
}

/// Scale- and location-invariant offset from one box to another.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta {
    pub const ZERO: Delta = Delta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-component mean and standard deviation of regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl NormStats {
    /// Zero mean, unit std: normalization becomes a no-op.
    pub const IDENTITY: NormStats = NormStats {
        mean: [0.0; 4],
        std: [1.0; 4],
    };

    pub fn new(mean: [f64; 4], std: [f64; 4]) -> Result<Self> {
        if mean.iter().chain(std.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("NormStats"));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "std components must be positive, got {std:?}"
            )));
        }
        Ok(Self { mean, std })
    }
}

impl Default for NormStats {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    // corner-derived areas so that iou(a, a) == 1 exactly
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Offset that takes `b` onto `g`.
pub fn encode_delta(b: &BBox, g: &BBox) -> Delta {
    Delta {
        dx: (g.cx - b.cx) / b.w,
        dy: (g.cy - b.cy) / b.h,
        dw: (g.w / b.w).ln(),
        dh: (g.h / b.h).ln(),
    }
}

/// Result of applying a delta to a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    /// `dw` or `dh` exceeded [`DELTA_LOG_SIZE_CLAMP`] and was clamped.
    pub clamped: bool,
}

/// Inverse of [`encode_delta`], with the log-size components capped at
/// [`DELTA_LOG_SIZE_CLAMP`].
pub fn decode_delta(b: &BBox, d: &Delta) -> Decoded {
    let dw = d.dw.min(DELTA_LOG_SIZE_CLAMP);
    let dh = d.dh.min(DELTA_LOG_SIZE_CLAMP);
    let clamped = dw != d.dw || dh != d.dh;
    Decoded {
        bbox: BBox {
            cx: b.cx + d.dx * b.w,
            cy: b.cy + d.dy * b.h,
            w: b.w * dw.exp(),
            h: b.h * dh.exp(),
        },
        clamped,
    }
}

pub fn normalize_delta(d: &Delta, s: &NormStats) -> Delta {
    let v = d.to_array();
    Delta::from_array(std::array::from_fn(|i| (v[i] - s.mean[i]) / s.std[i]))
}

pub fn denormalize_delta(d: &Delta, s: &NormStats) -> Delta {
    let v = d.to_array();
    Delta::from_array(std::array::from_fn(|i| v[i] * s.std[i] + s.mean[i]))
}

/// Huber-style penalty with unit transition point.
#[inline]
pub fn smooth_l1_scalar(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Sum of [`smooth_l1_scalar`] over the four components.
pub fn smooth_l1(d: &Delta) -> f64 {
    d.to_array().iter().map(|&x| smooth_l1_scalar(x)).sum()
}

/// Greedy non-maximum suppression.
///
/// Returns indices into `detections` of the kept boxes, in descending score
/// order. Equal scores keep the lower index first. A box is suppressed when
/// its IoU with an already kept box is `>= iou_threshold`.
pub fn nms(detections: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .1
            .total_cmp(&detections[a].1)
            .then_with(|| a.cmp(&b))
    });

    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let candidate = &detections[i].0;
        if keep
            .iter()
            .all(|&k| iou(&detections[k].0, candidate) < iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

/// Intersects `b` with the image rectangle `[0, width] x [0, height]`.
///
/// Returns `None` when nothing of positive area is left.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> Option<BBox> {
    let (x1, y1, x2, y2) = b.corners();
    if x1 >= 0.0 && y1 >= 0.0 && x2 <= width && y2 <= height {
        return Some(*b);
    }
    let x1 = x1.clamp(0.0, width);
    let x2 = x2.clamp(0.0, width);
    let y1 = y1.clamp(0.0, height);
    let y2 = y2.clamp(0.0, height);
    if x2 <= x1 || y2 <= y1 {
        return None;
    }
    BBox::from_corners(x1, y1, x2, y2).ok()
}
