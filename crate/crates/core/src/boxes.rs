//! Axis-aligned boxes, overlap, and the center/log-size delta encoding.

use serde::{Deserialize, Serialize};

/// An axis-aligned region in image coordinates.
///
/// Used for anchors, proposals, ground truth and detections alike; the
/// optional fields are filled in where they make sense.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoIBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RoIBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        RoIBox { x1, y1, x2, y2, class_id: None, score: None }
    }

    pub fn with_class(mut self, class_id: usize) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// Box of side `side` centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, side: f64) -> Self {
        let h = side / 2.0;
        RoIBox::new(cx - h, cy - h, cx + h, cy + h)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, other: &RoIBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &RoIBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> RoIBox {
        RoIBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            ..*self
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> RoIBox {
        RoIBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy, ..*self }
    }

    /// Regression target that maps `self` (the reference) onto `target`.
    pub fn encode(&self, target: &RoIBox) -> [f64; 4] {
        let (w, h) = (self.width().max(1e-6), self.height().max(1e-6));
        let (cx, cy) = self.center();
        let (tw, th) = (target.width().max(1e-6), target.height().max(1e-6));
        let (tcx, tcy) = target.center();
        [(tcx - cx) / w, (tcy - cy) / h, libm::log(tw / w), libm::log(th / h)]
    }

    /// Inverse of [`encode`](Self::encode). Size deltas are clamped so a
    /// diverging head cannot produce infinite boxes.
    pub fn decode(&self, deltas: [f64; 4]) -> RoIBox {
        const MAX_LOG: f64 = 4.135; // ln(1000 / 16)
        let (w, h) = (self.width(), self.height());
        let (cx, cy) = self.center();
        let ncx = cx + deltas[0] * w;
        let ncy = cy + deltas[1] * h;
        let nw = w * libm::exp(deltas[2].clamp(-MAX_LOG, MAX_LOG));
        let nh = h * libm::exp(deltas[3].clamp(-MAX_LOG, MAX_LOG));
        RoIBox { x1: ncx - nw / 2.0, y1: ncy - nh / 2.0, x2: ncx + nw / 2.0, y2: ncy + nh / 2.0, ..*self }
    }
}
