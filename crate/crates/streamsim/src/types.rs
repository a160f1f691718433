//! Shared domain vocabulary: time, frame indices, boxes, detections and the
//! geometric/classification primitives the rest of the crate consumes.
//!
//! Everything here is an immutable value and every operation is a pure
//! function, so these types are safe to use from any number of concurrent
//! evaluation workers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point on the virtual clock, in seconds. Always finite and non-negative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct TimeSec(f64);

impl TimeSec {
    pub fn new(secs: f64) -> Result<Self> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(Error::InvalidInput(format!(
                "timestamp must be finite and non-negative, got {secs}"
            )));
        }
        Ok(TimeSec(secs))
    }

    pub const ZERO: TimeSec = TimeSec(0.0);

    #[inline]
    pub fn secs(self) -> f64 {
        self.0
    }
}

/// Frame index within a sequence of length `L`, i.e. in `[0, L)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct FrameIndex(pub u32);

impl FrameIndex {
    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }
}

impl std::fmt::Display for FrameIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Emission timestamp of frame `i` at `k` frames per second: `t_i = i / k`.
pub fn input_timestamp(i: FrameIndex, k: f64) -> Result<TimeSec> {
    if !(k > 0.0) {
        return Err(Error::InvalidConfiguration(format!(
            "frame rate must be positive, got {k}"
        )));
    }
    TimeSec::new(i.get() as f64 / k)
}

/// Axis-aligned box in corner form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max;
        if !ok {
            return Err(Error::InvalidInput(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

/// Intersection-over-union of two boxes. Zero when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidInput(format!(
                "confidence must be in [0,1], got {confidence}"
            )));
        }
        Ok(Detection { bbox, class_id, confidence })
    }
}

/// A prediction FOR a specific frame index, with the times it was created
/// (model finished) and emitted by the output buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub target_index: FrameIndex,
    pub detections: Vec<Detection>,
    pub created_at: TimeSec,
    pub output_at: TimeSec,
}

/// Area cutoffs for the small/medium/large breakdown. Defaults follow the
/// COCO convention (32^2 and 96^2 px^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeThresholds {
    pub small_max_area: f64,
    pub medium_max_area: f64,
}

impl SizeThresholds {
    pub fn new(small_max_area: f64, medium_max_area: f64) -> Result<Self> {
        if !(small_max_area > 0.0 && small_max_area < medium_max_area) {
            return Err(Error::InvalidConfiguration(format!(
                "size thresholds must satisfy 0 < small < medium, got {small_max_area}, {medium_max_area}"
            )));
        }
        Ok(SizeThresholds { small_max_area, medium_max_area })
    }
}

impl Default for SizeThresholds {
    fn default() -> Self {
        SizeThresholds { small_max_area: 32.0 * 32.0, medium_max_area: 96.0 * 96.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

/// Partition a box by area. Boundary areas go to the smaller class.
pub fn size_class(b: &BBox, th: &SizeThresholds) -> SizeClass {
    let a = b.area();
    if a <= th.small_max_area {
        SizeClass::Small
    } else if a <= th.medium_max_area {
        SizeClass::Medium
    } else {
        SizeClass::Large
    }
}
