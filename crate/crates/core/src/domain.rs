//! Core grounding types: boxes, scale classes, expressions and predictions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area below which an object is small (32²).
pub const SMALL_AREA_LIMIT: f64 = 1024.0;
/// Area above which an object is large (96²).
pub const LARGE_AREA_LIMIT: f64 = 9216.0;

/// Axis-aligned box in absolute pixels: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvariantViolation {
                at: "bbox".into(),
                message: format!("non-finite coordinate in [{x}, {y}, {w}, {h}]"),
            });
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvariantViolation {
                at: "bbox".into(),
                message: format!("width and height must be positive, got w={w}, h={h}"),
            });
        }
        Ok(Self { x, y, w, h })
    }

    /// Converts a normalized center-format box into pixels.
    pub fn from_normalized_cxcywh(
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        image_width: f64,
        image_height: f64,
    ) -> Result<Self> {
        let pw = w * image_width;
        let ph = h * image_height;
        Self::new(cx * image_width - pw / 2.0, cy * image_height - ph / 2.0, pw, ph)
    }

    /// Normalized `(cx, cy, w, h)` relative to the image size.
    pub fn to_normalized_cxcywh(&self, image_width: f64, image_height: f64) -> [f64; 4] {
        [
            (self.x + self.w / 2.0) / image_width,
            (self.y + self.h / 2.0) / image_height,
            self.w / image_width,
            self.h / image_height,
        ]
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn x2(&self) -> f64 {
        self.x + self.w
    }
    pub fn y2(&self) -> f64 {
        self.y + self.h
    }
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scale_class(&self) -> ScaleClass {
        ScaleClass::of_area(self.area())
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x2() <= width && self.y2() <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleClass {
    Small,
    Medium,
    Large,
}

impl ScaleClass {
    pub const ALL: [ScaleClass; 3] = [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large];

    /// Boundary areas 1024 and 9216 are medium.
    pub fn of_area(area: f64) -> Self {
        if area < SMALL_AREA_LIMIT {
            ScaleClass::Small
        } else if area <= LARGE_AREA_LIMIT {
            ScaleClass::Medium
        } else {
            ScaleClass::Large
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ScaleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleClass::Small => "small",
            ScaleClass::Medium => "medium",
            ScaleClass::Large => "large",
        })
    }
}

/// A ground-truth target or a predicted box. Ground truth always has score 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionInstance {
    pub bbox: BoundingBox,
    pub category: Option<String>,
    pub score: f64,
}

impl DetectionInstance {
    pub fn ground_truth(bbox: BoundingBox, category: impl Into<String>) -> Self {
        Self {
            bbox,
            category: Some(category.into()),
            score: 1.0,
        }
    }

    pub fn prediction(bbox: BoundingBox, score: f64, category: Option<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvariantViolation {
                at: "score".into(),
                message: format!("score {score} outside [0, 1]"),
            });
        }
        Ok(Self { bbox, category, score })
    }
}

/// One referring expression with its full target set. An empty target list
/// marks a no-target expression.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionRecord {
    pub expression_id: String,
    pub image_id: String,
    pub image_size: (u32, u32),
    pub text: String,
    pub targets: Vec<DetectionInstance>,
}

impl ExpressionRecord {
    pub fn is_no_target(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

/// A system's answer for one expression. No boxes means "nothing referred".
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub expression_id: String,
    pub boxes: Vec<DetectionInstance>,
}
