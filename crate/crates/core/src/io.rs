//! Reading and writing ground-truth documents and prediction streams.
//!
//! Ground truth is one JSON document:
//!
//! ```json
//! {"images": [{"id": "img0", "width": 640, "height": 640}],
//!  "expressions": [{"id": "e0", "image_id": "img0", "text": "the red cars",
//!                   "targets": [{"bbox": [x, y, w, h], "category": "car"}]}]}
//! ```
//!
//! Predictions are newline-delimited records:
//!
//! ```json
//! {"expression_id": "e0", "boxes": [{"bbox": [x, y, w, h], "score": 0.9, "category": "car"}]}
//! ```
//!
//! Unknown fields are rejected in strict mode and logged then ignored in
//! lenient mode.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::domain::{BoundingBox, DetectionInstance, ExpressionRecord, PredictionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FieldPolicy {
    #[default]
    Strict,
    Lenient,
}

/// Coordinate convention of `bbox` arrays in input files.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BoxFormat {
    /// `[x, y, w, h]`, top-left corner and size in pixels.
    #[default]
    PixelXywh,
    /// `[cx, cy, w, h]` normalized by the image size.
    NormalizedCxcywh,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub fields: FieldPolicy,
    pub box_format: BoxFormat,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

fn syntax_error(text: &str, base: usize, err: serde_json::Error) -> Error {
    let offset = base + byte_offset(text, err.line(), err.column());
    Error::MalformedDocument {
        at: format!("byte {offset}"),
        message: err.to_string(),
    }
}

struct Ctx<'a> {
    at: String,
    policy: FieldPolicy,
    obj: &'a Map<String, Value>,
}

impl<'a> Ctx<'a> {
    fn new(at: String, policy: FieldPolicy, value: &'a Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::SchemaViolation {
            at: at.clone(),
            message: "expected an object".into(),
        })?;
        Ok(Self { at, policy, obj })
    }

    fn schema(&self, message: impl Into<String>) -> Error {
        Error::SchemaViolation {
            at: self.at.clone(),
            message: message.into(),
        }
    }

    fn invariant(&self, message: impl Into<String>) -> Error {
        Error::InvariantViolation {
            at: self.at.clone(),
            message: message.into(),
        }
    }

    fn allow_only(&self, known: &[&str]) -> Result<()> {
        for key in self.obj.keys() {
            if !known.contains(&key.as_str()) {
                match self.policy {
                    FieldPolicy::Strict => return Err(self.schema(format!("unknown field '{key}'"))),
                    FieldPolicy::Lenient => {
                        log::warn!("{}: ignoring unknown field '{key}'", self.at)
                    }
                }
            }
        }
        Ok(())
    }

    fn field(&self, key: &str) -> Result<&'a Value> {
        self.obj
            .get(key)
            .ok_or_else(|| self.schema(format!("missing field '{key}'")))
    }

    fn string(&self, key: &str) -> Result<String> {
        self.field(key)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| self.schema(format!("field '{key}' must be a string")))
    }

    /// Ids may be strings or non-negative integers; both become strings.
    fn id(&self, key: &str) -> Result<String> {
        match self.field(key)? {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) if n.is_u64() => Ok(n.to_string()),
            _ => Err(self.schema(format!("field '{key}' must be a string or integer id"))),
        }
    }

    fn number(&self, key: &str) -> Result<f64> {
        self.field(key)?
            .as_f64()
            .ok_or_else(|| self.schema(format!("field '{key}' must be a number")))
    }

    fn array(&self, key: &str) -> Result<&'a Vec<Value>> {
        self.field(key)?
            .as_array()
            .ok_or_else(|| self.schema(format!("field '{key}' must be an array")))
    }

    fn bbox_values(&self) -> Result<[f64; 4]> {
        let arr = self.array("bbox")?;
        if arr.len() != 4 {
            return Err(self.schema(format!("bbox must have 4 numbers, got {}", arr.len())));
        }
        let mut out = [0.0; 4];
        for (slot, v) in out.iter_mut().zip(arr) {
            *slot = v.as_f64().ok_or_else(|| self.schema("bbox entries must be numbers"))?;
        }
        Ok(out)
    }

    fn bbox(&self, format: BoxFormat, image_size: Option<(u32, u32)>) -> Result<BoundingBox> {
        let [a, b, c, d] = self.bbox_values()?;
        let built = match format {
            BoxFormat::PixelXywh => BoundingBox::new(a, b, c, d),
            BoxFormat::NormalizedCxcywh => {
                let (w, h) =
                    image_size.ok_or_else(|| self.schema("normalized boxes need an image size for conversion"))?;
                BoundingBox::from_normalized_cxcywh(a, b, c, d, w as f64, h as f64)
            }
        };
        built.map_err(|e| match e {
            Error::InvariantViolation { message, .. } => self.invariant(message),
            other => other,
        })
    }
}

fn positive_dim(ctx: &Ctx<'_>, key: &str) -> Result<u32> {
    let v = ctx.field(key)?;
    let n = v
        .as_u64()
        .ok_or_else(|| ctx.schema(format!("field '{key}' must be a positive integer")))?;
    if n == 0 || n > u32::MAX as u64 {
        return Err(ctx.invariant(format!("{key} must be positive, got {n}")));
    }
    Ok(n as u32)
}

pub fn parse_ground_truth(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<Vec<ExpressionRecord>> {
    parse_ground_truth_str(&read(path.as_ref())?, opts)
}

pub fn parse_ground_truth_str(text: &str, opts: &ParseOptions) -> Result<Vec<ExpressionRecord>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| syntax_error(text, 0, e))?;
    let root = Ctx::new("document root".into(), opts.fields, &doc)?;
    root.allow_only(&["images", "expressions"])?;

    let mut images: HashMap<String, (u32, u32)> = HashMap::new();
    for (i, img) in root.array("images")?.iter().enumerate() {
        let ctx = Ctx::new(format!("images[{i}]"), opts.fields, img)?;
        ctx.allow_only(&["id", "width", "height"])?;
        let id = ctx.id("id")?;
        let ctx = Ctx {
            at: format!("image '{id}'"),
            ..ctx
        };
        let size = (positive_dim(&ctx, "width")?, positive_dim(&ctx, "height")?);
        if images.insert(id.clone(), size).is_some() {
            return Err(ctx.invariant(format!("duplicate image id '{id}'")));
        }
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, expr) in root.array("expressions")?.iter().enumerate() {
        let ctx = Ctx::new(format!("expressions[{i}]"), opts.fields, expr)?;
        ctx.allow_only(&["id", "image_id", "text", "targets"])?;
        let expression_id = ctx.id("id")?;
        let ctx = Ctx {
            at: format!("expression '{expression_id}'"),
            ..ctx
        };
        if !seen.insert(expression_id.clone()) {
            return Err(ctx.invariant(format!("duplicate expression id '{expression_id}'")));
        }
        let image_id = ctx.id("image_id")?;
        let image_size = *images
            .get(&image_id)
            .ok_or_else(|| ctx.invariant(format!("unknown image id '{image_id}'")))?;
        let text = ctx.string("text")?;

        let mut targets = Vec::new();
        for (j, t) in ctx.array("targets")?.iter().enumerate() {
            let tctx = Ctx::new(format!("expression '{expression_id}' target {j}"), opts.fields, t)?;
            tctx.allow_only(&["bbox", "category"])?;
            let bbox = tctx.bbox(opts.box_format, Some(image_size))?;
            if !bbox.within(image_size.0 as f64, image_size.1 as f64) {
                return Err(tctx.invariant(format!(
                    "box {:?} lies outside the {}x{} image",
                    bbox.to_xywh(),
                    image_size.0,
                    image_size.1
                )));
            }
            let category = tctx.string("category")?;
            if category.is_empty() {
                return Err(tctx.invariant("empty category"));
            }
            targets.push(DetectionInstance::ground_truth(bbox, category));
        }
        records.push(ExpressionRecord {
            expression_id,
            image_id,
            image_size,
            text,
            targets,
        });
    }
    Ok(records)
}

/// Parses predictions. Normalized boxes need `image_sizes` keyed by
/// expression id; pixel boxes ignore it.
pub fn parse_predictions(
    path: impl AsRef<Path>,
    opts: &ParseOptions,
    image_sizes: Option<&HashMap<String, (u32, u32)>>,
) -> Result<Vec<PredictionRecord>> {
    parse_predictions_str(&read(path.as_ref())?, opts, image_sizes)
}

pub fn parse_predictions_str(
    text: &str,
    opts: &ParseOptions,
    image_sizes: Option<&HashMap<String, (u32, u32)>>,
) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let base = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| syntax_error(line, base, e))?;
        let ctx = Ctx::new(format!("line {}", lineno + 1), opts.fields, &value)?;
        ctx.allow_only(&["expression_id", "boxes"])?;
        let expression_id = ctx.id("expression_id")?;
        let size = image_sizes.and_then(|m| m.get(&expression_id).copied());
        let mut boxes = Vec::new();
        for (j, b) in ctx.array("boxes")?.iter().enumerate() {
            let bctx = Ctx::new(
                format!("line {} (expression '{expression_id}') box {j}", lineno + 1),
                opts.fields,
                b,
            )?;
            bctx.allow_only(&["bbox", "score", "category"])?;
            let bbox = bctx.bbox(opts.box_format, size)?;
            let score = bctx.number("score")?;
            if !(0.0..=1.0).contains(&score) {
                return Err(bctx.schema(format!("score {score} outside [0, 1]")));
            }
            let category = match bctx.obj.get("category") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(bctx.schema("field 'category' must be a string")),
            };
            boxes.push(DetectionInstance { bbox, category, score });
        }
        out.push(PredictionRecord { expression_id, boxes });
    }
    Ok(out)
}

#[derive(Serialize)]
struct ImageOut<'a> {
    id: &'a str,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct TargetOut<'a> {
    bbox: [f64; 4],
    category: &'a str,
}

#[derive(Serialize)]
struct ExpressionOut<'a> {
    id: &'a str,
    image_id: &'a str,
    text: &'a str,
    targets: Vec<TargetOut<'a>>,
}

#[derive(Serialize)]
struct GroundTruthOut<'a> {
    images: Vec<ImageOut<'a>>,
    expressions: Vec<ExpressionOut<'a>>,
}

/// Serializes records in pixel `xywh` form. Images are listed in order of
/// first appearance.
pub fn ground_truth_to_string(records: &[ExpressionRecord]) -> String {
    let mut seen = HashSet::new();
    let images = records
        .iter()
        .filter(|r| seen.insert(r.image_id.as_str()))
        .map(|r| ImageOut {
            id: &r.image_id,
            width: r.image_size.0,
            height: r.image_size.1,
        })
        .collect();
    let expressions = records
        .iter()
        .map(|r| ExpressionOut {
            id: &r.expression_id,
            image_id: &r.image_id,
            text: &r.text,
            targets: r
                .targets
                .iter()
                .map(|t| TargetOut {
                    bbox: t.bbox.to_xywh(),
                    category: t.category.as_deref().unwrap_or(""),
                })
                .collect(),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&GroundTruthOut { images, expressions }).expect("ground truth serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct BoxOut<'a> {
    bbox: [f64; 4],
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    category: Option<&'a str>,
}

#[derive(Serialize)]
struct PredictionOut<'a> {
    expression_id: &'a str,
    boxes: Vec<BoxOut<'a>>,
}

pub fn predictions_to_string(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = PredictionOut {
            expression_id: &r.expression_id,
            boxes: r
                .boxes
                .iter()
                .map(|b| BoxOut {
                    bbox: b.bbox.to_xywh(),
                    score: b.score,
                    category: b.category.as_deref(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

pub fn write_file(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Image size per expression id, for converting normalized prediction boxes.
pub fn image_sizes(records: &[ExpressionRecord]) -> HashMap<String, (u32, u32)> {
    records
        .iter()
        .map(|r| (r.expression_id.clone(), r.image_size))
        .collect()
}
