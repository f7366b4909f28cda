//! Seeded synthetic grounding scenes.
//!
//! A scene is a set of attributed boxes (category, color) plus one symbolic
//! expression: a conjunction of optional category, color and half-plane
//! constraints. Targets are exactly the objects satisfying it. Scenes serve
//! as training data for the decoder and as fixtures for the metrics.

use std::fmt;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, DetectionInstance, ExpressionRecord, PredictionRecord, ScaleClass};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::iou;
use crate::io::{ground_truth_to_string, predictions_to_string, write_file};
use crate::ngdino::{Example, NgdinoConfig, Target};
use crate::tensor::Tensor;

/// Same-category objects may overlap at most this much.
pub const MAX_SAME_CATEGORY_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 200;
/// Centers keep this distance (pixels) from the image midlines, so rounding
/// never moves an object across a half-plane boundary.
const MIDLINE_MARGIN: f64 = 1.0;
/// Area ranges per scale class, inset from the class limits.
const AREA_RANGES: [(f64, f64); 3] = [(100.0, 1000.0), (1100.0, 9000.0), (9500.0, 30000.0)];
const MIN_IMAGE_SIDE: u32 = 320;

macro_rules! vocabulary {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

vocabulary!(Category { Car => "car", Truck => "truck", Bus => "bus", Van => "van" });
vocabulary!(Color { White => "white", Black => "black", Red => "red", Blue => "blue" });
vocabulary!(Side { Left => "left", Right => "right", Top => "top", Bottom => "bottom" });

impl Category {
    fn plural(self) -> &'static str {
        match self {
            Category::Car => "cars",
            Category::Truck => "trucks",
            Category::Bus => "buses",
            Category::Van => "vans",
        }
    }
}

impl Side {
    fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Top => Side::Bottom,
            Side::Bottom => Side::Top,
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Side::Left => "on the left",
            Side::Right => "on the right",
            Side::Top => "in the upper half",
            Side::Bottom => "in the lower half",
        }
    }

    /// Whether a center lies in this half of the image. The halves split at
    /// the midlines; a center exactly on a midline belongs to right/bottom.
    pub fn contains(self, center: (f64, f64), image_size: (u32, u32)) -> bool {
        let (mx, my) = (image_size.0 as f64 / 2.0, image_size.1 as f64 / 2.0);
        match self {
            Side::Left => center.0 < mx,
            Side::Right => center.0 >= mx,
            Side::Top => center.1 < my,
            Side::Bottom => center.1 >= my,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Pixel `[x, y, w, h]`, rounded to 0.01.
    pub bbox: [f64; 4],
    pub category: Category,
    pub color: Color,
    /// Color as seen by the featurizer. Small objects are misread more often;
    /// ground truth always uses `color`.
    pub perceived_color: Color,
}

impl SceneObject {
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        let [x, y, w, h] = self.bbox;
        BoundingBox::new(x, y, w, h)
    }

    fn center(&self) -> (f64, f64) {
        (self.bbox[0] + self.bbox[2] / 2.0, self.bbox[1] + self.bbox[3] / 2.0)
    }
}

/// Conjunction of optional constraints. An empty predicate refers to every object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Predicate {
    pub category: Option<Category>,
    pub color: Option<Color>,
    pub side: Option<Side>,
}

impl Predicate {
    pub fn matches(&self, obj: &SceneObject, image_size: (u32, u32)) -> bool {
        self.category.is_none_or(|c| c == obj.category)
            && self.color.is_none_or(|c| c == obj.color)
            && self.side.is_none_or(|s| s.contains(obj.center(), image_size))
    }

    pub fn is_empty(&self) -> bool {
        self.category.is_none() && self.color.is_none() && self.side.is_none()
    }

    pub fn resolve(&self, objects: &[SceneObject], image_size: (u32, u32)) -> Vec<usize> {
        (0..objects.len())
            .filter(|&i| self.matches(&objects[i], image_size))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut words = vec!["all"];
        if let Some(c) = self.color {
            words.push(c.as_str());
        }
        words.push(self.category.map_or("vehicles", Category::plural));
        if let Some(s) = self.side {
            words.push(s.phrase());
        }
        words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub index: usize,
    pub expression_id: String,
    pub image_id: String,
    pub image_size: (u32, u32),
    pub objects: Vec<SceneObject>,
    pub predicate: Predicate,
    pub text: String,
    /// Indices into `objects`, ascending.
    pub targets: Vec<usize>,
}

impl SyntheticScene {
    /// Recomputes the target set and compares it with the stored one.
    pub fn self_check(&self) -> Result<()> {
        let resolved = self.predicate.resolve(&self.objects, self.image_size);
        if resolved != self.targets {
            return Err(Error::InvariantViolation {
                at: format!("scene '{}'", self.expression_id),
                message: format!("stored targets {:?} but predicate selects {:?}", self.targets, resolved),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scenes: usize,
    pub seed: u64,
    pub image_width: u32,
    pub image_height: u32,
    /// Objects per scene, targets included.
    pub max_objects: usize,
    pub max_targets: usize,
    pub no_target_rate: f64,
    /// Fractions of small, medium and large objects.
    pub scale_mix: [f64; 3],
    /// Target counts of non-empty scenes follow `P(k) ∝ k^-s` on `1..=max_targets`.
    pub zipf_exponent: f64,
    /// Probability that each constraint kind appears in an expression.
    pub constraint_rate: f64,
    /// Per scale class, the probability that an object's color is perceived
    /// as a different, uniformly chosen color.
    pub color_confusion: [f64; 3],
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 1000,
            seed: 0,
            image_width: 640,
            image_height: 640,
            max_objects: 16,
            max_targets: 8,
            no_target_rate: 0.1,
            scale_mix: [0.31, 0.55, 0.14],
            zipf_exponent: 1.0,
            constraint_rate: 0.6,
            color_confusion: [0.1, 0.02, 0.0],
            id_prefix: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.scenes == 0 || self.max_objects == 0 || self.max_targets == 0 {
            return bad("scenes, max_objects and max_targets must be at least 1".into());
        }
        if self.max_targets > self.max_objects {
            return bad(format!(
                "max_targets {} exceeds max_objects {}",
                self.max_targets, self.max_objects
            ));
        }
        for (name, r) in [
            ("no_target_rate", self.no_target_rate),
            ("constraint_rate", self.constraint_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} is outside [0, 1]"));
            }
        }
        if self.color_confusion.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!(
                "color_confusion {:?} must be rates in [0, 1]",
                self.color_confusion
            ));
        }
        if self.constraint_rate == 0.0 {
            return bad("constraint_rate must be positive".into());
        }
        let sum: f64 = self.scale_mix.iter().sum();
        if self.scale_mix.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("scale_mix {:?} must be rates summing to 1", self.scale_mix));
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return bad(format!("zipf_exponent {} must be non-negative", self.zipf_exponent));
        }
        if self.image_width < MIN_IMAGE_SIDE || self.image_height < MIN_IMAGE_SIDE {
            return bad(format!("images must be at least {MIN_IMAGE_SIDE} pixels on each side"));
        }
        if self.id_prefix.is_empty() {
            return bad("id_prefix must not be empty".into());
        }
        Ok(())
    }
}

struct SceneBuilder<'a> {
    rng: ChaCha8Rng,
    config: &'a SynthConfig,
    scale: &'a WeightedIndex<f64>,
    objects: Vec<SceneObject>,
}

impl SceneBuilder<'_> {
    fn size(&self) -> (u32, u32) {
        (self.config.image_width, self.config.image_height)
    }

    /// Interval of centers along one axis for a box of `extent`, optionally
    /// restricted to one half.
    fn center_range(&self, extent: f64, full: f64, half: Option<bool>) -> (f64, f64) {
        let (lo, hi) = (extent / 2.0 + 0.01, full - extent / 2.0 - 0.02);
        let mid = full / 2.0;
        match half {
            None => (lo, hi),
            Some(true) => (lo, mid - MIDLINE_MARGIN),
            Some(false) => (mid + MIDLINE_MARGIN, hi),
        }
    }

    /// Places a box whose center lies in `side` (or anywhere), avoiding
    /// heavy overlap with objects of the same category.
    fn place(&mut self, category: Category, color: Color, side: Option<Side>) -> bool {
        let (iw, ih) = (self.config.image_width as f64, self.config.image_height as f64);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class = self.scale.sample(&mut self.rng);
            let (a_lo, a_hi) = AREA_RANGES[class];
            let area = self.rng.gen_range(a_lo..a_hi);
            let aspect: f64 = self.rng.gen_range(0.5..2.0);
            let w = round2((area * aspect).sqrt());
            let h = round2(area / w);
            let x_half = match side {
                Some(Side::Left) => Some(true),
                Some(Side::Right) => Some(false),
                _ => None,
            };
            let y_half = match side {
                Some(Side::Top) => Some(true),
                Some(Side::Bottom) => Some(false),
                _ => None,
            };
            let (cx_lo, cx_hi) = self.center_range(w, iw, x_half);
            let (cy_lo, cy_hi) = self.center_range(h, ih, y_half);
            if cx_lo >= cx_hi || cy_lo >= cy_hi {
                continue;
            }
            let x = round2(self.rng.gen_range(cx_lo..cx_hi) - w / 2.0);
            let y = round2(self.rng.gen_range(cy_lo..cy_hi) - h / 2.0);
            let obj = SceneObject {
                bbox: [x, y, w, h],
                category,
                color,
                perceived_color: color,
            };
            let Ok(b) = obj.bounding_box() else { continue };
            if !b.within(iw, ih) || ScaleClass::of_area(b.area()).index() != class {
                continue;
            }
            let clash = self.objects.iter().any(|o| {
                o.category == category && o.bounding_box().map_or(true, |ob| iou(&ob, &b) > MAX_SAME_CATEGORY_IOU)
            });
            if !clash {
                self.objects.push(obj);
                return true;
            }
        }
        false
    }

    fn pick<T: Copy>(&mut self, items: &[T]) -> T {
        *items.choose(&mut self.rng).expect("vocabularies are non-empty")
    }

    fn pick_other<T: Copy + PartialEq>(&mut self, items: &[T], not: T) -> T {
        let rest: Vec<T> = items.iter().copied().filter(|&v| v != not).collect();
        self.pick(&rest)
    }

    fn predicate(&mut self, allow_empty: bool) -> Predicate {
        let rate = self.config.constraint_rate;
        loop {
            let p = Predicate {
                category: self.rng.gen_bool(rate).then(|| self.pick(Category::ALL)),
                color: self.rng.gen_bool(rate).then(|| self.pick(Color::ALL)),
                side: self.rng.gen_bool(rate).then(|| self.pick(Side::ALL)),
            };
            if allow_empty || !p.is_empty() {
                return p;
            }
        }
    }

    fn target(&mut self, p: &Predicate) -> bool {
        let category = p.category.unwrap_or_else(|| self.pick(Category::ALL));
        let color = p.color.unwrap_or_else(|| self.pick(Color::ALL));
        self.place(category, color, p.side)
    }

    /// An object violating one randomly chosen active constraint.
    fn distractor(&mut self, p: &Predicate) -> bool {
        let mut active = Vec::new();
        if p.category.is_some() {
            active.push(0);
        }
        if p.color.is_some() {
            active.push(1);
        }
        if p.side.is_some() {
            active.push(2);
        }
        let broken = self.pick(&active);
        let mut category = self.pick(Category::ALL);
        let mut color = self.pick(Color::ALL);
        let mut side = None;
        match broken {
            0 => category = self.pick_other(Category::ALL, p.category.unwrap_or(Category::Car)),
            1 => color = self.pick_other(Color::ALL, p.color.unwrap_or(Color::White)),
            _ => side = p.side.map(Side::opposite),
        }
        self.place(category, color, side)
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn zipf_weights(max: usize, s: f64) -> Vec<f64> {
    (1..=max).map(|k| (k as f64).powf(-s)).collect()
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn build_scene(config: &SynthConfig, index: usize, no_target: bool) -> Result<SyntheticScene> {
    let scale = WeightedIndex::new(config.scale_mix).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let counts = WeightedIndex::new(zipf_weights(config.max_targets, config.zipf_exponent))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut b = SceneBuilder {
        rng: scene_rng(config.seed, index),
        config,
        scale: &scale,
        objects: Vec::new(),
    };
    'retry: loop {
        b.objects.clear();
        let k = if no_target { 0 } else { counts.sample(&mut b.rng) + 1 };
        let room = config.max_objects - k;
        let distractors = if room == 0 { 0 } else { b.rng.gen_range(1..=room) };
        // Every object satisfies the empty predicate, so it only fits scenes
        // without distractors.
        let predicate = b.predicate(distractors == 0);
        for _ in 0..k {
            if !b.target(&predicate) {
                continue 'retry;
            }
        }
        for _ in 0..distractors {
            if !b.distractor(&predicate) {
                continue 'retry;
            }
        }
        let mut objects = std::mem::take(&mut b.objects);
        objects.shuffle(&mut b.rng);
        for o in &mut objects {
            let class = ScaleClass::of_area(o.bbox[2] * o.bbox[3]).index();
            if b.rng.gen_bool(config.color_confusion[class]) {
                o.perceived_color = b.pick_other(Color::ALL, o.color);
            }
        }
        let size = b.size();
        let expression_id = format!("{}-{}-{:05}", config.id_prefix, config.seed, index);
        let scene = SyntheticScene {
            seed: config.seed,
            index,
            image_id: format!("{expression_id}-img"),
            expression_id,
            image_size: size,
            targets: predicate.resolve(&objects, size),
            text: predicate.render(),
            objects,
            predicate,
        };
        if scene.targets.len() != k {
            return Err(Error::InvariantViolation {
                at: format!("scene '{}'", scene.expression_id),
                message: format!("built {k} targets but predicate selects {}", scene.targets.len()),
            });
        }
        scene.self_check()?;
        return Ok(scene);
    }
}

/// Generates `config.scenes` scenes. Exactly `round(no_target_rate * scenes)`
/// of them have no target. Scene `i` depends only on `(seed, i)` and its
/// no-target flag, so the result is identical in every [`Exec`] mode.
pub fn generate(config: &SynthConfig, exec: Exec) -> Result<Vec<SyntheticScene>> {
    config.validate()?;
    let n_empty = (config.no_target_rate * config.scenes as f64).round() as usize;
    let mut flags = vec![false; config.scenes];
    flags[..n_empty].iter_mut().for_each(|f| *f = true);
    flags.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    exec.map_range(config.scenes, |i| build_scene(config, i, flags[i]))
        .into_iter()
        .collect()
}

/// Feature width per row; `d_model` must be at least this.
pub const ROW_FEATURES: usize = OBJECT_FEATURES + INDICATOR_FEATURES + 6;
const OBJECT_FEATURES: usize = 13;
const INDICATOR_FEATURES: usize = 12;

/// Category (4), perceived color (4), normalized cxcywh (4) and presence (1).
fn object_features(obj: &SceneObject, size: (u32, u32)) -> Result<[f64; OBJECT_FEATURES]> {
    let mut f = [0.0; OBJECT_FEATURES];
    f[obj.category.index()] = 1.0;
    f[4 + obj.perceived_color.index()] = 1.0;
    let nb = obj.bounding_box()?.to_normalized_cxcywh(size.0 as f64, size.1 as f64);
    f[8..12].copy_from_slice(&nb);
    f[12] = 1.0;
    Ok(f)
}

/// Indicator of the expression: category (4), color (4), side (4).
fn expression_indicator(p: &Predicate) -> [f64; 12] {
    let mut f = [0.0; 12];
    if let Some(c) = p.category {
        f[c.index()] = 1.0;
    }
    if let Some(c) = p.color {
        f[4 + c.index()] = 1.0;
    }
    if let Some(s) = p.side {
        f[8 + s.index()] = 1.0;
    }
    f
}

/// Turns a scene into decoder inputs.
///
/// Row `j` of both the queries and the context holds object `j`, the
/// expression indicator, whether the object agrees with each constraint and
/// which constraints are active. Rows past the last object carry only the
/// indicator and the active flags.
pub fn featurize(scene: &SyntheticScene, config: &NgdinoConfig) -> Result<Example> {
    let (slots, d) = (config.slots, config.d_model);
    if scene.objects.len() > slots {
        return Err(Error::TooManyObjects {
            objects: scene.objects.len(),
            slots,
        });
    }
    if d < ROW_FEATURES {
        return Err(Error::InvalidConfig(format!(
            "d_model {d} is below the {ROW_FEATURES} synthetic features"
        )));
    }
    let size = scene.image_size;
    let p = &scene.predicate;
    let ind = expression_indicator(p);
    let active = [p.category.is_some(), p.color.is_some(), p.side.is_some()].map(|a| f64::from(u8::from(a)));
    const AGREE: usize = OBJECT_FEATURES + INDICATOR_FEATURES;
    let mut q = vec![0.0; slots * d];
    let mut anchors = vec![0.5; slots * 4];
    for j in 0..slots {
        let row = &mut q[j * d..(j + 1) * d];
        row[OBJECT_FEATURES..AGREE].copy_from_slice(&ind);
        row[AGREE + 3..AGREE + 6].copy_from_slice(&active);
    }
    for (j, obj) in scene.objects.iter().enumerate() {
        let of = object_features(obj, size)?;
        let row = &mut q[j * d..(j + 1) * d];
        row[..OBJECT_FEATURES].copy_from_slice(&of);
        let agree = [
            p.category == Some(obj.category),
            p.color == Some(obj.perceived_color),
            p.side.is_some_and(|s| s.contains(obj.center(), size)),
        ];
        for (k, a) in agree.into_iter().enumerate() {
            row[AGREE + k] = f64::from(u8::from(a));
        }
        anchors[j * 4..j * 4 + 4].copy_from_slice(&of[8..12]);
    }
    let ctx = q.clone();
    let boxes = scene
        .targets
        .iter()
        .map(|&t| {
            Ok(scene.objects[t]
                .bounding_box()?
                .to_normalized_cxcywh(size.0 as f64, size.1 as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Example {
        q_det: Tensor::new(vec![slots, d], q)?,
        context: Tensor::new(vec![slots, d], ctx)?,
        anchors: Some(Tensor::new(vec![slots, 4], anchors)?),
        target: Target {
            count: boxes.len(),
            boxes,
        },
    })
}

pub fn ground_truth_records(scenes: &[SyntheticScene]) -> Result<Vec<ExpressionRecord>> {
    scenes
        .iter()
        .map(|s| {
            let targets = s
                .targets
                .iter()
                .map(|&t| {
                    let o = &s.objects[t];
                    Ok(DetectionInstance::ground_truth(o.bounding_box()?, o.category.as_str()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExpressionRecord {
                expression_id: s.expression_id.clone(),
                image_id: s.image_id.clone(),
                image_size: s.image_size,
                text: s.text.clone(),
                targets,
            })
        })
        .collect()
}

/// Predictions that reproduce the ground truth exactly, with score 1.
pub fn answer_key(scenes: &[SyntheticScene]) -> Result<Vec<PredictionRecord>> {
    scenes
        .iter()
        .map(|s| {
            let boxes = s
                .targets
                .iter()
                .map(|&t| {
                    let o = &s.objects[t];
                    DetectionInstance::prediction(o.bounding_box()?, 1.0, Some(o.category.as_str().to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PredictionRecord {
                expression_id: s.expression_id.clone(),
                boxes,
            })
        })
        .collect()
}

/// Writes the ground-truth document and the matching answer key.
pub fn export_as_benchmark(
    scenes: &[SyntheticScene],
    gt_path: impl AsRef<Path>,
    key_path: impl AsRef<Path>,
) -> Result<()> {
    write_file(gt_path, &ground_truth_to_string(&ground_truth_records(scenes)?))?;
    write_file(key_path, &predictions_to_string(&answer_key(scenes)?))
}

/// Scenes as newline-delimited JSON, one scene per line.
pub fn scenes_to_string(scenes: &[SyntheticScene]) -> String {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s).expect("scenes serialize"));
        out.push('\n');
    }
    out
}
