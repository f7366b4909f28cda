//! End-to-end desk-scale experiments: generate a synthetic suite, train the
//! decoder on it, and score the trained model through the ordinary
//! evaluation path.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, DetectionInstance, PredictionRecord};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalOptions};
use crate::exec::Exec;
use crate::metrics::MetricReport;
use crate::ngdino::{predict, train, Ablation, Detections, EpochLog, Example, Ngdino, NgdinoConfig, Schedule};
use crate::synth::{featurize, generate, ground_truth_records, SynthConfig, SyntheticScene};

/// Offset between the training suite seed and the held-out suite seed.
const EVAL_SEED_OFFSET: u64 = 0x5eed_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Training suite; `suite.seed` also seeds initialization and shuffling.
    pub suite: SynthConfig,
    pub eval_scenes: usize,
    pub model: NgdinoConfig,
    pub schedule: Schedule,
    /// Slots scoring above this become predictions.
    pub score_threshold: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            suite: SynthConfig {
                scenes: 2000,
                ..SynthConfig::default()
            },
            eval_scenes: 500,
            model: NgdinoConfig::default(),
            schedule: Schedule::default(),
            score_threshold: 0.5,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        if self.eval_scenes == 0 {
            return Err(Error::InvalidConfig("eval_scenes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::InvalidConfig(format!(
                "score_threshold {} must lie in [0, 1)",
                self.score_threshold
            )));
        }
        if self.suite.max_objects > self.model.slots {
            return Err(Error::InvalidConfig(format!(
                "max_objects {} exceeds the {} decoder slots",
                self.suite.max_objects, self.model.slots
            )));
        }
        Ok(())
    }

    /// The same configuration with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.suite.seed = seed;
        c.schedule.seed = seed;
        c
    }

    pub fn eval_suite(&self) -> SynthConfig {
        SynthConfig {
            scenes: self.eval_scenes,
            seed: self.suite.seed.wrapping_add(EVAL_SEED_OFFSET),
            id_prefix: format!("{}-eval", self.suite.id_prefix),
            ..self.suite.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub model: Ngdino,
    pub logs: Vec<EpochLog>,
    pub predictions: Vec<PredictionRecord>,
    pub report: MetricReport,
}

/// Converts decoder slots into predictions. Only slots holding an object
/// can fire, and a fired slot inherits that object's category.
pub fn to_predictions(scene: &SyntheticScene, det: &Detections, threshold: f64) -> Result<PredictionRecord> {
    let (w, h) = (scene.image_size.0 as f64, scene.image_size.1 as f64);
    let mut boxes = Vec::new();
    for (j, obj) in scene.objects.iter().enumerate() {
        let score = det.scores[j];
        if score <= threshold {
            continue;
        }
        let [cx, cy, bw, bh] = det.boxes[j];
        let x1 = ((cx - bw / 2.0) * w).clamp(0.0, w);
        let y1 = ((cy - bh / 2.0) * h).clamp(0.0, h);
        let x2 = ((cx + bw / 2.0) * w).clamp(0.0, w);
        let y2 = ((cy + bh / 2.0) * h).clamp(0.0, h);
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        let bbox = BoundingBox::new(x1, y1, x2 - x1, y2 - y1)?;
        boxes.push(DetectionInstance::prediction(
            bbox,
            score,
            Some(obj.category.as_str().to_string()),
        )?);
    }
    Ok(PredictionRecord {
        expression_id: scene.expression_id.clone(),
        boxes,
    })
}

pub fn featurize_all(scenes: &[SyntheticScene], model: &NgdinoConfig, exec: Exec) -> Result<Vec<Example>> {
    exec.map(scenes, |s| featurize(s, model)).into_iter().collect()
}

/// Scores a trained model on `scenes`. Count metrics use the number head's
/// bin when the model has one.
pub fn evaluate_model(
    model: &Ngdino,
    scenes: &[SyntheticScene],
    threshold: f64,
    opts: &EvalOptions,
    exec: Exec,
) -> Result<(Vec<PredictionRecord>, MetricReport)> {
    let examples = featurize_all(scenes, &model.config, exec)?;
    let dets = predict(model, &examples, exec)?;
    let predictions = scenes
        .iter()
        .zip(&dets)
        .map(|(s, d)| to_predictions(s, d, threshold))
        .collect::<Result<Vec<_>>>()?;
    let bins: Option<HashMap<String, usize>> = model.config.ablation.has_head().then(|| {
        scenes
            .iter()
            .zip(&dets)
            .filter_map(|(s, d)| Some((s.expression_id.clone(), d.count_bin?)))
            .collect()
    });
    let gt = ground_truth_records(scenes)?;
    let report = evaluate(&gt, &predictions, opts, bins.as_ref())?;
    Ok((predictions, report))
}

/// Generates both suites, trains, and evaluates on the held-out suite.
pub fn run_toy(config: &ToyConfig, exec: Exec, on_epoch: impl FnMut(&EpochLog)) -> Result<ToyRun> {
    config.validate()?;
    let train_scenes = generate(&config.suite, exec)?;
    let eval_scenes = generate(&config.eval_suite(), exec)?;
    let data = featurize_all(&train_scenes, &config.model, exec)?;
    let mut model = Ngdino::new(config.model.clone(), config.suite.seed)?;
    let logs = train(&mut model, &data, &config.schedule, exec, on_epoch)?;
    let opts = EvalOptions {
        exec,
        ..EvalOptions::default()
    };
    let (predictions, report) = evaluate_model(&model, &eval_scenes, config.score_threshold, &opts, exec)?;
    Ok(ToyRun {
        model,
        logs,
        predictions,
        report,
    })
}

/// Which component grid to sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Every combination of count head and number cross-attention.
    Components,
    /// Number-query slice length 1, 10 and 100.
    SliceLength,
}

pub const SLICE_LENGTHS: [usize; 3] = [1, 10, 100];

/// Cell label and configuration for each cell of `grid`.
pub fn grid_cells(base: &ToyConfig, grid: Grid) -> Vec<(String, ToyConfig)> {
    match grid {
        Grid::Components => Ablation::ALL
            .iter()
            .map(|&a| {
                let mut c = base.clone();
                c.model.ablation = a;
                (format!("ablate-{a}"), c)
            })
            .collect(),
        Grid::SliceLength => SLICE_LENGTHS
            .iter()
            .map(|&ls| {
                let mut c = base.clone();
                c.model.per_bin = ls;
                (format!("ls-{ls}"), c)
            })
            .collect(),
    }
}
