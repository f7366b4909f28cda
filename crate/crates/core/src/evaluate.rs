//! Whole-suite evaluation: joins predictions to ground truth, matches each
//! expression, and reduces the per-expression results into a [`MetricReport`].

use std::collections::{BTreeMap, HashMap};

use crate::count::bin_of;
use crate::domain::{DetectionInstance, ExpressionRecord, PredictionRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matching::{MatchConfig, MatchOutcome};
use crate::metrics::{
    count_metrics, image_level_outcome, instance_metrics, n_acc, pr_at, pr_key, scale_stratified_acc, scale_tallies,
    MetricReport, ReportConfig, Tally, PR_THRESHOLDS,
};

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub matching: MatchConfig,
    pub pr_thresholds: Vec<f64>,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            pr_thresholds: PR_THRESHOLDS.to_vec(),
            exec: Exec::Sequential,
        }
    }
}

/// Result of evaluating one expression.
#[derive(Debug, Clone)]
pub struct ExpressionResult {
    pub outcome: MatchOutcome,
    pub has_targets: bool,
    pub prediction_count: usize,
    pub target_count: usize,
    /// Outcome at each Pr@ threshold (targeted expressions only).
    pub exact_at: Vec<MatchOutcome>,
    pub scale: [Tally; 3],
}

pub fn evaluate_expression(
    gts: &[DetectionInstance],
    preds: &[DetectionInstance],
    opts: &EvalOptions,
) -> Result<ExpressionResult> {
    let outcome = opts.matching.run(preds, gts)?;
    let exact_at = if gts.is_empty() {
        Vec::new()
    } else {
        opts.pr_thresholds
            .iter()
            .map(|&t| opts.matching.with_threshold(t).run(preds, gts))
            .collect::<Result<_>>()?
    };
    let scale = scale_tallies(&outcome, preds, gts);
    Ok(ExpressionResult {
        outcome,
        has_targets: !gts.is_empty(),
        prediction_count: preds.len(),
        target_count: gts.len(),
        exact_at,
        scale,
    })
}

/// Evaluates predictions against ground truth.
///
/// `predicted_bins` supplies count-bin predictions per expression id (for
/// example from a number head). Without it the bin of the predicted box
/// count is used.
pub fn evaluate(
    ground_truth: &[ExpressionRecord],
    predictions: &[PredictionRecord],
    opts: &EvalOptions,
    predicted_bins: Option<&HashMap<String, usize>>,
) -> Result<MetricReport> {
    opts.matching.validate()?;
    for &t in &opts.pr_thresholds {
        opts.matching.with_threshold(t).validate()?;
    }
    if ground_truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let known: HashMap<&str, usize> = ground_truth
        .iter()
        .enumerate()
        .map(|(i, r)| (r.expression_id.as_str(), i))
        .collect();
    let mut answer: Vec<Option<&PredictionRecord>> = vec![None; ground_truth.len()];
    for p in predictions {
        let idx = *known
            .get(p.expression_id.as_str())
            .ok_or_else(|| Error::UnknownExpression(p.expression_id.clone()))?;
        if answer[idx].replace(p).is_some() {
            return Err(Error::DuplicatePrediction(p.expression_id.clone()));
        }
    }
    let mut warnings = Vec::new();
    for (r, a) in ground_truth.iter().zip(&answer) {
        if a.is_none() {
            let msg = format!(
                "no prediction for expression '{}'; treating as empty answer",
                r.expression_id
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let results = opts.exec.map_range(ground_truth.len(), |i| {
        let preds = answer[i].map(|p| p.boxes.as_slice()).unwrap_or(&[]);
        evaluate_expression(&ground_truth[i].targets, preds, opts)
    });
    let results: Vec<ExpressionResult> = results.into_iter().collect::<Result<_>>()?;

    let instance: Tally = results.iter().map(|r| Tally::from_outcome(&r.outcome)).sum();
    let image: Tally = results
        .iter()
        .map(|r| image_level_outcome(&r.outcome, r.has_targets))
        .sum();
    let (acc_inst, f1_inst) = instance_metrics(&instance)?;
    let (acc_img, f1_img) = instance_metrics(&image)?;

    let mut pr = BTreeMap::new();
    for (k, &t) in opts.pr_thresholds.iter().enumerate() {
        if let Some(v) = pr_at(results.iter().filter(|r| r.has_targets).map(|r| &r.exact_at[k])) {
            pr.insert(pr_key(t), v);
        }
    }

    let no_target = results.iter().filter(|r| !r.has_targets).map(|r| r.prediction_count);
    let n_acc = match n_acc(no_target) {
        Ok(v) => Some(v),
        Err(Error::NoNegativeSamples) => None,
        Err(e) => return Err(e),
    };

    let mut scale = [Tally::default(); 3];
    for r in &results {
        for (acc, t) in scale.iter_mut().zip(r.scale) {
            *acc += t;
        }
    }

    let true_counts: Vec<usize> = results.iter().map(|r| r.target_count).collect();
    let (bins, count_source) = match predicted_bins {
        Some(map) => (
            ground_truth
                .iter()
                .zip(&results)
                .map(|(g, r)| {
                    map.get(&g.expression_id)
                        .copied()
                        .unwrap_or_else(|| bin_of(r.prediction_count).index())
                })
                .collect::<Vec<_>>(),
            "number head",
        ),
        None => (
            results.iter().map(|r| bin_of(r.prediction_count).index()).collect(),
            "predicted box count",
        ),
    };
    let (count_mae, count_bin_accuracy) = count_metrics(&bins, &true_counts)?;

    Ok(MetricReport {
        acc_inst,
        f1_inst,
        acc_img,
        f1_img,
        pr_at: pr,
        n_acc,
        acc_by_scale: scale_stratified_acc(&scale),
        count_mae,
        count_bin_accuracy,
        config: ReportConfig {
            iou_threshold: opts.matching.iou_threshold,
            matcher: opts.matching.matcher,
            category_mode: opts.matching.category_mode,
            image_level_f1: "2TP/(2TP+FP)".into(),
            count_source: count_source.into(),
        },
        instance_tally: instance,
        image_tally: image,
        expression_count: ground_truth.len(),
        no_target_count: results.iter().filter(|r| !r.has_targets).count(),
        warnings,
    })
}
