//! Instance- and image-level grounding metrics.
//!
//! Instance level counts every box: matched predictions are TP, unmatched
//! predictions FP, unmatched targets FN, and a no-target expression answered
//! with nothing is one TN. Image level scores each expression as a whole: a
//! targeted expression is TP only when its prediction set covers the targets
//! exactly, and FP otherwise. There is no image-level FN, so
//! `F1_img = 2TP / (2TP + FP)`.

use std::collections::BTreeMap;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::count::bin_of;
use crate::domain::{DetectionInstance, ScaleClass};
use crate::error::{Error, Result};
use crate::matching::{CategoryMode, MatchOutcome, MatcherKind};

/// Thresholds reported as `Pr@t`.
pub const PR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Tally {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn from_outcome(m: &MatchOutcome) -> Self {
        Self {
            tp: m.tp() as u64,
            fp: m.fp() as u64,
            fn_: m.fn_() as u64,
            tn: m.tn as u64,
        }
    }
}

impl Add for Tally {
    type Output = Tally;
    fn add(self, o: Tally) -> Tally {
        Tally {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for Tally {
    fn add_assign(&mut self, o: Tally) {
        *self = *self + o;
    }
}

impl Sum for Tally {
    fn sum<I: Iterator<Item = Tally>>(iter: I) -> Tally {
        iter.fold(Tally::default(), Add::add)
    }
}

/// `(accuracy, F1)` from a tally. F1 is 0 when `2TP + FP + FN = 0`.
pub fn instance_metrics(t: &Tally) -> Result<(f64, f64)> {
    if t.total() == 0 {
        return Err(Error::EmptyTally);
    }
    let acc = (t.tp + t.tn) as f64 / t.total() as f64;
    let denom = 2 * t.tp + t.fp + t.fn_;
    let f1 = if denom == 0 {
        0.0
    } else {
        (2 * t.tp) as f64 / denom as f64
    };
    Ok((acc, f1))
}

/// Image-level increment for one expression.
pub fn image_level_outcome(m: &MatchOutcome, has_targets: bool) -> Tally {
    let n_preds = m.tp() + m.fp();
    let mut t = Tally::default();
    if has_targets {
        if m.fp_indices.is_empty() && m.fn_indices.is_empty() {
            t.tp = 1;
        } else {
            t.fp = 1;
        }
    } else if n_preds == 0 {
        t.tn = 1;
    } else {
        t.fp = 1;
    }
    t
}

/// Fraction of targeted expressions whose instance F1 is exactly 1, given
/// outcomes matched at a single threshold. `None` when nothing is targeted.
pub fn pr_at<'a>(targeted: impl IntoIterator<Item = &'a MatchOutcome>) -> Option<f64> {
    let (mut hits, mut n) = (0u64, 0u64);
    for m in targeted {
        n += 1;
        hits += u64::from(m.is_exact_cover());
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Fraction of no-target expressions answered with zero boxes, given the
/// number of predicted boxes for each.
pub fn n_acc(no_target_prediction_counts: impl IntoIterator<Item = usize>) -> Result<f64> {
    let (mut hits, mut n) = (0u64, 0u64);
    for c in no_target_prediction_counts {
        n += 1;
        hits += u64::from(c == 0);
    }
    if n == 0 {
        return Err(Error::NoNegativeSamples);
    }
    Ok(hits as f64 / n as f64)
}

/// Per-stratum tallies for one expression: TP and FN follow the target's
/// scale, FP the predicted box's scale. TN has no area and is left out.
pub fn scale_tallies(m: &MatchOutcome, preds: &[DetectionInstance], gts: &[DetectionInstance]) -> [Tally; 3] {
    let mut out = [Tally::default(); 3];
    for pair in &m.tp_pairs {
        out[gts[pair.gt].bbox.scale_class().index()].tp += 1;
    }
    for &g in &m.fn_indices {
        out[gts[g].bbox.scale_class().index()].fn_ += 1;
    }
    for &p in &m.fp_indices {
        out[preds[p].bbox.scale_class().index()].fp += 1;
    }
    out
}

/// Accuracy per scale class; empty strata are absent from the map.
pub fn scale_stratified_acc(tallies: &[Tally; 3]) -> BTreeMap<ScaleClass, f64> {
    ScaleClass::ALL
        .iter()
        .filter_map(|&c| {
            let t = tallies[c.index()];
            let denom = t.tp + t.fp + t.fn_;
            (denom > 0).then(|| (c, t.tp as f64 / denom as f64))
        })
        .collect()
}

/// `(MAE, accuracy)` between predicted bin indices and the bins of the true
/// counts. Both are computed on bin indices.
pub fn count_metrics(predicted_bins: &[usize], true_counts: &[usize]) -> Result<(f64, f64)> {
    if predicted_bins.len() != true_counts.len() {
        return Err(Error::LengthMismatch {
            left: predicted_bins.len(),
            right: true_counts.len(),
        });
    }
    if predicted_bins.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut abs = 0usize;
    let mut hits = 0usize;
    for (&p, &c) in predicted_bins.iter().zip(true_counts) {
        let t = bin_of(c).index();
        abs += p.abs_diff(t);
        hits += usize::from(p == t);
    }
    let n = predicted_bins.len() as f64;
    Ok((abs as f64 / n, hits as f64 / n))
}

/// Formats a Pr@ threshold as a stable map key.
pub fn pr_key(t: f64) -> String {
    format!("{t:.1}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub iou_threshold: f64,
    pub matcher: MatcherKind,
    pub category_mode: CategoryMode,
    pub image_level_f1: String,
    pub count_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_inst: f64,
    pub f1_inst: f64,
    pub acc_img: f64,
    pub f1_img: f64,
    pub pr_at: BTreeMap<String, f64>,
    pub n_acc: Option<f64>,
    pub acc_by_scale: BTreeMap<ScaleClass, f64>,
    pub count_mae: f64,
    pub count_bin_accuracy: f64,
    pub config: ReportConfig,
    pub instance_tally: Tally,
    pub image_tally: Tally,
    pub expression_count: usize,
    pub no_target_count: usize,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary(&self) -> String {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        let mut out = format!(
            "F1_inst {}  Acc_inst {}  F1_img {}  Acc_img {}",
            pct(self.f1_inst),
            pct(self.acc_inst),
            pct(self.f1_img),
            pct(self.acc_img)
        );
        if let Some(n) = self.n_acc {
            out.push_str(&format!("  N-acc {}", pct(n)));
        }
        for (k, v) in &self.pr_at {
            out.push_str(&format!("  Pr@{k} {}", pct(*v)));
        }
        for (k, v) in &self.acc_by_scale {
            out.push_str(&format!("  Acc_{k} {}", pct(*v)));
        }
        out.push_str(&format!(
            "  count MAE {:.3}  count acc {}",
            self.count_mae,
            pct(self.count_bin_accuracy)
        ));
        out
    }
}
