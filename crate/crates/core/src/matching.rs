//! One-to-one assignment of predicted boxes to ground-truth boxes.
//!
//! Two matchers are provided. The greedy matcher visits predictions in
//! descending score order and lets each claim the best remaining eligible
//! ground truth. The exhaustive matcher maximizes the number of true
//! positives (then total IoU) over every one-to-one assignment and serves as
//! its oracle.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::DetectionInstance;
use crate::error::{Error, Result};
use crate::geometry::iou;

/// Largest per-side instance count the exhaustive matcher accepts.
pub const OPTIMAL_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    #[default]
    Greedy,
    Optimal,
}

impl fmt::Display for MatcherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatcherKind::Greedy => "greedy",
            MatcherKind::Optimal => "optimal",
        })
    }
}

impl FromStr for MatcherKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(MatcherKind::Greedy),
            "optimal" => Ok(MatcherKind::Optimal),
            other => Err(Error::InvalidConfig(format!("unknown matcher '{other}'"))),
        }
    }
}

/// Whether a match also needs the predicted and ground-truth categories to
/// agree. Only applies when both sides carry a category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryMode {
    #[default]
    Strict,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub matcher: MatcherKind,
    pub category_mode: CategoryMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            matcher: MatcherKind::Greedy,
            category_mode: CategoryMode::Strict,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    pub fn with_threshold(self, iou_threshold: f64) -> Self {
        Self { iou_threshold, ..self }
    }

    pub fn run(&self, preds: &[DetectionInstance], gts: &[DetectionInstance]) -> Result<MatchOutcome> {
        match self.matcher {
            MatcherKind::Greedy => Ok(match_expression(preds, gts, self.iou_threshold, self.category_mode)),
            MatcherKind::Optimal => match_expression_optimal(preds, gts, self.iou_threshold, self.category_mode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// Sorted by prediction index.
    pub tp_pairs: Vec<TpPair>,
    pub fp_indices: Vec<usize>,
    pub fn_indices: Vec<usize>,
    pub tn: u8,
}

impl MatchOutcome {
    pub fn tp(&self) -> usize {
        self.tp_pairs.len()
    }
    pub fn fp(&self) -> usize {
        self.fp_indices.len()
    }
    pub fn fn_(&self) -> usize {
        self.fn_indices.len()
    }

    /// Every prediction matched and every target covered, on a targeted expression.
    pub fn is_exact_cover(&self) -> bool {
        self.tp() > 0 && self.fp_indices.is_empty() && self.fn_indices.is_empty()
    }

    fn from_assignment(assigned: &[Option<(usize, f64)>], n_gt: usize) -> Self {
        let mut covered = vec![false; n_gt];
        let mut tp_pairs = Vec::new();
        let mut fp_indices = Vec::new();
        for (pred, slot) in assigned.iter().enumerate() {
            match *slot {
                Some((gt, iou)) => {
                    covered[gt] = true;
                    tp_pairs.push(TpPair { pred, gt, iou });
                }
                None => fp_indices.push(pred),
            }
        }
        let fn_indices = (0..n_gt).filter(|&g| !covered[g]).collect();
        let tn = u8::from(assigned.is_empty() && n_gt == 0);
        Self {
            tp_pairs,
            fp_indices,
            fn_indices,
            tn,
        }
    }
}

fn categories_agree(mode: CategoryMode, p: &DetectionInstance, g: &DetectionInstance) -> bool {
    match (mode, &p.category, &g.category) {
        (CategoryMode::Strict, Some(a), Some(b)) => a == b,
        _ => true,
    }
}

/// `eligible[p][g]` is the IoU when pair (p, g) may match, `None` otherwise.
pub fn eligibility(
    preds: &[DetectionInstance],
    gts: &[DetectionInstance],
    iou_threshold: f64,
    mode: CategoryMode,
) -> Vec<Vec<Option<f64>>> {
    preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| {
                    let v = iou(&p.bbox, &g.bbox);
                    (v >= iou_threshold && categories_agree(mode, p, g)).then_some(v)
                })
                .collect()
        })
        .collect()
}

/// Greedy matching: predictions by descending score (ties by input order),
/// each claiming the unclaimed eligible ground truth of highest IoU (ties by
/// lowest index).
pub fn match_expression(
    preds: &[DetectionInstance],
    gts: &[DetectionInstance],
    iou_threshold: f64,
    mode: CategoryMode,
) -> MatchOutcome {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    greedy_on_matrix(&scores, &eligibility(preds, gts, iou_threshold, mode), gts.len())
}

pub fn greedy_on_matrix(scores: &[f64], eligible: &[Vec<Option<f64>>], n_gt: usize) -> MatchOutcome {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut claimed = vec![false; n_gt];
    let mut assigned = vec![None; scores.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, cell) in eligible[p].iter().enumerate() {
            if let Some(v) = *cell {
                if !claimed[g] && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
        }
        if let Some((g, v)) = best {
            claimed[g] = true;
            assigned[p] = Some((g, v));
        }
    }
    MatchOutcome::from_assignment(&assigned, n_gt)
}

/// Maximum-cardinality matching (ties broken by maximal total IoU) over all
/// one-to-one assignments respecting the threshold.
pub fn match_expression_optimal(
    preds: &[DetectionInstance],
    gts: &[DetectionInstance],
    iou_threshold: f64,
    mode: CategoryMode,
) -> Result<MatchOutcome> {
    optimal_on_matrix(&eligibility(preds, gts, iou_threshold, mode), preds.len(), gts.len())
}

pub fn optimal_on_matrix(eligible: &[Vec<Option<f64>>], n_pred: usize, n_gt: usize) -> Result<MatchOutcome> {
    if n_pred > OPTIMAL_LIMIT || n_gt > OPTIMAL_LIMIT {
        return Err(Error::InstanceLimitExceeded {
            preds: n_pred,
            gts: n_gt,
            limit: OPTIMAL_LIMIT,
        });
    }
    // best[i][mask]: best (tp, iou) reachable from prediction i onward with
    // ground truths in `mask` already used. Covers every partial injection.
    let states = 1usize << n_gt;
    let mut best = vec![vec![(0usize, 0.0f64); states]; n_pred + 1];
    let better = |a: (usize, f64), b: (usize, f64)| a.0 > b.0 || (a.0 == b.0 && a.1 > b.1);
    for i in (0..n_pred).rev() {
        for mask in 0..states {
            let mut cur = best[i + 1][mask];
            for (g, cell) in eligible[i].iter().enumerate() {
                if let Some(v) = *cell {
                    if mask & (1 << g) == 0 {
                        let rest = best[i + 1][mask | (1 << g)];
                        let cand = (rest.0 + 1, rest.1 + v);
                        if better(cand, cur) {
                            cur = cand;
                        }
                    }
                }
            }
            best[i][mask] = cur;
        }
    }
    let mut assigned = vec![None; n_pred];
    let mut mask = 0usize;
    for (i, slot) in assigned.iter_mut().enumerate() {
        let target = best[i][mask];
        if best[i + 1][mask] == target {
            continue;
        }
        for (g, cell) in eligible[i].iter().enumerate() {
            if let Some(v) = *cell {
                if mask & (1 << g) == 0 {
                    let rest = best[i + 1][mask | (1 << g)];
                    if (rest.0 + 1, rest.1 + v) == target {
                        *slot = Some((g, v));
                        mask |= 1 << g;
                        break;
                    }
                }
            }
        }
    }
    Ok(MatchOutcome::from_assignment(&assigned, n_gt))
}
