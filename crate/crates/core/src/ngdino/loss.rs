use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::count::bin_of;
use crate::domain::BoundingBox;
use crate::error::{Error, Result};
use crate::geometry::giou;
use crate::tensor::{sigmoid, Var};

use super::assign::assign;
use super::layer::ForwardOutput;
use super::LossWeights;

/// Ground truth of one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    /// Normalized cxcywh.
    pub boxes: Vec<[f64; 4]>,
    pub count: usize,
}

/// Unweighted loss terms, averaged over the batch; `total` is weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub num: f64,
}

impl Add for LossTerms {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            total: self.total + o.total,
            l1: self.l1 + o.l1,
            giou: self.giou + o.giou,
            cls: self.cls + o.cls,
            num: self.num + o.num,
        }
    }
}

impl AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl LossTerms {
    pub fn scaled(self, c: f64) -> Self {
        Self {
            total: self.total * c,
            l1: self.l1 * c,
            giou: self.giou * c,
            cls: self.cls * c,
            num: self.num * c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub terms: LossTerms,
    /// Per batch item, `(gt, slot)` pairs of the optimal assignment.
    pub assignments: Vec<Vec<(usize, usize)>>,
}

fn cxcywh_box(b: &[f64]) -> Result<BoundingBox> {
    BoundingBox::new(b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[2], b[3])
}

/// `1 - GIoU` per row of two `[G, 4]` cxcywh tensors, summed.
fn giou_loss<'t>(p: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    let col = |v: Var<'t>, i: usize| v.slice_cols(i, i + 1);
    let corners = |v: Var<'t>| -> Result<[Var<'t>; 4]> {
        let (cx, cy, w, h) = (col(v, 0)?, col(v, 1)?, col(v, 2)?, col(v, 3)?);
        Ok([
            cx.sub(w.scale(0.5))?,
            cy.sub(h.scale(0.5))?,
            cx.add(w.scale(0.5))?,
            cy.add(h.scale(0.5))?,
        ])
    };
    let [px1, py1, px2, py2] = corners(p)?;
    let [gx1, gy1, gx2, gy2] = corners(g)?;
    let iw = px2.minimum(gx2)?.sub(px1.maximum(gx1)?)?.relu();
    let ih = py2.minimum(gy2)?.sub(py1.maximum(gy1)?)?.relu();
    let inter = iw.mul(ih)?;
    let area_p = col(p, 2)?.mul(col(p, 3)?)?;
    let area_g = col(g, 2)?.mul(col(g, 3)?)?;
    let union = area_p.add(area_g)?.sub(inter)?;
    let ew = px2.maximum(gx2)?.sub(px1.minimum(gx1)?)?;
    let eh = py2.maximum(gy2)?.sub(py1.minimum(gy1)?)?;
    let enclosing = ew.mul(eh)?;
    let g_iou = inter.div(union)?.sub(enclosing.sub(union)?.div(enclosing)?)?;
    Ok(g_iou.scale(-1.0).add_scalar(1.0).sum())
}

/// Set-prediction loss with the count term.
///
/// Slots are assigned to ground-truth boxes by minimum cost
/// `l1 * L1 + giou * (1 - GIoU) - cls * p(object)`. Matched slots pay the box
/// terms (normalized by the number of ground-truth boxes) and are the
/// positives of a binary objectness loss averaged over slots. The count
/// term is the cross-entropy of the count logits against `bin_of(count)`.
pub fn training_loss<'t>(out: &ForwardOutput<'t>, targets: &[Target], weights: &LossWeights) -> Result<LossParts<'t>> {
    let bshape = out.boxes.shape();
    let (batch, slots) = (bshape[0], bshape[1]);
    if batch == 0 || targets.len() != batch {
        return Err(Error::LengthMismatch {
            left: targets.len(),
            right: batch,
        });
    }
    let tape = out.boxes.tape();
    let box_values = out.boxes.value();
    let logit_values = out.logits.value();
    let mut terms = LossTerms::default();
    let mut assignments = Vec::with_capacity(batch);
    let mut l1_vars = Vec::new();
    let mut giou_vars = Vec::new();
    let mut cls_vars = Vec::new();

    for (b, target) in targets.iter().enumerate() {
        let n_gt = target.boxes.len();
        if n_gt > slots {
            return Err(Error::TooManyObjects { objects: n_gt, slots });
        }
        let pb = &box_values[b * slots * 4..(b + 1) * slots * 4];
        let pl = &logit_values[b * slots..(b + 1) * slots];
        let mut cost = Vec::with_capacity(n_gt * slots);
        for g in &target.boxes {
            let gb = cxcywh_box(g)?;
            for s in 0..slots {
                let p = &pb[s * 4..s * 4 + 4];
                let l1: f64 = p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum();
                let gi = giou(&cxcywh_box(p)?, &gb);
                cost.push(weights.l1 * l1 + weights.giou * (1.0 - gi) - weights.cls * sigmoid(pl[s]));
            }
        }
        let pairs = assign(&cost, n_gt, slots)?;

        let item_boxes = out.boxes.slice_rows(b, b + 1)?.reshape(vec![slots, 4])?;
        let item_logits = out.logits.slice_rows(b, b + 1)?.reshape(vec![slots])?;
        let mut positive = vec![0.0; slots];
        if n_gt > 0 {
            let slot_idx: Vec<usize> = pairs.iter().map(|&(_, s)| s).collect();
            let gt_rows: Vec<f64> = pairs.iter().flat_map(|&(g, _)| target.boxes[g]).collect();
            let p = item_boxes.gather_rows(&slot_idx)?;
            let g = tape.constant(vec![n_gt, 4], gt_rows)?;
            let inv = 1.0 / n_gt as f64;
            l1_vars.push(p.l1_loss(g)?.scale(inv));
            giou_vars.push(giou_loss(p, g)?.scale(inv));
            for &s in &slot_idx {
                positive[s] = 1.0;
            }
        }
        let t = tape.constant(vec![slots], positive)?;
        cls_vars.push(item_logits.softplus().sub(item_logits.mul(t)?)?.mean());
        assignments.push(pairs);
    }

    let inv_batch = 1.0 / batch as f64;
    let reduce = |vars: &[Var<'t>]| -> Result<Option<Var<'t>>> {
        if vars.is_empty() {
            return Ok(None);
        }
        Ok(Some(tape.concat_rows(vars)?.sum().scale(inv_batch)))
    };
    let mut total: Option<Var<'t>> = None;
    let mut push = |v: Option<Var<'t>>, w: f64, slot: &mut f64| -> Result<()> {
        if let Some(v) = v {
            *slot = v.item();
            let weighted = v.scale(w);
            total = Some(match total {
                Some(t) => t.add(weighted)?,
                None => weighted,
            });
        }
        Ok(())
    };
    push(reduce(&l1_vars)?, weights.l1, &mut terms.l1)?;
    push(reduce(&giou_vars)?, weights.giou, &mut terms.giou)?;
    push(reduce(&cls_vars)?, weights.cls, &mut terms.cls)?;
    if let Some(count) = &out.count {
        let bins: Vec<usize> = targets.iter().map(|t| bin_of(t.count).index()).collect();
        push(Some(count.logits.cross_entropy(&bins)?), weights.num, &mut terms.num)?;
    }
    let total = total.expect("objectness term is always present");
    terms.total = total.item();
    Ok(LossParts {
        total,
        terms,
        assignments,
    })
}
