use crate::count::NUM_BINS;
use crate::error::{Error, Result};
use crate::tensor::{scaled_dot_attention, Tape, Tensor, Var};

use super::{Ngdino, NgdinoConfig};

/// Smallest anchor coordinate mapped through the logit; keeps it finite.
const ANCHOR_CLAMP: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct AttnVars<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
pub struct LnVars<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars<'t> {
    pub w0: Var<'t>,
    pub b0: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
}

impl<'t> FfnVars<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(self.w0, Some(self.b0))?.relu().linear(self.w1, Some(self.b1))
    }
}

/// The count head shares the FFN shape: `D -> hidden -> 5`.
pub type HeadVars<'t> = FfnVars<'t>;

#[derive(Debug, Clone)]
pub struct LayerVars<'t> {
    pub self_attn: AttnVars<'t>,
    pub num_attn: Option<AttnVars<'t>>,
    pub ctx_attn: AttnVars<'t>,
    pub ffn: FfnVars<'t>,
    pub norms: [LnVars<'t>; 3],
}

#[derive(Debug, Clone)]
pub struct CountPrediction<'t> {
    /// `[B, 5]` pre-softmax scores.
    pub logits: Var<'t>,
    /// `[B, 5]`
    pub probs: Var<'t>,
    pub bins: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<'t> {
    /// `[B, L_d, 4]` normalized cxcywh in (0, 1).
    pub boxes: Var<'t>,
    /// `[B, L_d]`
    pub logits: Var<'t>,
    /// Count prediction of the last layer, when the model has a head.
    pub count: Option<CountPrediction<'t>>,
}

/// Parameters of an [`Ngdino`] bound to one tape.
#[derive(Debug, Clone)]
pub struct BoundModel<'t> {
    pub config: NgdinoConfig,
    pub layers: Vec<LayerVars<'t>>,
    pub head: Option<HeadVars<'t>>,
    pub bank: Option<Var<'t>>,
    pub box_w: Var<'t>,
    pub box_b: Var<'t>,
    pub obj_w: Var<'t>,
    pub obj_b: Var<'t>,
}

impl<'t> BoundModel<'t> {
    /// Binds every parameter as a tape leaf. The returned vars line up with
    /// the store for [`ParamStore::collect_grads`](crate::tensor::ParamStore::collect_grads).
    pub fn bind(model: &Ngdino, tape: &'t Tape) -> Result<(Self, Vec<Var<'t>>)> {
        let vars = model.params.bind(tape);
        Ok((Self::from_vars(model, &vars)?, vars))
    }

    /// Resolves named parameters from vars bound in store order.
    pub fn from_vars(model: &Ngdino, vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != model.params.len() {
            return Err(Error::LengthMismatch {
                left: vars.len(),
                right: model.params.len(),
            });
        }
        let get = |name: &str| -> Result<Var<'t>> {
            model
                .params
                .id(name)
                .map(|id| vars[id.index()])
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
        };
        let attn = |p: &str| -> Result<AttnVars<'t>> {
            Ok(AttnVars {
                wq: get(&format!("{p}.q.w"))?,
                bq: get(&format!("{p}.q.b"))?,
                wk: get(&format!("{p}.k.w"))?,
                bk: get(&format!("{p}.k.b"))?,
                wv: get(&format!("{p}.v.w"))?,
                bv: get(&format!("{p}.v.b"))?,
                wo: get(&format!("{p}.o.w"))?,
                bo: get(&format!("{p}.o.b"))?,
            })
        };
        let ffn = |p: &str| -> Result<FfnVars<'t>> {
            Ok(FfnVars {
                w0: get(&format!("{p}.0.w"))?,
                b0: get(&format!("{p}.0.b"))?,
                w1: get(&format!("{p}.1.w"))?,
                b1: get(&format!("{p}.1.b"))?,
            })
        };
        let norm = |p: String| -> Result<LnVars<'t>> {
            Ok(LnVars {
                gamma: get(&format!("{p}.gamma"))?,
                beta: get(&format!("{p}.beta"))?,
            })
        };
        let cfg = &model.config;
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            layers.push(LayerVars {
                self_attn: attn(&format!("layer{l}.self_attn"))?,
                num_attn: if cfg.ablation.has_xattn() {
                    Some(attn(&format!("layer{l}.num_attn"))?)
                } else {
                    None
                },
                ctx_attn: attn(&format!("layer{l}.ctx_attn"))?,
                ffn: ffn(&format!("layer{l}.ffn"))?,
                norms: [
                    norm(format!("layer{l}.norm1"))?,
                    norm(format!("layer{l}.norm2"))?,
                    norm(format!("layer{l}.norm3"))?,
                ],
            });
        }
        Ok(Self {
            config: cfg.clone(),
            layers,
            head: if cfg.ablation.has_head() {
                Some(ffn("head")?)
            } else {
                None
            },
            bank: if cfg.ablation.has_xattn() {
                Some(get("number_queries")?)
            } else {
                None
            },
            box_w: get("box.w")?,
            box_b: get("box.b")?,
            obj_w: get("objectness.w")?,
            obj_b: get("objectness.b")?,
        })
    }

    /// Runs every layer and the detection heads.
    ///
    /// `q_det: [B, L_d, D]`, `context: [B, L_c, D]`, `anchors: [B, L_d, 4]`.
    /// `count_override` forces the number-query slice per batch item.
    pub fn forward(
        &self,
        q_det: Var<'t>,
        context: Var<'t>,
        anchors: Option<&Tensor>,
        count_override: Option<&[usize]>,
    ) -> Result<ForwardOutput<'t>> {
        let mut q = q_det;
        let mut count = None;
        for layer in &self.layers {
            let (next, c) = decoder_layer_forward(
                q,
                context,
                layer,
                self.head.as_ref(),
                self.bank,
                &self.config,
                count_override,
            )?;
            q = next;
            count = c;
        }
        let (boxes, logits) = detection_heads(q, self, anchors)?;
        Ok(ForwardOutput { boxes, logits, count })
    }
}

/// Count distribution from detection queries: softmax of the mean over slots
/// of a per-slot FFN. Works on `[B, L_d, D]` or unbatched `[L_d, D]`.
pub fn predict_count<'t>(q_det: Var<'t>, head: &HeadVars<'t>) -> Result<CountPrediction<'t>> {
    let rank = q_det.shape().len();
    if rank < 2 {
        return Err(Error::shape("predict_count", &q_det.shape(), &[0, 0]));
    }
    let per_slot = head.apply(q_det)?;
    if per_slot.shape()[rank - 1] != NUM_BINS {
        return Err(Error::shape("predict_count", &per_slot.shape(), &[NUM_BINS]));
    }
    let logits = per_slot.mean_pool(rank - 2)?;
    let probs = logits.softmax(rank - 2)?;
    let bins = probs.argmax(rank - 2)?;
    Ok(CountPrediction { logits, probs, bins })
}

/// Rows `[per_bin * bin, per_bin * (bin + 1))` of the number-query bank.
pub fn select_number_queries<'t>(bank: Var<'t>, per_bin: usize, bin: usize) -> Result<Var<'t>> {
    if bin >= NUM_BINS {
        return Err(Error::BinOutOfRange(bin));
    }
    let shape = bank.shape();
    if shape.len() != 2 || shape[0] != NUM_BINS * per_bin {
        return Err(Error::shape("select_number_queries", &shape, &[NUM_BINS * per_bin]));
    }
    bank.slice_rows(per_bin * bin, per_bin * (bin + 1))
}

fn attention<'t>(x: Var<'t>, kv: Var<'t>, p: &AttnVars<'t>, heads: usize) -> Result<Var<'t>> {
    let q = x.linear(p.wq, Some(p.bq))?;
    let k = kv.linear(p.wk, Some(p.bk))?;
    let v = kv.linear(p.wv, Some(p.bv))?;
    let mixed = if heads == 1 {
        scaled_dot_attention(q, k, v)?
    } else {
        let d = *q.shape().last().unwrap_or(&0);
        if d % heads != 0 {
            return Err(Error::shape("attention heads", &q.shape(), &[heads]));
        }
        let hd = d / heads;
        let parts = (0..heads)
            .map(|h| {
                let (a, b) = (h * hd, (h + 1) * hd);
                scaled_dot_attention(q.slice_cols(a, b)?, k.slice_cols(a, b)?, v.slice_cols(a, b)?)
            })
            .collect::<Result<Vec<_>>>()?;
        x.tape().concat_cols(&parts)?
    };
    mixed.linear(p.wo, Some(p.bo))
}

/// Detection queries attend to number queries (keys and values).
/// `q_det: [B, L_d, D]`, `selected: [B, L_s, D]`; output has the shape of `q_det`.
pub fn number_cross_attention<'t>(
    q_det: Var<'t>,
    selected: Var<'t>,
    params: &AttnVars<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    let (sq, ss) = (q_det.shape(), selected.shape());
    if sq.len() != 3 || ss.len() != 3 || sq[0] != ss[0] || sq[2] != ss[2] {
        return Err(Error::shape("number_cross_attention", &sq, &ss));
    }
    attention(q_det, selected, params, heads)
}

/// One decoder layer. Returns the refined queries and, when the model has a
/// count head, the count prediction made from the layer input.
///
/// The number-query slice is chosen by `count_override` when given, else by
/// the predicted bin. The index is a plain integer, so no gradient flows
/// through the choice. Without a head the number cross-attention sees the
/// whole bank.
pub fn decoder_layer_forward<'t>(
    q_det: Var<'t>,
    context: Var<'t>,
    layer: &LayerVars<'t>,
    head: Option<&HeadVars<'t>>,
    bank: Option<Var<'t>>,
    config: &NgdinoConfig,
    count_override: Option<&[usize]>,
) -> Result<(Var<'t>, Option<CountPrediction<'t>>)> {
    let shape = q_det.shape();
    if shape.len() != 3 || shape[2] != config.d_model {
        return Err(Error::shape("decoder layer", &shape, &[0, 0, config.d_model]));
    }
    let batch = shape[0];
    if let Some(o) = count_override {
        if o.len() != batch {
            return Err(Error::LengthMismatch {
                left: o.len(),
                right: batch,
            });
        }
        if let Some(&bad) = o.iter().find(|&&b| b >= NUM_BINS) {
            return Err(Error::BinOutOfRange(bad));
        }
    }
    let tape = q_det.tape();
    let count = head.map(|h| predict_count(q_det, h)).transpose()?;

    let mut fused = q_det.add(attention(q_det, q_det, &layer.self_attn, config.heads)?)?;
    if let (Some(na), Some(bank)) = (&layer.num_attn, bank) {
        let bins = count_override.or(count.as_ref().map(|c| c.bins.as_slice()));
        let rows = match bins {
            Some(bins) if config.ablation.has_head() => bins
                .iter()
                .map(|&b| select_number_queries(bank, config.per_bin, b))
                .collect::<Result<Vec<_>>>()?,
            _ => vec![bank; batch],
        };
        let selected = tape.stack(&rows)?;
        fused = fused.add(number_cross_attention(q_det, selected, na, config.heads)?)?;
    }
    let [n1, n2, n3] = &layer.norms;
    let q1 = fused.layer_norm(n1.gamma, n1.beta)?;
    let q2 = q1
        .add(attention(q1, context, &layer.ctx_attn, config.heads)?)?
        .layer_norm(n2.gamma, n2.beta)?;
    let q3 = q2.add(layer.ffn.apply(q2)?)?.layer_norm(n3.gamma, n3.beta)?;
    Ok((q3, count))
}

fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(ANCHOR_CLAMP, 1.0 - ANCHOR_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Per-coordinate gain that makes a unit step of the raw output move an
/// anchored box by about one box width (centers) or by its own size (extents),
/// whatever the box scale.
fn anchor_gain(a: &[f64]) -> [f64; 4] {
    let [cx, cy, w, h] = [a[0], a[1], a[2], a[3]].map(|v| v.clamp(ANCHOR_CLAMP, 1.0 - ANCHOR_CLAMP));
    [
        w / (cx * (1.0 - cx)),
        h / (cy * (1.0 - cy)),
        1.0 / (1.0 - w),
        1.0 / (1.0 - h),
    ]
}

/// Box regression and objectness. Anchored boxes are
/// `sigmoid(logit(anchor) + gain(anchor) * linear(q))`, unanchored ones
/// `sigmoid(linear(q))`.
pub fn detection_heads<'t>(q: Var<'t>, model: &BoundModel<'t>, anchors: Option<&Tensor>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = q.shape();
    let mut raw = q.linear(model.box_w, Some(model.box_b))?;
    if let (Some(a), true) = (anchors, model.config.anchor_reference) {
        let expect = [&shape[..shape.len() - 1], &[4][..]].concat();
        if a.shape() != expect.as_slice() {
            return Err(Error::shape("anchors", a.shape(), &expect));
        }
        let tape = q.tape();
        let gain = tape.constant(expect.clone(), a.data().chunks(4).flat_map(anchor_gain).collect())?;
        let offset = tape.constant(expect, a.data().iter().map(|&v| inverse_sigmoid(v)).collect())?;
        raw = raw.mul(gain)?.add(offset)?;
    }
    let boxes = raw.sigmoid();
    let logits = q
        .linear(model.obj_w, Some(model.obj_b))?
        .reshape(&shape[..shape.len() - 1])?;
    Ok((boxes, logits))
}
