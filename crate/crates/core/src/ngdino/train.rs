use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::count::{bin_of, NUM_BINS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{Tape, Tensor, Var};

use super::layer::{BoundModel, ForwardOutput};
use super::loss::{training_loss, LossTerms, Target};
use super::Ngdino;

/// One featurized training or evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `[L_d, D]`
    pub q_det: Tensor,
    /// `[L_c, D]`
    pub context: Tensor,
    /// `[L_d, 4]` normalized cxcywh reference boxes.
    pub anchors: Option<Tensor>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Epochs during which only the count head is trained.
    pub stage1_epochs: usize,
    /// Epochs of end-to-end training.
    pub stage2_epochs: usize,
    /// Stage-2 step size.
    pub lr: f64,
    /// Stage-1 step size; the head alone tolerates a larger step.
    pub stage1_lr: f64,
    pub batch_size: usize,
    /// Rescales each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Select number queries by the true count bin while training.
    pub teacher_forcing: bool,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 5,
            stage2_epochs: 20,
            lr: 0.05,
            stage1_lr: 1.0,
            batch_size: 16,
            clip_norm: Some(5.0),
            teacher_forcing: false,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        for lr in [self.lr, self.stage1_lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidConfig(format!("learning rate {lr} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based, counted across both stages.
    pub epoch: usize,
    pub stage: u8,
    pub loss: f64,
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub num: f64,
    /// Training-set count-bin accuracy of the forward passes of this epoch.
    pub count_accuracy: Option<f64>,
}

/// Per-slot output of a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detections {
    /// Normalized cxcywh.
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub count_probs: Option<[f64; NUM_BINS]>,
    pub count_bin: Option<usize>,
}

fn batched(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, t.data().to_vec())
}

fn run<'t>(
    model: &Ngdino,
    tape: &'t Tape,
    ex: &Example,
    count_override: Option<&[usize]>,
) -> Result<(ForwardOutput<'t>, Vec<Var<'t>>)> {
    let (bound, vars) = BoundModel::bind(model, tape)?;
    let q = tape.leaf(&batched(&ex.q_det)?);
    let ctx = tape.leaf(&batched(&ex.context)?);
    let anchors = ex.anchors.as_ref().map(batched).transpose()?;
    let out = bound.forward(q, ctx, anchors.as_ref(), count_override)?;
    Ok((out, vars))
}

struct ExampleGrad {
    grads: Vec<Option<Vec<f64>>>,
    terms: LossTerms,
    count_bin: Option<usize>,
}

fn example_grad(model: &Ngdino, ex: &Example, teacher_forcing: bool) -> Result<ExampleGrad> {
    let tape = Tape::new();
    let forced = [bin_of(ex.target.count).index()];
    let (out, vars) = run(model, &tape, ex, teacher_forcing.then_some(&forced[..]))?;
    let count_bin = out.count.as_ref().map(|c| c.bins[0]);
    let diverged = |terms| ExampleGrad {
        grads: Vec::new(),
        terms,
        count_bin,
    };
    let finite = |v: &Var| v.value().iter().all(|x| x.is_finite());
    if !finite(&out.boxes) || !finite(&out.logits) {
        return Ok(diverged(LossTerms {
            total: f64::NAN,
            ..LossTerms::default()
        }));
    }
    let parts = training_loss(&out, std::slice::from_ref(&ex.target), &model.config.weights)?;
    let terms = parts.terms;
    if !terms.total.is_finite() {
        return Ok(diverged(terms));
    }
    let mut grads = tape.backward(parts.total)?;
    Ok(ExampleGrad {
        grads: model.params.collect_grads(&mut grads, &vars),
        terms,
        count_bin,
    })
}

fn clip(grads: &mut [Option<Vec<f64>>], max_norm: f64) {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= c));
    }
}

fn run_epoch(
    model: &mut Ngdino,
    data: &[Example],
    order: &[usize],
    schedule: &Schedule,
    exec: Exec,
    stage: u8,
    epoch: usize,
) -> Result<EpochLog> {
    let lr = if stage == 1 { schedule.stage1_lr } else { schedule.lr };
    let diverged = || Error::DivergenceDetected { stage, epoch };
    let mut sum = LossTerms::default();
    let mut correct = 0usize;
    let mut counted = 0usize;
    for chunk in order.chunks(schedule.batch_size) {
        let frozen: &Ngdino = model;
        let results = exec.map(chunk, |&i| example_grad(frozen, &data[i], schedule.teacher_forcing));
        let mut batch: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
        for (r, &i) in results.into_iter().zip(chunk) {
            let r = r?;
            if !r.terms.total.is_finite() {
                return Err(diverged());
            }
            sum += r.terms;
            if let Some(b) = r.count_bin {
                counted += 1;
                correct += usize::from(b == bin_of(data[i].target.count).index());
            }
            for (acc, g) in batch.iter_mut().zip(r.grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let scale = 1.0 / chunk.len() as f64;
        batch
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
        if let Some(c) = schedule.clip_norm {
            clip(&mut batch, c);
        }
        model.params.zero_grad();
        model.params.accumulate(&batch);
        model.params.sgd_step(lr, 1.0);
        if !model.params.all_finite() {
            return Err(diverged());
        }
    }
    let mean = sum.scaled(1.0 / order.len() as f64);
    Ok(EpochLog {
        epoch,
        stage,
        loss: mean.total,
        l1: mean.l1,
        giou: mean.giou,
        cls: mean.cls,
        num: mean.num,
        count_accuracy: (counted > 0).then(|| correct as f64 / counted as f64),
    })
}

/// Two-stage training: `stage1_epochs` with only the count head trainable,
/// then `stage2_epochs` end to end. Stage 1 is skipped when the model has no
/// count head. Deterministic for a fixed schedule seed, in either [`Exec`]
/// mode. `on_epoch` sees each log record as soon as it is produced.
pub fn train(
    model: &mut Ngdino,
    data: &[Example],
    schedule: &Schedule,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::new();
    let mut epoch = 0;

    if model.config.ablation.has_head() && schedule.stage1_epochs > 0 {
        model.params.set_trainable(Ngdino::is_head_param);
        let before: Vec<Tensor> = model
            .params
            .iter()
            .filter(|(_, name, _)| !Ngdino::is_head_param(name))
            .map(|(_, _, t)| t.clone())
            .collect();
        for _ in 0..schedule.stage1_epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let log = run_epoch(model, data, &order, schedule, exec, 1, epoch)?;
            log::info!("epoch {epoch} stage 1 loss {:.6}", log.loss);
            on_epoch(&log);
            logs.push(log);
        }
        let changed = model
            .params
            .iter()
            .filter(|(_, name, _)| !Ngdino::is_head_param(name))
            .zip(&before)
            .find(|((_, _, now), then)| now.data() != then.data());
        if let Some(((_, name, _), _)) = changed {
            return Err(Error::InvariantViolation {
                at: format!("parameter '{name}'"),
                message: "changed while frozen in stage 1".into(),
            });
        }
    }

    model.params.set_trainable(|_| true);
    for _ in 0..schedule.stage2_epochs {
        epoch += 1;
        order.shuffle(&mut rng);
        let log = run_epoch(model, data, &order, schedule, exec, 2, epoch)?;
        log::info!("epoch {epoch} stage 2 loss {:.6}", log.loss);
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Forward passes without teacher forcing; number queries are selected by
/// the predicted count bin.
pub fn predict(model: &Ngdino, data: &[Example], exec: Exec) -> Result<Vec<Detections>> {
    exec.map(data, |ex| {
        let tape = Tape::new();
        let (out, _) = run(model, &tape, ex, None)?;
        let boxes = out.boxes.value().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let scores = out.logits.value().into_iter().map(crate::tensor::sigmoid).collect();
        let (count_probs, count_bin) = match &out.count {
            Some(c) => {
                let p = c.probs.value();
                (Some([p[0], p[1], p[2], p[3], p[4]]), Some(c.bins[0]))
            }
            None => (None, None),
        };
        Ok(Detections {
            boxes,
            scores,
            count_probs,
            count_bin,
        })
    })
    .into_iter()
    .collect()
}
