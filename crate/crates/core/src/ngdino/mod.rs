//! Count-aware detection decoder.
//!
//! A decoder layer refines per-slot detection queries with self-attention,
//! cross-attention over context features and an FFN. On top of that sit the
//! three number components: a count head over mean-pooled queries, a bank of
//! learnable number queries sliced by the predicted count bin, and a number
//! cross-attention whose output is added to the self-attention output.

mod assign;
mod check;
mod layer;
mod loss;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::count::NUM_BINS;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub use assign::assign;
pub use check::{model_gradcheck, random_example};
pub use layer::{
    decoder_layer_forward, detection_heads, number_cross_attention, predict_count, select_number_queries, AttnVars,
    BoundModel, CountPrediction, FfnVars, ForwardOutput, HeadVars, LayerVars, LnVars,
};
pub use loss::{training_loss, LossParts, LossTerms, Target};
pub use train::{predict, train, Detections, EpochLog, Example, Schedule};

/// Which number components are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Head, number queries and number cross-attention.
    #[default]
    None,
    /// No count head; number cross-attention attends over the whole bank.
    NoHead,
    /// Count head and its loss only.
    NoXattn,
    /// Plain decoder.
    Neither,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoHead, Ablation::NoXattn, Ablation::Neither];

    pub fn has_head(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoXattn)
    }

    pub fn has_xattn(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoHead)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoHead => "no-head",
            Ablation::NoXattn => "no-xattn",
            Ablation::Neither => "neither",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub num: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            cls: 1.0,
            num: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NgdinoConfig {
    pub d_model: usize,
    /// Detection slots per example.
    pub slots: usize,
    /// Number queries selected per count bin; the bank holds `5 * per_bin` rows.
    pub per_bin: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub ablation: Ablation,
    pub weights: LossWeights,
    /// Predict boxes as offsets (in logit space) from per-slot anchor boxes.
    pub anchor_reference: bool,
}

impl Default for NgdinoConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            slots: 16,
            per_bin: 10,
            heads: 1,
            depth: 1,
            ffn_hidden: 64,
            head_hidden: 32,
            ablation: Ablation::None,
            weights: LossWeights::default(),
            anchor_reference: true,
        }
    }
}

impl NgdinoConfig {
    pub fn bank_len(&self) -> usize {
        NUM_BINS * self.per_bin
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("slots", self.slots),
            ("per_bin", self.per_bin),
            ("heads", self.heads),
            ("depth", self.depth),
            ("ffn_hidden", self.ffn_hidden),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        let w = &self.weights;
        if [w.l1, w.giou, w.cls, w.num].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A decoder with its parameters.
#[derive(Debug, Clone)]
pub struct Ngdino {
    pub config: NgdinoConfig,
    pub params: ParamStore,
}

pub(crate) const HEAD_PREFIX: &str = "head.";

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_hash(name));
        rng
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?.with_grad())?;
        Ok(())
    }

    fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n = shape.iter().product();
        self.store
            .add(name, Tensor::new(shape.to_vec(), vec![value; n])?.with_grad())?;
        Ok(())
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) -> Result<()> {
        self.uniform(&format!("{prefix}.w"), &[inp, out], 1.0 / (inp as f64).sqrt())?;
        self.fill(&format!("{prefix}.b"), &[out], 0.0)
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d)?;
        }
        Ok(())
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.fill(&format!("{prefix}.gamma"), &[d], 1.0)?;
        self.fill(&format!("{prefix}.beta"), &[d], 0.0)
    }
}

impl Ngdino {
    /// Initializes parameters. Each tensor draws from its own stream keyed by
    /// name, so parameters shared between ablations start out identical.
    pub fn new(config: NgdinoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed,
        };
        for l in 0..config.depth {
            init.attention(&format!("layer{l}.self_attn"), d)?;
            if config.ablation.has_xattn() {
                init.attention(&format!("layer{l}.num_attn"), d)?;
            }
            init.attention(&format!("layer{l}.ctx_attn"), d)?;
            init.linear(&format!("layer{l}.ffn.0"), d, config.ffn_hidden)?;
            init.linear(&format!("layer{l}.ffn.1"), config.ffn_hidden, d)?;
            for n in 1..=3 {
                init.layer_norm(&format!("layer{l}.norm{n}"), d)?;
            }
        }
        if config.ablation.has_head() {
            init.linear("head.0", d, config.head_hidden)?;
            init.linear("head.1", config.head_hidden, NUM_BINS)?;
        }
        if config.ablation.has_xattn() {
            init.uniform("number_queries", &[config.bank_len(), d], 1.0)?;
        }
        init.fill("box.w", &[d, 4], 0.0)?;
        init.fill("box.b", &[4], 0.0)?;
        init.linear("objectness", d, 1)?;
        Ok(Self { config, params: store })
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with(HEAD_PREFIX)
    }
}

#[cfg(test)]
mod tests;
