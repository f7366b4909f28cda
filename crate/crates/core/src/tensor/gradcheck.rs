//! Central finite-difference check of tape gradients.
//!
//! The error of an entry is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
//! An entry whose window straddles a kink of a piecewise-linear op (ReLU,
//! abs, min/max) is retried with smaller steps; if every step shows
//! disagreeing one-sided differences it is skipped and counted.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-3;
/// Step sizes tried per entry: `eps`, `eps / 10`, `eps / 100`.
const REFINEMENTS: i32 = 3;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            samples_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<40} {:>8} {:>8} {:>12}\n",
            "parameter", "checked", "kinks", "max rel err"
        );
        for g in &self.groups {
            out.push_str(&format!(
                "{:<40} {:>8} {:>8} {:>12.3e}\n",
                g.name, g.checked, g.skipped_kinks, g.max_rel_error
            ));
        }
        out.push_str(&format!(
            "overall max rel err {:.3e} (tolerance {:.0e}): {}\n",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

fn eval_loss<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = store.bind(&tape);
    Ok(loss(&tape, &vars)?.item())
}

/// Compares the tape gradient of `loss` with respect to every trainable
/// parameter in `store` against central differences.
pub fn check_params<F>(store: &ParamStore, loss: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = store.bind(&tape);
    let out = loss(&tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic = store.collect_grads(&mut grads, &vars);
    let f0 = out.item();
    drop(grads);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::new();
    let mut work = store.clone();
    for (id, name, t) in store.iter() {
        if !t.requires_grad {
            continue;
        }
        let n = t.numel();
        let entries: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut report = GroupReport {
            name: name.to_string(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
        };
        for i in entries {
            let orig = t.data()[i];
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
            // A ReLU kink inside the window skews one step size but drops
            // out of a smaller one; a wrong gradient fails at every size.
            let mut best: Option<f64> = None;
            for k in 0..REFINEMENTS {
                let eps = opts.eps / 10f64.powi(k);
                work.get_mut(id).data_mut()[i] = orig + eps;
                let fp = eval_loss(&work, &loss)?;
                work.get_mut(id).data_mut()[i] = orig - eps;
                let fm = eval_loss(&work, &loss)?;
                work.get_mut(id).data_mut()[i] = orig;

                let numeric = (fp - fm) / (2.0 * eps);
                let right = (fp - f0) / eps;
                let left = (f0 - fm) / eps;
                if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
                    continue;
                }
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
                best = Some(best.map_or(err, |b: f64| b.min(err)));
                if err <= opts.tolerance {
                    break;
                }
            }
            match best {
                Some(err) => {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.checked += 1;
                }
                None => report.skipped_kinks += 1,
            }
        }
        groups.push(report);
    }
    Ok(GradcheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}
