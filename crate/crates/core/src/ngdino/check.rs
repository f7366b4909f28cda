//! Finite-difference check of the full decoder and its training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::count::bin_of;
use crate::error::Result;
use crate::tensor::gradcheck::{check_params, GradcheckOptions, GradcheckReport};
use crate::tensor::Tensor;

use super::layer::BoundModel;
use super::loss::{training_loss, Target};
use super::{Ngdino, NgdinoConfig};

/// Random inputs for one batch item: queries, context, anchors and a target
/// with `n_gt` boxes.
pub fn random_example(config: &NgdinoConfig, n_gt: usize, seed: u64) -> Result<super::Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = (config.slots, config.d_model);
    let mut uniform = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
    let q_det = Tensor::new(vec![l, d], uniform(l * d, -1.0, 1.0))?;
    let context = Tensor::new(vec![l, d], uniform(l * d, -1.0, 1.0))?;
    let anchors = Tensor::new(vec![l, 4], uniform(l * 4, 0.2, 0.8))?;
    let boxes = (0..n_gt)
        .map(|_| {
            let v = uniform(4, 0.25, 0.75);
            [v[0], v[1], v[2] * 0.5, v[3] * 0.5]
        })
        .collect();
    Ok(super::Example {
        q_det,
        context,
        anchors: Some(anchors),
        target: Target { boxes, count: n_gt },
    })
}

/// Checks the gradient of the teacher-forced training loss with respect to
/// every parameter tensor of a freshly initialized model.
pub fn model_gradcheck(config: &NgdinoConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let model = Ngdino::new(config.clone(), seed)?;
    let n_gt = 2.min(config.slots);
    let ex = random_example(config, n_gt, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let lift = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        Tensor::new(s, t.data().to_vec())
    };
    let (q, ctx) = (lift(&ex.q_det)?, lift(&ex.context)?);
    let anchors = ex.anchors.as_ref().map(lift).transpose()?;
    let forced = [bin_of(ex.target.count).index()];
    check_params(
        &model.params,
        |tape, vars| {
            let bound = BoundModel::from_vars(&model, vars)?;
            let out = bound.forward(tape.leaf(&q), tape.leaf(&ctx), anchors.as_ref(), Some(&forced))?;
            Ok(training_loss(&out, std::slice::from_ref(&ex.target), &model.config.weights)?.total)
        },
        opts,
    )
}
