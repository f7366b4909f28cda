use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::exec::Exec;
use crate::tensor::gradcheck::GradcheckOptions;
use crate::tensor::{Tape, Tensor, Var};

fn small(ablation: Ablation) -> NgdinoConfig {
    NgdinoConfig {
        d_model: 8,
        slots: 4,
        per_bin: 3,
        ffn_hidden: 12,
        head_hidden: 8,
        ablation,
        ..NgdinoConfig::default()
    }
}

fn lift(t: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    Tensor::new(s, t.data().to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

fn set(model: &mut Ngdino, name: &str, value: f64) {
    let id = model.params.id(name).unwrap();
    model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
}

fn forward_values(model: &Ngdino, ex: &Example, forced: Option<&[usize]>) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let (bound, _) = BoundModel::bind(model, &tape).unwrap();
    let out = bound
        .forward(
            tape.leaf(&lift(&ex.q_det)),
            tape.leaf(&lift(&ex.context)),
            ex.anchors.as_ref().map(lift).as_ref(),
            forced,
        )
        .unwrap();
    (out.boxes.value(), out.logits.value())
}

#[test]
fn zero_head_gives_uniform_counts_and_bin_zero() {
    let mut model = Ngdino::new(small(Ablation::None), 1).unwrap();
    for n in ["head.0.w", "head.0.b", "head.1.w", "head.1.b"] {
        set(&mut model, n, 0.0);
    }
    let tape = Tape::new();
    let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = tape.leaf(&random_tensor(&mut rng, &[3, 4, 8], 1.0));
    let c = predict_count(q, bound.head.as_ref().unwrap()).unwrap();
    assert!(c.probs.value().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    assert_eq!(c.bins, vec![0, 0, 0]);
}

#[test]
fn engineered_head_prefers_bin_three() {
    let mut model = Ngdino::new(small(Ablation::None), 1).unwrap();
    for n in ["head.0.w", "head.0.b", "head.1.w"] {
        set(&mut model, n, 0.0);
    }
    let id = model.params.id("head.1.b").unwrap();
    model
        .params
        .get_mut(id)
        .data_mut()
        .copy_from_slice(&[0.0, 1.0, 2.0, 5.0, 1.0]);
    let tape = Tape::new();
    let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
    let q = tape.constant(vec![1, 4, 8], vec![0.3; 32]).unwrap();
    assert_eq!(predict_count(q, bound.head.as_ref().unwrap()).unwrap().bins, vec![3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn count_probs_normalized_and_slot_order_invariant(seed in any::<u64>(), batch in 1usize..4) {
        let model = Ngdino::new(small(Ablation::None), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_tensor(&mut rng, &[batch, 4, 8], 3.0);
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut rng);
        let mut permuted = Vec::with_capacity(q.numel());
        for b in 0..batch {
            for &s in &perm {
                let start = (b * 4 + s) * 8;
                permuted.extend_from_slice(&q.data()[start..start + 8]);
            }
        }
        let qp = Tensor::new(vec![batch, 4, 8], permuted).unwrap();

        let tape = Tape::new();
        let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
        let head = bound.head.unwrap();
        let a = predict_count(tape.leaf(&q), &head).unwrap();
        let b = predict_count(tape.leaf(&qp), &head).unwrap();
        let pa = a.probs.value();
        for row in pa.chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for (x, y) in pa.iter().zip(b.probs.value()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert_eq!(a.bins, b.bins);
    }
}

#[test]
fn number_query_slices() {
    let tape = Tape::new();
    let bank = tape.constant(vec![50, 2], (0..100).map(f64::from).collect()).unwrap();
    for (bin, first) in [(0, 0.0), (2, 40.0), (4, 80.0)] {
        let s = select_number_queries(bank, 10, bin).unwrap();
        assert_eq!(s.shape(), vec![10, 2]);
        assert_eq!(s.value()[0], first);
        assert_eq!(*s.value().last().unwrap(), first + 19.0);
    }
    assert!(matches!(
        select_number_queries(bank, 10, 5),
        Err(Error::BinOutOfRange(5))
    ));
    assert!(select_number_queries(bank, 9, 0).is_err());
}

#[test]
fn number_attention_limits() {
    let mut model = Ngdino::new(small(Ablation::None), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random_tensor(&mut rng, &[2, 4, 8], 1.0);
    let sel = random_tensor(&mut rng, &[2, 3, 8], 1.0);
    {
        let tape = Tape::new();
        let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
        let out = number_cross_attention(
            tape.leaf(&q),
            tape.leaf(&sel),
            bound.layers[0].num_attn.as_ref().unwrap(),
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), vec![2, 4, 8]);
    }

    // A single number query takes all the attention weight.
    let single = random_tensor(&mut rng, &[1, 1, 8], 1.0);
    let q1 = random_tensor(&mut rng, &[1, 4, 8], 1.0);
    let tape = Tape::new();
    let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
    let na = bound.layers[0].num_attn.unwrap();
    let out = number_cross_attention(tape.leaf(&q1), tape.leaf(&single), &na, 1)
        .unwrap()
        .value();
    let projected = tape
        .leaf(&single)
        .linear(na.wv, Some(na.bv))
        .unwrap()
        .linear(na.wo, Some(na.bo))
        .unwrap()
        .value();
    for row in out.chunks(8) {
        assert_eq!(row, projected.as_slice());
    }
    drop(bound);
    drop(tape);

    set(&mut model, "layer0.num_attn.v.w", 0.0);
    let tape = Tape::new();
    let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
    let out = number_cross_attention(
        tape.leaf(&q),
        tape.leaf(&sel),
        bound.layers[0].num_attn.as_ref().unwrap(),
        1,
    )
    .unwrap();
    assert!(out.value().iter().all(|&v| v == 0.0));
}

#[test]
fn multi_head_attention_shapes() {
    let cfg = NgdinoConfig {
        heads: 2,
        ..small(Ablation::None)
    };
    let model = Ngdino::new(cfg.clone(), 4).unwrap();
    let ex = random_example(&cfg, 2, 4).unwrap();
    let (boxes, logits) = forward_values(&model, &ex, None);
    assert_eq!(boxes.len(), 16);
    assert_eq!(logits.len(), 4);
    assert!(NgdinoConfig { heads: 3, ..cfg }.validate().is_err());
}

#[test]
fn ablation_identity_is_bit_exact() {
    for seed in 0..5 {
        let full_cfg = NgdinoConfig::default();
        let base_cfg = NgdinoConfig {
            ablation: Ablation::Neither,
            ..NgdinoConfig::default()
        };
        let mut full = Ngdino::new(full_cfg.clone(), seed).unwrap();
        let base = Ngdino::new(base_cfg, seed).unwrap();
        // Shared parameters start identical.
        for (_, name, t) in base.params.iter() {
            assert_eq!(full.params.get(full.params.id(name).unwrap()), t, "{name}");
        }
        set(&mut full, "layer0.num_attn.v.w", 0.0);
        set(&mut full, "layer0.num_attn.v.b", 0.0);
        let ex = random_example(&full_cfg, 3, seed).unwrap();
        for forced in [None, Some(&[4usize][..])] {
            let a = forward_values(&full, &ex, forced);
            let b = forward_values(&base, &ex, None);
            assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn count_override_selects_true_bin_rows() {
    let cfg = small(Ablation::None);
    let model = Ngdino::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for bin in 0..5 {
        let tape = Tape::new();
        let (bound, vars) = BoundModel::bind(&model, &tape).unwrap();
        let q = tape.leaf(&random_tensor(&mut rng, &[3, 4, 8], 1.0));
        let ctx = tape.leaf(&random_tensor(&mut rng, &[3, 4, 8], 1.0));
        let out = bound.forward(q, ctx, None, Some(&[bin; 3])).unwrap();
        let targets = vec![
            Target {
                boxes: vec![[0.5, 0.5, 0.2, 0.2]],
                count: 1,
            };
            3
        ];
        let loss = training_loss(&out, &targets, &cfg.weights).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        let bank_id = model.params.id("number_queries").unwrap();
        let g = grads.of(vars[bank_id.index()]).unwrap();
        for row in 0..15 {
            let selected = row / 3 == bin;
            let nonzero = g[row * 8..(row + 1) * 8].iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, selected, "bin {bin} row {row}");
        }
    }
}

#[test]
fn override_validation() {
    let cfg = small(Ablation::None);
    let model = Ngdino::new(cfg, 0).unwrap();
    let ex = random_example(&model.config, 1, 0).unwrap();
    let tape = Tape::new();
    let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
    let q = tape.leaf(&lift(&ex.q_det));
    let c = tape.leaf(&lift(&ex.context));
    assert!(matches!(
        bound.forward(q, c, None, Some(&[5])),
        Err(Error::BinOutOfRange(5))
    ));
    assert!(bound.forward(q, c, None, Some(&[1, 1])).is_err());
    let wrong = tape.constant(vec![1, 4, 7], vec![0.0; 28]).unwrap();
    assert!(matches!(
        bound.forward(wrong, c, None, None),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn detection_head_contract() {
    let cfg = NgdinoConfig {
        anchor_reference: false,
        ..small(Ablation::Neither)
    };
    let mut model = Ngdino::new(cfg, 0).unwrap();
    set(&mut model, "objectness.w", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::new();
    let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
    let q = tape.leaf(&random_tensor(&mut rng, &[2, 4, 8], 10.0));
    let (boxes, logits) = detection_heads(q, &bound, None).unwrap();
    assert_eq!(boxes.shape(), vec![2, 4, 4]);
    assert_eq!(logits.shape(), vec![2, 4]);
    assert!(boxes.value().iter().all(|&v| v == 0.5));

    let tape = Tape::new();
    let mut noisy = Ngdino::new(small(Ablation::None), 9).unwrap();
    let id = noisy.params.id("box.w").unwrap();
    *noisy.params.get_mut(id) = random_tensor(&mut rng, &[8, 4], 1.0).with_grad();
    let (bound, _) = BoundModel::bind(&noisy, &tape).unwrap();
    let q = tape.leaf(&random_tensor(&mut rng, &[2, 4, 8], 10.0));
    let anchors = Tensor::new(vec![2, 4, 4], vec![0.3; 32]).unwrap();
    let (boxes, logits) = detection_heads(q, &bound, Some(&anchors)).unwrap();
    assert!(boxes.value().iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
    assert!(logits.value().iter().all(|v| v.is_finite()));
}

#[test]
fn anchored_steps_scale_with_box_size() {
    let mut model = Ngdino::new(small(Ablation::Neither), 0).unwrap();
    let id = model.params.id("box.b").unwrap();
    let delta = 1e-4;
    model.params.get_mut(id).data_mut().copy_from_slice(&[delta; 4]);
    let tape = Tape::new();
    let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
    let q = tape.constant(vec![1, 2, 8], vec![0.0; 16]).unwrap();
    // A tiny box near the border and a large centered one.
    let anchors = Tensor::new(vec![1, 2, 4], vec![0.05, 0.9, 0.01, 0.02, 0.5, 0.5, 0.6, 0.4]).unwrap();
    let (boxes, _) = detection_heads(q, &bound, Some(&anchors)).unwrap();
    let b = boxes.value();
    for (got, a) in b.chunks(4).zip(anchors.data().chunks(4)) {
        // First order: centers move by delta box extents, extents grow by a factor 1 + delta.
        let want = [
            a[0] + delta * a[2],
            a[1] + delta * a[3],
            a[2] * (1.0 + delta),
            a[3] * (1.0 + delta),
        ];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-3 * delta * w.max(a[2]), "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn anchored_boxes_start_at_anchors() {
    let cfg = small(Ablation::None);
    let model = Ngdino::new(cfg.clone(), 0).unwrap();
    let ex = random_example(&cfg, 1, 11).unwrap();
    let (boxes, _) = forward_values(&model, &ex, None);
    for (b, a) in boxes.iter().zip(ex.anchors.as_ref().unwrap().data()) {
        assert!((b - a).abs() < 1e-12);
    }
}

fn constant_output<'t>(
    tape: &'t Tape,
    boxes: Vec<f64>,
    logits: Vec<f64>,
    count_logits: Option<Vec<f64>>,
) -> ForwardOutput<'t> {
    let slots = logits.len();
    let count = count_logits.map(|l| {
        let v: Var<'t> = tape.constant(vec![1, 5], l).unwrap();
        CountPrediction {
            logits: v,
            probs: v.softmax(1).unwrap(),
            bins: v.argmax(1).unwrap(),
        }
    });
    ForwardOutput {
        boxes: tape.constant(vec![1, slots, 4], boxes).unwrap(),
        logits: tape.constant(vec![1, slots], logits).unwrap(),
        count,
    }
}

#[test]
fn loss_vanishes_at_its_minimum() {
    let w = LossWeights::default();
    let tape = Tape::new();
    let gt = vec![[0.3, 0.3, 0.2, 0.1], [0.7, 0.6, 0.1, 0.3]];
    let mut boxes = vec![0.5; 16];
    boxes[4..8].copy_from_slice(&gt[1]);
    boxes[12..16].copy_from_slice(&gt[0]);
    let out = constant_output(
        &tape,
        boxes,
        vec![-60.0, 60.0, -60.0, 60.0],
        Some(vec![-80.0, -80.0, 80.0, -80.0, -80.0]),
    );
    let parts = training_loss(&out, &[Target { boxes: gt, count: 2 }], &w).unwrap();
    assert_eq!(parts.assignments[0], vec![(0, 3), (1, 1)]);
    assert_eq!(parts.terms.l1, 0.0);
    assert!(parts.terms.giou.abs() < 1e-12);
    assert!(parts.terms.cls < 1e-20);
    assert!(parts.terms.num < 1e-20);

    // No target: only negatives and the count term.
    let tape = Tape::new();
    let out = constant_output(
        &tape,
        vec![0.5; 16],
        vec![-60.0; 4],
        Some(vec![80.0, -80.0, -80.0, -80.0, -80.0]),
    );
    let parts = training_loss(
        &out,
        &[Target {
            boxes: vec![],
            count: 0,
        }],
        &w,
    )
    .unwrap();
    assert!(parts.terms.total < 1e-20 && parts.terms.total >= 0.0);
    assert_eq!((parts.terms.l1, parts.terms.giou), (0.0, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_terms_are_non_negative(seed in any::<u64>(), n_gt in 0usize..=4) {
        let cfg = small(Ablation::None);
        let model = Ngdino::new(cfg.clone(), seed).unwrap();
        let ex = random_example(&cfg, n_gt, seed).unwrap();
        let tape = Tape::new();
        let (bound, _) = BoundModel::bind(&model, &tape).unwrap();
        let out = bound
            .forward(tape.leaf(&lift(&ex.q_det)), tape.leaf(&lift(&ex.context)), ex.anchors.as_ref().map(lift).as_ref(), None)
            .unwrap();
        let t = training_loss(&out, std::slice::from_ref(&ex.target), &cfg.weights).unwrap().terms;
        for v in [t.total, t.l1, t.giou, t.cls, t.num] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let cfg = small(Ablation::None);
    let report = model_gradcheck(&cfg, 21, &GradcheckOptions::default()).unwrap();
    assert!(report.passed(), "{}", report.table());
    let checked: usize = report.groups.iter().map(|g| g.checked).sum();
    assert!(checked > 500);
}

#[test]
fn every_ablation_gradchecks() {
    for ablation in Ablation::ALL {
        let report = model_gradcheck(&small(ablation), 3, &GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{ablation}\n{}", report.table());
    }
}

#[test]
fn full_size_gradcheck_sampled() {
    for seed in [0, 1, 2] {
        let opts = GradcheckOptions {
            samples_per_param: Some(6),
            seed,
            ..GradcheckOptions::default()
        };
        let report = model_gradcheck(&NgdinoConfig::default(), seed, &opts).unwrap();
        assert!(report.passed(), "{}", report.table());
        assert_eq!(
            report.groups.len(),
            Ngdino::new(NgdinoConfig::default(), 0).unwrap().params.len()
        );
    }
}

fn toy_data(cfg: &NgdinoConfig, n: usize, seed: u64) -> Vec<Example> {
    (0..n)
        .map(|i| random_example(cfg, (i % 3).min(cfg.slots), seed + i as u64).unwrap())
        .collect()
}

#[test]
fn stage_one_only_moves_the_head() {
    let cfg = small(Ablation::None);
    let data = toy_data(&cfg, 6, 0);
    let before = Ngdino::new(cfg.clone(), 0).unwrap();
    let mut model = before.clone();
    let schedule = Schedule {
        stage1_epochs: 2,
        stage2_epochs: 0,
        batch_size: 4,
        ..Schedule::default()
    };
    let logs = train(&mut model, &data, &schedule, Exec::Sequential, |_| {}).unwrap();
    assert_eq!(logs.len(), 2);
    assert!(logs.iter().all(|l| l.stage == 1 && l.count_accuracy.is_some()));
    let mut head_changed = false;
    for (id, name, t) in before.params.iter() {
        let now = model.params.get(id);
        if Ngdino::is_head_param(name) {
            head_changed |= now.data() != t.data();
        } else {
            assert_eq!(now.data(), t.data(), "{name}");
        }
    }
    assert!(head_changed);
    assert!(model.params.iter().all(|(_, _, t)| t.requires_grad));
}

#[test]
fn training_is_deterministic_across_exec_modes() {
    let cfg = small(Ablation::None);
    let data = toy_data(&cfg, 10, 1);
    let schedule = Schedule {
        stage1_epochs: 1,
        stage2_epochs: 2,
        batch_size: 3,
        seed: 9,
        ..Schedule::default()
    };
    let run = |exec| {
        let mut m = Ngdino::new(cfg.clone(), 2).unwrap();
        let logs = crate::exec::with_threads(3, || train(&mut m, &data, &schedule, exec, |_| {})).unwrap();
        (
            crate::tensor::save_checkpoint(&m.params),
            serde_json::to_string(&logs).unwrap(),
        )
    };
    let a = run(Exec::Sequential);
    assert_eq!(a, run(Exec::Sequential));
    assert_eq!(a, run(Exec::Parallel));
}

#[test]
fn stage_one_skipped_without_head_and_zero_equals_plain() {
    let cfg = small(Ablation::Neither);
    let data = toy_data(&cfg, 5, 3);
    let s = |stage1| Schedule {
        stage1_epochs: stage1,
        stage2_epochs: 2,
        batch_size: 2,
        ..Schedule::default()
    };
    let mut a = Ngdino::new(cfg.clone(), 1).unwrap();
    let mut b = a.clone();
    let la = train(&mut a, &data, &s(0), Exec::Sequential, |_| {}).unwrap();
    let lb = train(&mut b, &data, &s(3), Exec::Sequential, |_| {}).unwrap();
    assert_eq!(la.len(), 2);
    assert!(la.iter().all(|l| l.count_accuracy.is_none()));
    assert_eq!(lb.len(), 2);
}

#[test]
fn loss_decreases_on_a_fixed_set() {
    let cfg = small(Ablation::None);
    let data = toy_data(&cfg, 8, 4);
    let mut m = Ngdino::new(cfg, 4).unwrap();
    let schedule = Schedule {
        stage1_epochs: 0,
        stage2_epochs: 30,
        batch_size: 8,
        lr: 0.1,
        ..Schedule::default()
    };
    let logs = train(&mut m, &data, &schedule, Exec::Sequential, |_| {}).unwrap();
    assert!(logs.last().unwrap().loss < logs[0].loss);
}

#[test]
fn divergence_is_reported() {
    let cfg = small(Ablation::None);
    let data = toy_data(&cfg, 4, 5);
    let mut m = Ngdino::new(cfg, 5).unwrap();
    let id = m.params.id("objectness.w").unwrap();
    m.params.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&mut m, &data, &Schedule::default(), Exec::Sequential, |_| {}).unwrap_err();
    assert!(matches!(err, Error::DivergenceDetected { stage: 1, epoch: 1 }));
}

#[test]
fn schedule_and_config_validation() {
    let cfg = small(Ablation::None);
    let mut m = Ngdino::new(cfg.clone(), 0).unwrap();
    let data = toy_data(&cfg, 2, 0);
    for bad in [
        Schedule {
            lr: 0.0,
            ..Schedule::default()
        },
        Schedule {
            batch_size: 0,
            ..Schedule::default()
        },
        Schedule {
            clip_norm: Some(-1.0),
            ..Schedule::default()
        },
    ] {
        assert!(matches!(
            train(&mut m, &data, &bad, Exec::Sequential, |_| {}),
            Err(Error::InvalidConfig(_))
        ));
    }
    assert!(matches!(
        train(&mut m, &[], &Schedule::default(), Exec::Sequential, |_| {}),
        Err(Error::EmptyDataset)
    ));
    assert!(Ngdino::new(NgdinoConfig { slots: 0, ..cfg }, 0).is_err());
    assert_eq!("no-xattn".parse::<Ablation>().unwrap(), Ablation::NoXattn);
    assert!("both".parse::<Ablation>().is_err());
}

#[test]
fn predictions_expose_counts_only_with_a_head() {
    for ablation in Ablation::ALL {
        let cfg = small(ablation);
        let m = Ngdino::new(cfg.clone(), 0).unwrap();
        let data = toy_data(&cfg, 3, 0);
        let dets = predict(&m, &data, Exec::Sequential).unwrap();
        assert_eq!(dets.len(), 3);
        assert_eq!(dets[0].scores.len(), 4);
        assert_eq!(dets[0].count_bin.is_some(), ablation.has_head());
    }
}

#[test]
fn ls_variants_size_the_bank() {
    for ls in [1, 10, 100] {
        let m = Ngdino::new(
            NgdinoConfig {
                per_bin: ls,
                ..NgdinoConfig::default()
            },
            0,
        )
        .unwrap();
        let id = m.params.id("number_queries").unwrap();
        assert_eq!(m.params.get(id).shape(), &[5 * ls, 32]);
    }
}
