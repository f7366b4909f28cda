//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines print in order. The process
//! fails if any criterion fails, except those listed in `KNOWN_RED`, which
//! are still reported as FAIL.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recground::domain::{BoundingBox, DetectionInstance, ExpressionRecord, PredictionRecord, ScaleClass};
use recground::evaluate::{evaluate, EvalOptions};
use recground::exec::Exec;
use recground::geometry::iou;
use recground::matching::{match_expression, match_expression_optimal, CategoryMode};
use recground::metrics::{instance_metrics, Tally};
use recground::ngdino::{model_gradcheck, predict, Ablation, Ngdino, NgdinoConfig};
use recground::synth::{generate, SynthConfig};
use recground::tensor::gradcheck::GradcheckOptions;
use recground::toy::{featurize_all, run_toy, ToyConfig};

/// Criteria expected to fail at desk scale; see the README for the analysis.
const KNOWN_RED: &[u32] = &[5];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

fn gt_box(x: f64, y: f64, w: f64, h: f64) -> DetectionInstance {
    DetectionInstance::ground_truth(bx(x, y, w, h), "car")
}

fn pred_box(x: f64, y: f64, w: f64, h: f64) -> DetectionInstance {
    DetectionInstance::prediction(bx(x, y, w, h), 0.9, Some("car".into())).unwrap()
}

fn tally(tp: u64, fp: u64, fn_: u64, tn: u64) -> Tally {
    Tally { tp, fp, fn_, tn }
}

fn expr(id: &str, targets: Vec<DetectionInstance>) -> ExpressionRecord {
    ExpressionRecord {
        expression_id: id.into(),
        image_id: format!("{id}-img"),
        image_size: (640, 480),
        text: "the cars".into(),
        targets,
    }
}

fn answer(id: &str, boxes: Vec<DetectionInstance>) -> PredictionRecord {
    PredictionRecord {
        expression_id: id.into(),
        boxes,
    }
}

fn eval(gt: &[ExpressionRecord], preds: &[PredictionRecord]) -> recground::metrics::MetricReport {
    evaluate(gt, preds, &EvalOptions::default(), None).unwrap()
}

fn metric_fidelity() -> Verdict {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // TP 3, FP 1, FN 2.
    let targets: Vec<_> = (0..5).map(|i| gt_box(100.0 * i as f64, 0.0, 50.0, 50.0)).collect();
    let mut preds: Vec<_> = (0..3).map(|i| pred_box(100.0 * i as f64, 0.0, 50.0, 50.0)).collect();
    preds.push(pred_box(0.0, 300.0, 50.0, 50.0));
    let r = eval(&[expr("a", targets)], &[answer("a", preds)]);
    check("tally 3/1/2", r.instance_tally == tally(3, 1, 2, 0));
    check("acc 0.5", r.acc_inst == 0.5);
    check("f1 2/3", r.f1_inst == 2.0 / 3.0);
    check(
        "formula",
        instance_metrics(&tally(3, 1, 2, 0)).unwrap() == (0.5, 2.0 / 3.0),
    );

    // Exact, missing, extra, inaccurate, correct rejection, false alarm.
    let a = gt_box(0.0, 0.0, 50.0, 50.0);
    let b = gt_box(200.0, 0.0, 50.0, 50.0);
    let pa = pred_box(0.0, 0.0, 50.0, 50.0);
    let pb = pred_box(200.0, 0.0, 50.0, 50.0);
    let gt = [
        expr("exact", vec![a.clone(), b.clone()]),
        expr("missing", vec![a.clone(), b.clone()]),
        expr("extra", vec![a.clone()]),
        expr("inaccurate", vec![a.clone()]),
        expr("rejected", vec![]),
        expr("alarm", vec![]),
    ];
    let preds = [
        answer("exact", vec![pa.clone(), pb.clone()]),
        answer("missing", vec![pa.clone()]),
        answer("extra", vec![pa.clone(), pb.clone()]),
        answer("inaccurate", vec![pred_box(25.0, 0.0, 50.0, 50.0)]),
        answer("rejected", vec![]),
        answer("alarm", vec![pb.clone()]),
    ];
    let r = eval(&gt, &preds);
    check("image tally", r.image_tally == tally(1, 4, 0, 1));
    check("image acc", r.acc_img == 2.0 / 6.0);
    check("image f1", r.f1_img == 2.0 / 6.0);
    check("instance tally", r.instance_tally == tally(4, 3, 2, 1));

    // Horizontal shifts of a 10x10 box give IoU (10 - s) / (10 + s):
    // 0.9512, 0.7391 and 0.5625.
    let gt: Vec<_> = (0..3)
        .map(|i| expr(&format!("p{i}"), vec![gt_box(0.0, 0.0, 10.0, 10.0)]))
        .collect();
    let preds: Vec<_> = [0.25, 1.5, 2.8]
        .iter()
        .enumerate()
        .map(|(i, &s)| answer(&format!("p{i}"), vec![pred_box(s, 0.0, 10.0, 10.0)]))
        .collect();
    let r = eval(&gt, &preds);
    let expected = BTreeMap::from([
        ("0.5".to_string(), 1.0),
        ("0.6".to_string(), 2.0 / 3.0),
        ("0.7".to_string(), 2.0 / 3.0),
        ("0.8".to_string(), 1.0 / 3.0),
        ("0.9".to_string(), 1.0 / 3.0),
    ]);
    check("pr@ values", r.pr_at == expected);
    let values: Vec<f64> = r.pr_at.values().copied().collect();
    check("pr@ monotone", values.windows(2).all(|w| w[0] >= w[1]));

    let gt: Vec<_> = (0..4).map(|i| expr(&format!("n{i}"), vec![])).collect();
    let preds: Vec<_> = [0, 0, 1, 2]
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            answer(
                &format!("n{i}"),
                (0..k).map(|j| pred_box(60.0 * j as f64, 0.0, 20.0, 20.0)).collect(),
            )
        })
        .collect();
    let r = eval(&gt, &preds);
    check("n-acc", r.n_acc == Some(0.5));

    if failures.is_empty() {
        verdict(true, "all fixtures exact")
    } else {
        verdict(false, format!("mismatched: {}", failures.join(", ")))
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (w, h) = (rng.gen_range(10.0..40.0), rng.gen_range(10.0..40.0));
    bx(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), w, h)
}

fn matching_instance(rng: &mut ChaCha8Rng) -> (Vec<DetectionInstance>, Vec<DetectionInstance>) {
    loop {
        let gts: Vec<_> = (0..rng.gen_range(0..=6))
            .map(|_| DetectionInstance::ground_truth(random_box(rng), "car"))
            .collect();
        let preds: Vec<_> = (0..rng.gen_range(0..=6))
            .map(|_| {
                let bbox = if !gts.is_empty() && rng.gen_bool(0.7) {
                    let g = &gts[rng.gen_range(0..gts.len())].bbox;
                    let (dx, dy) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
                    let (sw, sh) = (rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2));
                    bx((g.x() + dx).max(0.0), (g.y() + dy).max(0.0), g.w() * sw, g.h() * sh)
                } else {
                    random_box(rng)
                };
                DetectionInstance::prediction(bbox, rng.gen_range(0.0..1.0), None).unwrap()
            })
            .collect();
        let mut ious: Vec<f64> = preds
            .iter()
            .flat_map(|p| gts.iter().map(|g| iou(&p.bbox, &g.bbox)))
            .filter(|&v| v > 0.0)
            .collect();
        ious.sort_by(f64::total_cmp);
        if ious.windows(2).all(|w| w[0] != w[1]) {
            return (preds, gts);
        }
    }
}

fn oracle_equivalence() -> Verdict {
    const N: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut equal, mut bounded, mut contested) = (0, 0, 0);
    for _ in 0..N {
        let (preds, gts) = matching_instance(&mut rng);
        let g = match_expression(&preds, &gts, 0.5, CategoryMode::Ignore);
        let o = match_expression_optimal(&preds, &gts, 0.5, CategoryMode::Ignore).unwrap();
        let (tg, to) = (Tally::from_outcome(&g), Tally::from_outcome(&o));
        equal += usize::from(tg == to);
        bounded += usize::from(tg.tp <= to.tp);
        contested += usize::from(g.tp() > 0 && preds.len() > 1 && gts.len() > 1);
    }
    let rate = equal as f64 / N as f64;
    verdict(
        rate >= 0.95 && bounded == N,
        format!("equal tallies {rate:.4} (need >= 0.95), greedy TP <= optimal TP in {bounded}/{N}, {contested} instances with competing boxes"),
    )
}

fn gradient_check() -> Verdict {
    let config = NgdinoConfig::default();
    let mut worst: f64 = 0.0;
    let mut groups = 0;
    let mut pass = true;
    for seed in 0..3 {
        let opts = GradcheckOptions {
            seed,
            ..GradcheckOptions::default()
        };
        let report = model_gradcheck(&config, seed, &opts).unwrap();
        let params = Ngdino::new(config.clone(), seed).unwrap().params.len();
        pass &= report.passed() && report.groups.len() == params && report.groups.iter().all(|g| g.checked > 0);
        worst = worst.max(report.max_rel_error());
        groups = report.groups.len();
    }
    verdict(
        pass && worst <= 1e-4,
        format!("{groups} parameter groups at seeds 0-2, max relative error {worst:.2e} (need <= 1e-4)"),
    )
}

fn ablation_identity() -> Verdict {
    let scenes = generate(
        &SynthConfig {
            scenes: 16,
            max_objects: 16,
            ..SynthConfig::default()
        },
        Exec::Sequential,
    )
    .unwrap();
    let mut identical = true;
    for seed in SEEDS {
        let full_cfg = NgdinoConfig::default();
        let base_cfg = NgdinoConfig {
            ablation: Ablation::Neither,
            ..NgdinoConfig::default()
        };
        let mut full = Ngdino::new(full_cfg.clone(), seed).unwrap();
        let base = Ngdino::new(base_cfg, seed).unwrap();
        // A zero value projection makes number cross-attention add nothing.
        for name in ["layer0.num_attn.v.w", "layer0.num_attn.v.b"] {
            let id = full.params.id(name).unwrap();
            full.params.get_mut(id).data_mut().fill(0.0);
        }
        let data = featurize_all(&scenes, &full_cfg, Exec::Sequential).unwrap();
        let a = predict(&full, &data, Exec::Sequential).unwrap();
        let b = predict(&base, &data, Exec::Sequential).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            identical &= bits(x.boxes.concat().as_slice()) == bits(y.boxes.concat().as_slice());
            identical &= bits(&x.scores) == bits(&y.scores);
        }
    }
    verdict(
        identical,
        "neither vs full with silenced number attention, 5 seeds x 16 scenes",
    )
}

struct ToyResults {
    /// Per seed: (full, neither) reports.
    runs: Vec<(recground::metrics::MetricReport, recground::metrics::MetricReport)>,
    elapsed: Duration,
}

fn toy_runs() -> ToyResults {
    let start = Instant::now();
    let base = ToyConfig::default();
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let mut full = base.with_seed(seed);
            full.model.ablation = Ablation::None;
            let mut neither = full.clone();
            neither.model.ablation = Ablation::Neither;
            let f = run_toy(&full, Exec::Parallel, |_| {}).unwrap().report;
            let n = run_toy(&neither, Exec::Parallel, |_| {}).unwrap().report;
            println!(
                "    seed {seed}: F1_inst {:.4} vs {:.4}, n_acc {:.3} vs {:.3}, count acc {:.3}",
                f.f1_inst,
                n.f1_inst,
                f.n_acc.unwrap_or(f64::NAN),
                n.n_acc.unwrap_or(f64::NAN),
                f.count_bin_accuracy
            );
            (f, n)
        })
        .collect();
    ToyResults {
        runs,
        elapsed: start.elapsed(),
    }
}

fn ablation_trend(toy: &ToyResults) -> Verdict {
    let n = toy.runs.len() as f64;
    let mean = |f: &dyn Fn(&(recground::metrics::MetricReport, recground::metrics::MetricReport)) -> f64| {
        toy.runs.iter().map(f).sum::<f64>() / n
    };
    let f1 = (mean(&|r| r.0.f1_inst), mean(&|r| r.1.f1_inst));
    let nacc = (mean(&|r| r.0.n_acc.unwrap_or(0.0)), mean(&|r| r.1.n_acc.unwrap_or(0.0)));
    let in_time = toy.elapsed < Duration::from_secs(600);
    verdict(
        f1.0 > f1.1 && nacc.0 > nacc.1 && in_time,
        format!(
            "mean F1_inst {:.5} vs {:.5}, mean n_acc {:.4} vs {:.4} (full vs neither, must both exceed), {:.0} s",
            f1.0,
            f1.1,
            nacc.0,
            nacc.1,
            toy.elapsed.as_secs_f64()
        ),
    )
}

fn count_head(toy: &ToyResults) -> Verdict {
    let accs: Vec<f64> = toy.runs.iter().map(|r| r.0.count_bin_accuracy).collect();
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        min >= 0.90,
        format!("held-out count bin accuracy min {min:.3} over 5 seeds (need >= 0.90)"),
    )
}

fn scale_strata() -> Verdict {
    let mut ok = ScaleClass::of_area(1023.999) == ScaleClass::Small
        && ScaleClass::of_area(1024.0) == ScaleClass::Medium
        && ScaleClass::of_area(9216.0) == ScaleClass::Medium
        && ScaleClass::of_area(9216.001) == ScaleClass::Large
        && bx(0.0, 0.0, 32.0, 32.0).scale_class() == ScaleClass::Medium
        && bx(0.0, 0.0, 96.0, 96.0).scale_class() == ScaleClass::Medium
        && bx(0.0, 0.0, 31.9, 32.0).scale_class() == ScaleClass::Small
        && bx(0.0, 0.0, 96.0, 96.1).scale_class() == ScaleClass::Large;

    // Two small targets (one found, one missed) and one medium target found.
    let gt = [expr(
        "s",
        vec![
            gt_box(0.0, 0.0, 20.0, 20.0),
            gt_box(100.0, 100.0, 25.0, 25.0),
            gt_box(300.0, 0.0, 60.0, 60.0),
        ],
    )];
    let preds = [answer(
        "s",
        vec![pred_box(0.0, 0.0, 20.0, 20.0), pred_box(300.0, 0.0, 60.0, 60.0)],
    )];
    let r = eval(&gt, &preds);
    ok &= r.acc_by_scale == BTreeMap::from([(ScaleClass::Small, 0.5), (ScaleClass::Medium, 1.0)]);
    verdict(
        ok,
        "boundaries 1024 and 9216 are medium; hand fixture small 0.5, medium 1.0",
    )
}

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_recground"))
        .args(args)
        .env_remove("RECGROUND_THREADS")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).display().to_string();
    let mut same = Vec::new();

    let synth = |dir: &str| {
        run_cli(&["gen-synth", "--out", &p(dir), "--scenes", "200", "--seed", "11"]);
        snapshot(&tmp.path().join(dir))
    };
    same.push(("gen-synth", synth("g1") == synth("g2")));

    let toy = |dir: &str, threads: &str| {
        let stdout = run_cli(&[
            "train-toy",
            "--out",
            &p(dir),
            "--seed",
            "5",
            "--train-scenes",
            "96",
            "--eval-scenes",
            "40",
            "--stage1-epochs",
            "1",
            "--stage2-epochs",
            "2",
            "--threads",
            threads,
        ]);
        (stdout, snapshot(&tmp.path().join(dir)))
    };
    let t1 = toy("t1", "1");
    same.push(("train-toy", t1 == toy("t2", "1") && t1 == toy("t3", "3")));

    // Regenerate the held-out ground truth train-toy scored against.
    let eval_seed = (5u64 + 0x5eed_0000).to_string();
    run_cli(&[
        "gen-synth",
        "--out",
        &p("held"),
        "--scenes",
        "40",
        "--seed",
        &eval_seed,
        "--id-prefix",
        "synth-eval",
    ]);
    let gt = p("held/ground_truth.json");
    let pred = p("t1/predictions.ndjson");
    let ev = |name: &str| {
        let report = p(name);
        let stdout = run_cli(&["eval", &gt, &pred, "--matcher", "optimal", "--report", &report]);
        (stdout, fs::read(&report).unwrap())
    };
    same.push(("eval", ev("e1.json") == ev("e2.json")));

    let differing: Vec<&str> = same.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if differing.is_empty() {
        verdict(
            true,
            "gen-synth, train-toy (1 and 3 threads) and eval reruns byte-identical",
        )
    } else {
        verdict(false, format!("outputs differ for {}", differing.join(", ")))
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let mut v = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            v.pass = false;
        }
        v.detail = format!(
            "{}; {:.2} s (limit {} s)",
            v.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    v
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |id: u32, name: &'static str, v: Verdict| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {status} {name}: {}", v.detail);
        results.push((id, name, v));
    };

    report(
        1,
        "metric fidelity",
        timed(Some(Duration::from_secs(1)), metric_fidelity),
    );
    report(
        2,
        "greedy vs optimal matching",
        timed(Some(Duration::from_secs(30)), oracle_equivalence),
    );
    report(
        3,
        "gradient check",
        timed(Some(Duration::from_secs(60)), gradient_check),
    );
    report(4, "ablation identity", timed(None, ablation_identity));
    let toy = toy_runs();
    report(5, "full model beats neither", ablation_trend(&toy));
    report(6, "count head accuracy", count_head(&toy));
    report(7, "scale strata", timed(None, scale_strata));
    report(8, "determinism", timed(None, determinism));

    let elapsed = start.elapsed();
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!(
        "acceptance: {passed}/{} criteria pass in {:.0} s",
        results.len(),
        elapsed.as_secs_f64()
    );
    let unexpected: Vec<u32> = results
        .iter()
        .filter(|r| !r.2.pass && !KNOWN_RED.contains(&r.0))
        .map(|r| r.0)
        .collect();
    for r in results.iter().filter(|r| r.2.pass && KNOWN_RED.contains(&r.0)) {
        println!("note: criterion {} ({}) now passes; drop it from KNOWN_RED", r.0, r.1);
    }
    if unexpected.is_empty() && elapsed < Duration::from_secs(900) {
        ExitCode::SUCCESS
    } else {
        eprintln!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
