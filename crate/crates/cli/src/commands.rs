use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use recground::evaluate::{evaluate, EvalOptions};
use recground::exec::Exec;
use recground::io::{
    image_sizes, parse_ground_truth, parse_predictions, predictions_to_string, write_file, BoxFormat, FieldPolicy,
    ParseOptions,
};
use recground::matching::{CategoryMode, MatchConfig};
use recground::metrics::MetricReport;
use recground::ngdino::{model_gradcheck, NgdinoConfig};
use recground::stats::compute_stats;
use recground::synth::{export_as_benchmark, generate, scenes_to_string, SynthConfig};
use recground::tensor::gradcheck::GradcheckOptions;
use recground::tensor::save_checkpoint;
use recground::toy::{grid_cells, run_toy, Grid, ToyConfig};
use recground::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{
    BoxFormatArg, Command, EvalArgs, Failure, GenSynthArgs, GradcheckArgs, GridArg, StatsArgs, SuiteFlags, TrainToyArgs,
};

pub fn run(command: Command, threads: usize) -> std::result::Result<(), Failure> {
    let exec = Exec::for_threads(threads);
    match command {
        Command::Eval(a) => eval(a, exec)?,
        Command::Stats(a) => stats(a)?,
        Command::GenSynth(a) => gen_synth(a, exec)?,
        Command::TrainToy(a) => train_toy(a, exec)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn parse_options(lenient: bool, format: BoxFormatArg) -> ParseOptions {
    ParseOptions {
        fields: if lenient {
            FieldPolicy::Lenient
        } else {
            FieldPolicy::Strict
        },
        box_format: match format {
            BoxFormatArg::Xywh => BoxFormat::PixelXywh,
            BoxFormatArg::Cxcywh => BoxFormat::NormalizedCxcywh,
        },
    }
}

fn eval(a: EvalArgs, exec: Exec) -> Result<()> {
    let opts = parse_options(a.lenient, a.box_format);
    let gt = parse_ground_truth(&a.gt, &opts)?;
    let preds = parse_predictions(&a.pred, &opts, Some(&image_sizes(&gt)))?;
    let eval_opts = EvalOptions {
        matching: MatchConfig {
            iou_threshold: a.iou,
            matcher: a.matcher.into(),
            category_mode: if a.category_strict {
                CategoryMode::Strict
            } else {
                CategoryMode::Ignore
            },
        },
        exec,
        ..EvalOptions::default()
    };
    let report = evaluate(&gt, &preds, &eval_opts, None)?;
    if let Some(path) = &a.report {
        write_file(path, &report.to_json())?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let gt = parse_ground_truth(&a.gt, &parse_options(a.lenient, BoxFormatArg::Xywh))?;
    let text = to_json(&compute_stats(&gt)?);
    match &a.out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn apply_suite_flags(c: &mut SynthConfig, f: SuiteFlags) {
    let SuiteFlags {
        scenes,
        seed,
        no_target_rate,
        max_objects,
        max_targets,
        scale_mix,
        zipf_exponent,
        constraint_rate,
        color_confusion,
        image_width,
        image_height,
        id_prefix,
    } = f;
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = $field {
                c.$field = v;
            }
        )*};
    }
    set!(
        scenes,
        seed,
        no_target_rate,
        max_objects,
        max_targets,
        zipf_exponent,
        constraint_rate,
        image_width,
        image_height,
        id_prefix
    );
    // clap enforces exactly three values.
    if let Some(v) = scale_mix {
        c.scale_mix = [v[0], v[1], v[2]];
    }
    if let Some(v) = color_confusion {
        c.color_confusion = [v[0], v[1], v[2]];
    }
}

fn gen_synth(a: GenSynthArgs, exec: Exec) -> Result<()> {
    let mut config: SynthConfig = read_config(a.config.as_deref())?;
    apply_suite_flags(&mut config, a.suite);
    let scenes = generate(&config, exec)?;
    create_dir(&a.out)?;
    export_as_benchmark(
        &scenes,
        a.out.join("ground_truth.json"),
        a.out.join("answer_key.ndjson"),
    )?;
    write_file(a.out.join("scenes.ndjson"), &scenes_to_string(&scenes))?;
    write_file(a.out.join("config.json"), &to_json(&config))?;
    let empty = scenes.iter().filter(|s| s.targets.is_empty()).count();
    println!(
        "wrote {} scenes ({} without targets) to {}",
        scenes.len(),
        empty,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CellSummary {
    label: String,
    seeds: Vec<u64>,
    mean: BTreeMap<&'static str, f64>,
    runs: Vec<BTreeMap<&'static str, f64>>,
}

fn headline(r: &MetricReport) -> BTreeMap<&'static str, f64> {
    let mut m = BTreeMap::from([
        ("f1_inst", r.f1_inst),
        ("acc_inst", r.acc_inst),
        ("f1_img", r.f1_img),
        ("acc_img", r.acc_img),
        ("count_bin_accuracy", r.count_bin_accuracy),
        ("count_mae", r.count_mae),
    ]);
    if let Some(n) = r.n_acc {
        m.insert("n_acc", n);
    }
    if let Some(p) = r.pr_at.get("0.5") {
        m.insert("pr_at_0.5", *p);
    }
    m
}

fn run_cell(config: &ToyConfig, dir: &Path, exec: Exec) -> Result<MetricReport> {
    create_dir(dir)?;
    write_file(dir.join("config.json"), &to_json(config))?;
    let mut log = String::new();
    let run = run_toy(config, exec, |e| {
        log.push_str(&serde_json::to_string(e).expect("log serializes"));
        log.push('\n');
    });
    // The log is kept even when training diverges.
    write_file(dir.join("train_log.ndjson"), &log)?;
    let run = run?;
    write_file(dir.join("checkpoint.json"), &save_checkpoint(&run.model.params))?;
    write_file(dir.join("predictions.ndjson"), &predictions_to_string(&run.predictions))?;
    write_file(dir.join("report.json"), &run.report.to_json())?;
    Ok(run.report)
}

fn train_toy(a: TrainToyArgs, exec: Exec) -> Result<()> {
    let mut base: ToyConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.train_scenes {
        base.suite.scenes = v;
    }
    if let Some(v) = a.eval_scenes {
        base.eval_scenes = v;
    }
    if let Some(v) = a.ablate {
        base.model.ablation = v;
    }
    if let Some(v) = a.ls {
        base.model.per_bin = v;
    }
    let s = &mut base.schedule;
    if let Some(v) = a.stage1_epochs {
        s.stage1_epochs = v;
    }
    if let Some(v) = a.stage2_epochs {
        s.stage2_epochs = v;
    }
    if let Some(v) = a.lr {
        s.lr = v;
    }
    if let Some(v) = a.stage1_lr {
        s.stage1_lr = v;
    }
    if let Some(v) = a.batch_size {
        s.batch_size = v;
    }
    let seeds = match (a.seeds, a.seed) {
        (Some(v), _) if v.is_empty() => return Err(Error::InvalidConfig("--seeds needs at least one seed".into())),
        (Some(v), _) => v,
        (None, Some(s)) => vec![s],
        (None, None) => vec![base.suite.seed],
    };
    let cells = match a.grid {
        Some(GridArg::Components) => grid_cells(&base, Grid::Components),
        Some(GridArg::SliceLength) => grid_cells(&base, Grid::SliceLength),
        None => vec![(format!("ablate-{}", base.model.ablation), base.clone())],
    };
    for (_, c) in &cells {
        c.with_seed(seeds[0]).validate()?;
    }
    let nested = a.grid.is_some();
    let multi = seeds.len() > 1;
    let mut summary = Vec::new();
    for (label, cell) in &cells {
        let mut runs = Vec::new();
        for &seed in &seeds {
            let mut dir = a.out.clone();
            if nested {
                dir.push(label);
            }
            if multi {
                dir.push(format!("seed-{seed}"));
            }
            let report = run_cell(&cell.with_seed(seed), &dir, exec)?;
            println!("{label} seed {seed}: {}", report.summary());
            runs.push(headline(&report));
        }
        let mut mean = BTreeMap::new();
        for r in &runs {
            for (k, v) in r {
                *mean.entry(*k).or_insert(0.0) += v / runs.len() as f64;
            }
        }
        summary.push(CellSummary {
            label: label.clone(),
            seeds: seeds.clone(),
            mean,
            runs,
        });
    }
    if nested || multi {
        write_file(a.out.join("summary.json"), &to_json(&summary))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    let opts = GradcheckOptions {
        samples_per_param: (a.samples > 0).then_some(a.samples),
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let report = model_gradcheck(&NgdinoConfig::default(), a.seed, &opts)?;
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::property(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error(),
            report.tolerance
        )))
    }
}
