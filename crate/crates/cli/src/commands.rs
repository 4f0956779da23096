//! Implementations behind the subcommands. Everything runs in f32.

use std::path::{Path, PathBuf};

use twospeed_core::data::{
    default6_classes, generate_synthetic, import_ppm_tree, ChipDataset, ClassSpec, DataError,
    SplitPlan,
};
use twospeed_core::ensemble::{ensemble_predict, weight_sweep, EnsembleSpec, ProbClassifier};
use twospeed_core::metrics::{emit_report, ConfusionMatrix, MetricsReport};
use twospeed_core::nn::{read_model_file, DataView, Model, ModelKind};
use twospeed_core::saliency::{
    attention_rollout, occlusion_map, write_map_image, write_montage, SaliencyError,
    SaliencyMap,
};
use twospeed_core::schedule::{
    active_ensemble_at, format_hms, increment_complete, run_increment, ModelRegistry,
    ScheduleTrainer, SpeedKind, TimeLedger,
};

use crate::config::RunConfig;
use crate::{runtime, usage, CliError, MethodChoice, SplitArgs, SplitChoice};

type F = f32;

pub fn synth(out: &Path, seed: u64, per_class: usize, classes: &str) -> Result<(), CliError> {
    let specs: Vec<ClassSpec> = if classes == "default6" {
        default6_classes()
    } else {
        let text = std::fs::read_to_string(classes)
            .map_err(|e| usage(format!("cannot read class spec {classes}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("class spec {classes}: {e}")))?
    };
    let dataset = generate_synthetic(&specs, per_class, seed).map_err(usage)?;
    dataset.write(out).map_err(runtime)?;
    println!(
        "wrote {} chips ({} classes x {per_class}) to {}",
        dataset.len(),
        dataset.num_classes(),
        out.display()
    );
    Ok(())
}

pub fn import(src: &Path, out: &Path) -> Result<(), CliError> {
    let provenance = format!("imported from {}", src.display());
    let dataset = import_ppm_tree(src, &provenance).map_err(|e| match e {
        DataError::Io { .. } => runtime(e),
        other => usage(other),
    })?;
    dataset.write(out).map_err(runtime)?;
    println!(
        "imported {} chips across classes [{}] into {}",
        dataset.len(),
        dataset.class_names().join(", "),
        out.display()
    );
    Ok(())
}

fn short_kind(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::HsCnn => "CNN",
        ModelKind::Vit => "VIT",
    }
}

pub fn schedule(config_path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let dataset = ChipDataset::load(&cfg.dataset).map_err(usage)?;
    let plan = SplitPlan::new(
        dataset.len(),
        cfg.split.seed,
        cfg.split.holdout_fraction,
        cfg.split.val_fraction,
        &cfg.split.increments,
    )
    .map_err(usage)?;
    let schedule = cfg.schedule();
    std::fs::create_dir_all(&cfg.output_dir).map_err(runtime)?;
    let mut registry = ModelRegistry::open(&cfg.output_dir.join("registry")).map_err(runtime)?;
    let trainer = ScheduleTrainer {
        schedule: &schedule,
        augment: cfg.augment.clone(),
        timing: cfg.timing.into(),
    };
    let holdout_batch = dataset.batch::<F>(plan.holdout());
    let holdout_labels = dataset.gather_labels(plan.holdout());

    let mut reports = Vec::new();
    let mut confusions = Vec::new();
    for k in 1..=schedule.len() {
        let label = schedule.increments[k - 1].label.clone();
        if !increment_complete(&registry, &schedule, k).map_err(runtime)? {
            let view = plan.increment(k - 1).map_err(runtime)?;
            let train = DataView::new(&dataset, view.train);
            let val = (!view.val.is_empty()).then(|| DataView::new(&dataset, view.val));
            run_increment::<F>(
                &mut registry,
                &schedule,
                k,
                train,
                val,
                &trainer,
                cfg.seed,
                true,
            )
            .map_err(|e| runtime(format!("increment {label}: {e}")))?;
        }

        let active =
            active_ensemble_at::<F>(&registry, &schedule, k, Some(cfg.ensemble_weights))
                .map_err(runtime)?;
        let spec = active.spec().map_err(runtime)?;
        let (preds, _) = ensemble_predict(&spec, &holdout_batch).map_err(runtime)?;
        let cm = ConfusionMatrix::from_labels(
            &holdout_labels,
            &preds,
            dataset.class_names().to_vec(),
        )
        .map_err(runtime)?;

        let pct = (schedule.increments[k - 1].fraction * 100.0).round() as u32;
        let prefix = if active.len() == 2 {
            "ENS"
        } else {
            short_kind(active.models().next().expect("non-empty").kind())
        };
        let row_label = format!("{prefix}-{pct}");
        let (mut f_fast, mut f_slow) = (None, None);
        for s in active.snapshots() {
            match s.kind {
                SpeedKind::Fast => f_fast = Some(s.data_fraction),
                SpeedKind::Slow => f_slow = Some(s.data_fraction),
            }
        }
        let report = MetricsReport::from_confusion(
            row_label.clone(),
            label.clone(),
            &cm,
            f_fast,
            f_slow,
            active.total_duration(),
        )
        .map_err(runtime)?;
        println!(
            "{label} {row_label}: holdout OA {:.4}, macro F1 {:.4}, training total {}",
            report.overall_accuracy,
            report.macro_f1,
            format_hms(report.training_total_seconds)
        );
        reports.push(report);
        confusions.push((row_label, cm));

        emit_report(&reports, &confusions, &cfg.output_dir).map_err(runtime)?;
        TimeLedger::from_registry(&registry, &schedule)
            .map_err(runtime)?
            .write_csv(&cfg.output_dir.join("ledger.csv"))
            .map_err(runtime)?;
    }
    println!(
        "schedule complete: {} increments, outputs in {}",
        schedule.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn split_indices(dataset: &ChipDataset, args: &SplitArgs) -> Result<Vec<usize>, CliError> {
    match args.split {
        SplitChoice::Full => Ok((0..dataset.len()).collect()),
        SplitChoice::Holdout => {
            let plan = SplitPlan::new(
                dataset.len(),
                args.split_seed,
                args.holdout_fraction,
                args.val_fraction,
                &[1.0],
            )
            .map_err(usage)?;
            Ok(plan.holdout().to_vec())
        }
    }
}

fn parse_weights(text: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    let bad = || usage(format!("weights {text:?} must be `fast,slow` positive reals"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
        return Err(bad());
    }
    Ok((a, b))
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    model: Option<PathBuf>,
    fast: Option<PathBuf>,
    slow: Option<PathBuf>,
    weights: Option<String>,
    data: &Path,
    split: &SplitArgs,
    out: &Path,
) -> Result<(), CliError> {
    let dataset = ChipDataset::load(data).map_err(runtime)?;
    let indices = split_indices(&dataset, split)?;
    let (w_fast, w_slow) = match &weights {
        Some(w) => parse_weights(w)?,
        None => (0.5, 0.5),
    };

    let mut models: Vec<Model<F>> = Vec::new();
    let label;
    match (model, fast) {
        (Some(path), None) => {
            models.push(read_model_file(&path).map_err(runtime)?);
            label = models[0].kind().to_string();
        }
        (None, Some(fast_path)) => {
            models.push(read_model_file(&fast_path).map_err(runtime)?);
            if let Some(slow_path) = &slow {
                models.push(read_model_file(slow_path).map_err(runtime)?);
            }
            label = "ensemble".to_string();
        }
        _ => return Err(usage("pass exactly one of --model or --fast [--slow]")),
    }
    let components: Vec<(&dyn ProbClassifier<F>, f64)> = models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let w = if models.len() == 1 {
                1.0
            } else if i == 0 {
                w_fast
            } else {
                w_slow
            };
            (m as &dyn ProbClassifier<F>, w)
        })
        .collect();
    let spec = EnsembleSpec::new(components).map_err(usage)?;

    let batch = dataset.batch::<F>(&indices);
    let truth = dataset.gather_labels(&indices);
    let (preds, _) = ensemble_predict(&spec, &batch).map_err(runtime)?;
    let cm = ConfusionMatrix::from_labels(&truth, &preds, dataset.class_names().to_vec())
        .map_err(runtime)?;
    let report =
        MetricsReport::from_confusion(label.clone(), "eval", &cm, None, None, 0.0)
            .map_err(runtime)?;
    println!(
        "{label}: n={} oa={:.6} macro_f1={:.6}",
        report.n_eval, report.overall_accuracy, report.macro_f1
    );
    emit_report(&[report], &[(label, cm)], out).map_err(runtime)?;
    println!("reports written to {}", out.display());
    Ok(())
}

pub fn sweep(
    fast: &Path,
    slow: &Path,
    data: &Path,
    split: &SplitArgs,
    out: &Path,
) -> Result<(), CliError> {
    let fast_model: Model<F> = read_model_file(fast).map_err(runtime)?;
    let slow_model: Model<F> = read_model_file(slow).map_err(runtime)?;
    let dataset = ChipDataset::load(data).map_err(runtime)?;
    let indices = split_indices(&dataset, split)?;
    let batch = dataset.batch::<F>(&indices);
    let labels = dataset.gather_labels(&indices);
    let table = weight_sweep(&fast_model, &slow_model, &batch, &labels).map_err(usage)?;
    table.write_csv(out).map_err(runtime)?;
    let best = table.best_row();
    println!(
        "best w_cnn={:.1} w_vit={:.1} oa={:.6} ({} rows in {})",
        best.w_a,
        best.w_b,
        best.overall_accuracy,
        table.rows.len(),
        out.display()
    );
    Ok(())
}

pub fn saliency(
    model_path: &Path,
    data: &Path,
    index: usize,
    class: Option<usize>,
    method: MethodChoice,
    out: &Path,
) -> Result<(), CliError> {
    let model: Model<F> = read_model_file(model_path).map_err(runtime)?;
    let dataset = ChipDataset::load(data).map_err(runtime)?;
    if index >= dataset.len() {
        return Err(usage(format!(
            "index {index} out of range (dataset has {} chips)",
            dataset.len()
        )));
    }
    let chip = dataset.chip(index);
    let probs = model
        .forward(&twospeed_core::data::bytes_to_batch::<F>(chip, 1))
        .map_err(runtime)?;
    let predicted = twospeed_core::nn::argmax_rows(&probs)[0];
    let target = class.unwrap_or(predicted);
    if target >= dataset.num_classes() {
        return Err(usage(format!(
            "class {target} out of range ({} classes)",
            dataset.num_classes()
        )));
    }

    let kind_err = |e: SaliencyError| match e {
        SaliencyError::Kind(_) | SaliencyError::Input(_) => usage(e),
        other => runtime(other),
    };
    let (map, tag): (SaliencyMap, &str) = match method {
        MethodChoice::Occlusion => (
            occlusion_map(&model, chip, target, dataset.mean_color::<F>()).map_err(kind_err)?,
            "occlusion",
        ),
        MethodChoice::AttentionRollout => (
            attention_rollout(&model, chip).map_err(kind_err)?,
            "attention_rollout",
        ),
    };

    std::fs::create_dir_all(out).map_err(runtime)?;
    let pgm = out.join(format!("chip{index}_{tag}.pgm"));
    let ppm = out.join(format!("chip{index}_{tag}.ppm"));
    write_map_image(&map, &pgm).map_err(runtime)?;
    write_montage(chip, &map, &ppm).map_err(runtime)?;
    let names = dataset.class_names();
    println!(
        "chip {index}: true={} predicted={} p[{}]={:.4} method={tag}",
        names[dataset.label(index)],
        names[predicted],
        names[target],
        probs.data()[target],
    );
    println!("wrote {} and {}", pgm.display(), ppm.display());
    Ok(())
}
