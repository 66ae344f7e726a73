//! Command implementations behind the binary: gen, train, extract, correct,
//! eval. Every artifact is written atomically and each output directory gets
//! an echo of the effective run configuration.

use std::path::{Path, PathBuf};

use crate::bias::{correct_bias, ConstraintSet, CorrectionContext, CorrectionHistory};
use crate::cnn::{build_model, load_checkpoint, save_checkpoint, CnnModel, EpochStats, Trainer};
use crate::config::{require_path, RunConfig};
use crate::dataset::{load_dataset, save_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::fold::{parse_ruleset, print_ruleset, PredicateBinding, RuleSet};
use crate::fsutil::write_atomic_str;
use crate::metrics::{self, MetricsRecord};
use crate::pipeline::{extract_ruleset, thresholds_to_csv, Extraction};
use crate::scenegen::{bias_suite_spec, generate_all, SceneSpec};
use crate::semlabel::LabelMap;

/// Training precision of the command-line pipeline. Checkpoints store 32-bit
/// values, so an f32 pipeline round-trips them exactly.
pub type Real = f32;

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_atomic_str(&out.join("config.toml"), &cfg.to_toml())
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,ce_loss,aux_loss,train_accuracy,val_loss,val_accuracy,learning_rate\n");
    for h in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{},{:.8}\n",
            h.epoch,
            h.ce_loss,
            h.aux_loss,
            h.train_accuracy,
            h.val_loss.map_or(String::new(), |v| format!("{v:.6}")),
            h.val_accuracy.map_or(String::new(), |v| format!("{v:.6}")),
            h.learning_rate,
        ));
    }
    out
}

fn recalibrations_csv(history: &CorrectionHistory) -> String {
    let mut out =
        String::from("epoch,pct_undesired,pct_desired,coverage,unique_predicates,size\n");
    for r in &history.recalibrations {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{}\n",
            r.epoch, r.pct_undesired, r.pct_desired, r.coverage, r.unique_predicates, r.size
        ));
    }
    out
}

fn write_extraction(ex: &Extraction, out: &Path, suffix: &str) -> Result<()> {
    write_atomic_str(
        &out.join(format!("ruleset_raw{suffix}.txt")),
        &print_ruleset(&ex.ruleset, None),
    )?;
    write_atomic_str(&out.join(format!("ruleset{suffix}.txt")), &print_ruleset(&ex.labelled, None))?;
    write_atomic_str(&out.join(format!("labels{suffix}.csv")), &ex.label_map.to_csv())?;
    write_atomic_str(&out.join(format!("thresholds{suffix}.csv")), &thresholds_to_csv(&ex.thresholds))?;
    write_atomic_str(&out.join(format!("bintable{suffix}.csv")), &ex.table.to_csv())?;
    Ok(())
}

/// Either a scene-spec TOML file or the built-in benchmark.
pub enum SpecSource {
    File(PathBuf),
    BuiltinBiasSuite,
}

/// Generate a dataset (all three splits) under `out`.
pub fn cmd_gen(spec: SpecSource, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut scene: SceneSpec = match spec {
        SpecSource::File(path) => {
            require_path(&path, "scene spec")?;
            SceneSpec::parse_toml(&std::fs::read_to_string(&path)?)?
        }
        SpecSource::BuiltinBiasSuite => bias_suite_spec(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        scene.seed = s;
    }
    std::fs::create_dir_all(out)?;
    let (train, validation, test) = generate_all(&scene)?;
    for ds in [&train, &validation, &test] {
        save_dataset(out, ds)?;
    }
    write_atomic_str(&out.join("scene.toml"), &scene.to_toml())?;
    println!(
        "generated {} train / {} validation / {} test images per class under {}",
        scene.counts.train,
        scene.counts.validation,
        scene.counts.test,
        out.display()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    require_path(&cfg.paths.dataset, "dataset")?;
    load_dataset(&cfg.paths.dataset, split)
}

/// Train from scratch; writes `checkpoint.nsbc` and `history.csv`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let train_ds = load_split(cfg, Split::Train)?;
    let val_ds = load_split(cfg, Split::Validation).ok();
    if train_ds.class_names.len() != cfg.cnn.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, cnn.classes = {}",
            train_ds.class_names.len(),
            cfg.cnn.classes
        )));
    }
    std::fs::create_dir_all(out)?;
    let train_t = train_ds.to_tensors::<Real>();
    let val_t = val_ds.as_ref().map(|d| d.to_tensors::<Real>());
    let model = build_model::<Real>(&cfg.cnn)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    for epoch in 0..cfg.train.epochs {
        let stats = trainer.run_epoch(&train_t, val_t.as_ref(), None)?;
        println!(
            "epoch {:>3}: ce {:.4} acc {:.3}{}",
            epoch + 1,
            stats.ce_loss,
            stats.train_accuracy,
            stats
                .val_accuracy
                .map_or(String::new(), |v| format!(" val_acc {v:.3}")),
        );
    }
    save_checkpoint(&trainer.model, &out.join("checkpoint.nsbc"))?;
    write_atomic_str(&out.join("history.csv"), &history_csv(&trainer.history))?;
    echo_config(cfg, out)?;
    Ok(())
}

/// Extract, label and dump the rule-set of a checkpoint.
pub fn cmd_extract(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    require_path(checkpoint, "checkpoint")?;
    let model: CnnModel<Real> = load_checkpoint(checkpoint)?;
    let train_ds = load_split(cfg, Split::Train)?;
    let train_t = train_ds.to_tensors::<Real>();
    std::fs::create_dir_all(out)?;
    let fold = cfg.fold.resolve(train_ds.len());
    let ex = extract_ruleset(
        &model,
        &train_t,
        &train_ds.masks,
        &train_ds.vocab,
        &train_ds.class_names,
        &fold,
        &cfg.binarizer,
        &cfg.labels,
    )?;
    write_extraction(&ex, out, "")?;
    echo_config(cfg, out)?;
    println!("{}", print_ruleset(&ex.labelled, None).trim_end());
    Ok(())
}

/// Bias-correction retraining; writes the corrected checkpoint, the initial
/// and final rule-sets, and the training/recalibration histories.
pub fn cmd_correct(
    cfg: &RunConfig,
    checkpoint: &Path,
    constraints_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    require_path(checkpoint, "checkpoint")?;
    let constraints_path = constraints_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.constraints.clone())
        .ok_or_else(|| Error::Config("no constraints file given (flag or paths.constraints)".into()))?;
    require_path(&constraints_path, "constraints")?;
    let constraints = ConstraintSet::parse_toml(&std::fs::read_to_string(&constraints_path)?)?;
    let model: CnnModel<Real> = load_checkpoint(checkpoint)?;
    let train_ds = load_split(cfg, Split::Train)?;
    let val_ds = load_split(cfg, Split::Validation).ok();
    let train_t = train_ds.to_tensors::<Real>();
    let val_t = val_ds.as_ref().map(|d| d.to_tensors::<Real>());
    std::fs::create_dir_all(out)?;
    let ctx = CorrectionContext {
        train: &train_t,
        val: val_t.as_ref(),
        masks: &train_ds.masks,
        vocab: &train_ds.vocab,
        class_names: &train_ds.class_names,
        constraints: &constraints,
        fold: cfg.fold.resolve(train_ds.len()),
        binarizer: cfg.binarizer,
        labels: cfg.labels,
    };
    let mut tc = cfg.train.clone();
    tc.epochs = cfg.correct.epochs;
    let outcome = correct_bias(model, &ctx, &tc, &cfg.correct.to_config())?;
    save_checkpoint(&outcome.model, &out.join("corrected.nsbc"))?;
    write_extraction(&outcome.initial, out, "_initial")?;
    write_extraction(&outcome.fin, out, "_final")?;
    write_atomic_str(&out.join("history.csv"), &history_csv(&outcome.history.epochs))?;
    write_atomic_str(&out.join("recalibrations.csv"), &recalibrations_csv(&outcome.history))?;
    echo_config(cfg, out)?;
    for r in &outcome.history.recalibrations {
        println!(
            "epoch {:>3}: %undesired {:.3} %desired {:.3} predicates {} size {}",
            r.epoch, r.pct_undesired, r.pct_desired, r.unique_predicates, r.size
        );
    }
    Ok(())
}

/// Evaluate one rule-set (optionally against a baseline) on a checkpoint.
pub struct EvalInputs<'a> {
    pub ruleset: &'a Path,
    pub labels: Option<&'a Path>,
    pub constraints: Option<&'a Path>,
    pub baseline_ruleset: Option<&'a Path>,
    pub baseline_labels: Option<&'a Path>,
}

fn load_labels(path: Option<&Path>) -> Result<Option<LabelMap>> {
    match path {
        Some(p) => {
            require_path(p, "labels")?;
            Ok(Some(LabelMap::parse_csv(&std::fs::read_to_string(p)?)?))
        }
        None => Ok(None),
    }
}

fn binding_for(labels: &Option<LabelMap>, k: usize) -> PredicateBinding {
    match labels {
        Some(map) => PredicateBinding::from_label_positions(map),
        None => PredicateBinding::raw(k),
    }
}

struct EvalOutcome {
    record: MetricsRecord,
    covers_all: bool,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_ruleset(
    rs: &RuleSet,
    binding: &PredicateBinding,
    model: &CnnModel<Real>,
    train_ds: &Dataset,
    test_t: &crate::cnn::TensorDataset<Real>,
    th: &crate::binarize::Thresholds,
    table: &crate::binarize::BinarizationTable,
    constraints: &ConstraintSet,
) -> Result<EvalOutcome> {
    let fallback = train_ds.majority_class();
    let class_names = &train_ds.class_names;
    let fidelity = metrics::fidelity(rs, binding, model, test_t, th, class_names, fallback)?;
    let accuracy = metrics::rule_accuracy(rs, binding, model, test_t, th, class_names, fallback)?;
    let (unique_predicates, size) = metrics::ruleset_size_stats(rs);
    let (pct_undesired, pct_desired, coverage) =
        metrics::percent_undesired_desired(rs, table, constraints, binding)?;
    Ok(EvalOutcome {
        record: MetricsRecord {
            fidelity,
            accuracy,
            unique_predicates,
            size,
            pct_undesired,
            pct_desired,
            coverage,
        },
        covers_all: metrics::covers_all_classes(rs, class_names),
    })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, inputs: &EvalInputs, out: &Path) -> Result<()> {
    cfg.validate()?;
    require_path(checkpoint, "checkpoint")?;
    require_path(inputs.ruleset, "ruleset")?;
    let constraints_path = inputs
        .constraints
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.constraints.clone())
        .ok_or_else(|| Error::Config("no constraints file given (flag or paths.constraints)".into()))?;
    require_path(&constraints_path, "constraints")?;
    let constraints = ConstraintSet::parse_toml(&std::fs::read_to_string(&constraints_path)?)?;

    let model: CnnModel<Real> = load_checkpoint(checkpoint)?;
    let train_ds = load_split(cfg, Split::Train)?;
    let test_ds = load_split(cfg, Split::Test)?;
    let train_t = train_ds.to_tensors::<Real>();
    let test_t = test_ds.to_tensors::<Real>();

    // thresholds and the binarization table come from the same train regime
    // the rule-set was extracted under
    let nt = crate::binarize::build_norm_table(&model, &train_t)?;
    let th = crate::binarize::compute_thresholds(&nt, &cfg.binarizer);
    let table = crate::binarize::binarize(&nt, &th, &train_ds.class_names)?;

    let rs = parse_ruleset(&std::fs::read_to_string(inputs.ruleset)?)?;
    rs.validate()?;
    let labels = load_labels(inputs.labels)?;
    let binding = binding_for(&labels, model.config.k);
    let main = evaluate_ruleset(&rs, &binding, &model, &train_ds, &test_t, &th, &table, &constraints)?;

    std::fs::create_dir_all(out)?;
    let mut csv = String::from(MetricsRecord::csv_header());
    csv.push('\n');
    csv.push_str(&main.record.csv_row());
    csv.push('\n');
    write_atomic_str(&out.join("metrics.csv"), &csv)?;

    if let Some(baseline_path) = inputs.baseline_ruleset {
        require_path(baseline_path, "baseline ruleset")?;
        let base_rs = parse_ruleset(&std::fs::read_to_string(baseline_path)?)?;
        base_rs.validate()?;
        let base_labels = load_labels(inputs.baseline_labels)?;
        let base_binding = binding_for(&base_labels, model.config.k);
        let base =
            evaluate_ruleset(&base_rs, &base_binding, &model, &train_ds, &test_t, &th, &table, &constraints)?;
        let mut base_csv = String::from(MetricsRecord::csv_header());
        base_csv.push('\n');
        base_csv.push_str(&base.record.csv_row());
        base_csv.push('\n');
        write_atomic_str(&out.join("baseline_metrics.csv"), &base_csv)?;
        write_atomic_str(&out.join("report.txt"), &comparison_report(&base.record, &main.record))?;
    }
    echo_config(cfg, out)?;
    if !main.covers_all {
        log::warn!("rule-set does not head every dataset class");
    }
    println!("{}", MetricsRecord::csv_header());
    println!("{}", main.record.csv_row());
    Ok(())
}

fn comparison_report(before: &MetricsRecord, after: &MetricsRecord) -> String {
    let mut out = String::new();
    out.push_str("metric            before     after      delta\n");
    let mut row = |name: &str, b: f64, a: f64| {
        out.push_str(&format!("{name:<16} {b:>9.4} {a:>9.4} {:>+9.4}\n", a - b));
    };
    row("fidelity", before.fidelity, after.fidelity);
    row("accuracy", before.accuracy, after.accuracy);
    row("predicates", before.unique_predicates as f64, after.unique_predicates as f64);
    row("size", before.size as f64, after.size as f64);
    row("pct_undesired", before.pct_undesired, after.pct_undesired);
    row("pct_desired", before.pct_desired, after.pct_desired);
    row("coverage", before.coverage, after.coverage);
    out
}
