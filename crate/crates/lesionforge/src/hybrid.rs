//! The three-phase hybrid procedure:
//!   A. train a residual classifier directly on the (split, balanced,
//!      normalized) dataset and evaluate it;
//!   B. train the autoencoder on the same training images, reconstruct the
//!      train and test sets through it, and re-evaluate the phase-A model on
//!      the reconstructed test set;
//!   C. train a fresh classifier of the same configuration on the
//!      reconstructed data and evaluate it.
//!
//! Each phase writes its checkpoints, epoch logs, and report into its own
//! subdirectory of the run root; a side-by-side comparison table goes at the
//! top level. The whole tree is a pure function of (dataset, config, seed).

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{
    apply_normalization, balance_by_oversampling, compute_norm_stats, stratified_split, Dataset,
    NormStats, Sample,
};
use crate::error::{Error, Result};
use crate::models::{build_dae, build_resnet, ModelGraph};
use crate::report::{
    class_report, emit_curves, prediction_gallery, predictions_to_csv, render_text,
    report_to_csv, ClassReport, Predictions,
};
use crate::metrics::{ovr_auc_pair_count, ConfusionMatrix};
use crate::tensor::Tensor;
use crate::trainer::{
    evaluate_classifier, train_classifier, train_dae, reconstruct_dataset, EpochLog, Optimizer,
};

/// Model-init seed offsets, so each phase gets independent but reproducible
/// initial weights from one run seed.
pub const SEED_OFFSET_DAE: u64 = 1;
pub const SEED_OFFSET_PHASE_C: u64 = 2;

pub struct HybridOutcome {
    pub report_a: ClassReport,
    pub report_b: ClassReport,
    pub report_c: ClassReport,
    pub train_size: usize,
    pub test_size: usize,
    pub reconstructed_train_size: usize,
    pub reconstructed_test_size: usize,
}

fn attach_norm(graph: &mut ModelGraph<f32>, stats: &Option<NormStats>) {
    if let Some(s) = stats {
        graph.add_extra_buffer(
            "norm.mean",
            Tensor::from_vec(vec![s.mean.len()], s.mean.clone()).expect("stat shape"),
        );
        graph.add_extra_buffer(
            "norm.std",
            Tensor::from_vec(vec![s.std.len()], s.std.clone()).expect("stat shape"),
        );
    }
}

fn maybe_normalize(ds: &Dataset, enabled: bool) -> Result<(Dataset, Option<NormStats>)> {
    if enabled {
        let stats = compute_norm_stats(ds)?;
        Ok((apply_normalization(ds, &stats)?, Some(stats)))
    } else {
        Ok((ds.clone(), None))
    }
}

fn maybe_apply(ds: &Dataset, stats: &Option<NormStats>) -> Result<Dataset> {
    match stats {
        Some(s) => apply_normalization(ds, s),
        None => Ok(ds.clone()),
    }
}

/// Evaluate a classifier on a normalized dataset, producing the prediction
/// set, confusion matrix, and class report.
pub fn evaluate_to_report(
    graph: &ModelGraph<f32>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(Predictions, ConfusionMatrix, ClassReport)> {
    let out = evaluate_classifier(graph, ds, batch_size)?;
    let predictions = Predictions {
        ids: ds.samples().iter().map(|s| s.id.clone()).collect(),
        actual: ds.samples().iter().map(|s| s.label).collect(),
        predicted: out.predicted,
        scores: out.probs,
    };
    let cm = ConfusionMatrix::from_labels(
        &predictions.actual,
        &predictions.predicted,
        ds.class_names().len(),
    )?;
    let mut aucs = Vec::with_capacity(ds.class_names().len());
    for class in 0..ds.class_names().len() {
        let scores: Vec<f64> = predictions.scores.iter().map(|row| row[class]).collect();
        let is_pos: Vec<bool> = predictions.actual.iter().map(|&a| a == class).collect();
        aucs.push(ovr_auc_pair_count(&scores, &is_pos)?);
    }
    let report = class_report(&cm, &aucs)?;
    Ok((predictions, cm, report))
}

fn write_report_files(
    dir: &Path,
    predictions: &Predictions,
    cm: &ConfusionMatrix,
    report: &ClassReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    std::fs::write(dir.join("predictions.csv"), predictions_to_csv(predictions))
        .map_err(|e| Error::io("writing predictions.csv", e))?;
    std::fs::write(dir.join("report.txt"), render_text(report, Some(cm)))
        .map_err(|e| Error::io("writing report.txt", e))?;
    std::fs::write(dir.join("report.csv"), report_to_csv(report))
        .map_err(|e| Error::io("writing report.csv", e))?;
    Ok(())
}

fn comparison_table(a: &ClassReport, b: &ClassReport, c: &ClassReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<34} {:>9} {:>10} {:>8} {:>9} {:>8}\n",
        "Phase", "Accuracy", "Precision", "Recall", "F1 Score", "AUC"
    ));
    let fmt_auc = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    };
    for (name, r) in [
        ("A: classifier on original", a),
        ("B: phase-A model on reconstructed", b),
        ("C: retrained on reconstructed", c),
    ] {
        out.push_str(&format!(
            "{:<34} {:>9.4} {:>10.4} {:>8.4} {:>9.4} {:>8}\n",
            name,
            r.accuracy,
            r.average.precision,
            r.average.recall,
            r.average.f1,
            fmt_auc(r.average.auc)
        ));
    }
    out
}

/// Run phases A-C under `out_root`. `progress` receives (phase, epoch log)
/// pairs as training advances.
pub fn run_hybrid(
    raw: &Dataset,
    cfg: &RunConfig,
    out_root: &Path,
    progress: &mut dyn FnMut(&str, &EpochLog),
) -> Result<HybridOutcome> {
    let seed = cfg.seed()?;
    std::fs::create_dir_all(out_root)
        .map_err(|e| Error::io(format!("creating {}", out_root.display()), e))?;
    std::fs::write(out_root.join("config.txt"), cfg.to_text())
        .map_err(|e| Error::io("writing config.txt", e))?;

    // (1) split + balance + normalize
    let test_fraction = cfg.get_f64("data", "test_fraction")?;
    let (train_raw, test_raw) = stratified_split(raw, test_fraction, seed)?;
    let train_bal = if cfg.get_bool("data", "balance")? {
        balance_by_oversampling(&train_raw, &cfg.augment_spec(seed)?)?
    } else {
        train_raw.clone()
    };
    let normalize = cfg.get_bool("data", "normalize")?;
    let (train_a, stats_a) = maybe_normalize(&train_bal, normalize)?;
    let test_a = maybe_apply(&test_raw, &stats_a)?;

    let dims = train_a.image_dims()?;
    let eval_batch = cfg.get_usize("eval", "batch_size")?;

    // (2) Phase A: direct classifier
    let phase_a = out_root.join("phase_a");
    let rcfg = cfg.resnet_config(dims)?;
    let mut model_a: ModelGraph<f32> = build_resnet(&rcfg, seed)?;
    attach_norm(&mut model_a, &stats_a);
    let tcfg_a = cfg.train_config(seed)?;
    let mut opt_a = Optimizer::new(&tcfg_a);
    let logs_a = train_classifier(
        &mut model_a,
        &mut opt_a,
        &train_a,
        &test_a,
        &tcfg_a,
        1..=tcfg_a.epochs,
        Some(&phase_a),
        &mut |log| progress("phase_a", log),
    )?;
    emit_curves(&logs_a, &phase_a.join("reports"))?;
    let (pred_a, cm_a, report_a) = evaluate_to_report(&model_a, &test_a, eval_batch)?;
    write_report_files(&phase_a.join("reports"), &pred_a, &cm_a, &report_a)?;

    // (3) Phase B: autoencoder on the raw [0,1] training images, then
    // reconstruct both splits and re-evaluate the phase-A model.
    let phase_b = out_root.join("phase_b");
    let dcfg = cfg.dae_config(dims)?;
    let mut dae: ModelGraph<f32> = build_dae(&dcfg, seed.wrapping_add(SEED_OFFSET_DAE))?;
    let tcfg_dae = cfg.dae_train_config(seed.wrapping_add(SEED_OFFSET_DAE))?;
    let mut opt_dae = Optimizer::new(&tcfg_dae);
    let logs_dae = train_dae(
        &mut dae,
        &mut opt_dae,
        &train_bal,
        &tcfg_dae,
        1..=tcfg_dae.epochs,
        Some(&phase_b),
        &mut |log| progress("phase_b", log),
    )?;
    emit_curves(&logs_dae, &phase_b.join("reports"))?;
    let train_rec = reconstruct_dataset(&dae, &train_bal)?;
    let test_rec = reconstruct_dataset(&dae, &test_raw)?;
    let test_rec_a = maybe_apply(&test_rec, &stats_a)?;
    let (pred_b, cm_b, report_b) = evaluate_to_report(&model_a, &test_rec_a, eval_batch)?;
    write_report_files(&phase_b.join("reports"), &pred_b, &cm_b, &report_b)?;

    // (4) Phase C: fresh classifier on the reconstructed dataset.
    let phase_c = out_root.join("phase_c");
    let train_c_src = if cfg.get_bool("eval", "hybrid_union")? {
        let mut samples: Vec<Sample> = train_bal.samples().to_vec();
        for s in train_rec.samples() {
            samples.push(Sample {
                id: format!("{}#rec", s.id),
                image: s.image.clone(),
                label: s.label,
            });
        }
        Dataset::new(samples, train_rec.provenance())?
    } else {
        train_rec.clone()
    };
    let (train_c, stats_c) = maybe_normalize(&train_c_src, normalize)?;
    let test_c_raw = if cfg.get_bool("eval", "phase_c_on_original")? {
        test_raw.clone()
    } else {
        test_rec.clone()
    };
    let test_c = maybe_apply(&test_c_raw, &stats_c)?;
    let mut model_c: ModelGraph<f32> = build_resnet(&rcfg, seed.wrapping_add(SEED_OFFSET_PHASE_C))?;
    attach_norm(&mut model_c, &stats_c);
    let tcfg_c = cfg.train_config(seed.wrapping_add(SEED_OFFSET_PHASE_C))?;
    let mut opt_c = Optimizer::new(&tcfg_c);
    let logs_c = train_classifier(
        &mut model_c,
        &mut opt_c,
        &train_c,
        &test_c,
        &tcfg_c,
        1..=tcfg_c.epochs,
        Some(&phase_c),
        &mut |log| progress("phase_c", log),
    )?;
    emit_curves(&logs_c, &phase_c.join("reports"))?;
    let (pred_c, cm_c, report_c) = evaluate_to_report(&model_c, &test_c, eval_batch)?;
    write_report_files(&phase_c.join("reports"), &pred_c, &cm_c, &report_c)?;

    // gallery: phase-C predictions over the displayable [0,1] test images
    let gallery_n = cfg.get_usize("eval", "gallery_n")?.min(test_c_raw.len());
    prediction_gallery(
        &test_c_raw,
        &pred_c.predicted,
        gallery_n,
        seed,
        &phase_c.join("reports").join("gallery.svg"),
    )?;

    // top-level comparison
    let reports_dir = out_root.join("reports");
    std::fs::create_dir_all(&reports_dir)
        .map_err(|e| Error::io(format!("creating {}", reports_dir.display()), e))?;
    std::fs::write(
        reports_dir.join("comparison.txt"),
        comparison_table(&report_a, &report_b, &report_c),
    )
    .map_err(|e| Error::io("writing comparison.txt", e))?;

    Ok(HybridOutcome {
        report_a,
        report_b,
        report_c,
        train_size: train_bal.len(),
        test_size: test_raw.len(),
        reconstructed_train_size: train_rec.len(),
        reconstructed_test_size: test_rec.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn desk_config() -> RunConfig {
        RunConfig::resolve(
            None,
            &[
                "run.seed=5".to_string(),
                "data.n_per_class=6".to_string(),
                "data.image_size=16".to_string(),
                "model.base_width=4".to_string(),
                "dae.channels=6,3".to_string(),
                "dae.epochs=2".to_string(),
                "train.epochs=2".to_string(),
                "train.batch_size=8".to_string(),
                "eval.gallery_n=4".to_string(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn hybrid_emits_the_full_tree_and_preserves_cardinality() {
        let cfg = desk_config();
        let raw = synth_generate(6, (16, 16), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let outcome = run_hybrid(&raw, &cfg, &out, &mut |_, _| {}).unwrap();
        assert_eq!(outcome.reconstructed_train_size, outcome.train_size);
        assert_eq!(outcome.reconstructed_test_size, outcome.test_size);
        for p in [
            "config.txt",
            "phase_a/logs/epochs.csv",
            "phase_a/checkpoints/final/meta.txt",
            "phase_a/reports/report.txt",
            "phase_a/reports/report.csv",
            "phase_a/reports/predictions.csv",
            "phase_a/reports/curves.svg",
            "phase_b/logs/epochs.csv",
            "phase_b/reports/report.txt",
            "phase_b/reports/curves.svg",
            "phase_c/reports/report.txt",
            "phase_c/reports/gallery.svg",
            "reports/comparison.txt",
        ] {
            assert!(out.join(p).exists(), "missing {p}");
        }
    }

    #[test]
    fn phase_c_model_is_freshly_initialized_via_seed_offset() {
        let cfg = desk_config();
        let dims = (3, 16, 16);
        let rcfg = cfg.resnet_config(dims).unwrap();
        let a: ModelGraph<f32> = build_resnet(&rcfg, 5).unwrap();
        let c: ModelGraph<f32> = build_resnet(&rcfg, 5 + SEED_OFFSET_PHASE_C).unwrap();
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn hybrid_tree_is_byte_identical_across_same_seed_runs() {
        let cfg = desk_config();
        let raw = synth_generate(6, (16, 16), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        run_hybrid(&raw, &cfg, &out1, &mut |_, _| {}).unwrap();
        run_hybrid(&raw, &cfg, &out2, &mut |_, _| {}).unwrap();
        assert_eq!(
            crate::util::hash_dir_tree(&out1).unwrap(),
            crate::util::hash_dir_tree(&out2).unwrap()
        );
    }
}
