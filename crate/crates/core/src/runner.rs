//! Orchestration of the experiment pipeline: data generation, training,
//! evaluation, hyperparameter sweeps, and sequential compatibility chains.
//! The CLI and the C API are both thin wrappers over these functions.

use crate::config::ExperimentConfig;
use crate::encoder::{
    embed_matrix, localize_labels, train_bcl_with, train_old_with, BclMethod, EncoderParams,
    EpochStats,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::MetricsReport;
use crate::pca::Pca2;
use crate::prototypes::{compute_prototypes, EmbeddingMatrix, SpaceTag};
use crate::synth::{self, DatasetSplit, LabeledData};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Row counts written by `gen-data`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GenSummary {
    pub class_count: usize,
    pub old_classes: usize,
    pub new_classes: usize,
    pub old_train_rows: usize,
    pub new_train_rows: usize,
    pub query_rows: usize,
    pub gallery_rows: usize,
}

/// Generate the dataset and write the container files into the output dir.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<GenSummary> {
    let split = synth::generate(&cfg.data)?;
    split.save_dir(&cfg.output_dir)?;
    Ok(GenSummary {
        class_count: split.class_count,
        old_classes: split.old_classes.len(),
        new_classes: split.new_classes.len(),
        old_train_rows: split.old_train.len(),
        new_train_rows: split.new_train.len(),
        query_rows: split.query.len(),
        gallery_rows: split.gallery.len(),
    })
}

fn load_split(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<DatasetSplit> {
    let dir = data_dir.unwrap_or(&cfg.output_dir);
    DatasetSplit::load_dir(dir).map_err(|e| match e {
        Error::Io(io) => Error::config(format!(
            "dataset not found in {} (run gen-data first): {io}",
            dir.display()
        )),
        other => other,
    })
}

fn write_log(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for line in lines {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

fn stats_line(s: &EpochStats) -> String {
    format!(
        "epoch={} ce={:.6} bc={:.6} total={:.6} perturb_norm={:.6}",
        s.epoch, s.mean_ce, s.mean_bc, s.mean_total, s.perturb_norm_mean
    )
}

/// Train the old model (cross-entropy only, old split). Returns the
/// checkpoint path.
pub fn train_old_cmd(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let split = load_split(cfg, None)?;
    let arch = cfg.old_model.arch(cfg.data.input_dim);
    let mut lines = Vec::new();
    let params = train_old_with(
        &split.old_train.inputs,
        &split.old_train.labels,
        &arch,
        &cfg.old_train,
        |s| lines.push(stats_line(s)),
    )?;
    let path = cfg.output_dir.join("old.bclg");
    params.save(&path)?;
    write_log(&cfg.output_dir.join("old_train.log"), &lines)?;
    Ok(path)
}

/// Train the new model independently (cross-entropy only, new split), the
/// upper-bound reference that needs no old checkpoint.
pub fn train_new_independent_cmd(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let split = load_split(cfg, None)?;
    let arch = cfg.new_model.arch(cfg.data.input_dim);
    let mut lines = Vec::new();
    let params = train_old_with(
        &split.new_train.inputs,
        &split.new_train.labels,
        &arch,
        &cfg.new_train,
        |s| lines.push(stats_line(s)),
    )?;
    let path = cfg.output_dir.join("new-independent.bclg");
    params.save(&path)?;
    write_log(&cfg.output_dir.join("new-independent_train.log"), &lines)?;
    Ok(path)
}

/// Build the method value named by `kind` from the config's method section.
pub fn method_from_config(cfg: &ExperimentConfig, kind: &str) -> Result<BclMethod> {
    BclMethod::from_name(kind, &cfg.method.ndpp, &cfg.method.odpp)
}

/// Train a backward-compatible new model with the given method. Returns the
/// checkpoint path.
pub fn train_new_cmd(cfg: &ExperimentConfig, method: &BclMethod) -> Result<PathBuf> {
    let split = load_split(cfg, None)?;
    let old_path = cfg.output_dir.join("old.bclg");
    if !old_path.exists() {
        return Err(Error::config(format!(
            "old checkpoint {} not found (run train --model old first)",
            old_path.display()
        )));
    }
    let old_model = EncoderParams::load(&old_path)?;
    let arch = cfg.new_model.arch(cfg.data.input_dim);

    let (local_labels, class_ids) = localize_labels(&split.new_train.labels);
    let mut lines = Vec::new();
    let (params, _) = train_bcl_with(
        &split.new_train.inputs,
        &local_labels,
        &class_ids,
        &old_model,
        method,
        &cfg.method.loss,
        &arch,
        &cfg.new_train,
        |s| lines.push(stats_line(s)),
    )?;
    let name = method.name();
    let path = cfg.output_dir.join(format!("{name}.bclg"));
    params.save(&path)?;
    write_log(&cfg.output_dir.join(format!("{name}_train.log")), &lines)?;
    Ok(path)
}

/// Artifacts written by `eval`.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
    pub pca_csv: Option<PathBuf>,
}

/// Evaluate an old/new checkpoint pair on the dataset: self-tests, the
/// cross-test, the compatibility verdict, surrogate scores, and a 2-D PCA
/// dump of new-model gallery embeddings plus prototypes.
pub fn eval_cmd(
    cfg: &ExperimentConfig,
    old_ckpt: &Path,
    new_ckpt: &Path,
    data_dir: Option<&Path>,
) -> Result<EvalOutput> {
    let split = load_split(cfg, data_dir)?;
    let old_model = EncoderParams::load(old_ckpt)?;
    let new_model = EncoderParams::load(new_ckpt)?;
    let report = MetricsReport::evaluate(&old_model, &new_model, &split)?;

    let stem = new_ckpt
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("new");
    fs::create_dir_all(&cfg.output_dir)?;
    let report_json = cfg.output_dir.join(format!("report_{stem}.json"));
    let report_txt = cfg.output_dir.join(format!("report_{stem}.txt"));
    fs::write(
        &report_json,
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    fs::write(
        &report_txt,
        format!("{}\n{}", report.to_table(stem), report.to_kv_text()),
    )?;

    let pca_csv = if cfg.eval.pca_dump {
        let path = cfg.output_dir.join(format!("pca_{stem}.csv"));
        write_pca_dump(&path, &new_model, &split.gallery)?;
        Some(path)
    } else {
        None
    };

    Ok(EvalOutput {
        report,
        report_json,
        report_txt,
        pca_csv,
    })
}

/// CSV with one row per gallery embedding and one per class prototype, both
/// projected onto the top-2 principal directions of the embeddings.
fn write_pca_dump(path: &Path, model: &EncoderParams, gallery: &LabeledData) -> Result<()> {
    let embeddings = embed_matrix(model, &gallery.inputs);
    let pca = Pca2::fit(&embeddings, crate::pca::DEFAULT_MAX_ITERS)?;

    let (local_labels, class_ids) = localize_labels(&gallery.labels);
    let protos = compute_prototypes(
        &EmbeddingMatrix::new(embeddings.clone(), local_labels, class_ids.len())?,
        SpaceTag::New,
    )?;

    let mut csv = String::from("kind,class,x,y\n");
    for (row, label) in embeddings.rows_iter().zip(&gallery.labels) {
        let (x, y) = pca.project(row);
        let _ = writeln!(csv, "embedding,{label},{x:.6},{y:.6}");
    }
    for (local, &global) in class_ids.iter().enumerate() {
        let (x, y) = pca.project(protos.row(local));
        let _ = writeln!(csv, "prototype,{global},{x:.6},{y:.6}");
    }
    fs::write(path, csv)?;
    Ok(())
}

/// Parameters a sweep may vary.
pub const SWEEP_PARAMS: [&str; 8] = [
    "alpha1",
    "alpha2",
    "K",
    "theta_old",
    "theta_new",
    "gamma",
    "lambda",
    "tau",
];

fn apply_sweep_value(cfg: &mut ExperimentConfig, param: &str, value: f64) -> Result<()> {
    let kind = cfg.method.kind.clone();
    let need_ndpp = || -> Result<()> {
        if kind.starts_with("ndpp") {
            Ok(())
        } else {
            Err(Error::config(format!(
                "parameter '{param}' applies to ndpp methods, but method.kind is '{kind}'"
            )))
        }
    };
    let need_odpp = || -> Result<()> {
        if kind.starts_with("odpp") {
            Ok(())
        } else {
            Err(Error::config(format!(
                "parameter '{param}' applies to odpp methods, but method.kind is '{kind}'"
            )))
        }
    };
    match param {
        "alpha1" => {
            need_ndpp()?;
            cfg.method.ndpp.alpha1 = value;
        }
        "alpha2" => {
            need_ndpp()?;
            cfg.method.ndpp.alpha2 = value;
        }
        "K" => {
            need_ndpp()?;
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::config("K values must be positive integers"));
            }
            cfg.method.ndpp.k = value as usize;
        }
        "theta_old" => {
            need_odpp()?;
            cfg.method.odpp.theta_old = value;
        }
        "theta_new" => {
            need_odpp()?;
            cfg.method.odpp.theta_new = value;
        }
        "gamma" => {
            need_odpp()?;
            cfg.method.odpp.gamma = value;
        }
        "lambda" => cfg.method.loss.lambda = value,
        "tau" => cfg.method.loss.tau = value,
        other => {
            return Err(Error::config(format!(
                "unknown sweep parameter '{other}' (expected one of {SWEEP_PARAMS:?})"
            )))
        }
    }
    cfg.validate()
}

/// One full train+eval per value at a fixed seed; returns the CSV path.
pub fn sweep_cmd(cfg: &ExperimentConfig, param: &str, values: &[f64]) -> Result<PathBuf> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(Error::config(format!(
            "unknown sweep parameter '{param}' (expected one of {SWEEP_PARAMS:?})"
        )));
    }
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    // Data and the old model are method-independent: build them once.
    gen_data(cfg)?;
    train_old_cmd(cfg)?;

    let mut csv = String::from(
        "param,value,map_self_old,map_self_new,map_cross,recall1_self_new,recall1_cross,compatible,p_up,p_comp,p_1\n",
    );
    for &value in values {
        let mut run_cfg = cfg.clone();
        apply_sweep_value(&mut run_cfg, param, value)?;
        let method = method_from_config(&run_cfg, &run_cfg.method.kind.clone())?;
        let ckpt = train_new_cmd(&run_cfg, &method)?;
        let out = eval_cmd(&run_cfg, &cfg.output_dir.join("old.bclg"), &ckpt, None)?;
        let r = &out.report;
        let _ = writeln!(
            csv,
            "{param},{value},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
            r.map_self_old,
            r.map_self_new,
            r.map_cross,
            r.recall1_self_new,
            r.recall1_cross,
            r.compatible,
            r.p_up,
            r.p_comp,
            r.p_1
        );
    }
    let path = cfg.output_dir.join(format!("sweep_{param}.csv"));
    fs::write(&path, csv)?;
    Ok(path)
}

/// Sequential chain: the first model trains independently on the smallest
/// class fraction; every later model trains to stay compatible with its
/// predecessor. Emits one report per consecutive pair.
pub fn sequential_cmd(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<MetricsReport>> {
    let splits = synth::sequential_splits(&cfg.data, fractions)?;
    fs::create_dir_all(&cfg.output_dir)?;

    // Step 0: independent training on the first fraction.
    let arch0 = cfg.old_model.arch(cfg.data.input_dim);
    let mut cfg0 = cfg.old_train.clone();
    cfg0.seed = cfg.sequential_seed(0);
    let mut lines = Vec::new();
    let first = train_old_with(
        &splits[0].new_train.inputs,
        &splits[0].new_train.labels,
        &arch0,
        &cfg0,
        |s| lines.push(stats_line(s)),
    )?;
    first.save(cfg.output_dir.join("seq_step0.bclg"))?;
    write_log(&cfg.output_dir.join("seq_step0_train.log"), &lines)?;

    let method = method_from_config(cfg, &cfg.method.kind)?;
    let mut previous = first;
    let mut reports = Vec::new();
    for (i, split) in splits.iter().enumerate().skip(1) {
        let mut cfg_i = cfg.new_train.clone();
        cfg_i.seed = cfg.sequential_seed(i);
        let arch = cfg.new_model.arch(cfg.data.input_dim);
        let (local_labels, class_ids) = localize_labels(&split.new_train.labels);
        let mut lines = Vec::new();
        let (current, _) = train_bcl_with(
            &split.new_train.inputs,
            &local_labels,
            &class_ids,
            &previous,
            &method,
            &cfg.method.loss,
            &arch,
            &cfg_i,
            |s| lines.push(stats_line(s)),
        )?;
        current.save(cfg.output_dir.join(format!("seq_step{i}.bclg")))?;
        write_log(&cfg.output_dir.join(format!("seq_step{i}_train.log")), &lines)?;

        let report = MetricsReport::evaluate(&previous, &current, split)?;
        fs::write(
            cfg.output_dir.join(format!("seq_report_step{i}.json")),
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        )?;
        fs::write(
            cfg.output_dir.join(format!("seq_report_step{i}.txt")),
            format!(
                "{}\n{}",
                report.to_table(&format!("step{i}")),
                report.to_kv_text()
            ),
        )?;
        reports.push(report);
        previous = current;
    }
    Ok(reports)
}

/// Convenience wrapper used by tests and the C API: run the whole single-step
/// pipeline for one method and return the report.
pub fn run_pipeline(cfg: &ExperimentConfig, kind: &str) -> Result<MetricsReport> {
    gen_data(cfg)?;
    let old = train_old_cmd(cfg)?;
    let method = method_from_config(cfg, kind)?;
    let new = train_new_cmd(cfg, &method)?;
    Ok(eval_cmd(cfg, &old, &new, None)?.report)
}

/// Probe helper shared by tests: embed a labeled set with a model.
pub fn embed_labeled(model: &EncoderParams, data: &LabeledData) -> Matrix {
    embed_matrix(model, &data.inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.output_dir = dir.to_path_buf();
        cfg.data.class_count = 6;
        cfg.data.samples_per_class = 30;
        cfg.data.input_dim = 8;
        cfg.data.overlap_pairs = 1;
        cfg.data.old_fraction = 0.5;
        cfg.old_model.hidden = vec![16];
        cfg.old_model.embed_dim = 8;
        cfg.new_model.hidden = vec![24];
        cfg.new_model.embed_dim = 8;
        cfg.old_train.epochs = 6;
        cfg.old_train.batch_size = 32;
        cfg.new_train.epochs = 6;
        cfg.new_train.batch_size = 32;
        cfg.method.ndpp.k = 3;
        cfg.method.odpp.inner_epochs = 5;
        cfg.method.odpp.batch_size = 128;
        // Re-resolve stage seeds after editing (the fields are already set,
        // this is only about keeping the fixture obvious).
        cfg
    }

    #[test]
    fn gen_data_counts_match_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let summary = gen_data(&cfg).unwrap();
        assert_eq!(summary.class_count, 6);
        assert_eq!(summary.old_classes, 3);
        assert_eq!(summary.new_classes, 6);
        assert_eq!(summary.query_rows, 6 * 6); // 20% of 30, rounded
        assert_eq!(summary.gallery_rows, 6 * 24);
        assert_eq!(summary.new_train_rows, 6 * 24);
        assert!(dir.path().join("query.bclg").exists());
    }

    #[test]
    fn gen_data_reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        gen_data(&cfg).unwrap();
        let first = fs::read(dir.path().join("gallery.bclg")).unwrap();
        gen_data(&cfg).unwrap();
        let second = fs::read(dir.path().join("gallery.bclg")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn train_new_without_old_checkpoint_fails() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        gen_data(&cfg).unwrap();
        let method = method_from_config(&cfg, "baseline").unwrap();
        assert!(matches!(
            train_new_cmd(&cfg, &method),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pipeline_produces_reports_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let report = run_pipeline(&cfg, "baseline").unwrap();
        assert!(report.map_self_new > 0.0);
        assert!(dir.path().join("report_baseline.json").exists());
        assert!(dir.path().join("report_baseline.txt").exists());
        assert!(dir.path().join("pca_baseline.csv").exists());
        assert!(dir.path().join("old_train.log").exists());
        assert!(dir.path().join("baseline_train.log").exists());
        let pca = fs::read_to_string(dir.path().join("pca_baseline.csv")).unwrap();
        let lines: Vec<&str> = pca.lines().collect();
        assert_eq!(lines[0], "kind,class,x,y");
        // One row per gallery embedding plus one per class.
        assert_eq!(lines.len(), 1 + 6 * 24 + 6);
    }

    #[test]
    fn eval_same_model_makes_cross_equal_self() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        gen_data(&cfg).unwrap();
        let old = train_old_cmd(&cfg).unwrap();
        let out = eval_cmd(&cfg, &old, &old, None).unwrap();
        assert_eq!(out.report.map_self_old, out.report.map_cross);
        assert_eq!(out.report.map_self_old, out.report.map_self_new);
        assert!(!out.report.compatible);
    }

    #[test]
    fn sweep_single_value_emits_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.method.kind = "ndpp".into();
        let path = sweep_cmd(&cfg, "alpha1", &[0.02]).unwrap();
        let csv = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("alpha1,0.02,"));
    }

    #[test]
    fn sweep_rejects_unknown_and_mismatched_params() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        assert!(sweep_cmd(&cfg, "bogus", &[1.0]).is_err());
        cfg.method.kind = "odpp".into();
        // alpha1 belongs to ndpp.
        assert!(sweep_cmd(&cfg, "alpha1", &[0.1]).is_err());
    }

    #[test]
    fn sequential_two_steps_gives_one_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.method.kind = "baseline".into();
        let reports = sequential_cmd(&cfg, &[0.5, 1.0]).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(dir.path().join("seq_report_step1.json").exists());
    }

    #[test]
    fn sequential_single_fraction_trains_one_model_no_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let reports = sequential_cmd(&cfg, &[1.0]).unwrap();
        assert!(reports.is_empty());
        assert!(dir.path().join("seq_step0.bclg").exists());
        assert!(!dir.path().join("seq_report_step1.json").exists());
    }
}
