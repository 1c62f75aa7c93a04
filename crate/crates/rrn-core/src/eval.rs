//! RMSE evaluation, experiment drivers and the dropout convergence
//! comparison.
//!
//! Errors are Euclidean distances in millimetres between terminal
//! predictions and ground truth after per-axis voxel-spacing conversion.
//! `metrics.csv` carries per-fold and pooled aggregates; `errors.csv`
//! carries every per-subject error so the aggregates can be recomputed
//! externally.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Result, RrnError};
use crate::landmarks::{LandmarkName, LandmarkSet};
use crate::model::{DropoutMode, RrnModel};
use crate::train::{train_cv, train_single, Checkpoint, EpochLog, ExperimentConfig, TrainResult};

/// Formats a float with 9 significant digits.
pub fn fmt_g9(x: f64) -> String {
    format!("{x:.8e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkStats {
    pub landmark: LandmarkName,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub rmse_mm: f64,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectError {
    pub fold: Option<usize>,
    pub subject_id: String,
    pub landmark: LandmarkName,
    pub error_mm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub preset: String,
    /// Per-fold aggregates, in fold order.
    pub per_fold: Vec<(usize, Vec<LandmarkStats>)>,
    /// Aggregates pooled over every tested subject.
    pub pooled: Vec<LandmarkStats>,
    pub subject_errors: Vec<SubjectError>,
    /// Subjects skipped because a required landmark was absent.
    pub skipped: usize,
    pub wall_clock_secs: f64,
}

fn stats_for(
    errors: &[SubjectError],
    targets: &[LandmarkName],
) -> Vec<LandmarkStats> {
    targets
        .iter()
        .map(|&landmark| {
            let vals: Vec<f64> = errors
                .iter()
                .filter(|e| e.landmark == landmark)
                .map(|e| e.error_mm)
                .collect();
            let n = vals.len();
            if n == 0 {
                return LandmarkStats {
                    landmark,
                    mean_mm: f64::NAN,
                    std_mm: f64::NAN,
                    rmse_mm: f64::NAN,
                    n_subjects: 0,
                };
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let mse = vals.iter().map(|v| v * v).sum::<f64>() / n as f64;
            LandmarkStats {
                landmark,
                mean_mm: mean,
                std_mm: var.sqrt(),
                rmse_mm: mse.sqrt(),
                n_subjects: n,
            }
        })
        .collect()
}

/// Evaluates a trained model on test subjects. Subjects missing any input
/// or target landmark are skipped and counted.
pub fn evaluate(
    model: &RrnModel,
    subjects: &[&LandmarkSet],
    fold: Option<usize>,
) -> Result<(Vec<LandmarkStats>, Vec<SubjectError>, usize)> {
    let mut errors = Vec::new();
    let mut skipped = 0usize;
    let needed: Vec<LandmarkName> = model
        .config
        .input_names
        .iter()
        .chain(&model.config.target_names)
        .copied()
        .collect();
    for set in subjects {
        if needed.iter().any(|n| !set.coords.contains_key(n)) {
            skipped += 1;
            continue;
        }
        let pred = model.forward(set)?;
        for (k, &name) in model.config.target_names.iter().enumerate() {
            let truth = set.get(name)?;
            let p = pred.terminal[k];
            let mut sq = 0.0;
            for axis in 0..3 {
                let d = (p[axis] - truth[axis]) * set.spacing_mm[axis];
                sq += d * d;
            }
            errors.push(SubjectError {
                fold,
                subject_id: set.subject_id.clone(),
                landmark: name,
                error_mm: sq.sqrt(),
            });
        }
    }
    let stats = stats_for(&errors, &model.config.target_names);
    Ok((stats, errors, skipped))
}

fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::from("preset,fold,landmark,mean_mm,std_mm,rmse_mm,n_subjects\n");
    let mut push_rows = |fold: &str, stats: &[LandmarkStats]| {
        for s in stats {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                report.preset,
                fold,
                s.landmark,
                fmt_g9(s.mean_mm),
                fmt_g9(s.std_mm),
                fmt_g9(s.rmse_mm),
                s.n_subjects
            ));
        }
    };
    for (fold, stats) in &report.per_fold {
        push_rows(&fold.to_string(), stats);
    }
    push_rows("pooled", &report.pooled);
    std::fs::write(path, out)?;
    Ok(())
}

fn write_errors_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::from("preset,fold,subject,landmark,error_mm\n");
    for e in &report.subject_errors {
        let fold = e.fold.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            report.preset,
            fold,
            e.subject_id,
            e.landmark,
            fmt_g9(e.error_mm)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_log_jsonl(path: &Path, logs: &[&EpochLog]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for l in logs {
        writeln!(file, "{}", serde_json::to_string(l)?)?;
    }
    Ok(())
}

/// Artifacts produced by [`run_preset`].
pub struct RunOutput {
    pub report: MetricsReport,
    pub checkpoints: Vec<Checkpoint>,
}

/// Trains the configured experiment with cross-validation, evaluates every
/// fold on its held-out subjects and writes `metrics.csv`, `errors.csv`,
/// `log.jsonl` and per-fold checkpoints into `out_dir`.
pub fn run_preset(
    config: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<RunOutput> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let cv = train_cv(config, dataset)?;

    let mut report = MetricsReport {
        preset: config.name.clone(),
        ..MetricsReport::default()
    };
    let mut checkpoints = Vec::with_capacity(cv.folds.len());
    for (split, result) in cv.splits.iter().zip(cv.folds.into_iter()) {
        let test: Vec<&LandmarkSet> = split
            .test
            .iter()
            .map(|id| &dataset.get(id).expect("test subject exists").set)
            .collect();
        let (stats, errors, skipped) =
            evaluate(&result.checkpoint.model, &test, Some(split.fold))?;
        report.per_fold.push((split.fold, stats));
        report.subject_errors.extend(errors);
        report.skipped += skipped;
        checkpoints.push(result.checkpoint);

        let logs: Vec<&EpochLog> = result.log.iter().collect();
        // Appending per fold keeps one jsonl file in fold order.
        if split.fold == 0 {
            write_log_jsonl(&out_dir.join("log.jsonl"), &logs)?;
        } else {
            let mut file = std::fs::OpenOptions::new()
                .append(true)
                .open(out_dir.join("log.jsonl"))?;
            for l in logs {
                writeln!(file, "{}", serde_json::to_string(l)?)?;
            }
        }
    }
    report.pooled = stats_for(&report.subject_errors, &config.rrn.target_names);
    report.wall_clock_secs = started.elapsed().as_secs_f64();

    write_metrics_csv(&out_dir.join("metrics.csv"), &report)?;
    write_errors_csv(&out_dir.join("errors.csv"), &report)?;
    for ckpt in &checkpoints {
        ckpt.save(&out_dir.join(format!("fold_{}.ckpt.json", ckpt.fold)))?;
    }
    Ok(RunOutput {
        report,
        checkpoints,
    })
}

/// One row of the dropout convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeRow {
    pub regime: &'static str,
    pub epochs_to_threshold: usize,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct DropoutComparison {
    pub threshold: f64,
    pub rows: Vec<RegimeRow>,
}

impl DropoutComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "regime,epochs_to_threshold,best_val_loss,final_val_loss,final_train_loss,threshold\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.regime,
                r.epochs_to_threshold,
                fmt_g9(r.best_val_loss),
                fmt_g9(r.final_val_loss),
                fmt_g9(r.final_train_loss),
                fmt_g9(self.threshold)
            ));
        }
        out
    }
}

/// Trains the same configuration under the regular, variational and
/// targeted dropout regimes (identical seed and data) and reports how many
/// epochs each needs to cross a shared validation-loss threshold.
///
/// The threshold is 1.1x the best validation loss reached by the slowest
/// regime, so every regime crosses it by construction.
pub fn compare_dropout(
    base: &ExperimentConfig,
    train_subjects: &[&LandmarkSet],
    val_subjects: &[&LandmarkSet],
) -> Result<DropoutComparison> {
    if val_subjects.is_empty() {
        return Err(RrnError::Config(
            "dropout comparison needs validation subjects".into(),
        ));
    }
    let regimes: [(&'static str, DropoutMode); 3] = [
        ("regular", DropoutMode::Regular { p: crate::model::DEFAULT_DROPOUT_P }),
        (
            "variational",
            DropoutMode::Variational {
                init_log_alpha: crate::model::DEFAULT_INIT_LOG_ALPHA,
            },
        ),
        (
            "targeted",
            DropoutMode::Targeted {
                gamma: crate::model::DEFAULT_TARGETED_GAMMA,
                alpha: crate::model::DEFAULT_TARGETED_ALPHA,
            },
        ),
    ];

    let mut curves: Vec<(&'static str, TrainResult)> = Vec::with_capacity(3);
    for (name, dropout) in regimes {
        let mut cfg = base.clone();
        cfg.rrn.dropout = dropout;
        let result = train_single(&cfg, train_subjects, val_subjects, 0)?;
        curves.push((name, result));
    }

    let best = |r: &TrainResult| -> f64 {
        r.log
            .iter()
            .filter_map(|l| l.val_loss)
            .fold(f64::INFINITY, f64::min)
    };
    let slowest_best = curves
        .iter()
        .map(|(_, r)| best(r))
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = 1.1 * slowest_best;

    let rows = curves
        .iter()
        .map(|(name, r)| {
            let epochs_to_threshold = r
                .log
                .iter()
                .find(|l| l.val_loss.is_some_and(|v| v <= threshold))
                .map(|l| l.epoch)
                .expect("every regime crosses the shared threshold");
            RegimeRow {
                regime: name,
                epochs_to_threshold,
                best_val_loss: best(r),
                final_val_loss: r.log.last().and_then(|l| l.val_loss).unwrap_or(f64::NAN),
                final_train_loss: r.log.last().map(|l| l.train_loss).unwrap_or(f64::NAN),
            }
        })
        .collect();

    Ok(DropoutComparison { threshold, rows })
}
