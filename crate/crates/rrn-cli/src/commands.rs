//! Command implementations: thin orchestration over the library.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use rrn_core::eval::{fmt_g9, run_preset};
use rrn_core::train::{fold_splits, train_cv};
use rrn_core::{
    generate_augmented, generate_synthetic, make_folds, pairwise_features, preset_split,
    subject_d1, Checkpoint, ExperimentConfig, RrnError,
};

use crate::{checkpoint_sets, default_rng, load_dataset, synth_template};

type Result<T> = std::result::Result<T, RrnError>;

pub fn gen_synth(count: usize, out: &Path, seed: u64, jitter: f64) -> Result<()> {
    let template = synth_template(jitter);
    let mut rng = default_rng(seed);
    let dataset = generate_synthetic(&template, count, &mut rng)?;
    dataset.save(out)?;
    println!("wrote {} synthetic subjects to {}", dataset.len(), out.display());
    Ok(())
}

pub fn augment_dataset(data: &Path, count: usize, out: &Path, seed: u64, noise: f64) -> Result<()> {
    let dataset = load_dataset(data)?;
    let mut rng = default_rng(seed);
    let grown = generate_augmented(&dataset, count, noise, &mut rng)?;
    grown.save(out)?;
    println!(
        "wrote {} subjects ({} augmented) to {}",
        grown.len(),
        count,
        out.display()
    );
    Ok(())
}

pub fn features(data: &Path, subject: &str, preset: &str, out: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(data)?;
    let entry = dataset.get(subject).ok_or_else(|| {
        RrnError::Dataset(format!("unknown subject '{subject}' in {}", data.display()))
    })?;
    let (inputs, _) = preset_split(preset)?;
    let d1 = subject_d1(&entry.set, &inputs)?;

    // Lexicographic pair order by landmark name.
    let mut pairs: Vec<(String, String)> = Vec::new();
    for a in &inputs {
        for b in &inputs {
            if a != b {
                pairs.push((a.to_string(), b.to_string()));
            }
        }
    }
    pairs.sort();

    let mut csv = String::from("subject,a,b,");
    csv.push_str(&(1..=19).map(|i| format!("f{i}")).collect::<Vec<_>>().join(","));
    csv.push('\n');
    for (a, b) in pairs {
        let f = pairwise_features(&entry.set, a.parse()?, b.parse()?, d1)?;
        let vals: Vec<String> = f.as_slice().iter().map(|v| fmt_g9(*v)).collect();
        csv.push_str(&format!("{subject},{a},{b},{}\n", vals.join(",")));
    }
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn train(config: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let cv = train_cv(config, &dataset)?;
    let mut log_lines = String::new();
    for result in &cv.folds {
        for line in &result.log {
            log_lines.push_str(&serde_json::to_string(line)?);
            log_lines.push('\n');
        }
        result
            .checkpoint
            .save(&out.join(format!("fold_{}.ckpt.json", result.checkpoint.fold)))?;
    }
    std::fs::write(out.join("log.jsonl"), log_lines)?;
    println!(
        "trained {} folds of '{}' into {}",
        cv.folds.len(),
        config.name,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord {
    id: String,
    predictions: BTreeMap<String, PredictionEntry>,
}

#[derive(Serialize)]
struct PredictionEntry {
    px: [f64; 3],
    mm: [f64; 3],
}

pub fn predict(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(data)?;
    let sets = checkpoint_sets(&ckpt, &dataset)?;

    let mut records = Vec::with_capacity(sets.len());
    for set in sets {
        let pred = ckpt.model.forward(set)?;
        let mut predictions = BTreeMap::new();
        for (k, name) in ckpt.model.config.target_names.iter().enumerate() {
            let px = pred.terminal[k];
            let mm = [
                px[0] * set.spacing_mm[0],
                px[1] * set.spacing_mm[1],
                px[2] * set.spacing_mm[2],
            ];
            predictions.insert(name.to_string(), PredictionEntry { px, mm });
        }
        records.push(PredictionRecord {
            id: set.subject_id.clone(),
            predictions,
        });
    }
    let text = serde_json::to_string_pretty(&records)?;
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn evaluate_cmd(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let sets: Vec<_> = dataset.subjects.iter().map(|s| &s.set).collect();
    let (stats, errors, skipped) = rrn_core::evaluate(&ckpt.model, &sets, None)?;

    let mut metrics = String::from("preset,fold,landmark,mean_mm,std_mm,rmse_mm,n_subjects\n");
    for s in &stats {
        metrics.push_str(&format!(
            "{},-,{},{},{},{},{}\n",
            ckpt.experiment,
            s.landmark,
            fmt_g9(s.mean_mm),
            fmt_g9(s.std_mm),
            fmt_g9(s.rmse_mm),
            s.n_subjects
        ));
    }
    std::fs::write(out.join("metrics.csv"), metrics)?;

    let mut per_subject = String::from("preset,fold,subject,landmark,error_mm\n");
    for e in &errors {
        per_subject.push_str(&format!(
            "{},-,{},{},{}\n",
            ckpt.experiment,
            e.subject_id,
            e.landmark,
            fmt_g9(e.error_mm)
        ));
    }
    std::fs::write(out.join("errors.csv"), per_subject)?;

    if skipped > 0 {
        eprintln!("warning: skipped {skipped} subjects with missing landmarks");
    }
    for s in &stats {
        println!(
            "{}: mean {:.3} mm, rmse {:.3} mm (n = {})",
            s.landmark, s.mean_mm, s.rmse_mm, s.n_subjects
        );
    }
    Ok(())
}

pub fn compare_dropout_cmd(config: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let plan = make_folds(&dataset, config.folds, config.seed)?;
    let splits = fold_splits(&dataset, &plan, config.val_fraction, config.seed)?;
    let split = &splits[0];
    let index: BTreeMap<&str, &rrn_core::LandmarkSet> = dataset
        .subjects
        .iter()
        .map(|s| (s.set.subject_id.as_str(), &s.set))
        .collect();
    let train: Vec<_> = split.train.iter().map(|id| index[id.as_str()]).collect();
    let val: Vec<_> = split.val.iter().map(|id| index[id.as_str()]).collect();

    let cmp = rrn_core::compare_dropout(config, &train, &val)?;
    std::fs::write(out.join("dropout_report.csv"), cmp.to_csv())?;
    for row in &cmp.rows {
        println!(
            "{:<12} epochs-to-threshold {:>4}  best val {:.6}",
            row.regime, row.epochs_to_threshold, row.best_val_loss
        );
    }
    Ok(())
}

pub fn run_preset_cmd(config: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data)?;
    let output = run_preset(config, &dataset, out)?;
    for s in &output.report.pooled {
        println!(
            "{}: mean {:.3} mm, rmse {:.3} mm (n = {})",
            s.landmark, s.mean_mm, s.rmse_mm, s.n_subjects
        );
    }
    println!(
        "artifacts written to {} ({:.1}s)",
        out.display(),
        output.report.wall_clock_secs
    );
    Ok(())
}
