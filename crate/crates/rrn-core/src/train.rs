//! Training loop, the five experiment presets and checkpointing.
//!
//! Training standardizes both the pairwise features and the target
//! coordinates with statistics fit on the training subjects of each fold
//! (never on validation or test data), so logged losses are in normalized
//! units. The `normalize` flag turns both transforms off for raw pixel-space
//! training.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, Dataset, FoldPlan};
use crate::error::{Result, RrnError};
use crate::features::AffineNormalizer;
use crate::landmarks::{LandmarkName, LandmarkSet};
use crate::model::{DropoutMode, RrnConfig, RrnModel, RuVariant};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::layers::Mode;
use crate::nn::tensor::Tensor;

pub const PRESET_NAMES: [&str; 5] = [
    "5-landmarks",
    "3-regular",
    "3-cross",
    "6-landmarks",
    "9-landmarks",
];

/// Input/target landmark split for one of the named experiment presets.
pub fn preset_split(name: &str) -> Result<(Vec<LandmarkName>, Vec<LandmarkName>)> {
    use LandmarkName::*;
    let (inputs, targets): (Vec<LandmarkName>, Vec<LandmarkName>) = match name {
        "5-landmarks" => (
            vec![Me, CdL, CdR, CorL, CorR],
            vec![Gn, Pg, B, Id, Ans, A, Pr, Pns, Na],
        ),
        "3-regular" => (
            vec![Me, CdL, CdR],
            vec![Gn, Pg, B, Id, CorL, CorR, Ans, A, Pr, Pns, Na],
        ),
        "3-cross" => (
            vec![Me, CdR, CorL],
            vec![Gn, Pg, B, Id, CdL, CorR, Ans, A, Pr, Pns, Na],
        ),
        "6-landmarks" => (
            vec![Me, CdL, CdR, CorL, CorR, Na],
            vec![Gn, Pg, B, Id, Ans, A, Pr, Pns],
        ),
        "9-landmarks" => (
            vec![Me, CdL, CdR, CorL, CorR, Gn, Pg, B, Id],
            vec![Ans, A, Pr, Pns, Na],
        ),
        other => {
            return Err(RrnError::Config(format!(
                "unknown preset '{other}'; valid presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok((inputs, targets))
}

/// Default epoch budget: the MLP unit with plain/regular dropout needs the
/// long schedule; dense units and the adaptive dropout variants converge on
/// the short one.
pub fn default_epochs(ru: RuVariant, dropout: DropoutMode) -> usize {
    match (ru, dropout) {
        (RuVariant::Mlp { .. }, DropoutMode::None | DropoutMode::Regular { .. }) => 100,
        _ => 20,
    }
}

/// Everything needed to run one experiment end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub rrn: RrnConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub folds: usize,
    /// Fraction of the training subjects held out for convergence
    /// reporting.
    pub val_fraction: f64,
    /// Standardize features and targets on per-fold training statistics.
    pub normalize: bool,
}

impl ExperimentConfig {
    pub fn preset(name: &str, ru: RuVariant, dropout: DropoutMode, seed: u64) -> Result<Self> {
        let (input_names, target_names) = preset_split(name)?;
        let rrn = RrnConfig {
            input_names,
            target_names,
            ru_variant: ru,
            relation_dim: crate::model::DEFAULT_RELATION_DIM,
            dropout,
            share_pairwise: false,
        };
        Ok(ExperimentConfig {
            name: name.to_string(),
            rrn,
            batch_size: 64,
            epochs: default_epochs(ru, dropout),
            adam: AdamConfig::default(),
            seed,
            folds: 4,
            val_fraction: 0.1,
            normalize: true,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub fold: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

/// Serializable ChaCha state so checkpoints capture the exact RNG position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned container with the model (layer parameters, batch-norm running
/// stats, normalizer constants), optimizer state and RNG state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub experiment: String,
    pub fold: usize,
    pub model: RrnModel,
    pub adam: Adam,
    pub rng: RngState,
    pub epochs_trained: usize,
    pub normalize: bool,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(RrnError::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn mix(base: u64, tag: u64) -> u64 {
    let mut x = base ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51afd7ed558ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ceb9fe1a85ec53);
    x ^ (x >> 33)
}

struct PreparedSubject {
    /// Normalized 19-vectors, one per ordered pair in canonical order.
    features: Vec<Vec<f64>>,
    /// Normalized stacked target coordinates, length 3m.
    targets: Vec<f64>,
}

fn prepare(
    model: &RrnModel,
    subjects: &[&LandmarkSet],
) -> Result<Vec<PreparedSubject>> {
    let m = model.config.m();
    let mut out = Vec::with_capacity(subjects.len());
    for set in subjects {
        let raw = model.subject_features(set)?;
        let features = raw
            .into_iter()
            .map(|f| {
                let mut row = f.to_vec();
                model.feature_norm.apply(&mut row);
                row
            })
            .collect();
        let mut targets = Vec::with_capacity(3 * m);
        for name in &model.config.target_names {
            targets.extend_from_slice(&set.get(*name)?);
        }
        model.target_norm.apply(&mut targets);
        out.push(PreparedSubject { features, targets });
    }
    Ok(out)
}

fn assemble_batch(
    prepared: &[PreparedSubject],
    indices: &[usize],
    n_pairs: usize,
    target_width: usize,
) -> (Vec<Tensor>, Tensor) {
    let batch = indices.len();
    let mut features = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let mut t = Tensor::zeros(&[batch, crate::features::FEATURE_DIM]);
        for (row, &idx) in indices.iter().enumerate() {
            t.row_mut(row).copy_from_slice(&prepared[idx].features[p]);
        }
        features.push(t);
    }
    let mut targets = Tensor::zeros(&[batch, target_width]);
    for (row, &idx) in indices.iter().enumerate() {
        targets.row_mut(row).copy_from_slice(&prepared[idx].targets);
    }
    (features, targets)
}

/// Branch-wise squared-error over a batch in normalized space; returns the
/// loss and per-branch gradients.
fn batch_loss_and_grads(
    branches: &[Tensor],
    targets: &Tensor,
    with_grads: bool,
) -> (f64, Vec<Tensor>) {
    let n = branches.len();
    let batch = targets.rows();
    let width = targets.cols();
    let m = width / 3;
    let denom = (batch * n * m) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(if with_grads { n } else { 0 });
    for b in branches {
        let mut g = Tensor::zeros(&b.shape);
        for r in 0..batch {
            let br = b.row(r);
            let tr = targets.row(r);
            for j in 0..width {
                let d = br[j] - tr[j];
                loss += d * d;
                if with_grads {
                    g.row_mut(r)[j] = 2.0 * d / denom;
                }
            }
        }
        if with_grads {
            grads.push(g);
        }
    }
    (loss / denom, grads)
}

/// Eval-mode branch loss over a subject collection, in normalized units.
fn eval_loss(model: &mut RrnModel, prepared: &[PreparedSubject]) -> Result<f64> {
    if prepared.is_empty() {
        return Ok(f64::NAN);
    }
    let n_pairs = model.ordered_pairs().len();
    let width = 3 * model.config.m();
    let indices: Vec<usize> = (0..prepared.len()).collect();
    let (features, targets) = assemble_batch(prepared, &indices, n_pairs, width);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let branches = model.forward_batch(&features, Mode::Eval, &mut rng)?;
    let (loss, _) = batch_loss_and_grads(&branches, &targets, false);
    Ok(loss)
}

/// Trains one model on explicit train/validation subject lists.
///
/// `fold` only labels the log lines and seeds the fold-specific RNG.
pub fn train_single(
    config: &ExperimentConfig,
    train_subjects: &[&LandmarkSet],
    val_subjects: &[&LandmarkSet],
    fold: usize,
) -> Result<TrainResult> {
    if train_subjects.is_empty() {
        return Err(RrnError::Config(format!(
            "fold {fold}: no training subjects"
        )));
    }
    let mut model = RrnModel::build(config.rrn.clone(), mix(config.seed, 0xb001 + fold as u64))?;

    if config.normalize {
        // Fit both normalizers on training subjects only.
        let mut feat_rows: Vec<Vec<f64>> = Vec::new();
        let mut target_rows: Vec<Vec<f64>> = Vec::new();
        for set in train_subjects {
            for f in model.subject_features(set)? {
                feat_rows.push(f.to_vec());
            }
            let mut t = Vec::with_capacity(3 * config.rrn.m());
            for name in &config.rrn.target_names {
                t.extend_from_slice(&set.get(*name)?);
            }
            target_rows.push(t);
        }
        model.feature_norm = AffineNormalizer::fit(&feat_rows)?;
        model.target_norm = AffineNormalizer::fit(&target_rows)?;
    }

    let prepared_train = prepare(&model, train_subjects)?;
    let prepared_val = prepare(&model, val_subjects)?;

    let n_pairs = model.ordered_pairs().len();
    let width = 3 * config.rrn.m();
    let kl_scale = match config.rrn.dropout {
        DropoutMode::Variational { .. } => 1.0 / train_subjects.len() as f64,
        _ => 0.0,
    };

    let mut adam = Adam::new(config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x73a1 + fold as u64));
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared_train.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let (features, targets) = assemble_batch(&prepared_train, chunk, n_pairs, width);
            model.zero_grads();
            let branches = model.forward_batch(&features, Mode::Train, &mut rng)?;
            let (loss, grads) = batch_loss_and_grads(&branches, &targets, true);
            if !loss.is_finite() {
                return Err(RrnError::Training(format!(
                    "non-finite loss at fold {fold}, epoch {epoch}, batch {batch_idx}"
                )));
            }
            model.backward_batch(&grads)?;
            if kl_scale > 0.0 {
                model.add_kl_grads(kl_scale);
            }
            adam.begin_step();
            let mut step_err: Option<RrnError> = None;
            model.visit_params_mut(&mut |name, p| {
                if step_err.is_none() {
                    if let Err(e) = adam.update_param(name, p) {
                        step_err = Some(e);
                    }
                }
            });
            if let Some(e) = step_err {
                return Err(e);
            }
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = epoch_loss / seen as f64;
        let val_loss = if prepared_val.is_empty() {
            None
        } else {
            Some(eval_loss(&mut model, &prepared_val)?)
        };
        log.push(EpochLog {
            epoch,
            fold,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainResult {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            experiment: config.name.clone(),
            fold,
            model,
            adam,
            rng: RngState::capture(&rng),
            epochs_trained: config.epochs,
            normalize: config.normalize,
        },
        log,
    })
}

/// Train/validation/test subject ids for one fold of a plan.
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Computes the per-fold splits: test = base subjects of the fold,
/// validation = a deterministic fraction of the remaining base subjects,
/// train = everything else assigned outside the fold (augmented subjects
/// follow their parents and never enter validation or test).
pub fn fold_splits(
    dataset: &Dataset,
    plan: &FoldPlan,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    let mut splits = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let mut test = Vec::new();
        let mut train_base = Vec::new();
        let mut train_aug = Vec::new();
        for s in &dataset.subjects {
            let id = s.set.subject_id.clone();
            let assigned = plan.fold_of(&id).ok_or_else(|| {
                RrnError::Dataset(format!("subject '{id}' missing from fold plan"))
            })?;
            if assigned == fold {
                if s.is_base() {
                    test.push(id);
                }
                // Augmented subjects of the test fold are dropped entirely.
            } else if s.is_base() {
                train_base.push(id);
            } else {
                train_aug.push(id);
            }
        }
        // Validation: a seeded sample of the training base subjects.
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x7a1 + fold as u64));
        let mut order: Vec<usize> = (0..train_base.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n_val = ((train_base.len() as f64) * val_fraction).floor() as usize;
        let val_idx: std::collections::BTreeSet<usize> =
            order.into_iter().take(n_val).collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, id) in train_base.iter().enumerate() {
            if val_idx.contains(&i) {
                val.push(id.clone());
            } else {
                train.push(id.clone());
            }
        }
        train.extend(train_aug);
        splits.push(FoldSplit {
            fold,
            train,
            val,
            test,
        });
    }
    Ok(splits)
}

pub struct CvResult {
    pub plan: FoldPlan,
    pub splits: Vec<FoldSplit>,
    pub folds: Vec<TrainResult>,
}

fn sets_by_id<'a>(dataset: &'a Dataset, ids: &[String]) -> Vec<&'a LandmarkSet> {
    let index: std::collections::BTreeMap<&str, &LandmarkSet> = dataset
        .subjects
        .iter()
        .map(|s| (s.set.subject_id.as_str(), &s.set))
        .collect();
    ids.iter().map(|id| index[id.as_str()]).collect()
}

/// Maximum number of folds trained concurrently: the `RRN_THREADS`
/// environment variable, capped by the machine's available parallelism.
fn fold_parallelism(k: usize) -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("RRN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|v| *v >= 1)
        .unwrap_or(hw);
    cap.min(k).max(1)
}

/// K-fold cross-validated training. Folds are independent jobs with derived
/// seeds; results come back in fold order regardless of scheduling.
pub fn train_cv(config: &ExperimentConfig, dataset: &Dataset) -> Result<CvResult> {
    let plan = make_folds(dataset, config.folds, mix(config.seed, 0xf01d))?;
    let splits = fold_splits(dataset, &plan, config.val_fraction, config.seed)?;
    for split in &splits {
        if split.train.is_empty() {
            return Err(RrnError::Config(format!(
                "fold {} has no training subjects",
                split.fold
            )));
        }
    }

    let workers = fold_parallelism(config.folds);
    let mut results: Vec<Option<Result<TrainResult>>> =
        (0..config.folds).map(|_| None).collect();

    if workers <= 1 {
        for (fold, split) in splits.iter().enumerate() {
            let train = sets_by_id(dataset, &split.train);
            let val = sets_by_id(dataset, &split.val);
            results[fold] = Some(train_single(config, &train, &val, fold));
        }
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (fold, split) in splits.iter().enumerate() {
                let config = config.clone();
                let train = sets_by_id(dataset, &split.train);
                let val = sets_by_id(dataset, &split.val);
                handles.push((
                    fold,
                    scope.spawn(move || train_single(&config, &train, &val, fold)),
                ));
                if handles.len() == workers {
                    let (f, h) = handles.remove(0);
                    results[f] = Some(h.join().expect("fold worker panicked"));
                }
            }
            for (f, h) in handles {
                results[f] = Some(h.join().expect("fold worker panicked"));
            }
        });
    }

    let mut folds = Vec::with_capacity(config.folds);
    for r in results {
        folds.push(r.expect("fold not scheduled")?);
    }
    Ok(CvResult {
        plan,
        splits,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthTemplate};

    fn small_config(epochs: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(
            "3-regular",
            RuVariant::Mlp { hidden: 8 },
            DropoutMode::None,
            7,
        )
        .unwrap();
        cfg.rrn.relation_dim = 8;
        cfg.epochs = epochs;
        cfg
    }

    fn synth(count: usize, seed: u64) -> Dataset {
        let template = SynthTemplate::default_anatomy();
        generate_synthetic(&template, count, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn preset_splits_cover_all_14() {
        for name in PRESET_NAMES {
            let (inputs, targets) = preset_split(name).unwrap();
            assert_eq!(inputs.len() + targets.len(), 14, "{name}");
        }
        assert!(preset_split("nope").is_err());
    }

    #[test]
    fn preset_ru_counts() {
        for (name, want) in PRESET_NAMES.iter().zip([25, 9, 9, 36, 81]) {
            let cfg = ExperimentConfig::preset(
                name,
                RuVariant::Dense,
                DropoutMode::None,
                1,
            )
            .unwrap();
            let model = RrnModel::build(cfg.rrn, 1).unwrap();
            assert_eq!(model.ru_count(), want, "{name}");
        }
    }

    #[test]
    fn zero_epochs_keeps_initial_parameters() {
        let ds = synth(8, 3);
        let sets: Vec<&LandmarkSet> = ds.subjects.iter().map(|s| &s.set).collect();
        let mut cfg = small_config(0);
        cfg.normalize = false;
        let result = train_single(&cfg, &sets, &[], 0).unwrap();
        let fresh = RrnModel::build(cfg.rrn.clone(), mix(cfg.seed, 0xb001)).unwrap();
        assert_eq!(result.checkpoint.model.param_snapshot(), fresh.param_snapshot());
        assert_eq!(result.checkpoint.adam.step, 0);
    }

    #[test]
    fn one_epoch_full_batch_is_one_optimizer_step() {
        let ds = synth(64, 4);
        let sets: Vec<&LandmarkSet> = ds.subjects.iter().map(|s| &s.set).collect();
        let mut cfg = small_config(1);
        cfg.batch_size = 64;
        let result = train_single(&cfg, &sets, &[], 0).unwrap();
        assert_eq!(result.checkpoint.adam.step, 1);
        assert_eq!(result.log.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synth(16, 5);
        let sets: Vec<&LandmarkSet> = ds.subjects.iter().map(|s| &s.set).collect();
        let cfg = small_config(3);
        let a = train_single(&cfg, &sets[..12], &sets[12..], 0).unwrap();
        let b = train_single(&cfg, &sets[..12], &sets[12..], 0).unwrap();
        let strip = |log: &[EpochLog]| -> Vec<(usize, u64, Option<u64>)> {
            log.iter()
                .map(|l| (l.epoch, l.train_loss.to_bits(), l.val_loss.map(f64::to_bits)))
                .collect()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(
            a.checkpoint.model.param_snapshot(),
            b.checkpoint.model.param_snapshot()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = synth(8, 6);
        let sets: Vec<&LandmarkSet> = ds.subjects.iter().map(|s| &s.set).collect();
        let cfg = small_config(2);
        let result = train_single(&cfg, &sets, &[], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        result.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(
            back.model.param_snapshot(),
            result.checkpoint.model.param_snapshot()
        );
        let pred_a = result.checkpoint.model.forward(&sets[0]).unwrap();
        let pred_b = back.model.forward(&sets[0]).unwrap();
        assert_eq!(pred_a.terminal, pred_b.terminal);
    }

    #[test]
    fn fold_splits_keep_augmented_out_of_val_and_test() {
        let ds = synth(12, 7);
        let augmented = crate::data::generate_augmented(
            &ds,
            30,
            5.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let plan = make_folds(&augmented, 4, 2).unwrap();
        let splits = fold_splits(&augmented, &plan, 0.1, 3).unwrap();
        for split in splits {
            for id in split.val.iter().chain(&split.test) {
                assert!(!id.starts_with("aug-"), "{id} leaked into val/test");
            }
        }
    }

    #[test]
    fn nan_in_training_is_reported_with_batch_id() {
        let ds = synth(8, 8);
        let mut sets: Vec<LandmarkSet> = ds.subjects.iter().map(|s| s.set.clone()).collect();
        // Poison one coordinate badly enough to overflow the quadratic loss.
        sets[3].coords.insert(LandmarkName::Pg, [1e200, 0.0, 0.0]);
        let refs: Vec<&LandmarkSet> = sets.iter().collect();
        let mut cfg = small_config(1);
        cfg.normalize = false;
        let err = train_single(&cfg, &refs, &[], 0).unwrap_err();
        assert!(err.to_string().contains("batch"), "{err}");
    }
}
