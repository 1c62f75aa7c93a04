//! Dataset I/O, interpolation-based augmentation, synthetic population
//! generation and fold splitting.
//!
//! Datasets are JSON files with a top-level `subjects` array; each entry
//! carries an id, per-axis voxel spacing in millimetres and the 14 landmark
//! coordinates in pixel space. Augmented subjects additionally record the
//! parent they inherit their cross-validation fold from, so interpolated
//! copies can never leak across the train/test split.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RrnError};
use crate::landmarks::{LandmarkName, LandmarkSet, ALL_LANDMARKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Augmented,
    Synthetic,
}

/// One dataset entry: a landmark set plus provenance bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub set: LandmarkSet,
    pub provenance: Provenance,
    /// For augmented subjects, the id of the max-weight interpolation source.
    pub parent: Option<String>,
}

impl Subject {
    /// True for subjects that act as base cohort members when splitting
    /// folds (anything not derived from another subject).
    pub fn is_base(&self) -> bool {
        self.provenance != Provenance::Augmented
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
}

// Wire format. Landmarks are parsed from string keys so validation can name
// the offending subject and field.
#[derive(Serialize, Deserialize)]
struct SubjectRecord {
    id: String,
    spacing_mm: [f64; 3],
    landmarks: BTreeMap<String, [f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    subjects: Vec<SubjectRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.set.subject_id == id)
    }

    pub fn base_subjects(&self) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(|s| s.is_base())
    }

    fn validate_unique_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.set.subject_id.as_str()) {
                return Err(RrnError::Dataset(format!(
                    "duplicate subject id '{}'",
                    s.set.subject_id
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Dataset> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let mut subjects = Vec::with_capacity(file.subjects.len());
        for rec in file.subjects {
            let mut coords = BTreeMap::new();
            for (key, value) in &rec.landmarks {
                let name: LandmarkName = key.parse().map_err(|_| {
                    RrnError::Dataset(format!(
                        "subject '{}': unknown landmark key '{key}'",
                        rec.id
                    ))
                })?;
                coords.insert(name, *value);
            }
            let set = LandmarkSet::new(rec.id, rec.spacing_mm, coords)?;
            subjects.push(Subject {
                set,
                provenance: rec.provenance.unwrap_or(Provenance::Real),
                parent: rec.parent,
            });
        }
        let ds = Dataset { subjects };
        ds.validate_unique_ids()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<SubjectRecord> = self
            .subjects
            .iter()
            .map(|s| SubjectRecord {
                id: s.set.subject_id.clone(),
                spacing_mm: s.set.spacing_mm,
                landmarks: s
                    .set
                    .coords
                    .iter()
                    .map(|(k, v)| (k.as_str().to_string(), *v))
                    .collect(),
                provenance: Some(s.provenance),
                parent: s.parent.clone(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&DatasetFile { subjects: records })?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Dataset::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Convex interpolation of 2 or 3 landmark sets plus bounded uniform noise.
///
/// Each landmark becomes `sum_s w_s * coords_s + u` with `u` uniform
/// per-component in `[-noise_bound, +noise_bound]` pixels. The voxel spacing
/// is copied from the highest-weight source.
pub fn augment(
    sets: &[&LandmarkSet],
    weights: &[f64],
    new_id: impl Into<String>,
    noise_bound: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LandmarkSet> {
    if sets.len() < 2 || sets.len() > 3 {
        return Err(RrnError::InvalidInput(format!(
            "augmentation interpolates 2 or 3 sets, got {}",
            sets.len()
        )));
    }
    if weights.len() != sets.len() {
        return Err(RrnError::InvalidWeights(format!(
            "{} weights for {} sets",
            weights.len(),
            sets.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(RrnError::InvalidWeights("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(RrnError::InvalidWeights(format!(
            "weights sum to {total}, expected 1"
        )));
    }

    let mut coords = BTreeMap::new();
    for name in ALL_LANDMARKS {
        let mut p = [0.0; 3];
        for (set, w) in sets.iter().zip(weights) {
            let src = set.get(name)?;
            for axis in 0..3 {
                p[axis] += w * src[axis];
            }
        }
        if noise_bound > 0.0 {
            for axis in &mut p {
                *axis += rng.random_range(-noise_bound..=noise_bound);
            }
        }
        coords.insert(name, p);
    }

    let max_idx = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    LandmarkSet::new(new_id, sets[max_idx].spacing_mm, coords)
}

/// Grows the dataset with `count` interpolated subjects drawn from random
/// base-subject pairs/triples with Dirichlet(1, ..., 1) weights.
pub fn generate_augmented(
    dataset: &Dataset,
    count: usize,
    noise_bound: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let base: Vec<&Subject> = dataset.base_subjects().collect();
    if base.len() < 2 {
        return Err(RrnError::Dataset(format!(
            "augmentation needs at least 2 base subjects, found {}",
            base.len()
        )));
    }
    let mut out = dataset.clone();
    for k in 0..count {
        let n_sources = if base.len() >= 3 && rng.random::<bool>() { 3 } else { 2 };
        let picks = sample(rng, base.len(), n_sources);
        let sources: Vec<&Subject> = picks.iter().map(|i| base[i]).collect();
        // Dirichlet(1, ..., 1) via normalized unit exponentials: uniform
        // over the weight simplex.
        let draws: Vec<f64> = (0..n_sources)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = draws.iter().sum();
        let weights: Vec<f64> = draws.iter().map(|d| d / total).collect();
        let sets: Vec<&LandmarkSet> = sources.iter().map(|s| &s.set).collect();
        let id = format!("aug-{k:06}");
        let set = augment(&sets, &weights, id, noise_bound, rng)?;
        let max_idx = weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        out.subjects.push(Subject {
            set,
            provenance: Provenance::Augmented,
            parent: Some(sources[max_idx].set.subject_id.clone()),
        });
    }
    Ok(out)
}

/// Hand-placed base anatomy plus deformation ranges for synthetic cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTemplate {
    pub base: BTreeMap<LandmarkName, [f64; 3]>,
    pub scale_range: (f64, f64),
    /// Maximum rotation angle in degrees.
    pub max_rotation_deg: f64,
    /// Maximum per-axis translation in pixels.
    pub max_translation_px: f64,
    /// Per-landmark isotropic Gaussian jitter, in pixels.
    pub jitter_sigma: f64,
    pub spacing_mm: [f64; 3],
}

impl SynthTemplate {
    /// Default template: coarse craniomaxillofacial geometry in a
    /// 256 x 256 x 512 volume. x is left-right, y anterior-posterior,
    /// z inferior-superior; the condylar and coronoid processes sit
    /// superior-posterior to the chin landmarks.
    pub fn default_anatomy() -> Self {
        use LandmarkName::*;
        let base: BTreeMap<LandmarkName, [f64; 3]> = [
            (Me, [128.0, 180.0, 200.0]),
            (Gn, [128.0, 184.0, 206.0]),
            (Pg, [128.0, 187.0, 212.0]),
            (B, [128.0, 185.0, 222.0]),
            (Id, [128.0, 186.0, 232.0]),
            (CorL, [170.0, 160.0, 290.0]),
            (CorR, [86.0, 160.0, 290.0]),
            (CdL, [180.0, 130.0, 295.0]),
            (CdR, [76.0, 130.0, 295.0]),
            (Ans, [128.0, 192.0, 258.0]),
            (A, [128.0, 188.0, 250.0]),
            (Pr, [128.0, 189.0, 240.0]),
            (Pns, [128.0, 130.0, 258.0]),
            (Na, [128.0, 185.0, 330.0]),
        ]
        .into_iter()
        .collect();
        SynthTemplate {
            base,
            scale_range: (0.9, 1.1),
            max_rotation_deg: 10.0,
            max_translation_px: 20.0,
            jitter_sigma: 2.0,
            spacing_mm: [0.5, 0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for name in ALL_LANDMARKS {
            if !self.base.contains_key(&name) {
                return Err(RrnError::Config(format!("template missing landmark {name}")));
            }
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.1 >= self.scale_range.0) {
            return Err(RrnError::Config("invalid scale range".into()));
        }
        if self.jitter_sigma < 0.0 {
            return Err(RrnError::Config("jitter sigma must be non-negative".into()));
        }
        Ok(())
    }
}

fn rotation_matrix(axis: [f64; 3], angle_rad: f64) -> [[f64; 3]; 3] {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
    let (s, c) = angle_rad.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Generates `count` subjects by applying a random similarity transform
/// (scale, small rotation about the template centroid, translation) plus
/// per-landmark Gaussian jitter to the template.
pub fn generate_synthetic(
    template: &SynthTemplate,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    template.validate()?;
    let centroid = {
        let mut c = [0.0; 3];
        for p in template.base.values() {
            for axis in 0..3 {
                c[axis] += p[axis];
            }
        }
        for axis in &mut c {
            *axis /= template.base.len() as f64;
        }
        c
    };

    let mut subjects = Vec::with_capacity(count);
    for k in 0..count {
        let scale = rng.random_range(template.scale_range.0..=template.scale_range.1);
        let axis = loop {
            let a: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            if a.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
                break a;
            }
        };
        let max_rad = template.max_rotation_deg.to_radians();
        let angle = if max_rad > 0.0 {
            rng.random_range(-max_rad..=max_rad)
        } else {
            0.0
        };
        let rot = rotation_matrix(axis, angle);
        let trans: [f64; 3] = if template.max_translation_px > 0.0 {
            [
                rng.random_range(-template.max_translation_px..=template.max_translation_px),
                rng.random_range(-template.max_translation_px..=template.max_translation_px),
                rng.random_range(-template.max_translation_px..=template.max_translation_px),
            ]
        } else {
            [0.0; 3]
        };

        let mut coords = BTreeMap::new();
        for (name, p) in &template.base {
            let rel = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
            let mut q = [0.0; 3];
            for r in 0..3 {
                q[r] = scale
                    * (rot[r][0] * rel[0] + rot[r][1] * rel[1] + rot[r][2] * rel[2])
                    + centroid[r]
                    + trans[r];
                if template.jitter_sigma > 0.0 {
                    let e: f64 = rng.sample(StandardNormal);
                    q[r] += template.jitter_sigma * e;
                }
            }
            coords.insert(*name, q);
        }
        let set = LandmarkSet::new(format!("synth-{k:05}"), template.spacing_mm, coords)?;
        subjects.push(Subject {
            set,
            provenance: Provenance::Synthetic,
            parent: None,
        });
    }
    Ok(Dataset { subjects })
}

/// Assignment of subjects to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.get(subject_id).copied()
    }
}

/// Balanced random partition of the base subjects into `k` folds; augmented
/// subjects inherit the fold of their max-weight parent so no interpolated
/// copy of a test subject can appear in training.
pub fn make_folds(dataset: &Dataset, k: usize, rng_seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(RrnError::Config(format!("fold count k = {k} must be at least 2")));
    }
    let base_ids: Vec<&str> = dataset
        .base_subjects()
        .map(|s| s.set.subject_id.as_str())
        .collect();
    if base_ids.len() < k {
        return Err(RrnError::Config(format!(
            "cannot split {} base subjects into {k} folds",
            base_ids.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..base_ids.len()).collect();
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    // First (len mod k) folds take the extra subject.
    let n = base_ids.len();
    let small = n / k;
    let extra = n % k;
    let mut assignments = BTreeMap::new();
    let mut pos = 0;
    for fold in 0..k {
        let size = small + usize::from(fold < extra);
        for _ in 0..size {
            assignments.insert(base_ids[order[pos]].to_string(), fold);
            pos += 1;
        }
    }

    for s in &dataset.subjects {
        if s.provenance == Provenance::Augmented {
            let parent = s.parent.as_deref().ok_or_else(|| {
                RrnError::Dataset(format!(
                    "augmented subject '{}' has no recorded parent",
                    s.set.subject_id
                ))
            })?;
            let fold = *assignments.get(parent).ok_or_else(|| {
                RrnError::Dataset(format!(
                    "augmented subject '{}' references unknown parent '{parent}'",
                    s.set.subject_id
                ))
            })?;
            assignments.insert(s.set.subject_id.clone(), fold);
        }
    }

    Ok(FoldPlan { k, assignments })
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::ALL_LANDMARKS;

    fn subject(id: &str, offset: f64) -> Subject {
        let mut coords = BTreeMap::new();
        for (i, name) in ALL_LANDMARKS.into_iter().enumerate() {
            coords.insert(
                name,
                [
                    offset + 5.0 * i as f64,
                    offset * 2.0 + 3.0 * i as f64,
                    offset * 0.5 + 7.0 * i as f64,
                ],
            );
        }
        Subject {
            set: LandmarkSet::new(id, [0.5, 0.5, 0.5], coords).unwrap(),
            provenance: Provenance::Real,
            parent: None,
        }
    }

    fn dataset(n: usize) -> Dataset {
        Dataset {
            subjects: (0..n).map(|i| subject(&format!("s{i}"), i as f64)).collect(),
        }
    }

    #[test]
    fn json_round_trip_preserves_values() {
        let ds = dataset(2);
        let text = ds.to_json().unwrap();
        let back = Dataset::from_json(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(
            back.subjects[1].set.coords[&LandmarkName::Na],
            ds.subjects[1].set.coords[&LandmarkName::Na]
        );
    }

    #[test]
    fn load_error_names_subject_and_missing_landmark() {
        let ds = dataset(2);
        let mut text = ds.to_json().unwrap();
        text = text.replace("\"Na\"", "\"NotALandmark\"");
        let err = Dataset::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("NotALandmark"));

        // Drop a landmark entirely.
        let mut value: serde_json::Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
        value["subjects"][0]["landmarks"]
            .as_object_mut()
            .unwrap()
            .remove("Na");
        let err = Dataset::from_json(&value.to_string()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s0") && msg.contains("Na"), "{msg}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut ds = dataset(2);
        ds.subjects[1].set.subject_id = "s0".into();
        let err = Dataset::from_json(&ds.to_json().unwrap()).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn degenerate_weights_reproduce_first_set() {
        let ds = dataset(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(
            &[&ds.subjects[0].set, &ds.subjects[1].set],
            &[1.0, 0.0],
            "a",
            0.0,
            &mut rng,
        )
        .unwrap();
        for name in ALL_LANDMARKS {
            assert_eq!(out.coords[&name], ds.subjects[0].set.coords[&name]);
        }
    }

    #[test]
    fn identical_sets_are_a_fixed_point() {
        let ds = dataset(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(
            &[&ds.subjects[0].set, &ds.subjects[0].set],
            &[0.3, 0.7],
            "a",
            0.0,
            &mut rng,
        )
        .unwrap();
        for name in ALL_LANDMARKS {
            let want = ds.subjects[0].set.coords[&name];
            let got = out.coords[&name];
            for axis in 0..3 {
                assert!((got[axis] - want[axis]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn midpoint_interpolation() {
        let mut a = subject("a", 0.0);
        let mut b = subject("b", 0.0);
        for name in ALL_LANDMARKS {
            a.set.coords.insert(name, [0.0, 0.0, 0.0]);
            b.set.coords.insert(name, [2.0, 2.0, 2.0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&[&a.set, &b.set], &[0.5, 0.5], "m", 0.0, &mut rng).unwrap();
        for name in ALL_LANDMARKS {
            assert_eq!(out.coords[&name], [1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn bad_weight_sum_is_rejected() {
        let ds = dataset(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = augment(
            &[&ds.subjects[0].set, &ds.subjects[1].set],
            &[0.6, 0.6],
            "a",
            0.0,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, RrnError::InvalidWeights(_)));
    }

    #[test]
    fn generate_augmented_count_zero_is_identity() {
        let ds = dataset(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate_augmented(&ds, 0, 5.0, &mut rng).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn generate_augmented_records_parents() {
        let ds = dataset(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate_augmented(&ds, 100, 5.0, &mut rng).unwrap();
        assert_eq!(out.len(), 102);
        for s in out.subjects.iter().skip(2) {
            assert_eq!(s.provenance, Provenance::Augmented);
            let parent = s.parent.as_deref().unwrap();
            assert!(parent == "s0" || parent == "s1");
        }
    }

    #[test]
    fn synthetic_zero_deformation_reproduces_template() {
        let mut template = SynthTemplate::default_anatomy();
        template.scale_range = (1.0, 1.0);
        template.max_rotation_deg = 0.0;
        template.max_translation_px = 0.0;
        template.jitter_sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = generate_synthetic(&template, 3, &mut rng).unwrap();
        for s in &ds.subjects {
            for name in ALL_LANDMARKS {
                let got = s.set.coords[&name];
                let want = template.base[&name];
                for axis in 0..3 {
                    assert!((got[axis] - want[axis]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn synthetic_generation_is_reproducible() {
        let template = SynthTemplate::default_anatomy();
        let a = generate_synthetic(&template, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_synthetic(&template, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_distance_ratio_tracks_scale_range() {
        // Rotation and translation preserve distances; only the scale factor
        // changes them, so the Me->CdL distance ratio over the population
        // must lie inside the scale range.
        let mut template = SynthTemplate::default_anatomy();
        template.jitter_sigma = 0.0;
        let base_dist = {
            let a = template.base[&LandmarkName::Me];
            let b = template.base[&LandmarkName::CdL];
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ds = generate_synthetic(&template, 500, &mut rng).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &ds.subjects {
            let a = s.set.coords[&LandmarkName::Me];
            let b = s.set.coords[&LandmarkName::CdL];
            let d =
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            let ratio = d / base_dist;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        assert!(lo >= 0.9 - 1e-9 && hi <= 1.1 + 1e-9, "ratio range [{lo}, {hi}]");
        // The range should actually be exercised.
        assert!(lo < 0.92 && hi > 1.08, "ratio range [{lo}, {hi}]");
    }

    #[test]
    fn folds_are_balanced() {
        let ds = dataset(8);
        let plan = make_folds(&ds, 4, 1).unwrap();
        let mut sizes = [0usize; 4];
        for (_, f) in &plan.assignments {
            sizes[*f] += 1;
        }
        assert_eq!(sizes, [2, 2, 2, 2]);
    }

    #[test]
    fn fold_sizes_for_250_subjects() {
        let ds = dataset(250);
        let plan = make_folds(&ds, 4, 7).unwrap();
        let mut sizes = vec![0usize; 4];
        for (_, f) in &plan.assignments {
            sizes[*f] += 1;
        }
        sizes.sort_unstable();
        assert_eq!(sizes, vec![62, 62, 63, 63]);
    }

    #[test]
    fn augmented_children_inherit_parent_fold() {
        let ds = dataset(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = generate_augmented(&ds, 40, 5.0, &mut rng).unwrap();
        let plan = make_folds(&full, 4, 13).unwrap();
        for s in &full.subjects {
            if let Some(parent) = &s.parent {
                assert_eq!(plan.fold_of(&s.set.subject_id), plan.fold_of(parent));
            }
        }
    }

    #[test]
    fn too_few_subjects_for_folds_is_an_error() {
        let ds = dataset(3);
        assert!(make_folds(&ds, 4, 1).is_err());
        assert!(make_folds(&ds, 1, 1).is_err());
    }
}
