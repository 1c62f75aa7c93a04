//! Pairwise geometric feature extraction.
//!
//! Every ordered landmark pair (A, B) is described by a 19-component vector:
//! the pixel-space positions of A, B and Menton, the spherical coordinates of
//! the Menton-relative offsets of A and B and of the A-to-B offset, and the
//! bounding-box diagonal of the input mandibular landmarks. Menton is the
//! fixed reference origin.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RrnError};
use crate::landmarks::{mandible_diagonal, to_spherical, LandmarkName, LandmarkSet};

/// Number of components in a pairwise feature vector.
pub const FEATURE_DIM: usize = 19;

/// The 19-component descriptor of an ordered landmark pair.
///
/// Layout: `[A_xyz, sph(Me->A), B_xyz, sph(Me->B), Me_xyz, sph(A->B), d1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseFeature(pub [f64; FEATURE_DIM]);

impl PairwiseFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Extracts the feature vector for the ordered pair `(a, b)`.
///
/// `d1` is the subject's mandible bounding-box diagonal, constant across all
/// pairs drawn from the same subject and input configuration; see
/// [`subject_d1`].
pub fn pairwise_features(
    set: &LandmarkSet,
    a: LandmarkName,
    b: LandmarkName,
    d1: f64,
) -> Result<PairwiseFeature> {
    if a == b {
        return Err(RrnError::InvalidPair(format!(
            "pairwise features require two distinct landmarks, got ({a}, {b})"
        )));
    }
    let pa = set.get(a)?;
    let pb = set.get(b)?;
    let me = set.get(LandmarkName::Me)?;

    let me_to_a = to_spherical(sub(pa, me))?;
    let me_to_b = to_spherical(sub(pb, me))?;
    let a_to_b = to_spherical(sub(pb, pa))?;

    let mut f = [0.0; FEATURE_DIM];
    f[0..3].copy_from_slice(&pa);
    f[3] = me_to_a.r;
    f[4] = me_to_a.theta;
    f[5] = me_to_a.phi;
    f[6..9].copy_from_slice(&pb);
    f[9] = me_to_b.r;
    f[10] = me_to_b.theta;
    f[11] = me_to_b.phi;
    f[12..15].copy_from_slice(&me);
    f[15] = a_to_b.r;
    f[16] = a_to_b.theta;
    f[17] = a_to_b.phi;
    f[18] = d1;
    Ok(PairwiseFeature(f))
}

/// The shared `d1` entry for one subject under a given input configuration:
/// the bounding-box diagonal of the configuration's mandibular landmarks.
pub fn subject_d1(set: &LandmarkSet, input_names: &[LandmarkName]) -> Result<f64> {
    let mandibular: Vec<LandmarkName> = input_names
        .iter()
        .copied()
        .filter(|n| n.is_mandibular())
        .collect();
    mandible_diagonal(set, &mandibular)
}

/// Per-component affine standardization fit on training data only.
///
/// Components with (near-)zero variance keep scale 1 so constant inputs pass
/// through shifted but not amplified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineNormalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Standard-deviation floor below which a component is treated as constant.
pub const STD_FLOOR: f64 = 1e-8;

impl AffineNormalizer {
    /// Identity transform of the given width.
    pub fn identity(dim: usize) -> Self {
        AffineNormalizer {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits mean-0 / std-1 statistics over `rows` (population std).
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| RrnError::InvalidInput("cannot fit normalizer on empty data".into()))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let std = (s / n).sqrt();
                if std <= STD_FLOOR {
                    1.0
                } else {
                    1.0 / std
                }
            })
            .collect();
        Ok(AffineNormalizer { shift: mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
            *v = (*v - m) * s;
        }
    }

    pub fn invert(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
            *v = *v / s + m;
        }
    }
}

/// Convenience: fit a normalizer over pairwise feature vectors.
pub fn feature_normalizer(train_features: &[PairwiseFeature]) -> Result<AffineNormalizer> {
    let rows: Vec<Vec<f64>> = train_features.iter().map(|f| f.0.to_vec()).collect();
    AffineNormalizer::fit(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::ALL_LANDMARKS;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn fixture_set() -> LandmarkSet {
        let mut map = BTreeMap::new();
        for (i, name) in ALL_LANDMARKS.into_iter().enumerate() {
            map.insert(
                name,
                [10.0 + 3.0 * i as f64, 40.0 - 2.0 * i as f64, 5.0 + 7.0 * i as f64],
            );
        }
        LandmarkSet::new("fx", [1.0, 1.0, 1.0], map).unwrap()
    }

    #[test]
    fn feature_length_is_19() {
        let set = fixture_set();
        let f = pairwise_features(&set, LandmarkName::Gn, LandmarkName::CdL, 2.0).unwrap();
        assert_eq!(f.as_slice().len(), FEATURE_DIM);
    }

    #[test]
    fn me_as_first_member_zeroes_its_spherical_block() {
        let set = fixture_set();
        let f = pairwise_features(&set, LandmarkName::Me, LandmarkName::Gn, 1.0).unwrap();
        assert_eq!(&f.0[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn swapped_arguments_exchange_blocks_and_keep_distance() {
        let set = fixture_set();
        let ab = pairwise_features(&set, LandmarkName::Gn, LandmarkName::CdR, 3.0).unwrap();
        let ba = pairwise_features(&set, LandmarkName::CdR, LandmarkName::Gn, 3.0).unwrap();
        assert_eq!(&ab.0[0..6], &ba.0[6..12]);
        assert_eq!(&ab.0[6..12], &ba.0[0..6]);
        assert_eq!(ab.0[15], ba.0[15]);
    }

    #[test]
    fn identical_pair_is_rejected() {
        let set = fixture_set();
        let err = pairwise_features(&set, LandmarkName::Gn, LandmarkName::Gn, 1.0).unwrap_err();
        assert!(matches!(err, RrnError::InvalidPair(_)));
    }

    #[test]
    fn normalizer_two_sample_closed_form() {
        // Two points x1, x2: mean = (x1+x2)/2, population std = |x1-x2|/2.
        let rows = vec![vec![2.0, -1.0], vec![6.0, -1.0]];
        let n = AffineNormalizer::fit(&rows).unwrap();
        assert!((n.shift[0] - 4.0).abs() < 1e-12);
        assert!((n.scale[0] - 0.5).abs() < 1e-12);
        // Constant component: scale falls back to 1.
        assert_eq!(n.shift[1], -1.0);
        assert_eq!(n.scale[1], 1.0);
    }

    #[test]
    fn normalizer_centers_its_own_inputs() {
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| vec![i as f64 * 3.1 + 2.0, (i * i) as f64 - 4.0])
            .collect();
        let n = AffineNormalizer::fit(&rows).unwrap();
        let mut mean = [0.0; 2];
        for row in &rows {
            let mut r = row.clone();
            n.apply(&mut r);
            mean[0] += r[0];
            mean[1] += r[1];
        }
        assert!(mean.iter().all(|m| (m / 7.0).abs() < 1e-9));
    }

    #[test]
    fn normalizer_round_trips() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![-4.0, 0.5, 3.0], vec![2.2, 9.0, 3.0]];
        let n = AffineNormalizer::fit(&rows).unwrap();
        let mut r = rows[1].clone();
        n.apply(&mut r);
        n.invert(&mut r);
        for (got, want) in r.iter().zip(&rows[1]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn d1_constant_across_pairs(seed in 0u64..1000) {
            // Same subject + same input configuration: every ordered pair
            // carries the same final entry.
            let set = fixture_set();
            let inputs = [
                LandmarkName::Me,
                LandmarkName::CdL,
                LandmarkName::CdR,
                LandmarkName::CorL,
                LandmarkName::CorR,
            ];
            let d1 = subject_d1(&set, &inputs).unwrap();
            let i = (seed as usize) % inputs.len();
            let j = (seed as usize / inputs.len()) % inputs.len();
            prop_assume!(i != j);
            let f = pairwise_features(&set, inputs[i], inputs[j], d1).unwrap();
            prop_assert_eq!(f.0[18], d1);
        }
    }
}
