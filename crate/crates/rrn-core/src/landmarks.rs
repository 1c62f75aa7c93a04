//! Landmark domain types and spherical-coordinate geometry.
//!
//! Fourteen named craniomaxillofacial landmarks are tracked per subject:
//! nine mandibular, four maxillary and one nasal. Coordinates live in pixel
//! space; the per-axis voxel spacing converts to millimetres at evaluation
//! time only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RrnError};

/// Bone group a landmark belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoneGroup {
    /// Mandibular landmarks (9).
    Mandible,
    /// Maxillary landmarks (4).
    Maxilla,
    /// Nasal bone landmark (1).
    Nasal,
}

/// The 14 landmark names.
///
/// Declaration order is the canonical order used for deterministic
/// accumulation throughout the crate.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum LandmarkName {
    /// Menton, the reference origin for relative features.
    Me,
    /// Gnathion.
    Gn,
    /// Pogonion.
    Pg,
    /// B point.
    B,
    /// Infradentale.
    Id,
    /// Coronoid left.
    CorL,
    /// Coronoid right.
    CorR,
    /// Condylar left.
    CdL,
    /// Condylar right.
    CdR,
    /// Anterior nasal spine.
    Ans,
    /// A point.
    A,
    /// Prostion.
    Pr,
    /// Posterior nasal spine.
    Pns,
    /// Nasion.
    Na,
}

pub const ALL_LANDMARKS: [LandmarkName; 14] = [
    LandmarkName::Me,
    LandmarkName::Gn,
    LandmarkName::Pg,
    LandmarkName::B,
    LandmarkName::Id,
    LandmarkName::CorL,
    LandmarkName::CorR,
    LandmarkName::CdL,
    LandmarkName::CdR,
    LandmarkName::Ans,
    LandmarkName::A,
    LandmarkName::Pr,
    LandmarkName::Pns,
    LandmarkName::Na,
];

impl LandmarkName {
    /// Index in canonical declaration order.
    pub fn canonical_index(self) -> usize {
        self as usize
    }

    pub fn group(self) -> BoneGroup {
        use LandmarkName::*;
        match self {
            Me | Gn | Pg | B | Id | CorL | CorR | CdL | CdR => BoneGroup::Mandible,
            Ans | A | Pr | Pns => BoneGroup::Maxilla,
            Na => BoneGroup::Nasal,
        }
    }

    pub fn is_mandibular(self) -> bool {
        self.group() == BoneGroup::Mandible
    }

    pub fn as_str(self) -> &'static str {
        use LandmarkName::*;
        match self {
            Me => "Me",
            Gn => "Gn",
            Pg => "Pg",
            B => "B",
            Id => "Id",
            CorL => "CorL",
            CorR => "CorR",
            CdL => "CdL",
            CdR => "CdR",
            Ans => "Ans",
            A => "A",
            Pr => "Pr",
            Pns => "Pns",
            Na => "Na",
        }
    }
}

impl fmt::Display for LandmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LandmarkName {
    type Err = RrnError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_LANDMARKS
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                RrnError::InvalidInput(format!(
                    "unknown landmark name '{s}' (expected one of {})",
                    ALL_LANDMARKS.map(|n| n.as_str()).join(", ")
                ))
            })
    }
}

/// One subject's landmark annotations in pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub subject_id: String,
    /// Millimetres per pixel along each axis; strictly positive.
    pub spacing_mm: [f64; 3],
    pub coords: BTreeMap<LandmarkName, [f64; 3]>,
}

impl LandmarkSet {
    pub fn new(
        subject_id: impl Into<String>,
        spacing_mm: [f64; 3],
        coords: BTreeMap<LandmarkName, [f64; 3]>,
    ) -> Result<Self> {
        let set = LandmarkSet {
            subject_id: subject_id.into(),
            spacing_mm,
            coords,
        };
        set.validate()?;
        Ok(set)
    }

    /// Checks the full-set invariants: all 14 landmarks present and finite,
    /// spacing strictly positive.
    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.spacing_mm[axis] > 0.0) || !self.spacing_mm[axis].is_finite() {
                return Err(RrnError::Dataset(format!(
                    "subject '{}': spacing_mm[{axis}] = {} must be strictly positive",
                    self.subject_id, self.spacing_mm[axis]
                )));
            }
        }
        for name in ALL_LANDMARKS {
            match self.coords.get(&name) {
                None => {
                    return Err(RrnError::Dataset(format!(
                        "subject '{}': missing landmark {name}",
                        self.subject_id
                    )))
                }
                Some(p) if p.iter().any(|v| !v.is_finite()) => {
                    return Err(RrnError::Dataset(format!(
                        "subject '{}': landmark {name} has non-finite coordinates",
                        self.subject_id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, name: LandmarkName) -> Result<[f64; 3]> {
        self.coords.get(&name).copied().ok_or_else(|| {
            RrnError::Dataset(format!(
                "subject '{}': missing landmark {name}",
                self.subject_id
            ))
        })
    }
}

/// Spherical coordinates of a 3-vector, physics convention: `r >= 0`,
/// polar angle `theta` in `[0, pi]` measured from +z, azimuth `phi`
/// in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalVec {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

impl SphericalVec {
    /// Cartesian reconstruction `r * [sin t cos p, sin t sin p, cos t]`.
    pub fn to_cartesian(self) -> [f64; 3] {
        [
            self.r * self.theta.sin() * self.phi.cos(),
            self.r * self.theta.sin() * self.phi.sin(),
            self.r * self.theta.cos(),
        ]
    }
}

/// Converts a pixel-space vector to spherical coordinates.
///
/// The zero vector maps to `(0, 0, 0)` so that degenerate pairs propagate
/// zeros instead of NaN.
pub fn to_spherical(v: [f64; 3]) -> Result<SphericalVec> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(RrnError::InvalidInput(format!(
            "non-finite vector {v:?} passed to to_spherical"
        )));
    }
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if r == 0.0 {
        return Ok(SphericalVec {
            r: 0.0,
            theta: 0.0,
            phi: 0.0,
        });
    }
    let theta = (v[2] / r).clamp(-1.0, 1.0).acos();
    let mut phi = v[1].atan2(v[0]);
    // atan2 may return -pi for y = -0.0; fold onto the (-pi, pi] convention.
    if phi <= -std::f64::consts::PI {
        phi = std::f64::consts::PI;
    }
    Ok(SphericalVec { r, theta, phi })
}

/// Diagonal length of the axis-aligned bounding box of the listed
/// mandibular landmarks, in pixel space.
pub fn mandible_diagonal(set: &LandmarkSet, input_mandibular: &[LandmarkName]) -> Result<f64> {
    if input_mandibular.is_empty() {
        return Err(RrnError::Config(
            "mandible_diagonal requires at least one mandibular landmark".into(),
        ));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &name in input_mandibular {
        if !name.is_mandibular() {
            return Err(RrnError::Config(format!(
                "landmark {name} is not mandibular; bounding box is defined over mandibular landmarks only"
            )));
        }
        let p = set.get(name)?;
        for axis in 0..3 {
            lo[axis] = lo[axis].min(p[axis]);
            hi[axis] = hi[axis].max(p[axis]);
        }
    }
    let mut sq = 0.0;
    for axis in 0..3 {
        let d = hi[axis] - lo[axis];
        sq += d * d;
    }
    Ok(sq.sqrt())
}
