//! Deterministic fixtures shared by integration tests and benches.

use std::collections::BTreeMap;

use crate::landmarks::{LandmarkName, LandmarkSet, ALL_LANDMARKS};
use crate::model::{DropoutMode, RrnConfig, RrnModel, RuVariant};

/// Hand-picked irregular subject used by the golden-value tests.
pub fn fixture_subject() -> LandmarkSet {
    use LandmarkName::*;
    let coords: BTreeMap<LandmarkName, [f64; 3]> = [
        (Me, [120.5, 200.25, 96.0]),
        (Gn, [121.75, 203.5, 101.25]),
        (Pg, [122.5, 206.75, 108.5]),
        (B, [121.25, 204.0, 119.75]),
        (Id, [122.0, 205.5, 131.0]),
        (CorL, [170.25, 155.75, 168.0]),
        (CorR, [70.5, 152.25, 165.75]),
        (CdL, [180.0, 140.5, 190.25]),
        (CdR, [60.75, 139.0, 187.5]),
        (Ans, [123.5, 210.25, 150.75]),
        (A, [122.75, 207.5, 144.25]),
        (Pr, [123.0, 208.75, 138.5]),
        (Pns, [121.5, 150.0, 152.25]),
        (Na, [124.25, 198.5, 210.0]),
    ]
    .into_iter()
    .collect();
    LandmarkSet::new("fixture-01", [0.754, 0.754, 0.377], coords).unwrap()
}

/// Deterministic weight for slot `(r, c)` of any fixture weight matrix.
pub fn fixture_weight(r: usize, c: usize) -> f64 {
    (((r * 3 + c * 7) % 11) as f64 - 5.0) / 20.0
}

/// Deterministic bias for slot `c` of any fixture bias vector.
pub fn fixture_bias(c: usize) -> f64 {
    ((c % 5) as f64 - 2.0) / 10.0
}

/// Tiny two-input network with formula-set weights: inputs Me and Gn,
/// target Pg, MLP units with hidden width 3 and relation width 2. Batch
/// norms keep their fresh state (zero mean, unit variance), so eval passes
/// are fully reproducible from the formulas alone.
pub fn fixture_model() -> RrnModel {
    let config = RrnConfig {
        input_names: vec![LandmarkName::Me, LandmarkName::Gn],
        target_names: vec![LandmarkName::Pg],
        ru_variant: RuVariant::Mlp { hidden: 3 },
        relation_dim: 2,
        dropout: DropoutMode::None,
        share_pairwise: false,
    };
    let mut model = RrnModel::build(config, 0).unwrap();
    model.visit_params_mut(&mut |name, p| {
        if name.ends_with(".fc.w") {
            let cols = p.value.shape[1];
            for (i, v) in p.value.data.iter_mut().enumerate() {
                *v = fixture_weight(i / cols, i % cols);
            }
        } else if name.ends_with(".fc.b") {
            for (c, v) in p.value.data.iter_mut().enumerate() {
                *v = fixture_bias(c);
            }
        }
    });
    model
}
