//! Golden-value tests: feature vectors and a full forward pass are checked
//! against values produced by the independent scripts in `tests/golden/`.

use std::path::Path;

use rrn_core::testing::{fixture_model, fixture_subject};
use rrn_core::{pairwise_features, subject_d1, Dataset, LandmarkName};

fn golden_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden"))
}

#[test]
fn fixture_json_matches_in_code_fixture() {
    let ds = Dataset::load(&golden_dir().join("fixture_subject.json")).unwrap();
    assert_eq!(ds.subjects[0].set, fixture_subject());
}

#[test]
fn pairwise_features_match_golden_file() {
    let set = fixture_subject();
    let inputs = [
        LandmarkName::Me,
        LandmarkName::CdL,
        LandmarkName::CdR,
        LandmarkName::CorL,
        LandmarkName::CorR,
    ];
    let d1 = subject_d1(&set, &inputs).unwrap();

    let text = std::fs::read_to_string(golden_dir().join("golden_features.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 22);
        let a: LandmarkName = cells[1].parse().unwrap();
        let b: LandmarkName = cells[2].parse().unwrap();
        let want: Vec<f64> = cells[3..].iter().map(|c| c.parse().unwrap()).collect();
        let got = pairwise_features(&set, a, b, d1).unwrap();
        for (i, (g, w)) in got.as_slice().iter().zip(&want).enumerate() {
            // The golden file is printed with 9 significant digits; round
            // the computed value onto the same grid before comparing.
            let g9: f64 = format!("{g:.8e}").parse().unwrap();
            assert!(
                (g9 - w).abs() <= 1e-9 * w.abs().max(1.0),
                "pair ({a}, {b}) component {i}: got {g} (rounded {g9}), golden {w}"
            );
        }
        rows += 1;
    }
    assert_eq!(rows, 20, "5 inputs give 20 ordered pairs");
}

#[test]
fn fixture_forward_matches_golden_values() {
    // Frozen from tests/golden/gen_forward.py.
    let branch_me = [-0.19810258017164595, -0.10569225948506224, 0.007589679313416309];
    let branch_gn = [-0.19798398763070948, -0.10604803710787158, 0.008064049477162114];
    let terminal = [-0.1980432839011777, -0.1058701482964669, 0.00782686439528921];
    let terminal_mm = [-0.149324636061488, -0.07982609181553604, 0.002950727877024032];

    let model = fixture_model();
    let set = fixture_subject();
    let pred = model.forward(&set).unwrap();

    assert_eq!(pred.branches[0].0, LandmarkName::Me);
    assert_eq!(pred.branches[1].0, LandmarkName::Gn);
    for axis in 0..3 {
        assert!((pred.branches[0].1[0][axis] - branch_me[axis]).abs() < 1e-9);
        assert!((pred.branches[1].1[0][axis] - branch_gn[axis]).abs() < 1e-9);
        assert!((pred.terminal[0][axis] - terminal[axis]).abs() < 1e-9);
    }

    let mm = model.predict_mm(&set).unwrap();
    let got = mm[&LandmarkName::Pg];
    for axis in 0..3 {
        assert!((got[axis] - terminal_mm[axis]).abs() < 1e-9);
    }
}
