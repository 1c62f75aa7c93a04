//! Finite-difference verification of every layer type and of the fully
//! assembled network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rrn_core::landmarks::{LandmarkName, LandmarkSet, ALL_LANDMARKS};
use rrn_core::model::{DropoutMode, RrnConfig, RrnModel, RuVariant};
use rrn_core::nn::check::{check_stack_gradients, grads_agree, FD_STEP};
use rrn_core::nn::layers::{build_stack, Layer, LayerSpec, Mode, Stack};
use rrn_core::nn::tensor::Tensor;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
    // Fixed pseudo-random values bounded away from ReLU kinks.
    let data: Vec<f64> = (0..rows * cols)
        .map(|i| {
            let v = ((i as f64 + 1.0) * 0.37 + seed as f64 * 0.11).sin();
            if v.abs() < 0.05 {
                0.21
            } else {
                v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn check(specs: &[LayerSpec], rows: usize, cols: usize, seed: u64) {
    let mut stack = build_stack(specs, &mut rng(seed)).unwrap();
    let x = input(rows, cols, seed);
    let report = check_stack_gradients(&mut stack, &x, seed ^ 0x5eed, TOL).unwrap();
    assert!(report.slots_checked > 0);
}

#[test]
fn fully_connected_gradients() {
    check(&[LayerSpec::FullyConnected { input: 4, output: 3 }], 3, 4, 1);
}

#[test]
fn batch_norm_gradients() {
    // Batch statistics participate in the gradient, so check with batch > 1.
    check(
        &[
            LayerSpec::FullyConnected { input: 3, output: 4 },
            LayerSpec::BatchNorm { dim: 4 },
        ],
        5,
        3,
        2,
    );
}

#[test]
fn relu_gradients() {
    check(
        &[
            LayerSpec::FullyConnected { input: 4, output: 4 },
            LayerSpec::Relu,
        ],
        3,
        4,
        3,
    );
}

#[test]
fn concat_gradients() {
    check(
        &[
            LayerSpec::FullyConnected { input: 3, output: 2 },
            LayerSpec::Relu,
            LayerSpec::Concat,
            LayerSpec::FullyConnected { input: 5, output: 2 },
        ],
        2,
        3,
        4,
    );
}

#[test]
fn dense_block_gradients() {
    check(
        &[LayerSpec::DenseBlock { input: 6, layers: 4, growth: 4 }],
        3,
        6,
        5,
    );
}

#[test]
fn regular_dropout_gradients() {
    check(
        &[
            LayerSpec::FullyConnected { input: 4, output: 4 },
            LayerSpec::Relu,
            LayerSpec::DropoutRegular { p: 0.3 },
            LayerSpec::FullyConnected { input: 4, output: 2 },
        ],
        3,
        4,
        6,
    );
}

#[test]
fn variational_dropout_gradients() {
    // Exercises both the noise path and the KL path of log_alpha.
    check(
        &[
            LayerSpec::FullyConnected { input: 4, output: 4 },
            LayerSpec::DropoutVariational { init_log_alpha: -1.2 },
            LayerSpec::FullyConnected { input: 4, output: 2 },
        ],
        3,
        4,
        7,
    );
}

#[test]
fn targeted_dropout_gradients() {
    // Weight magnitudes are spaced far apart relative to the probe step so
    // the target set is locally constant and the masked loss differentiable.
    let mut stack = build_stack(
        &[
            LayerSpec::FullyConnected { input: 3, output: 2 },
            LayerSpec::DropoutTargeted { gamma: 0.5, alpha: 1.0 },
        ],
        &mut rng(8),
    )
    .unwrap();
    if let Layer::Fc(fc) = &mut stack.layers[0] {
        fc.weight.value.data = vec![0.9, -0.05, 0.4, 0.02, -0.7, 0.15];
        fc.bias.value.data = vec![0.1, -0.2];
    }
    let x = input(3, 3, 8);
    check_stack_gradients(&mut stack, &x, 99, TOL).unwrap();
}

#[test]
fn mlp_unit_gradients() {
    check(
        &[
            LayerSpec::FullyConnected { input: 6, output: 8 },
            LayerSpec::BatchNorm { dim: 8 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { input: 8, output: 8 },
            LayerSpec::BatchNorm { dim: 8 },
            LayerSpec::Relu,
            LayerSpec::FullyConnected { input: 8, output: 4 },
        ],
        4,
        6,
        9,
    );
}

// ---------------------------------------------------------------------------
// Full-network check
// ---------------------------------------------------------------------------

fn subject(id: &str, salt: f64) -> LandmarkSet {
    let mut map = std::collections::BTreeMap::new();
    for (i, name) in ALL_LANDMARKS.into_iter().enumerate() {
        map.insert(
            name,
            [
                40.0 + 13.0 * i as f64 + salt,
                90.0 - 7.0 * i as f64 - 2.0 * salt,
                15.0 + 11.0 * i as f64 + 0.5 * salt,
            ],
        );
    }
    LandmarkSet::new(id, [0.5, 0.5, 0.5], map).unwrap()
}

fn model_config(dropout: DropoutMode) -> RrnConfig {
    RrnConfig {
        input_names: vec![LandmarkName::Me, LandmarkName::CdL, LandmarkName::CdR],
        target_names: vec![LandmarkName::Gn, LandmarkName::Pg],
        ru_variant: RuVariant::Mlp { hidden: 8 },
        relation_dim: 8,
        dropout,
        share_pairwise: false,
    }
}

/// Branch-wise squared-error loss of the whole network on a fixed batch,
/// with the RNG reseeded per call so stochastic layers replay identically.
fn model_loss(
    model: &mut RrnModel,
    features: &[Tensor],
    targets: &Tensor,
    seed: u64,
    kl_scale: f64,
) -> f64 {
    let mut r = rng(seed);
    let branches = model.forward_batch(features, Mode::Train, &mut r).unwrap();
    let n = branches.len();
    let batch = targets.rows();
    let width = targets.cols();
    let denom = (batch * n * (width / 3)) as f64;
    let mut loss = 0.0;
    for b in &branches {
        for r in 0..batch {
            for j in 0..width {
                let d = b.row(r)[j] - targets.row(r)[j];
                loss += d * d;
            }
        }
    }
    loss / denom + kl_scale * model.kl()
}

fn full_model_check(dropout: DropoutMode, seed: u64) {
    // Composite step: the stacked batch-norms give the full network much
    // higher curvature than any single layer, so probe with a finer step
    // (roundoff stays ~1e-11, far below the tolerance).
    let step = FD_STEP / 10.0;
    let kl_scale = match dropout {
        DropoutMode::Variational { .. } => 0.01,
        _ => 0.0,
    };
    let mut model = RrnModel::build(model_config(dropout), seed).unwrap();
    // Batch of four: batch-norm curvature at batch 2 is too extreme for a
    // fixed 1e-4 probe step.
    let sets = [
        subject("a", 0.0),
        subject("b", 3.7),
        subject("c", -2.9),
        subject("d", 7.3),
    ];
    let refs: Vec<&LandmarkSet> = sets.iter().collect();

    // Standardize features and targets like the training loop would, so the
    // probed loss surface is well conditioned.
    let mut feat_rows = Vec::new();
    let mut target_rows = Vec::new();
    for set in &refs {
        for f in model.subject_features(set).unwrap() {
            feat_rows.push(f.to_vec());
        }
        let mut t = Vec::new();
        for name in &model.config.target_names {
            t.extend_from_slice(&set.get(*name).unwrap());
        }
        target_rows.push(t);
    }
    model.feature_norm = rrn_core::AffineNormalizer::fit(&feat_rows).unwrap();
    model.target_norm = rrn_core::AffineNormalizer::fit(&target_rows).unwrap();

    let features = model.feature_matrices(&refs).unwrap();
    let m = model.config.m();
    let mut targets = Tensor::zeros(&[sets.len(), 3 * m]);
    for (row, t) in target_rows.iter().enumerate() {
        let mut t = t.clone();
        model.target_norm.apply(&mut t);
        targets.row_mut(row).copy_from_slice(&t);
    }

    // Analytic gradients.
    model.zero_grads();
    let mut r = rng(seed ^ 0xf00d);
    let branches = model.forward_batch(&features, Mode::Train, &mut r).unwrap();
    let n = branches.len();
    let batch = targets.rows();
    let width = targets.cols();
    let denom = (batch * n * (width / 3)) as f64;
    let grads: Vec<Tensor> = branches
        .iter()
        .map(|b| {
            let mut g = Tensor::zeros(&b.shape);
            for r in 0..batch {
                for j in 0..width {
                    g.row_mut(r)[j] = 2.0 * (b.row(r)[j] - targets.row(r)[j]) / denom;
                }
            }
            g
        })
        .collect();
    model.backward_batch(&grads).unwrap();
    if kl_scale > 0.0 {
        model.add_kl_grads(kl_scale);
    }

    let mut entries: Vec<(String, usize, f64)> = Vec::new();
    model.visit_params(&mut |name, p| {
        let g = p.grad.as_ref().expect("grad populated");
        for (i, v) in g.data.iter().enumerate() {
            entries.push((name.to_string(), i, *v));
        }
    });
    assert!(entries.len() > 2000, "expected a real parameter count");

    // Numerical verification over every parameter slot.
    let mut worst = 0.0f64;
    for (name, idx, analytic) in &entries {
        let mut orig = 0.0;
        model.visit_params_mut(&mut |n, p| {
            if n == name {
                orig = p.value.data[*idx];
            }
        });
        let mut set_val = |model: &mut RrnModel, v: f64| {
            model.visit_params_mut(&mut |n, p| {
                if n == name {
                    p.value.data[*idx] = v;
                }
            });
        };
        set_val(&mut model, orig + step);
        let plus = model_loss(&mut model, &features, &targets, seed ^ 0xf00d, kl_scale);
        set_val(&mut model, orig - step);
        let minus = model_loss(&mut model, &features, &targets, seed ^ 0xf00d, kl_scale);
        set_val(&mut model, orig);
        let numeric = (plus - minus) / (2.0 * step);
        // Track the worst error among slots above the FD noise floor.
        let diff = (analytic - numeric).abs();
        if diff > 1e-9 {
            worst = worst.max(diff / analytic.abs().max(numeric.abs()));
        }
        assert!(
            grads_agree(*analytic, numeric, TOL),
            "param {name}[{idx}]: analytic {analytic} vs numeric {numeric}"
        );
    }
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn full_rrn_gradients_no_dropout() {
    full_model_check(DropoutMode::None, 21);
}

#[test]
fn full_rrn_gradients_variational() {
    full_model_check(DropoutMode::Variational { init_log_alpha: -3.0 }, 22);
}

#[test]
fn full_rrn_gradients_regular_dropout() {
    full_model_check(DropoutMode::Regular { p: 0.2 }, 23);
}

/// The spare `Stack` surface should reject misuse cleanly even under the
/// gradient checker's unusual call pattern.
#[test]
fn gradcheck_rejects_shape_mismatch() {
    let mut stack = build_stack(
        &[LayerSpec::FullyConnected { input: 4, output: 2 }],
        &mut rng(30),
    )
    .unwrap();
    let x = input(2, 3, 30);
    assert!(check_stack_gradients(&mut stack, &x, 1, TOL).is_err());
}

/// Determinism guard: two identical train-mode passes with the same seed
/// produce bit-identical outputs even with every stochastic layer active.
#[test]
fn train_forward_is_seed_deterministic() {
    let specs = [
        LayerSpec::FullyConnected { input: 5, output: 6 },
        LayerSpec::BatchNorm { dim: 6 },
        LayerSpec::Relu,
        LayerSpec::DropoutRegular { p: 0.4 },
        LayerSpec::DropoutVariational { init_log_alpha: -1.0 },
        LayerSpec::FullyConnected { input: 6, output: 3 },
    ];
    let x = input(4, 5, 31);
    let run = |stack: &mut Stack| {
        let mut r = rng(77);
        stack.forward(&x, Mode::Train, &mut r).unwrap().data
    };
    let mut s1 = build_stack(&specs, &mut rng(31)).unwrap();
    let mut s2 = build_stack(&specs, &mut rng(31)).unwrap();
    assert_eq!(run(&mut s1), run(&mut s2));
}
