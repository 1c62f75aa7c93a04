//! Finite-difference gradient checking.
//!
//! The numerical side only ever calls forward passes, so it stays
//! independent of the analytic backward implementations it verifies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::layers::{Mode, Stack};
use crate::nn::tensor::Tensor;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Relative-error agreement between an analytic and a numerical gradient
/// entry. Differences below the central-difference noise floor count as
/// agreement regardless of scale.
pub fn grads_agree(analytic: f64, numeric: f64, tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-8 {
        return true;
    }
    let scale = analytic.abs().max(numeric.abs());
    diff / scale < tol
}

/// Central finite difference of `f` with respect to a single scalar slot,
/// accessed through `get`/`set` closures.
pub fn central_difference<F, G, S>(mut f: F, get: G, set: S, step: f64) -> f64
where
    F: FnMut() -> f64,
    G: Fn() -> f64,
    S: Fn(f64),
{
    let orig = get();
    set(orig + step);
    let plus = f();
    set(orig - step);
    let minus = f();
    set(orig);
    (plus - minus) / (2.0 * step)
}

/// Deterministic projection coefficient, used to reduce a stack output to a
/// scalar test loss with non-degenerate gradients everywhere.
fn proj_coeff(i: usize) -> f64 {
    (0.7 + 1.3 * i as f64).sin() + 0.1
}

/// Scalar test loss: fixed random projection of the train-mode output plus
/// the stack's KL term. Stochastic layers replay the same draws because the
/// RNG is reseeded per call, so the loss is a deterministic function of the
/// parameters.
fn stack_loss(stack: &mut Stack, input: &Tensor, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = stack.forward(input, Mode::Train, &mut rng)?;
    let mut loss = 0.0;
    for (i, v) in out.data.iter().enumerate() {
        loss += proj_coeff(i) * v;
    }
    Ok(loss + stack.kl())
}

/// Report of one finite-difference sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub slots_checked: usize,
    pub max_rel_err: f64,
}

/// Verifies every parameter gradient and the input gradient of a stack
/// against central finite differences. Returns the worst relative error.
pub fn check_stack_gradients(
    stack: &mut Stack,
    input: &Tensor,
    seed: u64,
    tol: f64,
) -> Result<GradCheckReport> {
    // Analytic pass.
    stack.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = stack.forward(input, Mode::Train, &mut rng)?;
    let mut proj = Tensor::zeros(&out.shape);
    for (i, v) in proj.data.iter_mut().enumerate() {
        *v = proj_coeff(i);
    }
    let din = stack.backward(&proj)?;
    stack.add_kl_grads(1.0);

    let mut names: Vec<(String, usize)> = Vec::new();
    let mut analytic: Vec<f64> = Vec::new();
    stack.visit_params("", &mut |name, p| {
        let g = p.grad.as_ref().expect("gradient populated");
        for (i, v) in g.data.iter().enumerate() {
            names.push((name.to_string(), i));
            analytic.push(*v);
        }
    });

    let mut slots = 0usize;
    let mut max_rel: f64 = 0.0;
    for (slot, (name, idx)) in names.iter().enumerate() {
        let read = |stack: &mut Stack| {
            let mut v = 0.0;
            stack.visit_params_mut("", &mut |n, p| {
                if n == name {
                    v = p.value.data[*idx];
                }
            });
            v
        };
        let write = |stack: &mut Stack, v: f64| {
            stack.visit_params_mut("", &mut |n, p| {
                if n == name {
                    p.value.data[*idx] = v;
                }
            });
        };
        let orig = read(stack);
        write(stack, orig + FD_STEP);
        let plus = stack_loss(stack, input, seed)?;
        write(stack, orig - FD_STEP);
        let minus = stack_loss(stack, input, seed)?;
        write(stack, orig);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[slot];
        let scale = a.abs().max(numeric.abs());
        if scale >= 1e-8 {
            let rel = (a - numeric).abs() / scale;
            max_rel = max_rel.max(rel);
            assert!(
                grads_agree(a, numeric, tol),
                "param {name}[{idx}]: analytic {a} vs numeric {numeric}"
            );
        }
        slots += 1;
    }

    // Input gradient.
    let mut x = input.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        x.data[i] = orig + FD_STEP;
        let plus = stack_loss(stack, &x, seed)?;
        x.data[i] = orig - FD_STEP;
        let minus = stack_loss(stack, &x, seed)?;
        x.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = din.data[i];
        let scale = a.abs().max(numeric.abs());
        if scale >= 1e-8 {
            let rel = (a - numeric).abs() / scale;
            max_rel = max_rel.max(rel);
            assert!(
                grads_agree(a, numeric, tol),
                "input[{i}]: analytic {a} vs numeric {numeric}"
            );
        }
        slots += 1;
    }

    Ok(GradCheckReport {
        slots_checked: slots,
        max_rel_err: max_rel,
    })
}
