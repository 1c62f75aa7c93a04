//! Dropout primitives: regular, targeted (weight-magnitude) and variational
//! (multiplicative Gaussian noise with a learned rate).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Indices of the targeted-dropout candidate set: the `floor(gamma * n)`
/// weights of lowest magnitude. Ties break on index so the set is
/// deterministic for a given weight buffer.
pub fn target_set(weights: &[f64], gamma: f64) -> Vec<usize> {
    let k = ((gamma * weights.len() as f64).floor() as usize).min(weights.len());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[a]
            .abs()
            .partial_cmp(&weights[b].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Applies targeted dropout to a weight buffer: each weight in the target
/// set is independently zeroed with probability `alpha`; everything else
/// passes through. Returns the masked weights and the keep-mask.
pub fn targeted_mask(
    weights: &[f64],
    gamma: f64,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<bool>) {
    let mut keep = vec![true; weights.len()];
    for idx in target_set(weights, gamma) {
        if rng.random::<f64>() < alpha {
            keep[idx] = false;
        }
    }
    let masked = weights
        .iter()
        .zip(&keep)
        .map(|(w, k)| if *k { *w } else { 0.0 })
        .collect();
    (masked, keep)
}

/// Multiplicative Gaussian noise factors `1 + sqrt(alpha) * eps`,
/// `eps ~ N(0, 1)`, so each factor is `N(1, alpha)` distributed. Returns
/// the raw standard-normal draws for use in the backward pass.
pub fn variational_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// KL penalty per noised unit for noise rate `alpha`: the divergence
/// between `N(0, (1 + alpha))` and the unit-variance prior,
/// `0.5 * (alpha - ln(1 + alpha))`. Vanishes quadratically in the
/// noise-free limit and grows with the noise rate.
pub fn variational_kl_per_unit(alpha: f64) -> f64 {
    0.5 * (alpha - (1.0 + alpha).ln())
}

/// Derivative of [`variational_kl_per_unit`] with respect to `log(alpha)`.
pub fn variational_kl_grad_log_alpha(alpha: f64) -> f64 {
    0.5 * alpha * alpha / (1.0 + alpha)
}
