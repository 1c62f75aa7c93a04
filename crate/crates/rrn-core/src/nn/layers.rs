//! Layer set and sequential stacks with hand-written backward passes.
//!
//! Stacks process `[batch, features]` tensors. Train-mode forwards cache
//! whatever the backward pass needs; eval-mode forwards are pure and free of
//! stochastic operations, so a trained stack can be shared read-only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RrnError};
use crate::nn::dropout::{
    targeted_mask, variational_kl_grad_log_alpha, variational_kl_per_unit, variational_noise,
};
use crate::nn::tensor::{Param, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Declarative description of one layer; `build_stack` turns a list of these
/// into a runnable [`Stack`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    FullyConnected { input: usize, output: usize },
    BatchNorm { dim: usize },
    Relu,
    /// Concatenates the stack's original input onto the current features.
    Concat,
    DenseBlock { input: usize, layers: usize, growth: usize },
    DropoutRegular { p: f64 },
    DropoutVariational { init_log_alpha: f64 },
    /// Weight-magnitude dropout applied to the immediately preceding
    /// fully-connected layer (or to every layer inside a preceding dense
    /// block).
    DropoutTargeted { gamma: f64, alpha: f64 },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RrnError::Config(msg));
        match *self {
            LayerSpec::FullyConnected { input, output } => {
                if input == 0 || output == 0 {
                    return bad(format!("fully-connected dims must be positive, got {input}x{output}"));
                }
            }
            LayerSpec::BatchNorm { dim } => {
                if dim == 0 {
                    return bad("batch-norm dim must be positive".into());
                }
            }
            LayerSpec::DenseBlock { input, layers, growth } => {
                if input == 0 || layers == 0 || growth == 0 {
                    return bad(format!(
                        "dense-block dims must be positive, got input {input}, layers {layers}, growth {growth}"
                    ));
                }
            }
            LayerSpec::DropoutRegular { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("dropout rate p = {p} must lie in [0, 1)"));
                }
            }
            LayerSpec::DropoutVariational { init_log_alpha } => {
                if !init_log_alpha.is_finite() {
                    return bad("init_log_alpha must be finite".into());
                }
            }
            LayerSpec::DropoutTargeted { gamma, alpha } => {
                if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&alpha) {
                    return bad(format!(
                        "targeted dropout rates gamma = {gamma}, alpha = {alpha} must lie in [0, 1]"
                    ));
                }
            }
            LayerSpec::Relu | LayerSpec::Concat => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetedCfg {
    pub gamma: f64,
    pub alpha: f64,
}

// ---------------------------------------------------------------------------
// Individual layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FcLayer {
    pub input: usize,
    pub output: usize,
    /// Row-major `[input, output]`.
    pub weight: Param,
    pub bias: Param,
    pub targeted: Option<TargetedCfg>,
    #[serde(skip)]
    cache: Option<FcCache>,
}

#[derive(Debug, Clone)]
struct FcCache {
    x: Tensor,
    /// Masked weights actually used in the forward pass, when targeted
    /// dropout fired.
    masked: Option<(Vec<f64>, Vec<bool>)>,
}

impl FcLayer {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        // He-uniform initialization for ReLU stacks.
        let bound = (6.0 / input as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        FcLayer {
            input,
            output,
            weight: Param::new(Tensor::from_vec(&[input, output], w).unwrap()),
            bias: Param::new(Tensor::zeros(&[output])),
            targeted: None,
            cache: None,
        }
    }

    fn affine(&self, x: &Tensor, w: &[f64]) -> Tensor {
        let rows = x.rows();
        let mut y = Tensor::zeros(&[rows, self.output]);
        for r in 0..rows {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            yr.copy_from_slice(&self.bias.value.data);
            for (k, &xv) in xr.iter().enumerate() {
                let wrow = &w[k * self.output..(k + 1) * self.output];
                for (yv, wv) in yr.iter_mut().zip(wrow) {
                    *yv += xv * wv;
                }
            }
        }
        y
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        x.expect_cols(self.input)?;
        match mode {
            Mode::Eval => Ok(self.affine(x, &self.weight.value.data)),
            Mode::Train => {
                let masked = self.targeted.map(|cfg| {
                    targeted_mask(&self.weight.value.data, cfg.gamma, cfg.alpha, rng)
                });
                let y = match &masked {
                    Some((w, _)) => self.affine(x, w),
                    None => self.affine(x, &self.weight.value.data),
                };
                self.cache = Some(FcCache { x: x.clone(), masked });
                Ok(y)
            }
        }
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_cols(self.input)?;
        Ok(self.affine(x, &self.weight.value.data))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| RrnError::State("fully-connected backward before forward".into()))?;
        grad.expect_cols(self.output)?;
        let rows = grad.rows();
        let x = &cache.x;
        let mut dw = self
            .weight
            .grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.weight.value.shape));
        let w_used: &[f64] = match &cache.masked {
            Some((w, _)) => w,
            None => &self.weight.value.data,
        };

        let mut dx = Tensor::zeros(&[rows, self.input]);
        for r in 0..rows {
            let gr = grad.row(r);
            let xr = x.row(r);
            let dxr = dx.row_mut(r);
            for k in 0..self.input {
                let wrow = &w_used[k * self.output..(k + 1) * self.output];
                let dwrow = &mut dw.data[k * self.output..(k + 1) * self.output];
                let xv = xr[k];
                let mut acc = 0.0;
                for j in 0..self.output {
                    acc += gr[j] * wrow[j];
                    dwrow[j] += xv * gr[j];
                }
                dxr[k] = acc;
            }
        }
        if let Some((_, keep)) = &cache.masked {
            for (g, k) in dw.data.iter_mut().zip(keep) {
                if !*k {
                    *g = 0.0;
                }
            }
        }
        self.weight.grad = Some(dw);
        let db = self.bias.grad_mut();
        for r in 0..rows {
            for (d, g) in db.data.iter_mut().zip(grad.row(r)) {
                *d += g;
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnLayer {
    pub dim: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    #[serde(skip)]
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BnLayer {
    pub fn new(dim: usize) -> Self {
        BnLayer {
            dim,
            gamma: Param::new(Tensor::from_vec(&[dim], vec![1.0; dim]).unwrap()),
            beta: Param::new(Tensor::zeros(&[dim])),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        x.expect_cols(self.dim)?;
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                let rows = x.rows();
                let n = rows as f64;
                let mut mean = vec![0.0; self.dim];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= n;
                }
                let mut var = vec![0.0; self.dim];
                for r in 0..rows {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                for v in &mut var {
                    *v /= n;
                }
                for j in 0..self.dim {
                    self.running_mean[j] = BN_MOMENTUM * self.running_mean[j] + (1.0 - BN_MOMENTUM) * mean[j];
                    self.running_var[j] = BN_MOMENTUM * self.running_var[j] + (1.0 - BN_MOMENTUM) * var[j];
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = Tensor::zeros(&x.shape);
                let mut y = Tensor::zeros(&x.shape);
                for r in 0..rows {
                    let xr = x.row(r);
                    let hr = xhat.row_mut(r);
                    for j in 0..self.dim {
                        hr[j] = (xr[j] - mean[j]) * inv_std[j];
                    }
                    let yr = y.row_mut(r);
                    for j in 0..self.dim {
                        yr[j] = self.gamma.value.data[j] * xhat.row(r)[j] + self.beta.value.data[j];
                    }
                }
                self.cache = Some(BnCache { xhat, inv_std });
                Ok(y)
            }
        }
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_cols(self.dim)?;
        let rows = x.rows();
        let mut y = Tensor::zeros(&x.shape);
        for r in 0..rows {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for j in 0..self.dim {
                let inv = 1.0 / (self.running_var[j] + BN_EPS).sqrt();
                yr[j] = self.gamma.value.data[j] * (xr[j] - self.running_mean[j]) * inv
                    + self.beta.value.data[j];
            }
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| RrnError::State("batch-norm backward before forward".into()))?;
        grad.expect_cols(self.dim)?;
        let rows = grad.rows();
        let n = rows as f64;
        let mut g_mean = vec![0.0; self.dim];
        let mut gx_mean = vec![0.0; self.dim];
        for r in 0..rows {
            let gr = grad.row(r);
            let hr = cache.xhat.row(r);
            for j in 0..self.dim {
                g_mean[j] += gr[j];
                gx_mean[j] += gr[j] * hr[j];
            }
        }
        for j in 0..self.dim {
            g_mean[j] /= n;
            gx_mean[j] /= n;
        }
        {
            let dgamma = self.gamma.grad_mut();
            for j in 0..self.dim {
                dgamma.data[j] += gx_mean[j] * n;
            }
        }
        {
            let dbeta = self.beta.grad_mut();
            for j in 0..self.dim {
                dbeta.data[j] += g_mean[j] * n;
            }
        }
        let mut dx = Tensor::zeros(&grad.shape);
        for r in 0..rows {
            let gr = grad.row(r);
            let hr = cache.xhat.row(r);
            let dr = dx.row_mut(r);
            for j in 0..self.dim {
                dr[j] = self.gamma.value.data[j]
                    * cache.inv_std[j]
                    * (gr[j] - g_mean[j] - hr[j] * gx_mean[j]);
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReluLayer {
    #[serde(skip)]
    cache: Option<Vec<bool>>,
}

impl ReluLayer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for v in &mut y.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if mode == Mode::Train {
            self.cache = Some(x.data.iter().map(|v| *v > 0.0).collect());
        }
        Ok(y)
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for v in &mut y.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mask = self
            .cache
            .take()
            .ok_or_else(|| RrnError::State("relu backward before forward".into()))?;
        let mut dx = grad.clone();
        for (g, on) in dx.data.iter_mut().zip(&mask) {
            if !on {
                *g = 0.0;
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConcatLayer {
    #[serde(skip)]
    left_cols: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropoutRegularLayer {
    pub p: f64,
    #[serde(skip)]
    cache: Option<Vec<f64>>,
}

impl DropoutRegularLayer {
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if mode == Mode::Eval || self.p == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep_scale })
            .collect();
        let mut y = x.clone();
        for (v, m) in y.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.cache = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        if self.p == 0.0 {
            return Ok(grad.clone());
        }
        let mask = self
            .cache
            .take()
            .ok_or_else(|| RrnError::State("dropout backward before forward".into()))?;
        let mut dx = grad.clone();
        for (g, m) in dx.data.iter_mut().zip(&mask) {
            *g *= m;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropoutVariationalLayer {
    /// Width of the activation vector the noise applies to; scales the KL
    /// contribution.
    pub width: usize,
    /// Learned scalar `log(alpha)`.
    pub log_alpha: Param,
    #[serde(skip)]
    cache: Option<(Tensor, Vec<f64>)>,
}

impl DropoutVariationalLayer {
    pub fn new(width: usize, init_log_alpha: f64) -> Self {
        DropoutVariationalLayer {
            width,
            log_alpha: Param::new(Tensor::from_vec(&[1], vec![init_log_alpha]).unwrap()),
            cache: None,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value.data[0].exp()
    }

    pub fn kl(&self) -> f64 {
        self.width as f64 * variational_kl_per_unit(self.alpha())
    }

    pub fn add_kl_grad(&mut self, scale: f64) {
        let a = self.alpha();
        let w = self.width as f64;
        self.log_alpha.grad_mut().data[0] += scale * w * variational_kl_grad_log_alpha(a);
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if mode == Mode::Eval {
            // Posterior-mean pass: the multiplicative noise has mean 1.
            return Ok(x.clone());
        }
        let sqrt_a = self.alpha().sqrt();
        let eps = variational_noise(x.len(), rng);
        let mut y = x.clone();
        for (v, e) in y.data.iter_mut().zip(&eps) {
            *v *= 1.0 + sqrt_a * e;
        }
        self.cache = Some((x.clone(), eps));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, eps) = self
            .cache
            .take()
            .ok_or_else(|| RrnError::State("variational dropout backward before forward".into()))?;
        let sqrt_a = self.alpha().sqrt();
        let mut dx = grad.clone();
        let mut dla = 0.0;
        for ((g, e), xv) in dx.data.iter_mut().zip(&eps).zip(&x.data) {
            dla += *g * xv * e * sqrt_a / 2.0;
            *g *= 1.0 + sqrt_a * e;
        }
        self.log_alpha.grad_mut().data[0] += dla;
        Ok(dx)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseSub {
    pub fc: FcLayer,
    pub bn: BnLayer,
    pub relu: ReluLayer,
}

/// Dense block: each of `layers` steps projects the running feature vector
/// down to `growth` new features (fully connected + batch norm + ReLU) and
/// concatenates them back on, so the output width is
/// `input + layers * growth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseBlockLayer {
    pub input: usize,
    pub growth: usize,
    pub subs: Vec<DenseSub>,
}

impl DenseBlockLayer {
    pub fn new(input: usize, layers: usize, growth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut subs = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_dim = input + l * growth;
            subs.push(DenseSub {
                fc: FcLayer::new(in_dim, growth, rng),
                bn: BnLayer::new(growth),
                relu: ReluLayer::default(),
            });
        }
        DenseBlockLayer {
            input,
            growth,
            subs,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.input + self.subs.len() * self.growth
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        x.expect_cols(self.input)?;
        let mut cur = x.clone();
        for sub in &mut self.subs {
            let h = sub.fc.forward(&cur, mode, rng)?;
            let h = sub.bn.forward(&h, mode)?;
            let h = sub.relu.forward(&h, mode)?;
            cur = Tensor::hcat(&cur, &h)?;
        }
        Ok(cur)
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_cols(self.input)?;
        let mut cur = x.clone();
        for sub in &self.subs {
            let h = sub.fc.forward_eval(&cur)?;
            let h = sub.bn.forward_eval(&h)?;
            let h = sub.relu.forward_eval(&h)?;
            cur = Tensor::hcat(&cur, &h)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        grad.expect_cols(self.out_dim())?;
        let mut g_cur = grad.clone();
        for (l, sub) in self.subs.iter_mut().enumerate().rev() {
            let split_at = self.input + l * self.growth;
            let (g_prev, g_h) = g_cur.hsplit(split_at);
            let g = sub.relu.backward(&g_h)?;
            let g = sub.bn.backward(&g)?;
            let g = sub.fc.backward(&g)?;
            g_cur = g_prev;
            g_cur.add_assign(&g);
        }
        Ok(g_cur)
    }
}

// ---------------------------------------------------------------------------
// Layer enum + stack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Fc(FcLayer),
    Bn(BnLayer),
    Relu(ReluLayer),
    Concat(ConcatLayer),
    DenseBlock(DenseBlockLayer),
    DropoutRegular(DropoutRegularLayer),
    DropoutVariational(DropoutVariationalLayer),
}

impl Layer {
    fn tag(&self) -> &'static str {
        match self {
            Layer::Fc(_) => "fc",
            Layer::Bn(_) => "bn",
            Layer::Relu(_) => "relu",
            Layer::Concat(_) => "concat",
            Layer::DenseBlock(_) => "db",
            Layer::DropoutRegular(_) => "drop",
            Layer::DropoutVariational(_) => "vdrop",
        }
    }
}

/// Sequential stack of layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<Layer>,
    #[serde(skip)]
    input_cache: Option<Tensor>,
}

/// Builds a runnable stack from layer specs.
///
/// `DropoutTargeted` entries are folded into the weights of the preceding
/// fully-connected layer (or every fully-connected layer of a preceding
/// dense block); they occupy no slot of their own at run time.
pub fn build_stack(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Stack> {
    let mut layers: Vec<Layer> = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        match *spec {
            LayerSpec::FullyConnected { input, output } => {
                layers.push(Layer::Fc(FcLayer::new(input, output, rng)));
            }
            LayerSpec::BatchNorm { dim } => layers.push(Layer::Bn(BnLayer::new(dim))),
            LayerSpec::Relu => layers.push(Layer::Relu(ReluLayer::default())),
            LayerSpec::Concat => layers.push(Layer::Concat(ConcatLayer::default())),
            LayerSpec::DenseBlock { input, layers: n, growth } => {
                layers.push(Layer::DenseBlock(DenseBlockLayer::new(input, n, growth, rng)));
            }
            LayerSpec::DropoutRegular { p } => {
                layers.push(Layer::DropoutRegular(DropoutRegularLayer { p, cache: None }));
            }
            LayerSpec::DropoutVariational { init_log_alpha } => {
                // Width is resolved lazily on first forward; 0 marks unset.
                layers.push(Layer::DropoutVariational(DropoutVariationalLayer::new(
                    0,
                    init_log_alpha,
                )));
            }
            LayerSpec::DropoutTargeted { gamma, alpha } => {
                let cfg = TargetedCfg { gamma, alpha };
                match layers.last_mut() {
                    Some(Layer::Fc(fc)) => fc.targeted = Some(cfg),
                    Some(Layer::DenseBlock(db)) => {
                        for sub in &mut db.subs {
                            sub.fc.targeted = Some(cfg);
                        }
                    }
                    _ => {
                        return Err(RrnError::Config(
                            "targeted dropout must follow a fully-connected or dense-block layer"
                                .into(),
                        ))
                    }
                }
            }
        }
    }
    Ok(Stack {
        layers,
        input_cache: None,
    })
}

impl Stack {
    /// Runs the stack. Train mode caches intermediate state for
    /// [`Stack::backward`]; eval mode is deterministic and stateless.
    pub fn forward(&mut self, input: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.forward_eval(input);
        }
        self.input_cache = Some(input.clone());
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = match layer {
                Layer::Fc(l) => l.forward(&x, mode, rng)?,
                Layer::Bn(l) => l.forward(&x, mode)?,
                Layer::Relu(l) => l.forward(&x, mode)?,
                Layer::Concat(c) => {
                    c.left_cols = Some(x.cols());
                    Tensor::hcat(&x, self.input_cache.as_ref().unwrap())?
                }
                Layer::DenseBlock(l) => l.forward(&x, mode, rng)?,
                Layer::DropoutRegular(l) => l.forward(&x, mode, rng)?,
                Layer::DropoutVariational(l) => {
                    if l.width == 0 {
                        l.width = x.cols();
                    }
                    l.forward(&x, mode, rng)?
                }
            };
        }
        Ok(x)
    }

    /// Pure eval-mode pass usable on a shared reference.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Fc(l) => l.forward_eval(&x)?,
                Layer::Bn(l) => l.forward_eval(&x)?,
                Layer::Relu(l) => l.forward_eval(&x)?,
                Layer::Concat(_) => Tensor::hcat(&x, input)?,
                Layer::DenseBlock(l) => l.forward_eval(&x)?,
                Layer::DropoutRegular(_) | Layer::DropoutVariational(_) => x,
            };
        }
        Ok(x)
    }

    /// Backpropagates `grad` through the stack, accumulating parameter
    /// gradients and returning the gradient with respect to the input.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let input = self
            .input_cache
            .take()
            .ok_or_else(|| RrnError::State("stack backward before train-mode forward".into()))?;
        let mut g = grad.clone();
        let mut g_input_extra: Option<Tensor> = None;
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Fc(l) => l.backward(&g)?,
                Layer::Bn(l) => l.backward(&g)?,
                Layer::Relu(l) => l.backward(&g)?,
                Layer::Concat(c) => {
                    let left = c.left_cols.take().ok_or_else(|| {
                        RrnError::State("concat backward before forward".into())
                    })?;
                    let (g_left, g_in) = g.hsplit(left);
                    match &mut g_input_extra {
                        Some(acc) => acc.add_assign(&g_in),
                        None => g_input_extra = Some(g_in),
                    }
                    g_left
                }
                Layer::DenseBlock(l) => l.backward(&g)?,
                Layer::DropoutRegular(l) => l.backward(&g)?,
                Layer::DropoutVariational(l) => l.backward(&g)?,
            };
        }
        if let Some(extra) = g_input_extra {
            g.add_assign(&extra);
        }
        let _ = input;
        Ok(g)
    }

    /// Sum of the KL penalties of all variational layers.
    pub fn kl(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::DropoutVariational(v) => v.kl(),
                _ => 0.0,
            })
            .sum()
    }

    /// Adds `scale * dKL/dtheta` into the gradients of variational
    /// parameters.
    pub fn add_kl_grads(&mut self, scale: f64) {
        for layer in &mut self.layers {
            if let Layer::DropoutVariational(v) = layer {
                v.add_kl_grad(scale);
            }
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let base = format!("{prefix}{i}.{}", layer.tag());
            match layer {
                Layer::Fc(l) => {
                    f(&format!("{base}.w"), &l.weight);
                    f(&format!("{base}.b"), &l.bias);
                }
                Layer::Bn(l) => {
                    f(&format!("{base}.gamma"), &l.gamma);
                    f(&format!("{base}.beta"), &l.beta);
                }
                Layer::DenseBlock(l) => {
                    for (s, sub) in l.subs.iter().enumerate() {
                        f(&format!("{base}.l{s}.fc.w"), &sub.fc.weight);
                        f(&format!("{base}.l{s}.fc.b"), &sub.fc.bias);
                        f(&format!("{base}.l{s}.bn.gamma"), &sub.bn.gamma);
                        f(&format!("{base}.l{s}.bn.beta"), &sub.bn.beta);
                    }
                }
                Layer::DropoutVariational(l) => {
                    f(&format!("{base}.log_alpha"), &l.log_alpha);
                }
                _ => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let base = format!("{prefix}{i}.{}", layer.tag());
            match layer {
                Layer::Fc(l) => {
                    f(&format!("{base}.w"), &mut l.weight);
                    f(&format!("{base}.b"), &mut l.bias);
                }
                Layer::Bn(l) => {
                    f(&format!("{base}.gamma"), &mut l.gamma);
                    f(&format!("{base}.beta"), &mut l.beta);
                }
                Layer::DenseBlock(l) => {
                    for (s, sub) in l.subs.iter_mut().enumerate() {
                        f(&format!("{base}.l{s}.fc.w"), &mut sub.fc.weight);
                        f(&format!("{base}.l{s}.fc.b"), &mut sub.fc.bias);
                        f(&format!("{base}.l{s}.bn.gamma"), &mut sub.bn.gamma);
                        f(&format!("{base}.l{s}.bn.beta"), &mut sub.bn.beta);
                    }
                }
                Layer::DropoutVariational(l) => {
                    f(&format!("{base}.log_alpha"), &mut l.log_alpha);
                }
                _ => {}
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }
}
