//! The relational reasoning network: n(n-1) pairwise relation units feeding
//! n fusion units through mean pairwise-relation vectors.
//!
//! For input landmarks `o_1..o_n`, every ordered pair `(o_i, o_j)` is encoded
//! by a relation unit `g`; the per-landmark mean relation `G_i` (over the
//! n-1 partners of `o_i`) feeds a fusion unit `f_i` that predicts all target
//! coordinates. The terminal prediction averages the n per-branch outputs.
//! Accumulations run in canonical landmark order, which also makes the
//! network exactly invariant to the order the input landmarks are listed in.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RrnError};
use crate::features::{pairwise_features, subject_d1, AffineNormalizer, FEATURE_DIM};
use crate::landmarks::{LandmarkName, LandmarkSet};
use crate::nn::layers::{build_stack, LayerSpec, Mode, Stack};
use crate::nn::tensor::{Param, Tensor};
use rand::SeedableRng;

/// Default output width of the pairwise relation units.
pub const DEFAULT_RELATION_DIM: usize = 64;
/// Default hidden width of the MLP relation unit.
pub const DEFAULT_MLP_HIDDEN: usize = 256;
/// Default regular-dropout rate.
pub const DEFAULT_DROPOUT_P: f64 = 0.2;
/// Default initial log noise rate for variational dropout (alpha ~ 0.1).
pub const DEFAULT_INIT_LOG_ALPHA: f64 = -2.302585092994046;
/// Default targeted-dropout rates.
pub const DEFAULT_TARGETED_GAMMA: f64 = 0.5;
pub const DEFAULT_TARGETED_ALPHA: f64 = 0.5;

/// Relation-unit architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RuVariant {
    /// Three fully-connected layers with two batch-norm + ReLU blocks.
    Mlp { hidden: usize },
    /// One dense block (4 layers, growth 4) followed by a projection.
    Dense,
}

/// Dropout regime applied inside every relation unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DropoutMode {
    None,
    Regular { p: f64 },
    Variational { init_log_alpha: f64 },
    Targeted { gamma: f64, alpha: f64 },
}

/// Full network configuration for one input/target landmark split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrnConfig {
    pub input_names: Vec<LandmarkName>,
    pub target_names: Vec<LandmarkName>,
    pub ru_variant: RuVariant,
    pub relation_dim: usize,
    pub dropout: DropoutMode,
    /// Ablation: use one shared pairwise unit instead of per-pair units.
    #[serde(default)]
    pub share_pairwise: bool,
}

impl RrnConfig {
    pub fn n(&self) -> usize {
        self.input_names.len()
    }

    pub fn m(&self) -> usize {
        self.target_names.len()
    }

    /// Input landmarks in canonical order; the fixed accumulation order.
    pub fn canonical_inputs(&self) -> Vec<LandmarkName> {
        let mut v = self.input_names.clone();
        v.sort_by_key(|n| n.canonical_index());
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() < 2 {
            return Err(RrnError::Config(format!(
                "need at least 2 input landmarks, got {}",
                self.n()
            )));
        }
        if self.m() < 1 {
            return Err(RrnError::Config("need at least 1 target landmark".into()));
        }
        if !self.input_names.contains(&LandmarkName::Me) {
            return Err(RrnError::Config(
                "Me must be an input landmark (feature reference origin)".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in self.input_names.iter().chain(&self.target_names) {
            if !seen.insert(*name) {
                return Err(RrnError::Config(format!(
                    "landmark {name} appears more than once across inputs and targets"
                )));
            }
        }
        if self.n() + self.m() > 14 {
            return Err(RrnError::Config(format!(
                "inputs + targets cover {} landmarks, more than the 14 available",
                self.n() + self.m()
            )));
        }
        if self.relation_dim == 0 {
            return Err(RrnError::Config("relation_dim must be positive".into()));
        }
        if let RuVariant::Mlp { hidden } = self.ru_variant {
            if hidden == 0 {
                return Err(RrnError::Config("mlp hidden width must be positive".into()));
            }
        }
        match self.dropout {
            DropoutMode::Regular { p } if !(0.0..1.0).contains(&p) => {
                return Err(RrnError::Config(format!("dropout p = {p} outside [0, 1)")))
            }
            DropoutMode::Targeted { gamma, alpha }
                if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&alpha) =>
            {
                return Err(RrnError::Config(format!(
                    "targeted dropout gamma = {gamma}, alpha = {alpha} outside [0, 1]"
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One pairwise relation unit, keyed by the ordered landmark pair it serves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairUnit {
    pub a: LandmarkName,
    pub b: LandmarkName,
    pub stack: Stack,
}

/// One fusion unit predicting all targets from one landmark's mean relation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionUnit {
    pub name: LandmarkName,
    pub stack: Stack,
}

/// Per-subject model output in pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Per input landmark (canonical order): one 3-vector per target.
    pub branches: Vec<(LandmarkName, Vec<[f64; 3]>)>,
    /// Branch average, aligned with the config's target order.
    pub terminal: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RrnModel {
    pub config: RrnConfig,
    /// Per ordered pair in canonical order, or a single shared unit.
    pub pairwise_units: Vec<PairUnit>,
    pub fusion_units: Vec<FusionUnit>,
    /// Standardization of the 19-component pair features (identity until
    /// fitted during training).
    pub feature_norm: AffineNormalizer,
    /// Standardization of the stacked target coordinates.
    pub target_norm: AffineNormalizer,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stable per-unit seed so identical landmark pairs get identical initial
/// weights regardless of input list order.
fn unit_seed(base: u64, role: u64, a: usize, b: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base ^ role) ^ a as u64) ^ b as u64)
}

fn ru_specs(
    variant: RuVariant,
    dropout: DropoutMode,
    input: usize,
    output: usize,
) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let targeted = match dropout {
        DropoutMode::Targeted { gamma, alpha } => Some(LayerSpec::DropoutTargeted { gamma, alpha }),
        _ => None,
    };
    let activation_drop = |specs: &mut Vec<LayerSpec>| match dropout {
        DropoutMode::Regular { p } => specs.push(LayerSpec::DropoutRegular { p }),
        DropoutMode::Variational { init_log_alpha } => {
            specs.push(LayerSpec::DropoutVariational { init_log_alpha })
        }
        _ => {}
    };
    match variant {
        RuVariant::Mlp { hidden } => {
            specs.push(LayerSpec::FullyConnected { input, output: hidden });
            if let Some(t) = &targeted {
                specs.push(t.clone());
            }
            specs.push(LayerSpec::BatchNorm { dim: hidden });
            specs.push(LayerSpec::Relu);
            activation_drop(&mut specs);
            specs.push(LayerSpec::FullyConnected { input: hidden, output: hidden });
            if let Some(t) = &targeted {
                specs.push(t.clone());
            }
            specs.push(LayerSpec::BatchNorm { dim: hidden });
            specs.push(LayerSpec::Relu);
            activation_drop(&mut specs);
            specs.push(LayerSpec::FullyConnected { input: hidden, output });
            if let Some(t) = &targeted {
                specs.push(t.clone());
            }
        }
        RuVariant::Dense => {
            specs.push(LayerSpec::DenseBlock { input, layers: 4, growth: 4 });
            if let Some(t) = &targeted {
                specs.push(t.clone());
            }
            activation_drop(&mut specs);
            specs.push(LayerSpec::FullyConnected { input: input + 16, output });
            if let Some(t) = &targeted {
                specs.push(t.clone());
            }
        }
    }
    specs
}

impl RrnModel {
    /// Builds a freshly initialized model: one pairwise unit per ordered
    /// input pair plus one fusion unit per input landmark.
    pub fn build(config: RrnConfig, seed: u64) -> Result<RrnModel> {
        config.validate()?;
        let inputs = config.canonical_inputs();
        let m = config.m();

        let mut pairwise_units = Vec::new();
        if config.share_pairwise {
            let mut rng = ChaCha8Rng::seed_from_u64(unit_seed(seed, 0x67, 0, 0));
            let specs = ru_specs(config.ru_variant, config.dropout, FEATURE_DIM, config.relation_dim);
            pairwise_units.push(PairUnit {
                a: inputs[0],
                b: inputs[0],
                stack: build_stack(&specs, &mut rng)?,
            });
        } else {
            for &a in &inputs {
                for &b in &inputs {
                    if a == b {
                        continue;
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(unit_seed(
                        seed,
                        0x67,
                        a.canonical_index(),
                        b.canonical_index(),
                    ));
                    let specs =
                        ru_specs(config.ru_variant, config.dropout, FEATURE_DIM, config.relation_dim);
                    pairwise_units.push(PairUnit {
                        a,
                        b,
                        stack: build_stack(&specs, &mut rng)?,
                    });
                }
            }
        }

        let mut fusion_units = Vec::new();
        for &name in &inputs {
            let mut rng =
                ChaCha8Rng::seed_from_u64(unit_seed(seed, 0x66, name.canonical_index(), 0));
            let specs = ru_specs(config.ru_variant, config.dropout, config.relation_dim, 3 * m);
            fusion_units.push(FusionUnit {
                name,
                stack: build_stack(&specs, &mut rng)?,
            });
        }

        Ok(RrnModel {
            feature_norm: AffineNormalizer::identity(FEATURE_DIM),
            target_norm: AffineNormalizer::identity(3 * m),
            config,
            pairwise_units,
            fusion_units,
        })
    }

    /// Total relation-unit count; `n^2` for the default per-pair layout.
    pub fn ru_count(&self) -> usize {
        self.pairwise_units.len() + self.fusion_units.len()
    }

    /// Ordered pairs in canonical accumulation order.
    pub fn ordered_pairs(&self) -> Vec<(LandmarkName, LandmarkName)> {
        let inputs = self.config.canonical_inputs();
        let mut pairs = Vec::with_capacity(inputs.len() * (inputs.len() - 1));
        for &a in &inputs {
            for &b in &inputs {
                if a != b {
                    pairs.push((a, b));
                }
            }
        }
        pairs
    }

    /// Raw (unnormalized) 19-component features for each ordered pair of one
    /// subject, in canonical pair order.
    pub fn subject_features(&self, set: &LandmarkSet) -> Result<Vec<[f64; FEATURE_DIM]>> {
        let d1 = subject_d1(set, &self.config.input_names)?;
        self.ordered_pairs()
            .into_iter()
            .map(|(a, b)| Ok(pairwise_features(set, a, b, d1)?.0))
            .collect()
    }

    /// Normalized per-pair feature matrices `[batch, 19]` for a batch of
    /// subjects.
    pub fn feature_matrices(&self, sets: &[&LandmarkSet]) -> Result<Vec<Tensor>> {
        let pairs = self.ordered_pairs();
        let mut mats: Vec<Tensor> = pairs
            .iter()
            .map(|_| Tensor::zeros(&[sets.len(), FEATURE_DIM]))
            .collect();
        for (row, set) in sets.iter().enumerate() {
            let feats = self.subject_features(set)?;
            for (p, f) in feats.iter().enumerate() {
                let dst = mats[p].row_mut(row);
                dst.copy_from_slice(f);
                self.feature_norm.apply(dst);
            }
        }
        Ok(mats)
    }

    fn pair_unit_index(&self, pair_pos: usize) -> usize {
        if self.config.share_pairwise {
            0
        } else {
            pair_pos
        }
    }

    /// Normalized-space branch outputs `[batch, 3m]` per input landmark
    /// (canonical order) for pre-assembled feature matrices.
    pub fn forward_batch(
        &mut self,
        features: &[Tensor],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        let inputs = self.config.canonical_inputs();
        let n = inputs.len();
        let pairs = self.ordered_pairs();
        if features.len() != pairs.len() {
            return Err(RrnError::Shape {
                expected: vec![pairs.len()],
                got: vec![features.len()],
            });
        }
        let batch = features.first().map(|f| f.rows()).unwrap_or(0);

        // Pairwise stage.
        let rels: Vec<Tensor> = if self.config.share_pairwise {
            let mut data = Vec::with_capacity(pairs.len() * batch * FEATURE_DIM);
            for f in features {
                data.extend_from_slice(&f.data);
            }
            let stacked = Tensor::matrix(pairs.len() * batch, FEATURE_DIM, data)?;
            let out = self.pairwise_units[0].stack.forward(&stacked, mode, rng)?;
            (0..pairs.len())
                .map(|p| {
                    let mut t = Tensor::zeros(&[batch, self.config.relation_dim]);
                    let w = self.config.relation_dim;
                    t.data.copy_from_slice(
                        &out.data[p * batch * w..(p + 1) * batch * w],
                    );
                    t
                })
                .collect()
        } else {
            let mut rels = Vec::with_capacity(pairs.len());
            for (p, f) in features.iter().enumerate() {
                let idx = self.pair_unit_index(p);
                rels.push(self.pairwise_units[idx].stack.forward(f, mode, rng)?);
            }
            rels
        };

        // Mean relation per input landmark, accumulated in canonical order.
        let scale = 1.0 / (n as f64 - 1.0);
        let mut branches = Vec::with_capacity(n);
        for (i, _) in inputs.iter().enumerate() {
            let mut g_mean = Tensor::zeros(&[batch, self.config.relation_dim]);
            for (p, (pa, _)) in pairs.iter().enumerate() {
                if *pa == inputs[i] {
                    g_mean.add_assign(&rels[p]);
                }
            }
            g_mean.scale(scale);
            let out = self.fusion_units[i].stack.forward(&g_mean, mode, rng)?;
            branches.push(out);
        }
        Ok(branches)
    }

    /// Backpropagates per-branch gradients `[batch, 3m]`, accumulating into
    /// every unit's parameter gradients.
    pub fn backward_batch(&mut self, branch_grads: &[Tensor]) -> Result<()> {
        let inputs = self.config.canonical_inputs();
        let n = inputs.len();
        if branch_grads.len() != n {
            return Err(RrnError::Shape {
                expected: vec![n],
                got: vec![branch_grads.len()],
            });
        }
        let pairs = self.ordered_pairs();
        let scale = 1.0 / (n as f64 - 1.0);

        let mut pair_grads: Vec<Option<Tensor>> = (0..pairs.len()).map(|_| None).collect();
        for (i, g) in branch_grads.iter().enumerate() {
            let mut d_gmean = self.fusion_units[i].stack.backward(g)?;
            d_gmean.scale(scale);
            for (p, (pa, _)) in pairs.iter().enumerate() {
                if *pa == inputs[i] {
                    pair_grads[p] = Some(d_gmean.clone());
                }
            }
        }

        if self.config.share_pairwise {
            let batch = pair_grads[0].as_ref().unwrap().rows();
            let w = self.config.relation_dim;
            let mut data = Vec::with_capacity(pairs.len() * batch * w);
            for g in &pair_grads {
                data.extend_from_slice(&g.as_ref().unwrap().data);
            }
            let stacked = Tensor::matrix(pairs.len() * batch, w, data)?;
            self.pairwise_units[0].stack.backward(&stacked)?;
        } else {
            // Reverse order mirrors the forward sequence.
            for p in (0..pairs.len()).rev() {
                let g = pair_grads[p].take().unwrap();
                self.pairwise_units[p].stack.backward(&g)?;
            }
        }
        Ok(())
    }

    /// Eval-mode prediction for a single subject, in pixel space.
    pub fn forward(&self, set: &LandmarkSet) -> Result<Prediction> {
        let feats = self.feature_matrices(&[set])?;
        let inputs = self.config.canonical_inputs();
        let m = self.config.m();
        let pairs = self.ordered_pairs();
        let scale = 1.0 / (inputs.len() as f64 - 1.0);

        let mut rels = Vec::with_capacity(pairs.len());
        for (p, f) in feats.iter().enumerate() {
            let idx = self.pair_unit_index(p);
            rels.push(self.pairwise_units[idx].stack.forward_eval(f)?);
        }

        let mut branches = Vec::with_capacity(inputs.len());
        for (i, &name) in inputs.iter().enumerate() {
            let mut g_mean = Tensor::zeros(&[1, self.config.relation_dim]);
            for (p, (pa, _)) in pairs.iter().enumerate() {
                if *pa == name {
                    g_mean.add_assign(&rels[p]);
                }
            }
            g_mean.scale(scale);
            let out = self.fusion_units[i].stack.forward_eval(&g_mean)?;
            let mut row = out.data;
            self.target_norm.invert(&mut row);
            let coords: Vec<[f64; 3]> =
                (0..m).map(|k| [row[3 * k], row[3 * k + 1], row[3 * k + 2]]).collect();
            branches.push((name, coords));
        }

        // Terminal prediction: arithmetic mean of the reported branches in
        // canonical order.
        let mut terminal = vec![[0.0; 3]; m];
        for (_, coords) in &branches {
            for (t, c) in terminal.iter_mut().zip(coords) {
                for axis in 0..3 {
                    t[axis] += c[axis];
                }
            }
        }
        let inv_n = 1.0 / inputs.len() as f64;
        for t in &mut terminal {
            for axis in 0..3 {
                t[axis] *= inv_n;
            }
        }
        Ok(Prediction { branches, terminal })
    }

    /// Terminal prediction converted to millimetres with the subject's voxel
    /// spacing.
    pub fn predict_mm(&self, set: &LandmarkSet) -> Result<BTreeMap<LandmarkName, [f64; 3]>> {
        let pred = self.forward(set)?;
        let mut out = BTreeMap::new();
        for (k, name) in self.config.target_names.iter().enumerate() {
            let px = pred.terminal[k];
            out.insert(
                *name,
                [
                    px[0] * set.spacing_mm[0],
                    px[1] * set.spacing_mm[1],
                    px[2] * set.spacing_mm[2],
                ],
            );
        }
        Ok(out)
    }

    /// Sum of KL penalties across all variational dropout layers.
    pub fn kl(&self) -> f64 {
        self.pairwise_units.iter().map(|u| u.stack.kl()).sum::<f64>()
            + self.fusion_units.iter().map(|u| u.stack.kl()).sum::<f64>()
    }

    pub fn add_kl_grads(&mut self, scale: f64) {
        for u in &mut self.pairwise_units {
            u.stack.add_kl_grads(scale);
        }
        for u in &mut self.fusion_units {
            u.stack.add_kl_grads(scale);
        }
    }

    pub fn zero_grads(&mut self) {
        for u in &mut self.pairwise_units {
            u.stack.zero_grads();
        }
        for u in &mut self.fusion_units {
            u.stack.zero_grads();
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        for u in &self.pairwise_units {
            u.stack.visit_params(&format!("g.{}.{}.", u.a, u.b), f);
        }
        for u in &self.fusion_units {
            u.stack.visit_params(&format!("f.{}.", u.name), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for u in &mut self.pairwise_units {
            u.stack.visit_params_mut(&format!("g.{}.{}.", u.a, u.b), f);
        }
        for u in &mut self.fusion_units {
            u.stack.visit_params_mut(&format!("f.{}.", u.name), f);
        }
    }

    /// Flattened copy of all parameter values, for determinism checks.
    pub fn param_snapshot(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name.to_string(), p.value.data.clone())));
        out
    }
}

/// The branch-wise squared-error loss over a pixel-space prediction:
/// `1/(n*m) * sum_i sum_k ||branch_i[k] - truth_k||^2`.
///
/// The terminal average is deliberately not part of the loss; every branch
/// is penalized against every target.
pub fn eq2_loss(
    pred: &Prediction,
    truth: &LandmarkSet,
    target_names: &[LandmarkName],
) -> Result<f64> {
    let n = pred.branches.len();
    let m = target_names.len();
    if n == 0 || m == 0 {
        return Err(RrnError::InvalidInput("empty prediction or target list".into()));
    }
    let mut total = 0.0;
    for (_, coords) in &pred.branches {
        for (k, name) in target_names.iter().enumerate() {
            let t = truth.get(*name)?;
            let c = coords[k];
            let d = [c[0] - t[0], c[1] - t[1], c[2] - t[2]];
            total += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        }
    }
    Ok(total / (n as f64 * m as f64))
}
