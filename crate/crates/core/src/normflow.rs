//! Density model over 2D poses: a stack of Glow-style blocks
//! (activation normalization, invertible linear mixing, affine coupling)
//! on top of a standard normal base distribution.
//!
//! The model is written in the data-to-latent direction: [`FlowModel::flow_inverse`]
//! maps a pose vector `x` to `z` and accumulates `log |det dz/dx|`, which is all
//! a likelihood needs. [`FlowModel::flow_forward`] is the exact inverse used for
//! sampling and round-trip checks.
//!
//! Raw image-space poses are first root-centered and divided by the 2D
//! root-to-head distance (see [`Normalization`]); densities are reported in that
//! normalized space.

use std::f64::consts::PI;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::CoordIndex;
use crate::checkpoint::Checkpoint;
use crate::diffopt::{AdamWConfig, AdamWState, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Mlp};
use crate::skeleton::{Pose2D, Topology};

pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_HIDDEN: usize = 128;
/// Coupling log-scales are soft-clamped to `(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)`.
pub const LOG_SCALE_CLAMP: f64 = 3.0;
pub const CHECKPOINT_KIND: &str = "flow";
/// Smallest root-to-head distance (pixels) accepted by the normalization.
const MIN_POSE_SCALE: f64 = 1e-6;

/// Preprocessing applied to raw inputs before the bijection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Inputs are used as given.
    None,
    /// Subtract the root joint and divide by the root-to-head distance.
    RootHead { root: usize, head: usize },
}

impl Normalization {
    pub fn for_topology(topo: &Topology) -> Self {
        Self::RootHead { root: topo.root_index, head: topo.head_index }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub normalization: Normalization,
}

impl FlowArch {
    pub fn for_topology(topo: &Topology) -> Self {
        Self {
            dim: 2 * topo.joint_count(),
            blocks: DEFAULT_BLOCKS,
            hidden: DEFAULT_HIDDEN,
            normalization: Normalization::for_topology(topo),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.blocks == 0 || self.hidden == 0 {
            return Err(Error::invalid(format!(
                "flow needs dim >= 2, blocks > 0 and hidden > 0 (got {}, {}, {})",
                self.dim, self.blocks, self.hidden
            )));
        }
        if let Normalization::RootHead { root, head } = self.normalization {
            if root == head || 2 * root.max(head) >= self.dim {
                return Err(Error::invalid("root/head indices out of range for the flow width"));
            }
        }
        Ok(())
    }
}

/// One invertible layer; tensors live in the model's [`ParamSet`] at the given slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `h = x * exp(log_scale) + bias`.
    ActNorm { log_scale: usize, bias: usize },
    /// `h = x A` with `A = P L U`, `L` unit lower triangular and
    /// `U` upper triangular with diagonal `sign * exp(log_diag)`.
    InvLinear { perm: Vec<usize>, sign: Vec<f64>, lower: usize, upper: usize, log_diag: usize },
    /// The `trans` coordinates are scaled and shifted by a network of the `cond` coordinates.
    Coupling { cond: Vec<usize>, trans: Vec<usize>, net: Mlp },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlowLayout {
    arch: FlowArch,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub arch: FlowArch,
    layers: Vec<Layer>,
    params: ParamSet,
}

fn masks(d: usize) -> (Tensor, Tensor) {
    (
        Tensor::from_fn(d, d, |r, c| if r > c { 1.0 } else { 0.0 }),
        Tensor::from_fn(d, d, |r, c| if r < c { 1.0 } else { 0.0 }),
    )
}

fn inverse_order(cond: &[usize], trans: &[usize]) -> Rc<[usize]> {
    let order: Vec<usize> = cond.iter().chain(trans).copied().collect();
    let mut inv = vec![0; order.len()];
    for (k, &o) in order.iter().enumerate() {
        inv[o] = k;
    }
    Rc::from(inv)
}

fn soft_clamp(raw: Var<'_>) -> Var<'_> {
    (raw * (1.0 / LOG_SCALE_CLAMP)).tanh() * LOG_SCALE_CLAMP
}

impl FlowModel {
    /// Identity-initialized model: unit actnorm, identity mixing, zero coupling read-outs.
    pub fn new(arch: FlowArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.dim;
        let half = d / 2;
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(3 * arch.blocks);
        for k in 0..arch.blocks {
            layers.push(Layer::ActNorm {
                log_scale: params.insert(format!("b{k}.actnorm.log_scale"), Tensor::zeros(1, d)),
                bias: params.insert(format!("b{k}.actnorm.bias"), Tensor::zeros(1, d)),
            });
            layers.push(Layer::InvLinear {
                perm: (0..d).collect(),
                sign: vec![1.0; d],
                lower: params.insert(format!("b{k}.mix.lower"), Tensor::zeros(d, d)),
                upper: params.insert(format!("b{k}.mix.upper"), Tensor::zeros(d, d)),
                log_diag: params.insert(format!("b{k}.mix.log_diag"), Tensor::zeros(1, d)),
            });
            let (cond, trans): (Vec<usize>, Vec<usize>) = if k % 2 == 0 {
                ((0..half).collect(), (half..d).collect())
            } else {
                ((d - half..d).collect(), (0..d - half).collect())
            };
            let net = Mlp::new(
                &mut params,
                &format!("b{k}.coupling"),
                &[cond.len(), arch.hidden, arch.hidden, 2 * trans.len()],
                Init::Zeros,
                &mut rng,
            );
            layers.push(Layer::Coupling { cond, trans, net });
        }
        Ok(Self { arch, layers, params })
    }

    /// A single mixing layer whose latent-to-data map is `x = W z`.
    pub fn single_linear(w: &DMatrix<f64>) -> Result<Self> {
        let d = w.nrows();
        let inv = w.clone().try_inverse().ok_or_else(|| Error::invalid("mixing matrix is singular"))?;
        // Row-vector convention: z_row = x_row * A with A = W^-T.
        let a = inv.transpose();
        let lu = a.clone().lu();
        let mut pm = DMatrix::<f64>::identity(d, d);
        lu.p().permute_rows(&mut pm);
        // P a = L U, so a = P^T L U and row i of a is row perm[i] of L U.
        let pt = pm.transpose();
        let perm: Vec<usize> = (0..d).map(|i| (0..d).find(|&j| pt[(i, j)] == 1.0).unwrap()).collect();
        let (l, u) = (lu.l(), lu.u());
        let mut params = ParamSet::new();
        let lower = params.insert("mix.lower", Tensor::from_fn(d, d, |r, c| if r > c { l[(r, c)] } else { 0.0 }));
        let upper = params.insert("mix.upper", Tensor::from_fn(d, d, |r, c| if r < c { u[(r, c)] } else { 0.0 }));
        let diag: Vec<f64> = (0..d).map(|i| u[(i, i)]).collect();
        if diag.iter().any(|v| v.abs() <= 1e-12) {
            return Err(Error::invalid("mixing matrix has |det| <= 1e-12"));
        }
        let log_diag = params.insert("mix.log_diag", Tensor::row(diag.iter().map(|v| v.abs().ln()).collect()));
        let sign = diag.iter().map(|v| v.signum()).collect();
        Ok(Self {
            arch: FlowArch { dim: d, blocks: 1, hidden: 0, normalization: Normalization::None },
            layers: vec![Layer::InvLinear { perm, sign, lower, upper, log_diag }],
            params,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    /// Assembled mixing matrix `A` of an invertible-linear layer.
    fn mixing<'t>(&self, bound: &[Var<'t>], layer: &Layer) -> Result<Var<'t>> {
        let Layer::InvLinear { perm, sign, lower, upper, log_diag } = layer else {
            unreachable!("mixing called on a non-mixing layer")
        };
        let tape = bound[0].tape();
        let d = self.arch.dim;
        let (lm, um) = masks(d);
        let eye = tape.constant(Tensor::identity(d));
        let l = bound[*lower] * tape.constant(lm) + eye;
        let diag = bound[*log_diag].exp() * tape.constant(Tensor::row(sign.clone()));
        let u = bound[*upper] * tape.constant(um) + eye * diag;
        Ok(l.matmul(u)?.select_rows(&Rc::from(perm.clone())))
    }

    /// Applies layer `i` in the data-to-latent direction; returns the output and
    /// its per-row log-determinant (`[B, 1]` or a broadcastable `[1, 1]`).
    fn layer_var<'t>(&self, bound: &[Var<'t>], i: usize, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        match &self.layers[i] {
            Layer::ActNorm { log_scale, bias } => {
                let ls = bound[*log_scale];
                Ok((h * ls.exp() + bound[*bias], ls.sum()))
            }
            layer @ Layer::InvLinear { log_diag, .. } => {
                let a = self.mixing(bound, layer)?;
                Ok((h.matmul(a)?, bound[*log_diag].sum()))
            }
            Layer::Coupling { cond, trans, net } => {
                let hc = h.select_cols(&Rc::from(cond.clone()));
                let ht = h.select_cols(&Rc::from(trans.clone()));
                let out = net.forward(bound, hc)?;
                let n = trans.len();
                let shift = out.cols_range(0, n);
                let ls = soft_clamp(out.cols_range(n, n));
                let zt = ht * ls.exp() + shift;
                let joined = h.tape().concat_cols(&[hc, zt])?;
                Ok((joined.select_cols(&inverse_order(cond, trans)), ls.sum_rows()))
            }
        }
    }

    /// Differentiable normalization of `[B, dim]` raw inputs.
    pub fn normalize_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.cols() != self.arch.dim {
            return Err(Error::DimensionMismatch { expected: self.arch.dim, actual: x.cols() });
        }
        match self.arch.normalization {
            Normalization::None => Ok(x),
            Normalization::RootHead { root, head } => {
                let idx = CoordIndex::new(self.arch.dim / 2, 2);
                let (u, v) = (idx.axis(x, 0), idx.axis(x, 1));
                let (du, dv) = (u - u.col(root), v - v.col(root));
                let scale = (du.col(head).square() + dv.col(head).square()).sqrt();
                if let Some(s) = scale.value().data().iter().find(|s| !(**s > MIN_POSE_SCALE)) {
                    return Err(Error::invalid(format!("root-to-head distance {s} too small to normalize")));
                }
                idx.assemble(&[du / scale, dv / scale])
            }
        }
    }

    /// `[B, dim]` flow-space inputs to latents and `[B, 1]` log-determinants.
    fn inverse_var<'t>(&self, bound: &[Var<'t>], x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let mut h = x;
        let mut logdet = tape.constant(Tensor::zeros(x.rows(), 1));
        for i in 0..self.layers.len() {
            let (next, ld) = self.layer_var(bound, i, h)?;
            if !next.value().all_finite() || !ld.value().all_finite() {
                return Err(Error::FlowOverflow { block: i / 3 });
            }
            h = next;
            logdet = logdet + ld;
        }
        Ok((h, logdet))
    }

    /// Per-row `log p(x)` of `[B, dim]` raw inputs, differentiable w.r.t. `x`
    /// and the bound parameters.
    pub fn log_prob_var<'t>(&self, bound: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let xn = self.normalize_var(x)?;
        let (z, logdet) = self.inverse_var(bound, xn)?;
        let base = z.square().sum_rows() * -0.5 + (-0.5 * self.arch.dim as f64 * (2.0 * PI).ln());
        Ok(base + logdet)
    }

    /// Batch mean of `-log p(x)` with the parameters held fixed.
    pub fn nf_loss_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let bound = self.params.bind_constant(x.tape());
        Ok(-self.log_prob_var(&bound, x)?.mean())
    }

    /// [`nf_loss_var`](Self::nf_loss_var) where per-sample values above
    /// `ceiling` grow only logarithmically, so a few wildly implausible samples
    /// cannot dominate a batch.
    pub fn nf_loss_soft_var<'t>(&self, x: Var<'t>, ceiling: Option<f64>) -> Result<Var<'t>> {
        let Some(c) = ceiling else {
            return self.nf_loss_var(x);
        };
        let bound = self.params.bind_constant(x.tape());
        let nll = -self.log_prob_var(&bound, x)?;
        let excess = nll.offset(-c).relu();
        Ok((nll - excess + excess.offset(1.0).ln()).mean())
    }

    /// `f^{-1}(x)` and `log |det df^{-1}/dx|` for one flow-space vector.
    pub fn flow_inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_finite(x)?;
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let (z, ld) = self.inverse_var(&bound, tape.constant(self.row(x)?))?;
        let z = z.value().data().to_vec();
        Ok((z, ld.item()))
    }

    /// Applies layer `i` alone to one flow-space vector (data-to-latent direction).
    pub fn apply_layer(&self, i: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let (h, ld) = self.layer_var(&bound, i, tape.constant(self.row(x)?))?;
        let h = h.value().data().to_vec();
        let ld = ld.value().data()[0];
        Ok((h, ld))
    }

    /// Exact inverse of [`Self::flow_inverse`]: latent to flow-space vector.
    pub fn flow_forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_finite(z)?;
        let mut h = self.row(z)?;
        for i in (0..self.layers.len()).rev() {
            h = self.invert_layer(i, &h)?;
            if !h.all_finite() {
                return Err(Error::FlowOverflow { block: i / 3 });
            }
        }
        Ok(h.into_vec())
    }

    fn invert_layer(&self, i: usize, y: &Tensor) -> Result<Tensor> {
        let p = |slot: usize| self.params.get(slot);
        match &self.layers[i] {
            Layer::ActNorm { log_scale, bias } => {
                let (ls, b) = (p(*log_scale), p(*bias));
                Ok(Tensor::from_fn(y.rows(), y.cols(), |r, c| (y.get(r, c) - b.get(0, c)) * (-ls.get(0, c)).exp()))
            }
            layer @ Layer::InvLinear { .. } => {
                let tape = Tape::new();
                let bound = self.params.bind_constant(&tape);
                let a = self.mixing(&bound, layer)?.value().clone();
                let d = a.rows();
                let am = DMatrix::from_row_slice(d, d, a.data());
                let lu = am.transpose().lu();
                let mut out = Tensor::zeros(y.rows(), d);
                // x A = y  <=>  A^T x^T = y^T.
                for r in 0..y.rows() {
                    let rhs = nalgebra::DVector::from_column_slice(y.row_slice(r));
                    let sol = lu.solve(&rhs).ok_or_else(|| Error::invalid("mixing matrix is singular"))?;
                    for c in 0..d {
                        out.set(r, c, sol[c]);
                    }
                }
                Ok(out)
            }
            Layer::Coupling { cond, trans, net } => {
                let tape = Tape::new();
                let bound = self.params.bind_constant(&tape);
                let yv = tape.constant(y.clone());
                let out = net.forward(&bound, yv.select_cols(&Rc::from(cond.clone())))?;
                let n = trans.len();
                let shift = out.cols_range(0, n).value().clone();
                let ls = soft_clamp(out.cols_range(n, n)).value().clone();
                let mut x = y.clone();
                for r in 0..y.rows() {
                    for (k, &c) in trans.iter().enumerate() {
                        x.set(r, c, (y.get(r, c) - shift.get(r, k)) * (-ls.get(r, k)).exp());
                    }
                }
                Ok(x)
            }
        }
    }

    fn row(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.arch.dim {
            return Err(Error::DimensionMismatch { expected: self.arch.dim, actual: x.len() });
        }
        Ok(Tensor::row(x.to_vec()))
    }

    /// `log p(x)` for one raw input vector.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_finite(x)?;
        Ok(self.log_prob_batch(&self.row(x)?)?[0])
    }

    /// `-log p(x)`.
    pub fn nf_loss(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.log_prob(x)?)
    }

    /// Per-row `log p` of a `[B, dim]` batch of raw inputs.
    pub fn log_prob_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        if !x.all_finite() {
            return Err(Error::invalid("flow input is not finite"));
        }
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let lp = self.log_prob_var(&bound, tape.constant(x.clone()))?;
        let out = lp.value().data().to_vec();
        Ok(out)
    }

    /// Sets every actnorm layer so its output has zero mean and unit variance on `x`
    /// (flow-space rows), propagating the batch through the stack.
    pub fn init_actnorm(&mut self, x: &Tensor) -> Result<()> {
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            if let Layer::ActNorm { log_scale, bias } = self.layers[i] {
                let n = h.rows() as f64;
                let d = h.cols();
                let mut ls = vec![0.0; d];
                let mut b = vec![0.0; d];
                for c in 0..d {
                    let mean = (0..h.rows()).map(|r| h.get(r, c)).sum::<f64>() / n;
                    let var = (0..h.rows()).map(|r| (h.get(r, c) - mean).powi(2)).sum::<f64>() / n;
                    let std = var.sqrt().max(1e-6);
                    ls[c] = -std.ln();
                    b[c] = -mean / std;
                }
                *self.params.get_mut(log_scale) = Tensor::row(ls);
                *self.params.get_mut(bias) = Tensor::row(b);
            }
            let tape = Tape::new();
            let bound = self.params.bind_constant(&tape);
            let (next, _) = self.layer_var(&bound, i, tape.constant(h))?;
            h = next.value().clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let layout = FlowLayout { arch: self.arch.clone(), layers: self.layers.clone() };
        Checkpoint::new(CHECKPOINT_KIND, layout, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let layout: FlowLayout = ck.layout()?;
        Ok(Self { arch: layout.arch, layers: layout.layers, params: ck.params()? })
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("flow input is not finite"))
    }
}

/// Training schedule for [`train_flow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Gaussian jitter added to normalized inputs during training; keeps the
    /// density bounded along directions the normalization pins (root, scale).
    pub noise: f64,
    /// Stop after this many epochs without improvement and keep the best epoch.
    pub patience: usize,
    pub min_samples: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 256,
            lr: 1e-3,
            weight_decay: 1e-5,
            noise: 1e-2,
            patience: 5,
            min_samples: 1000,
            seed: 0,
        }
    }
}

/// Training state; after a failed [`FlowTrainer::fit`] `model` still holds the
/// last good parameters.
pub struct FlowTrainer {
    pub model: FlowModel,
    pub config: FlowTrainConfig,
    /// Mean training negative log-likelihood per epoch.
    pub trace: Vec<f64>,
}

impl FlowTrainer {
    pub fn new(model: FlowModel, config: FlowTrainConfig) -> Self {
        Self { model, config, trace: Vec::new() }
    }

    pub fn fit<P: AsRef<[f64]>>(&mut self, data: &[P]) -> Result<()> {
        let cfg = self.config.clone();
        if data.len() < cfg.min_samples.max(1) {
            return Err(Error::invalid(format!(
                "flow training needs at least {} samples, got {}",
                cfg.min_samples.max(1),
                data.len()
            )));
        }
        let raw = Tensor::from_rows(data)?;
        if raw.cols() != self.model.dim() {
            return Err(Error::DimensionMismatch { expected: self.model.dim(), actual: raw.cols() });
        }
        let normalized = {
            let tape = Tape::new();
            let v = self.model.normalize_var(tape.constant(raw))?;
            let t = v.value().clone();
            t
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..normalized.rows()).collect();
        let batch = cfg.batch.max(1);
        let jitter = |rows: &[usize], rng: &mut ChaCha8Rng| {
            Tensor::from_fn(rows.len(), normalized.cols(), |r, c| {
                let e: f64 = if cfg.noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                normalized.get(rows[r], c) + cfg.noise * e
            })
        };

        // Data-dependent actnorm initialization on the first shuffled batch.
        order.shuffle(&mut rng);
        let first = jitter(&order[..batch.min(order.len())], &mut rng);
        self.model.init_actnorm(&first)?;

        let flow_space = FlowModel {
            arch: FlowArch { normalization: Normalization::None, ..self.model.arch.clone() },
            layers: self.model.layers.clone(),
            params: ParamSet::new(),
        };
        let mut opt = AdamWState::new(AdamWConfig::new(cfg.lr, cfg.weight_decay), self.model.params.tensors());
        let mut best = (f64::INFINITY, self.model.params.clone());
        let mut stale = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (step, rows) in order.chunks(batch).enumerate() {
                let x = jitter(rows, &mut rng);
                let tape = Tape::new();
                let bound = self.model.params.bind(&tape);
                let nll = -flow_space.log_prob_var(&bound, tape.constant(x))?.mean();
                let value = nll.item();
                let diverged = || Error::Diverged { stage: "flow", epoch, step };
                if !value.is_finite() {
                    return Err(diverged());
                }
                let mut grads = tape.backward(nll)?;
                let g = self.model.params.collect_grads(&mut grads, &bound);
                let before = self.model.params.clone();
                opt.step(self.model.params.tensors_mut(), &g)?;
                if !self.model.params.all_finite() {
                    self.model.params = before;
                    return Err(diverged());
                }
                total += value * rows.len() as f64;
            }
            let mean = total / order.len() as f64;
            self.trace.push(mean);
            if mean < best.0 {
                best = (mean, self.model.params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience.max(1) {
                    break;
                }
            }
        }
        self.model.params = best.1;
        Ok(())
    }
}

/// Trains a fresh model on raw inputs and returns it with its per-epoch trace.
pub fn train_flow<P: AsRef<[f64]>>(
    data: &[P],
    arch: FlowArch,
    config: FlowTrainConfig,
) -> Result<(FlowModel, Vec<f64>)> {
    let model = FlowModel::new(arch, config.seed)?;
    let mut trainer = FlowTrainer::new(model, config);
    trainer.fit(data)?;
    Ok((trainer.model, trainer.trace))
}

/// Convenience: raw 2D poses as flow inputs.
pub fn pose_rows(poses: &[Pose2D]) -> Vec<&[f64]> {
    poses.iter().map(|p| p.coords()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::{numerical_gradient, relative_error};

    fn plain(dim: usize, blocks: usize) -> FlowArch {
        FlowArch { dim, blocks, hidden: 8, normalization: Normalization::None }
    }

    /// Random, non-identity parameters (coupling read-outs included).
    fn scrambled(arch: FlowArch, seed: u64) -> FlowModel {
        let mut m = FlowModel::new(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in m.params.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        m
    }

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn identity_flow() {
        let m = FlowModel::new(plain(34, 2), 0).unwrap();
        let x: Vec<f64> = (0..34).map(|i| i as f64 * 0.1 - 1.0).collect();
        let (z, ld) = m.flow_inverse(&x).unwrap();
        assert_eq!(z, x);
        assert_eq!(ld, 0.0);
        let lp0 = m.log_prob(&[0.0; 34]).unwrap();
        assert!((lp0 + 17.0 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((m.nf_loss(&[0.0; 34]).unwrap() - 31.243_9).abs() < 1e-4);
        let mut prev = lp0;
        for k in 1..20 {
            let lp = m.log_prob(&vec![0.1 * k as f64; 34]).unwrap();
            assert!(lp < prev);
            prev = lp;
        }
    }

    #[test]
    fn scalar_mixing_logdet() {
        let m = FlowModel::single_linear(&(DMatrix::identity(34, 34) * 2.0)).unwrap();
        let (z, ld) = m.flow_inverse(&[1.0; 34]).unwrap();
        assert!((ld + 34.0 * 2f64.ln()).abs() < 1e-12);
        assert!(z.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn general_mixing_matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DMatrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = FlowModel::single_linear(&w).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5, 0.0, 1.5];
        let (z, ld) = m.flow_inverse(&x).unwrap();
        let wz = &w * nalgebra::DVector::from_column_slice(&z);
        for i in 0..6 {
            assert!((wz[i] - x[i]).abs() < 1e-10);
        }
        assert!((ld + w.determinant().abs().ln()).abs() < 1e-10);
    }

    #[test]
    fn roundtrip_and_jacobian() {
        let m = scrambled(plain(6, 3), 5);
        let xs = gaussian_rows(20, 6, 9);
        for x in &xs {
            let (z, ld) = m.flow_inverse(x).unwrap();
            let back = m.flow_forward(&z).unwrap();
            let err = back.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{err}");
            let jac = jacobian(|v| m.flow_inverse(v).unwrap().0, x);
            assert!((jac.determinant().abs().ln() - ld).abs() < 1e-5);
        }
        for i in 0..m.layers().len() {
            let (_, ld) = m.apply_layer(i, &xs[0]).unwrap();
            let jac = jacobian(|v| m.apply_layer(i, v).unwrap().0, &xs[0]);
            assert!((jac.determinant().abs().ln() - ld).abs() < 1e-5, "layer {i}");
        }
    }

    fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let h = 1e-6;
        let mut j = DMatrix::zeros(d, d);
        for c in 0..d {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[c] += h;
            b[c] -= h;
            let (fa, fb) = (f(&a), f(&b));
            for r in 0..d {
                j[(r, c)] = (fa[r] - fb[r]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn density_integrates_to_one() {
        let m = scrambled(plain(2, 2), 11);
        // Importance sampling with a broad Gaussian proposal.
        let s = 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 40_000;
        let mut acc = 0.0;
        let rows = Tensor::from_fn(n, 2, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let lp = m.log_prob_batch(&rows).unwrap();
        for (r, lp) in lp.iter().enumerate() {
            let (a, b) = (rows.get(r, 0), rows.get(r, 1));
            let lq = -(a * a + b * b) / (2.0 * s * s) - (2.0 * PI * s * s).ln();
            acc += (lp - lq).exp();
        }
        let est = acc / n as f64;
        assert!((est - 1.0).abs() < 0.02, "{est}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = scrambled(plain(6, 2), 2);
        let x = Tensor::from_rows(&gaussian_rows(3, 6, 4)).unwrap();
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let loss = m.nf_loss_var(xv).unwrap();
        let g = tape.backward(loss).unwrap().get(xv);
        let num = numerical_gradient(&x, 1e-5, |t| {
            let tape = Tape::new();
            m.nf_loss_var(tape.constant(t.clone())).unwrap().item()
        });
        assert!(relative_error(&g, &num) < 1e-6);
    }

    #[test]
    fn training_needs_data_and_is_deterministic() {
        let cfg = FlowTrainConfig { epochs: 2, batch: 64, min_samples: 100, noise: 0.0, ..Default::default() };
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(train_flow(&empty, plain(4, 1), cfg.clone()).is_err());
        let data = gaussian_rows(200, 4, 1);
        let (a, _) = train_flow(&data, plain(4, 2), cfg.clone()).unwrap();
        let (b, _) = train_flow(&data, plain(4, 2), cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = scrambled(plain(4, 2), 8);
        let back = FlowModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn root_head_normalization_is_similarity_invariant() {
        let arch =
            FlowArch { dim: 6, blocks: 1, hidden: 4, normalization: Normalization::RootHead { root: 0, head: 2 } };
        let m = scrambled(arch, 4);
        let x = [10.0, 5.0, 12.0, 9.0, 11.0, -3.0];
        let moved: Vec<f64> =
            x.iter().enumerate().map(|(i, v)| 3.0 * v + if i % 2 == 0 { 7.0 } else { -2.0 }).collect();
        assert!((m.log_prob(&x).unwrap() - m.log_prob(&moved).unwrap()).abs() < 1e-9);
    }
}
