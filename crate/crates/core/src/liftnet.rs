//! The lifter network and its self-supervised cycle training.
//!
//! The lifter predicts one camera-frame depth per joint from the 2D pose and
//! the full camera; the 3D pose is the unprojection of the input at those
//! depths, so it always re-projects onto the input exactly. Training closes the
//! loop lift -> rotate -> project -> lift -> rotate back -> project and scores
//! the result with the cycle, plausibility and anatomy terms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{rotate_about_root_vars, sample_rotation_angle, Camera, CameraVars};
use crate::checkpoint::Checkpoint;
use crate::constraints::{bone_loss, bone_ratios, deformation_loss, l2d_loss, l3d_loss, limbs_loss, BoneRatioStats};
use crate::data::SampleRecord;
use crate::diffopt::{AdamWConfig, AdamWState, LossBalancer, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Standardizer};
use crate::normflow::FlowModel;
use crate::skeleton::{Pose2D, Pose3D, Topology};

pub const CHECKPOINT_KIND: &str = "lifter";
/// Camera values appended to the 2D pose: `[R|t]` (12), `f` (2), `c` (2), `s` (2).
pub const CAMERA_FEATURES: usize = 18;
pub const RESIDUAL_BLOCKS: usize = 3;
pub const DEFAULT_DIM: usize = 1024;
pub const DEPTH_FLOOR: f64 = 1e-3;
/// Names of the six loss terms, in balancer order.
pub const TERMS: [&str; 6] = ["l2d", "l3d", "nf", "bone", "limbs", "def"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifterArch {
    pub joints: usize,
    pub dim: usize,
    /// Depth assigned by a zero output layer (mean subject distance).
    pub depth_prior: f64,
    /// Output units: `depth = depth_prior + depth_scale * raw`.
    pub depth_scale: f64,
}

impl LifterArch {
    pub fn new(joints: usize, dim: usize, depth_prior: f64) -> Self {
        Self { joints, dim, depth_prior, depth_scale: 1000.0 }
    }

    pub fn input_width(&self) -> usize {
        2 * self.joints + CAMERA_FEATURES
    }
}

/// Standardization fitted to the lifter inputs formed by `records`
/// (ground-truth 2D poses with their cameras).
pub fn fit_input_norm(records: &[SampleRecord]) -> Result<Standardizer> {
    let rows: Vec<Vec<f64>> = records.iter().map(|r| input_row(&r.x_gt, &r.camera)).collect();
    Standardizer::fit(&rows)
}

/// Camera block of the lifter input.
pub fn camera_features(cam: &Camera) -> [f64; CAMERA_FEATURES] {
    let mut out = [0.0; CAMERA_FEATURES];
    out[..12].copy_from_slice(&cam.extrinsics.flatten());
    out[12..].copy_from_slice(&cam.intrinsics.as_features());
    out
}

fn input_row(x: &Pose2D, cam: &Camera) -> Vec<f64> {
    let mut row = x.coords().to_vec();
    row.extend(camera_features(cam));
    row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layers {
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LifterLayout {
    arch: LifterArch,
    layers: Layers,
    norm: Standardizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lifter {
    pub arch: LifterArch,
    pub norm: Standardizer,
    layers: Layers,
    params: ParamSet,
}

/// Which lift of the cycle is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `x̂ -> ŷ`.
    Forward,
    /// `x̂_r -> ỹ_r`.
    Backward,
}

/// All intermediates of one cycle, as `[B, ...]` tape values.
pub struct CycleVars<'t> {
    pub xhat: Var<'t>,
    pub yhat: Var<'t>,
    pub yhat_r: Var<'t>,
    pub xhat_r: Var<'t>,
    pub ytilde_r: Var<'t>,
    pub ytilde: Var<'t>,
    pub xtilde: Var<'t>,
}

/// One sample's cycle, as plain poses.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub yhat: Pose3D,
    pub yhat_r: Pose3D,
    pub xhat_r: Pose2D,
    pub ytilde_r: Pose3D,
    pub ytilde: Pose3D,
    pub xtilde: Pose2D,
    pub theta: f64,
}

/// Runs the cycle with an arbitrary depth source.
///
/// `angles` holds one rotation (radians) per batch row; `depth_of` maps a
/// `[B, 2J]` image pose to `[B, J]` depths.
pub fn cycle_vars<'t>(
    xhat: Var<'t>,
    cams: &CameraVars<'t>,
    angles: &[f64],
    root: usize,
    mut depth_of: impl FnMut(Var<'t>, Branch) -> Result<Var<'t>>,
) -> Result<CycleVars<'t>> {
    let tape = xhat.tape();
    if angles.len() != xhat.rows() {
        return Err(Error::DimensionMismatch { expected: xhat.rows(), actual: angles.len() });
    }
    let sin = tape.constant(Tensor::from_vec(angles.len(), 1, angles.iter().map(|a| a.sin()).collect())?);
    let cos = tape.constant(Tensor::from_vec(angles.len(), 1, angles.iter().map(|a| a.cos()).collect())?);
    let yhat = cams.unproject(xhat, depth_of(xhat, Branch::Forward)?)?;
    let yhat_r = rotate_about_root_vars(yhat, sin, cos, root)?;
    let xhat_r = cams.project(yhat_r)?;
    let ytilde_r = cams.unproject(xhat_r, depth_of(xhat_r, Branch::Backward)?)?;
    let ytilde = rotate_about_root_vars(ytilde_r, -sin, cos, root)?;
    let xtilde = cams.project(ytilde)?;
    Ok(CycleVars { xhat, yhat, yhat_r, xhat_r, ytilde_r, ytilde, xtilde })
}

/// The six unweighted terms, in [`TERMS`] order. 3D terms measure lengths in
/// units of `length_unit` millimetres; see [`FlowModel::nf_loss_soft_var`]
/// for `nf_ceiling`. `flow = None` yields a zero
/// plausibility term.
pub fn lift_terms<'t>(
    cv: &CycleVars<'t>,
    flow: Option<&FlowModel>,
    topo: &Topology,
    stats: &BoneRatioStats,
    length_unit: f64,
    nf_ceiling: Option<f64>,
) -> Result<[Var<'t>; 6]> {
    let tape = cv.yhat.tape();
    let k = 1.0 / length_unit;
    let nf = match flow {
        Some(f) => f.nf_loss_soft_var(cv.xhat_r, nf_ceiling)?,
        None => tape.scalar(0.0),
    };
    Ok([
        l2d_loss(cv.xhat, cv.xtilde)?,
        l3d_loss(cv.yhat_r * k, cv.ytilde_r * k)?,
        nf,
        bone_loss(cv.yhat, topo, stats)?,
        limbs_loss(cv.yhat * k, topo)?,
        deformation_loss(cv.yhat * k, cv.ytilde * k)?,
    ])
}

impl Lifter {
    pub fn new(arch: LifterArch, norm: Standardizer, seed: u64) -> Result<Self> {
        if arch.dim == 0 || arch.joints == 0 {
            return Err(Error::invalid("lifter needs joints > 0 and dim > 0"));
        }
        if norm.mean.len() != arch.input_width() || norm.std.len() != arch.input_width() {
            return Err(Error::DimensionMismatch { expected: arch.input_width(), actual: norm.mean.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = arch.dim;
        let input = Linear::new(&mut params, "input", arch.input_width(), d, Init::He, &mut rng);
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|b| {
                (
                    Linear::new(&mut params, &format!("block{b}.fc1"), d, d, Init::He, &mut rng),
                    // Residual branches start small so the stack begins near identity.
                    Linear::new(&mut params, &format!("block{b}.fc2"), d, d, Init::Scaled(0.1), &mut rng),
                )
            })
            .collect();
        let output = Linear::new(&mut params, "output", d, arch.joints, Init::Zeros, &mut rng);
        Ok(Self { arch, norm, layers: Layers { input, blocks, output }, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Standardized `[B, 2J + 18]` inputs.
    fn inputs<'t>(&self, x: Var<'t>, cam_feats: Var<'t>) -> Result<Var<'t>> {
        self.norm.apply(x.tape().concat_cols(&[x, cam_feats])?)
    }

    /// `[B, J]` depths for `[B, 2J]` image poses, floored at [`DEPTH_FLOOR`].
    /// Also returns how many entries hit the floor.
    pub fn depths_var<'t>(&self, bound: &[Var<'t>], x: Var<'t>, cam_feats: Var<'t>) -> Result<(Var<'t>, usize)> {
        if x.cols() != 2 * self.arch.joints {
            return Err(Error::DimensionMismatch { expected: 2 * self.arch.joints, actual: x.cols() });
        }
        let l = &self.layers;
        let mut h = l.input.forward(bound, self.inputs(x, cam_feats)?)?.relu();
        for (fc1, fc2) in &l.blocks {
            let branch = fc2.forward(bound, fc1.forward(bound, h)?.relu())?.relu();
            h = h + branch;
        }
        let raw = l.output.forward(bound, h)?;
        let depth = raw * self.arch.depth_scale + self.arch.depth_prior;
        let clamped = depth.value().data().iter().filter(|d| **d < DEPTH_FLOOR).count();
        Ok((depth.max_const(DEPTH_FLOOR), clamped))
    }

    /// Lifts a batch of 2D poses with their cameras.
    pub fn lift_batch(&self, xs: &[Pose2D], cams: &[Camera]) -> Result<Vec<Pose3D>> {
        if xs.len() != cams.len() {
            return Err(Error::DimensionMismatch { expected: xs.len(), actual: cams.len() });
        }
        let mut out = Vec::with_capacity(xs.len());
        for (xc, cc) in xs.chunks(256).zip(cams.chunks(256)) {
            for (x, c) in xc.iter().zip(cc) {
                check_joints(x, self.arch.joints)?;
                c.intrinsics.validate()?;
            }
            let tape = Tape::new();
            let bound = self.params.bind_constant(&tape);
            let x = tape.constant(Tensor::from_rows(xc)?);
            let cv = CameraVars::constant(&tape, cc);
            let (depth, _) = self.depths_var(&bound, x, camera_block(&tape, cc))?;
            let y = cv.unproject(x, depth)?;
            let y = y.value();
            for r in 0..y.rows() {
                out.push(Pose3D::new(y.row_slice(r).to_vec())?);
            }
        }
        Ok(out)
    }

    /// Lifts one 2D pose.
    pub fn lift(&self, x: &Pose2D, cam: &Camera) -> Result<Pose3D> {
        Ok(self.lift_batch(std::slice::from_ref(x), std::slice::from_ref(cam))?.remove(0))
    }

    /// One full cycle for a single sample with a rotation drawn from `rng`.
    pub fn cycle<R: rand::Rng + ?Sized>(
        &self,
        x: &Pose2D,
        cam: &Camera,
        topo: &Topology,
        rng: &mut R,
    ) -> Result<CycleRecord> {
        let theta = sample_rotation_angle(rng);
        self.cycle_with_angle(x, cam, topo, theta)
    }

    pub fn cycle_with_angle(&self, x: &Pose2D, cam: &Camera, topo: &Topology, theta: f64) -> Result<CycleRecord> {
        check_joints(x, self.arch.joints)?;
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let cams = std::slice::from_ref(cam);
        let cv = CameraVars::constant(&tape, cams);
        let feats = camera_block(&tape, cams);
        let xv = tape.constant(Tensor::row(x.coords().to_vec()));
        let c = cycle_vars(xv, &cv, &[theta], topo.root_index, |inp, _| Ok(self.depths_var(&bound, inp, feats)?.0))?;
        cycle_record(&c, theta)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let layout = LifterLayout { arch: self.arch.clone(), layers: self.layers.clone(), norm: self.norm.clone() };
        Checkpoint::new(CHECKPOINT_KIND, layout, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let layout: LifterLayout = ck.layout()?;
        Ok(Self { arch: layout.arch, norm: layout.norm, layers: layout.layers, params: ck.params()? })
    }
}

fn check_joints(x: &Pose2D, joints: usize) -> Result<()> {
    if x.joint_count() != joints {
        return Err(Error::DimensionMismatch { expected: 2 * joints, actual: x.coords().len() });
    }
    Ok(())
}

/// `[B, 18]` constant camera features.
pub fn camera_block<'t>(tape: &'t Tape, cams: &[Camera]) -> Var<'t> {
    let rows: Vec<[f64; CAMERA_FEATURES]> = cams.iter().map(camera_features).collect();
    tape.constant(Tensor::from_rows(&rows).expect("uniform rows"))
}

/// Extracts row 0 of every cycle intermediate.
pub fn cycle_record(c: &CycleVars<'_>, theta: f64) -> Result<CycleRecord> {
    let row = |v: Var<'_>| v.value().row_slice(0).to_vec();
    Ok(CycleRecord {
        yhat: Pose3D::new(row(c.yhat))?,
        yhat_r: Pose3D::new(row(c.yhat_r))?,
        xhat_r: Pose2D::new(row(c.xhat_r))?,
        ytilde_r: Pose3D::new(row(c.ytilde_r))?,
        ytilde: Pose3D::new(row(c.ytilde))?,
        xtilde: Pose2D::new(row(c.xtilde))?,
        theta,
    })
}

/// Every joint at one depth: the lifter-shaped baseline that knows nothing
/// about articulation.
pub fn constant_depth_lift(x: &Pose2D, cam: &Camera, depth: f64) -> Result<Pose3D> {
    crate::camera::unproject(x, &vec![depth; x.joint_count()], &cam.intrinsics, &cam.extrinsics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Observations before likelihood terms enter the objective.
    pub warmup: u64,
    /// Weight of the flow term (after span normalization).
    pub nf_weight: f64,
    /// Soft ceiling on per-sample flow negative log-likelihood.
    pub nf_ceiling: Option<f64>,
    /// Millimetres per unit of length in the 3D terms.
    pub length_unit: f64,
    /// Terms removed from the objective (ablations), by name.
    pub disabled: Vec<String>,
}

impl Default for LiftTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 256,
            lr: 2e-4,
            weight_decay: 1e-5,
            seed: 0,
            warmup: 100,
            length_unit: 1000.0,
            nf_weight: 10.0,
            nf_ceiling: Some(0.0),
            disabled: Vec::new(),
        }
    }
}

/// Per-epoch means of the balanced objective and of each raw term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftEpoch {
    pub epoch: usize,
    pub total: f64,
    pub terms: [f64; 6],
    /// Depths that hit the floor during the epoch.
    pub clamped: usize,
}

/// Training state. After an error, `lifter` holds the last good parameters
/// and `trace` the completed epochs.
pub struct LiftTrainer<'a> {
    pub lifter: Lifter,
    pub config: LiftTrainConfig,
    pub flow: &'a FlowModel,
    pub topology: Topology,
    pub stats: BoneRatioStats,
    pub balancer: LossBalancer,
    pub trace: Vec<LiftEpoch>,
}

impl<'a> LiftTrainer<'a> {
    pub fn new(lifter: Lifter, flow: &'a FlowModel, topology: Topology, config: LiftTrainConfig) -> Self {
        let mut balancer = LossBalancer::liftnet(config.warmup);
        balancer.set_weight("nf", config.nf_weight);
        for name in &config.disabled {
            balancer.set_weight(name, 0.0);
        }
        Self {
            stats: BoneRatioStats::new(topology.bones.len()),
            lifter,
            flow,
            topology,
            balancer,
            trace: Vec::new(),
            config,
        }
    }

    /// Balanced objective and raw terms for one batch, built on `tape`.
    pub fn batch_objective<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        records: &[&SampleRecord],
        angles: &[f64],
    ) -> Result<(Var<'t>, [Var<'t>; 6], Var<'t>, usize)> {
        let xs: Vec<&[f64]> = records.iter().map(|r| r.x_gt.coords()).collect();
        let cams: Vec<Camera> = records.iter().map(|r| r.camera).collect();
        let x = tape.constant(Tensor::from_rows(&xs)?);
        let cv = CameraVars::constant(tape, &cams);
        let feats = camera_block(tape, &cams);
        let mut clamped = 0;
        let c = cycle_vars(x, &cv, angles, self.topology.root_index, |inp, _| {
            let (d, n) = self.lifter.depths_var(bound, inp, feats)?;
            clamped += n;
            Ok(d)
        })?;
        let use_flow = self.balancer.term_index("nf").map(|i| self.balancer.terms()[i].weight != 0.0);
        let flow = if use_flow == Some(false) { None } else { Some(self.flow) };
        let terms = lift_terms(&c, flow, &self.topology, &self.stats, self.config.length_unit, self.config.nf_ceiling)?;
        let total = self.balancer.combine(tape, &terms);
        Ok((total, terms, c.yhat, clamped))
    }

    pub fn fit(&mut self, records: &[SampleRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::invalid("lifter training needs a nonempty dataset"));
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamWState::new(AdamWConfig::new(cfg.lr, cfg.weight_decay), self.lifter.params.tensors());
        let mut order: Vec<usize> = (0..records.len()).collect();
        let start = self.trace.len();
        for epoch in start..start + cfg.epochs {
            order.shuffle(&mut rng);
            let mut sums = [0.0; 6];
            let mut total_sum = 0.0;
            let mut clamped_sum = 0;
            for (step, rows) in order.chunks(cfg.batch.max(1)).enumerate() {
                let batch: Vec<&SampleRecord> = rows.iter().map(|&i| &records[i]).collect();
                let angles: Vec<f64> = rows.iter().map(|_| sample_rotation_angle(&mut rng)).collect();
                let tape = Tape::new();
                let bound = self.lifter.params.bind(&tape);
                let diverged = || Error::Diverged { stage: "liftnet", epoch, step };
                let (total, terms, yhat, clamped) = self.batch_objective(&tape, &bound, &batch, &angles)?;
                let values: Vec<f64> = terms.iter().map(|t| t.item()).collect();
                let tv = total.item();
                if !tv.is_finite() || values.iter().any(|v| !v.is_finite()) {
                    return Err(diverged());
                }
                let ratios = bone_ratios(yhat, &self.topology)?.value().clone();
                let mut grads = tape.backward(total)?;
                let g = self.lifter.params.collect_grads(&mut grads, &bound);
                let before = self.lifter.params.clone();
                opt.step(self.lifter.params.tensors_mut(), &g)?;
                if !self.lifter.params.all_finite() {
                    self.lifter.params = before;
                    return Err(diverged());
                }
                self.stats.update(&ratios);
                self.balancer.observe(&values);
                let w = rows.len() as f64;
                for (s, v) in sums.iter_mut().zip(&values) {
                    *s += v * w;
                }
                total_sum += tv * w;
                clamped_sum += clamped;
            }
            let n = records.len() as f64;
            self.trace.push(LiftEpoch {
                epoch,
                total: total_sum / n,
                terms: sums.map(|s| s / n),
                clamped: clamped_sum,
            });
        }
        Ok(())
    }

    /// Checkpoint with the balancer and bone statistics attached.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.lifter
            .to_checkpoint()?
            .with_meta("topology_hash", self.topology.content_hash())?
            .with_meta("balancer", &self.balancer)?
            .with_meta("bone_stats", &self.stats)?
            .with_meta("trace", &self.trace)
    }
}

/// Trains a lifter and returns it with its per-epoch trace.
pub fn train_liftnet(
    records: &[SampleRecord],
    flow: &FlowModel,
    arch: LifterArch,
    config: LiftTrainConfig,
) -> Result<(Lifter, Vec<LiftEpoch>)> {
    let norm = fit_input_norm(records)?;
    let lifter = Lifter::new(arch, norm, config.seed)?;
    let mut trainer = LiftTrainer::new(lifter, flow, Topology::h36m(), config);
    trainer.fit(records)?;
    Ok((trainer.lifter, trainer.trace))
}
