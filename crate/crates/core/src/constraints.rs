//! Losses shared by the lifter and the regressor.
//!
//! Every loss is recorded on a [`Tape`] over batched poses (`[B, 3J]` or
//! `[B, 2J]`, one pose per row) and averaged over the batch, so the same
//! code serves training and the plain-number helpers at the bottom.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffopt::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::{cross3, dot3, Pose2D, Pose3D, Topology};

pub const DEFAULT_RATIO_DECAY: f64 = 0.99;
const REFERENCE_EPS: f64 = 1e-9;
const PLANE_EPS: f64 = 1e-9;

/// Running mean of per-bone length ratios (bone length / reference bone length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneRatioStats {
    pub ratios: Vec<f64>,
    pub count: u64,
    pub decay: f64,
}

impl BoneRatioStats {
    pub fn new(bones: usize) -> Self {
        Self::with_decay(bones, DEFAULT_RATIO_DECAY)
    }

    pub fn with_decay(bones: usize, decay: f64) -> Self {
        Self { ratios: vec![0.0; bones], count: 0, decay }
    }

    pub fn is_initialized(&self) -> bool {
        self.count > 0
    }

    /// Folds the batch-mean ratios of `ratios` (`[B, bones]`) into the running mean.
    /// The first batch initializes the mean outright.
    pub fn update(&mut self, ratios: &Tensor) {
        let mean = column_means(ratios);
        if self.count == 0 {
            self.ratios = mean;
        } else {
            for (r, m) in self.ratios.iter_mut().zip(mean) {
                *r = self.decay * *r + (1.0 - self.decay) * m;
            }
        }
        self.count += 1;
    }
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    let n = t.rows().max(1) as f64;
    out.iter().map(|v| v / n).collect()
}

/// Index lists used to pull bone and limb vectors out of flat pose rows.
struct BoneIndex {
    child: Rc<[usize]>,
    parent: Rc<[usize]>,
    group: Tensor,
}

impl BoneIndex {
    fn new(topo: &Topology) -> Self {
        let mut child = Vec::new();
        let mut parent = Vec::new();
        for &(p, c) in &topo.bones {
            for k in 0..3 {
                child.push(3 * c + k);
                parent.push(3 * p + k);
            }
        }
        let nb = topo.bones.len();
        let group = Tensor::from_fn(3 * nb, nb, |r, c| if r / 3 == c { 1.0 } else { 0.0 });
        Self { child: Rc::from(child), parent: Rc::from(parent), group }
    }
}

fn check_width(v: Var<'_>, expected: usize) -> Result<()> {
    if v.cols() != expected {
        return Err(Error::DimensionMismatch { expected, actual: v.cols() });
    }
    Ok(())
}

/// Bone vectors `[B, 3 * bones]` (child minus parent, xyz per bone).
pub fn bone_vectors_var<'t>(y: Var<'t>, topo: &Topology) -> Result<Var<'t>> {
    check_width(y, 3 * topo.joint_count())?;
    let idx = BoneIndex::new(topo);
    Ok(y.select_cols(&idx.child) - y.select_cols(&idx.parent))
}

/// Per-bone length ratios `[B, bones]` relative to the reference bone.
pub fn bone_ratios<'t>(y: Var<'t>, topo: &Topology) -> Result<Var<'t>> {
    check_width(y, 3 * topo.joint_count())?;
    let idx = BoneIndex::new(topo);
    let tape = y.tape();
    let vecs = y.select_cols(&idx.child) - y.select_cols(&idx.parent);
    let lengths = vecs.square().matmul(tape.constant(idx.group))?.sqrt();
    let reference = lengths.col(topo.reference_bone);
    if let Some(l) = reference.value().data().iter().find(|l| !(**l > REFERENCE_EPS)) {
        return Err(Error::DegenerateReference(*l));
    }
    Ok(lengths / reference)
}

/// Mean over poses and bones of `(r_b - rbar_b)^2`.
///
/// Uninitialized statistics fall back to this batch's own mean ratios, which is
/// what the first call of [`BoneRatioStats::update`] will store.
pub fn bone_loss<'t>(y: Var<'t>, topo: &Topology, stats: &BoneRatioStats) -> Result<Var<'t>> {
    let ratios = bone_ratios(y, topo)?;
    let target = if stats.is_initialized() { stats.ratios.clone() } else { column_means(&ratios.value()) };
    let target = y.tape().constant(Tensor::row(target));
    Ok((ratios - target).square().mean())
}

/// Limb-fold penalty `(1/L) sum_l max(0, N.p_l - N.d_l)` averaged over the batch,
/// with `N = A x B` (not normalized) spanning spine and hips.
pub fn limbs_loss<'t>(y: Var<'t>, topo: &Topology) -> Result<Var<'t>> {
    check_width(y, 3 * topo.joint_count())?;
    let tape = y.tape();
    if topo.limbs.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let joint = |j: usize| -> Rc<[usize]> { Rc::from(vec![3 * j, 3 * j + 1, 3 * j + 2]) };
    let pj = topo.plane_joints;
    let spine = y.select_cols(&joint(pj.spine));
    let a = y.select_cols(&joint(pj.left_hip)) - spine;
    let b = y.select_cols(&joint(pj.right_hip)) - spine;
    let normal = cross_rows(a, b);
    let plane_norm = normal.norm2_rows();
    if let Some(n) = plane_norm.value().data().iter().find(|n| !(**n > PLANE_EPS)) {
        return Err(Error::DegenerateBodyPlane(*n));
    }
    let bone = |i: usize| {
        let (p, c) = topo.bones[i];
        y.select_cols(&joint(c)) - y.select_cols(&joint(p))
    };
    let mut total = tape.constant(Tensor::zeros(y.rows(), 1));
    for limb in &topo.limbs {
        let proximal = (normal * bone(limb.proximal_bone)).sum_rows();
        let distal = (normal * bone(limb.distal_bone)).sum_rows();
        total = total + (proximal - distal).relu();
    }
    Ok((total * (1.0 / topo.limbs.len() as f64)).mean())
}

/// Row-wise cross product of two `[B, 3]` blocks.
pub fn cross_rows<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let (ax, ay, az) = (a.col(0), a.col(1), a.col(2));
    let (bx, by, bz) = (b.col(0), b.col(1), b.col(2));
    let tape = a.tape();
    tape.concat_cols(&[ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx]).expect("equal row counts")
}

/// Mean over consecutive batch pairs of `|(yhat_a - yhat_b) - (ytilde_a - ytilde_b)|_2`.
/// A single-pose batch has no pair and yields zero.
pub fn deformation_loss<'t>(forward: Var<'t>, backward: Var<'t>) -> Result<Var<'t>> {
    if forward.shape() != backward.shape() {
        return Err(Error::ShapeMismatch { op: "deformation_loss", lhs: forward.shape(), rhs: backward.shape() });
    }
    let n = forward.rows();
    if n < 2 {
        return Ok(forward.tape().scalar(0.0));
    }
    let drift = forward - backward;
    let first: Rc<[usize]> = Rc::from((0..n - 1).collect::<Vec<_>>());
    let second: Rc<[usize]> = Rc::from((1..n).collect::<Vec<_>>());
    Ok((drift.select_rows(&first) - drift.select_rows(&second)).norm2_rows().mean())
}

/// Batch mean of `|xhat - xtilde|_1`.
pub fn l2d_loss<'t>(xhat: Var<'t>, xtilde: Var<'t>) -> Result<Var<'t>> {
    Ok(xhat.try_sub(xtilde)?.norm1_rows().mean())
}

/// Batch mean of `|yhat_r - ytilde_r|_2`.
pub fn l3d_loss<'t>(yhat_r: Var<'t>, ytilde_r: Var<'t>) -> Result<Var<'t>> {
    Ok(yhat_r.try_sub(ytilde_r)?.norm2_rows().mean())
}

/// Laplace negative log-likelihood with a learned per-coordinate scale:
/// mean of `|xhat - x_gt| / sigma + ln sigma + ln 2`.
pub fn rle_loss<'t>(xhat: Var<'t>, sigma: Var<'t>, x_gt: Var<'t>) -> Result<Var<'t>> {
    if let Some(s) = sigma.value().data().iter().find(|s| !(**s > 0.0)) {
        return Err(Error::invalid(format!("scale must be positive, got {s}")));
    }
    let residual = xhat.try_sub(x_gt)?.abs();
    Ok((residual.try_div(sigma)? + sigma.ln() + std::f64::consts::LN_2).mean())
}

/// Stacks poses into a `[B, dim * J]` tensor.
pub fn stack<P: AsRef<[f64]>>(poses: &[P]) -> Result<Tensor> {
    Tensor::from_rows(poses)
}

impl AsRef<[f64]> for Pose3D {
    fn as_ref(&self) -> &[f64] {
        self.coords()
    }
}

impl AsRef<[f64]> for Pose2D {
    fn as_ref(&self) -> &[f64] {
        self.coords()
    }
}

/// One limb's fold penalty for an explicit normal.
pub fn limb_term(normal: [f64; 3], proximal: [f64; 3], distal: [f64; 3]) -> f64 {
    (dot3(normal, proximal) - dot3(normal, distal)).max(0.0)
}

/// Body-plane normal `A x B` of a single pose.
pub fn body_normal(pose: &Pose3D, topo: &Topology) -> [f64; 3] {
    let pj = topo.plane_joints;
    let s = pose.joint(pj.spine);
    let l = pose.joint(pj.left_hip);
    let r = pose.joint(pj.right_hip);
    cross3(crate::skeleton::sub3(l, s), crate::skeleton::sub3(r, s))
}

fn eval_scalar(f: impl for<'t> FnOnce(&'t Tape) -> Result<Var<'t>>) -> Result<f64> {
    let tape = Tape::new();
    let v = f(&tape)?;
    let out = v.item();
    Ok(out)
}

pub fn limbs_loss_value(pose: &Pose3D, topo: &Topology) -> Result<f64> {
    eval_scalar(|t| limbs_loss(t.constant(stack(std::slice::from_ref(pose))?), topo))
}

pub fn bone_loss_value(poses: &[Pose3D], topo: &Topology, stats: &BoneRatioStats) -> Result<f64> {
    if poses.is_empty() {
        return Err(Error::invalid("bone loss needs a nonempty batch"));
    }
    eval_scalar(|t| bone_loss(t.constant(stack(poses)?), topo, stats))
}

pub fn deformation_loss_value(yhat_a: &Pose3D, yhat_b: &Pose3D, ytilde_a: &Pose3D, ytilde_b: &Pose3D) -> Result<f64> {
    eval_scalar(|t| {
        deformation_loss(
            t.constant(stack(&[yhat_a.clone(), yhat_b.clone()])?),
            t.constant(stack(&[ytilde_a.clone(), ytilde_b.clone()])?),
        )
    })
}

pub fn l2d_loss_value(xhat: &Pose2D, xtilde: &Pose2D) -> Result<f64> {
    eval_scalar(|t| {
        l2d_loss(t.constant(Tensor::row(xhat.coords().to_vec())), t.constant(Tensor::row(xtilde.coords().to_vec())))
    })
}

pub fn l3d_loss_value(yhat_r: &Pose3D, ytilde_r: &Pose3D) -> Result<f64> {
    eval_scalar(|t| {
        l3d_loss(t.constant(Tensor::row(yhat_r.coords().to_vec())), t.constant(Tensor::row(ytilde_r.coords().to_vec())))
    })
}

pub fn rle_loss_value(xhat: &Pose2D, sigma: &[f64], x_gt: &Pose2D) -> Result<f64> {
    eval_scalar(|t| {
        rle_loss(
            t.constant(Tensor::row(xhat.coords().to_vec())),
            t.constant(Tensor::row(sigma.to_vec())),
            t.constant(Tensor::row(x_gt.coords().to_vec())),
        )
    })
}
