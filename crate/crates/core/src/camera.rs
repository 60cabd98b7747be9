//! Full-perspective pinhole camera: projection, depth-conditioned
//! unprojection, intrinsics from crop geometry, extrinsics from the
//! capsule angles, and rotations about the vertical world axis (`Y`).
//!
//! A world point maps to the image as `[u, v, w]^T = K [R | t] [X, Y, Z, 1]^T`
//! followed by `(u / w, v / w)`. Skew is always zero.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffopt::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, Pose3D, Topology};

/// Homogeneous depth below which a joint counts as lying on the camera plane.
pub const CAMERA_PLANE_EPS: f64 = 1e-12;

/// Lower and upper bound of the random viewpoint change, in degrees.
pub const ROTATION_RANGE_DEG: (f64, f64) = (10.0, 350.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f_w: f64,
    pub f_h: f64,
    pub c_w: f64,
    pub c_h: f64,
    pub s_w: f64,
    pub s_h: f64,
}

impl CameraIntrinsics {
    pub fn new(f_w: f64, f_h: f64, c_w: f64, c_h: f64) -> Result<Self> {
        let k = Self { f_w, f_h, c_w, c_h, s_w: 1.0, s_h: 1.0 };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_w > 0.0 && self.f_h > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got ({}, {})", self.f_w, self.f_h)));
        }
        Ok(())
    }

    /// The six values appended to encoder features and lifter inputs: `f, c, s`.
    pub fn as_features(&self) -> [f64; 6] {
        [self.f_w, self.f_h, self.c_w, self.c_h, self.s_w, self.s_h]
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.f_w, 0.0, self.c_w], [0.0, self.f_h, self.c_h], [0.0, 0.0, 1.0]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Default for CameraExtrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self { r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] }
    }

    /// Validates `R^T R = I` and `det R = +1` to `1e-9`.
    pub fn new(r: [[f64; 3]; 3], t: [f64; 3]) -> Result<Self> {
        let e = Self { r, t };
        let orth = e.orthogonality_error();
        let det = det3(&r);
        if orth >= 1e-9 || (det - 1.0).abs() >= 1e-9 {
            return Err(Error::invalid(format!(
                "rotation is not proper orthogonal (|R^T R - I|_F = {orth:e}, det = {det})"
            )));
        }
        Ok(e)
    }

    /// `R = R_X(theta_x) R_Y(theta_y)`.
    pub fn rotation_from_angles(theta_x: f64, theta_y: f64) -> [[f64; 3]; 3] {
        let (sx, cx) = theta_x.sin_cos();
        let (sy, cy) = theta_y.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        matmul3(&rx, &ry)
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthogonality_error(&self) -> f64 {
        let rt_r = matmul3(&transpose3(&self.r), &self.r);
        let mut s = 0.0;
        for (i, row) in rt_r.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let d = v - if i == j { 1.0 } else { 0.0 };
                s += d * d;
            }
        }
        s.sqrt()
    }

    /// `[R | t]` flattened row by row (12 values).
    pub fn flatten(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[4 * i..4 * i + 3].copy_from_slice(&self.r[i]);
            out[4 * i + 3] = self.t[i];
        }
        out
    }

    /// Camera-frame coordinates `R p + t`.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.t[2],
        ]
    }

    /// World coordinates `R^T (q - t)`.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let d = [q[0] - self.t[0], q[1] - self.t[1], q[2] - self.t[2]];
        let r = &self.r;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }
}

/// Intrinsics plus extrinsics, serialized as one flat record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

#[derive(Serialize, Deserialize)]
#[serde(rename = "Camera")]
struct CameraRecord {
    f_w: f64,
    f_h: f64,
    c_w: f64,
    c_h: f64,
    s_w: f64,
    s_h: f64,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let k = &self.intrinsics;
        let e = &self.extrinsics;
        let mut r = [0.0; 9];
        for i in 0..3 {
            r[3 * i..3 * i + 3].copy_from_slice(&e.r[i]);
        }
        CameraRecord { f_w: k.f_w, f_h: k.f_h, c_w: k.c_w, c_h: k.c_h, s_w: k.s_w, s_h: k.s_h, r, t: e.t }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let c = CameraRecord::deserialize(d)?;
        let mut r = [[0.0; 3]; 3];
        for (row, src) in r.iter_mut().zip(c.r.chunks(3)) {
            row.copy_from_slice(src);
        }
        Ok(Camera {
            intrinsics: CameraIntrinsics { f_w: c.f_w, f_h: c.f_h, c_w: c.c_w, c_h: c.c_h, s_w: c.s_w, s_h: c.s_h },
            extrinsics: CameraExtrinsics { r, t: c.t },
        })
    }
}

/// Placement of the network crop inside the full image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub w_full: f64,
    pub h_full: f64,
    pub left: f64,
    pub top: f64,
    /// Crop size in full-image pixels, before rescaling to `w x h`.
    pub w_bb: f64,
    pub h_bb: f64,
    pub w: f64,
    pub h: f64,
    /// Mean root-to-head length in pose units.
    pub mu_h: f64,
}

impl CropGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("W_full", self.w_full),
            ("H_full", self.h_full),
            ("W_BB", self.w_bb),
            ("H_BB", self.h_bb),
            ("W", self.w),
            ("H", self.h),
            ("mu_h", self.mu_h),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.left < 0.0
            || self.top < 0.0
            || self.left + self.w_bb > self.w_full
            || self.top + self.h_bb > self.h_full
        {
            return Err(Error::invalid("crop extends outside the full image"));
        }
        Ok(())
    }

    /// Maps an image-plane point (camera-model units) to crop pixels.
    pub fn to_crop_pixels(&self, k: &CameraIntrinsics, uv: [f64; 2]) -> [f64; 2] {
        [(uv[0] / k.s_w + self.w / 2.0) * self.w / self.w_bb, (uv[1] / k.s_h + self.h / 2.0) * self.h / self.h_bb]
    }

    pub fn contains_crop_pixel(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[0] <= self.w && p[1] >= 0.0 && p[1] <= self.h
    }
}

/// Homogeneous image triples `[u, v, w]` per joint, before the perspective divide.
pub fn project_homogeneous(y: &Pose3D, k: &CameraIntrinsics, e: &CameraExtrinsics) -> Vec<[f64; 3]> {
    y.joints()
        .map(|p| {
            let q = e.to_camera(p);
            [k.f_w * q[0] + k.c_w * q[2], k.f_h * q[1] + k.c_h * q[2], q[2]]
        })
        .collect()
}

/// Perspective projection of every joint.
pub fn project(y: &Pose3D, k: &CameraIntrinsics, e: &CameraExtrinsics) -> Result<Pose2D> {
    let mut out = Vec::with_capacity(2 * y.joint_count());
    for (j, [u, v, w]) in project_homogeneous(y, k, e).into_iter().enumerate() {
        if w.abs() < CAMERA_PLANE_EPS {
            return Err(Error::JointAtCameraPlane {
                joint: j,
                name: crate::skeleton::h36m::NAMES.get(j).unwrap_or(&"?").to_string(),
                w,
            });
        }
        out.push(u / w);
        out.push(v / w);
    }
    Pose2D::new(out)
}

/// Inverse of [`project`] given the homogeneous depth `w` of each joint.
pub fn unproject(x: &Pose2D, depths: &[f64], k: &CameraIntrinsics, e: &CameraExtrinsics) -> Result<Pose3D> {
    if depths.len() != x.joint_count() {
        return Err(Error::DimensionMismatch { expected: x.joint_count(), actual: depths.len() });
    }
    k.validate()?;
    let mut out = Vec::with_capacity(3 * depths.len());
    for (j, &w) in depths.iter().enumerate() {
        if w == 0.0 || !w.is_finite() {
            return Err(Error::invalid(format!("depth of joint {j} must be nonzero and finite, got {w}")));
        }
        let [u, v] = x.joint(j);
        let q = [(u - k.c_w) * w / k.f_w, (v - k.c_h) * w / k.f_h, w];
        out.extend_from_slice(&e.to_world(q));
    }
    Pose3D::new(out)
}

/// Homogeneous depth `w` of every joint under `e`.
pub fn joint_depths(y: &Pose3D, e: &CameraExtrinsics) -> Vec<f64> {
    y.joints().map(|p| e.to_camera(p)[2]).collect()
}

/// Intrinsics from full-image size and crop placement.
pub fn intrinsics_from_crop(g: &CropGeometry) -> Result<CameraIntrinsics> {
    for (name, v) in [("W_BB", g.w_bb), ("H_BB", g.h_bb), ("mu_h", g.mu_h)] {
        if !(v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    if !(g.w_full > 0.0 && g.h_full > 0.0 && g.w > 0.0 && g.h > 0.0) {
        return Err(Error::invalid("image sizes must be positive"));
    }
    let s_w = g.w / (g.w_bb * g.mu_h);
    let s_h = g.h / (g.h_bb * g.mu_h);
    let f = g.w_full.hypot(g.h_full);
    Ok(CameraIntrinsics {
        f_w: f * s_w,
        f_h: f * s_h,
        c_w: (g.w_full / 2.0 - g.left - g.w / 2.0) * s_w,
        c_h: (g.h_full / 2.0 - g.top - g.h / 2.0) * s_h,
        s_w,
        s_h,
    })
}

/// Per-component mean of the joint triples of a camera capsule: `(theta_x, theta_y, w_p)`.
pub fn capsule_mean(gamma: &[f64]) -> Result<[f64; 3]> {
    if gamma.is_empty() || !gamma.len().is_multiple_of(3) {
        return Err(Error::invalid(format!("camera capsule length {} is not a positive multiple of 3", gamma.len())));
    }
    let n = (gamma.len() / 3) as f64;
    let mut m = [0.0; 3];
    for chunk in gamma.chunks(3) {
        for k in 0..3 {
            m[k] += chunk[k];
        }
    }
    Ok(m.map(|v| v / n))
}

/// Extrinsics from explicit angles and pelvis depth: the world origin lands on image `(0, 0)`.
pub fn extrinsics_from_angles(theta_x: f64, theta_y: f64, w_p: f64, k: &CameraIntrinsics) -> Result<CameraExtrinsics> {
    if !(w_p > 0.0) {
        return Err(Error::SubjectBehindCamera(w_p));
    }
    k.validate()?;
    Ok(CameraExtrinsics {
        r: CameraExtrinsics::rotation_from_angles(theta_x, theta_y),
        t: [-k.c_w * w_p / k.f_w, -k.c_h * w_p / k.f_h, w_p],
    })
}

/// Extrinsics from a `3J` camera capsule; the rotation about `Z` is fixed to zero.
pub fn extrinsics_from_capsule(gamma: &[f64], k: &CameraIntrinsics) -> Result<CameraExtrinsics> {
    let [theta_x, theta_y, w_p] = capsule_mean(gamma)?;
    extrinsics_from_angles(theta_x, theta_y, w_p, k)
}

/// Rotation by `theta` about the vertical axis through the origin.
pub fn rotate_azimuth(y: &Pose3D, theta: f64) -> Pose3D {
    rotate_about(y, theta, [0.0; 3])
}

pub fn inverse_rotate_azimuth(y: &Pose3D, theta: f64) -> Pose3D {
    rotate_about(y, -theta, [0.0; 3])
}

/// Rotation about the vertical axis through the root joint; the root stays put.
pub fn rotate_azimuth_about_root(y: &Pose3D, theta: f64, topo: &Topology) -> Result<Pose3D> {
    y.check(topo)?;
    Ok(rotate_about(y, theta, y.joint(topo.root_index)))
}

fn rotate_about(y: &Pose3D, theta: f64, center: [f64; 3]) -> Pose3D {
    let (s, c) = theta.sin_cos();
    let mut out = y.clone();
    for chunk in out.coords_mut().chunks_mut(3) {
        let dx = chunk[0] - center[0];
        let dz = chunk[2] - center[2];
        chunk[0] = center[0] + c * dx + s * dz;
        chunk[2] = center[2] - s * dx + c * dz;
    }
    out
}

/// Uniform viewpoint change in `[10, 350]` degrees, returned in radians.
pub fn sample_rotation_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let (lo, hi) = ROTATION_RANGE_DEG;
    rng.random_range(lo..=hi).to_radians()
}

pub fn degrees(rad: f64) -> f64 {
    rad * 180.0 / PI
}

pub(crate) fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn transpose3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub(crate) fn det3(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Column indices of the `x`, `y` (and `z`) coordinates in a flat pose row.
#[derive(Debug, Clone)]
pub struct CoordIndex {
    pub joints: usize,
    axes: Vec<Rc<[usize]>>,
    interleave: Rc<[usize]>,
}

impl CoordIndex {
    pub fn new(joints: usize, dim: usize) -> Self {
        let axes = (0..dim).map(|a| Rc::from((0..joints).map(|j| dim * j + a).collect::<Vec<_>>())).collect();
        // Planar [axis0 block | axis1 block | ...] back to interleaved order.
        let interleave = (0..joints * dim).map(|i| (i % dim) * joints + i / dim).collect::<Vec<_>>();
        Self { joints, axes, interleave: Rc::from(interleave) }
    }

    pub fn axis<'t>(&self, pose: Var<'t>, a: usize) -> Var<'t> {
        pose.select_cols(&self.axes[a])
    }

    /// Reassembles per-axis `[B, J]` blocks into an interleaved `[B, dim * J]` pose.
    pub fn assemble<'t>(&self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts[0].tape();
        Ok(tape.concat_cols(parts)?.select_cols(&self.interleave))
    }
}

/// Per-sample camera parameters as `[B, 1]` columns on a tape.
#[derive(Clone)]
pub struct CameraVars<'t> {
    pub f_w: Var<'t>,
    pub f_h: Var<'t>,
    pub c_w: Var<'t>,
    pub c_h: Var<'t>,
    /// Row-major rotation entries.
    pub r: [Var<'t>; 9],
    pub t: [Var<'t>; 3],
}

fn column<'t>(tape: &'t Tape, values: impl Iterator<Item = f64>) -> Var<'t> {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    tape.constant(Tensor::from_vec(n, 1, v).expect("column"))
}

impl<'t> CameraVars<'t> {
    /// Constant cameras, one per batch row.
    pub fn constant(tape: &'t Tape, cams: &[Camera]) -> Self {
        let k = |f: fn(&CameraIntrinsics) -> f64| column(tape, cams.iter().map(|c| f(&c.intrinsics)));
        let r = std::array::from_fn(|i| column(tape, cams.iter().map(|c| c.extrinsics.r[i / 3][i % 3])));
        let t = std::array::from_fn(|i| column(tape, cams.iter().map(|c| c.extrinsics.t[i])));
        Self { f_w: k(|k| k.f_w), f_h: k(|k| k.f_h), c_w: k(|k| k.c_w), c_h: k(|k| k.c_h), r, t }
    }

    /// Differentiable extrinsics from a `[B, 3J]` capsule, with constant intrinsics.
    pub fn from_capsule(gamma: Var<'t>, intrinsics: &[CameraIntrinsics]) -> Result<Self> {
        let tape = gamma.tape();
        let j = gamma.cols() / 3;
        let idx = CoordIndex::new(j, 3);
        let mean = |a| idx.axis(gamma, a).sum_rows() * (1.0 / j as f64);
        let (theta_x, theta_y, w_p) = (mean(0), mean(1), mean(2));
        if let Some(bad) = w_p.value().data().iter().find(|w| !(**w > 0.0)) {
            return Err(Error::SubjectBehindCamera(*bad));
        }
        let (sx, cx) = (theta_x.sin(), theta_x.cos());
        let (sy, cy) = (theta_y.sin(), theta_y.cos());
        let zero = tape.constant(Tensor::zeros(gamma.rows(), 1));
        let one = zero + 1.0;
        let r = [cy, zero, sy, sx * sy, cx, -(sx * cy), -(cx * sy), sx, cx * cy];
        let k = |f: fn(&CameraIntrinsics) -> f64| column(tape, intrinsics.iter().map(f));
        let (f_w, f_h, c_w, c_h) = (k(|k| k.f_w), k(|k| k.f_h), k(|k| k.c_w), k(|k| k.c_h));
        let t = [-(c_w * w_p / f_w), -(c_h * w_p / f_h), w_p * one];
        Ok(Self { f_w, f_h, c_w, c_h, r, t })
    }

    /// Current numeric cameras (gradients are not tracked).
    pub fn snapshot(&self) -> Vec<Camera> {
        let col = |v: &Var<'t>| v.value().data().to_vec();
        let (fw, fh, cw, ch) = (col(&self.f_w), col(&self.f_h), col(&self.c_w), col(&self.c_h));
        let r: Vec<Vec<f64>> = self.r.iter().map(col).collect();
        let t: Vec<Vec<f64>> = self.t.iter().map(col).collect();
        let n = r[0].len();
        let pick = |v: &Vec<f64>, b: usize| if v.len() == 1 { v[0] } else { v[b] };
        (0..n)
            .map(|b| Camera {
                intrinsics: CameraIntrinsics {
                    f_w: pick(&fw, b),
                    f_h: pick(&fh, b),
                    c_w: pick(&cw, b),
                    c_h: pick(&ch, b),
                    s_w: 1.0,
                    s_h: 1.0,
                },
                extrinsics: CameraExtrinsics {
                    r: std::array::from_fn(|i| std::array::from_fn(|k| pick(&r[3 * i + k], b))),
                    t: std::array::from_fn(|i| pick(&t[i], b)),
                },
            })
            .collect()
    }

    /// `[B, 3J]` world poses to `[B, 2J]` image poses.
    pub fn project(&self, y: Var<'t>) -> Result<Var<'t>> {
        let j = y.cols() / 3;
        let idx3 = CoordIndex::new(j, 3);
        let (x, yy, z) = (idx3.axis(y, 0), idx3.axis(y, 1), idx3.axis(y, 2));
        let r = &self.r;
        let cam = |row: usize| x * r[3 * row] + yy * r[3 * row + 1] + z * r[3 * row + 2] + self.t[row];
        let (xc, yc, zc) = (cam(0), cam(1), cam(2));
        if let Some((i, w)) = zc.value().data().iter().enumerate().find(|(_, w)| w.abs() < CAMERA_PLANE_EPS) {
            return Err(Error::JointAtCameraPlane {
                joint: i % j,
                name: crate::skeleton::h36m::NAMES.get(i % j).unwrap_or(&"?").to_string(),
                w: *w,
            });
        }
        let u = (xc * self.f_w + zc * self.c_w) / zc;
        let v = (yc * self.f_h + zc * self.c_h) / zc;
        CoordIndex::new(j, 2).assemble(&[u, v])
    }

    /// `[B, 2J]` image poses plus `[B, J]` depths to `[B, 3J]` world poses.
    pub fn unproject(&self, x: Var<'t>, depths: Var<'t>) -> Result<Var<'t>> {
        let j = x.cols() / 2;
        if depths.cols() != j {
            return Err(Error::DimensionMismatch { expected: j, actual: depths.cols() });
        }
        let idx2 = CoordIndex::new(j, 2);
        let (u, v) = (idx2.axis(x, 0), idx2.axis(x, 1));
        let dx = (u - self.c_w) * depths / self.f_w - self.t[0];
        let dy = (v - self.c_h) * depths / self.f_h - self.t[1];
        let dz = depths - self.t[2];
        let r = &self.r;
        let world = |col: usize| dx * r[col] + dy * r[3 + col] + dz * r[6 + col];
        CoordIndex::new(j, 3).assemble(&[world(0), world(1), world(2)])
    }
}

/// Rotation of `[B, 3J]` poses by per-row angles (`[B, 1]` sin/cos columns)
/// about the vertical axis through each pose's root.
pub fn rotate_about_root_vars<'t>(y: Var<'t>, sin: Var<'t>, cos: Var<'t>, root: usize) -> Result<Var<'t>> {
    let j = y.cols() / 3;
    let idx = CoordIndex::new(j, 3);
    let (x, yy, z) = (idx.axis(y, 0), idx.axis(y, 1), idx.axis(y, 2));
    let (xr, zr) = (x.col(root), z.col(root));
    let dx = x - xr;
    let dz = z - zr;
    let xn = xr + cos * dx + sin * dz;
    let zn = zr - sin * dx + cos * dz;
    idx.assemble(&[xn, yy, zn])
}
