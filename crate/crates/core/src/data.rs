//! Synthetic 17-joint subjects seen by randomized cameras, and the
//! line-delimited dataset file format.
//!
//! World frame: `+Y` up; every subject stands on the origin facing `+Z` with
//! its left side towards `+X`. Poses come from forward kinematics over a
//! bone-length template; cameras orbit the subject and are placed so the pelvis
//! projects to image `(0, 0)` of the crop-derived intrinsics.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    extrinsics_from_angles, intrinsics_from_crop, joint_depths, project, unproject, Camera, CameraIntrinsics,
    CropGeometry,
};
use crate::constraints::{body_normal, limb_term, limbs_loss_value};
use crate::error::{Error, Result};
use crate::skeleton::{bone_lengths, h36m, Pose2D, Pose3D, Topology};

pub const DATASET_FORMAT: &str = "poselift-dataset";
pub const DATASET_VERSION: u32 = 1;
/// Attempts at placing a crop that contains the whole pose.
pub const CROP_ATTEMPTS: usize = 100;
/// Attempts at drawing an articulation that passes the limb-fold test.
const POSE_ATTEMPTS: usize = 200;

/// Bone lengths (mm) of the average subject, in [`Topology::h36m`] bone order.
pub const BONE_TEMPLATE_MM: [f64; 16] = [
    130.0, 450.0, 440.0, // pelvis-right hip, thigh, shin
    130.0, 450.0, 440.0, // left leg
    230.0, 250.0, 110.0, 110.0, // pelvis-spine, spine-thorax, thorax-neck, neck-head
    150.0, 280.0, 250.0, // thorax-left shoulder, upper arm, forearm
    150.0, 280.0, 250.0, // right arm
];

/// Closed interval `[lo, hi]`.
pub type Range = (f64, f64);

/// Joint-angle ranges in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Articulation {
    /// Forward bend of the upper body.
    pub lean: Range,
    pub side_bend: Range,
    pub twist: Range,
    pub head_nod: Range,
    /// Arm raise from hanging, forward positive.
    pub shoulder_flex: Range,
    /// Arm raise sideways, outward positive.
    pub shoulder_abd: Range,
    pub elbow_flex: Range,
    /// Rotation of the elbow hinge about the upper arm, away from the plane
    /// that bends the forearm straight towards the torso normal.
    pub elbow_twist: Range,
    pub hip_flex: Range,
    pub hip_abd: Range,
    /// Backward knee bend; must stay non-negative.
    pub knee_flex: Range,
}

impl Default for Articulation {
    fn default() -> Self {
        Self {
            lean: (-10.0, 30.0),
            side_bend: (-10.0, 10.0),
            twist: (-25.0, 25.0),
            head_nod: (-20.0, 30.0),
            shoulder_flex: (-40.0, 110.0),
            shoulder_abd: (0.0, 80.0),
            elbow_flex: (0.0, 110.0),
            elbow_twist: (-30.0, 30.0),
            hip_flex: (-20.0, 70.0),
            hip_abd: (-5.0, 25.0),
            knee_flex: (0.0, 110.0),
        }
    }
}

impl Articulation {
    /// A sub-box of these ranges: every range shrinks to `spread` of its width
    /// around a random centre.
    pub fn narrowed<R: Rng + ?Sized>(&self, rng: &mut R, spread: f64) -> Self {
        let mut pick = |(lo, hi): Range| {
            let width = (hi - lo) * spread;
            let start = lo + rng.random::<f64>() * (hi - lo - width);
            (start, start + width)
        };
        Self {
            lean: pick(self.lean),
            side_bend: pick(self.side_bend),
            twist: pick(self.twist),
            head_nod: pick(self.head_nod),
            shoulder_flex: pick(self.shoulder_flex),
            shoulder_abd: pick(self.shoulder_abd),
            elbow_flex: pick(self.elbow_flex),
            elbow_twist: pick(self.elbow_twist),
            hip_flex: pick(self.hip_flex),
            hip_abd: pick(self.hip_abd),
            knee_flex: pick(self.knee_flex),
        }
    }

    fn ranges(&self) -> [(&'static str, Range); 11] {
        [
            ("lean", self.lean),
            ("side_bend", self.side_bend),
            ("twist", self.twist),
            ("head_nod", self.head_nod),
            ("shoulder_flex", self.shoulder_flex),
            ("shoulder_abd", self.shoulder_abd),
            ("elbow_flex", self.elbow_flex),
            ("elbow_twist", self.elbow_twist),
            ("hip_flex", self.hip_flex),
            ("hip_abd", self.hip_abd),
            ("knee_flex", self.knee_flex),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub seed: u64,
    /// Distinct subjects; record `id` belongs to subject `id % subjects`.
    pub subjects: usize,
    /// Per-subject global scale is drawn from `1 +- scale_jitter`.
    pub scale_jitter: f64,
    /// Per-subject, per-bone relative jitter `+- bone_jitter`; the reference
    /// bone (pelvis-spine) only follows the global scale, so bone ratios vary
    /// by at most this fraction.
    pub bone_jitter: f64,
    pub articulation: Articulation,
    /// Number of action templates; each is a narrowed copy of
    /// `articulation` and every pose is drawn from one of them. Zero draws
    /// every angle from the full ranges.
    pub actions: usize,
    /// Width of each action's ranges relative to the full ranges.
    pub action_spread: f64,
    /// Seed of the action templates, separate from `seed` so that datasets
    /// drawn with different seeds share the same actions.
    pub action_seed: u64,
    pub distance_mm: Range,
    pub azimuth_deg: Range,
    pub elevation_deg: Range,
    pub image_size: (f64, f64),
    /// Network crop size `(W, H)`.
    pub crop_size: (f64, f64),
    /// Crop width in full-image pixels, as a multiple of `W`.
    pub crop_zoom: Range,
    /// Mean root-to-head length (mm) used by the intrinsics.
    pub mu_h: f64,
    /// Standard deviation of 2D observation noise, in crop pixels.
    pub noise_px: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            seed: 0,
            subjects: 5,
            scale_jitter: 0.08,
            bone_jitter: 0.03,
            articulation: Articulation::default(),
            actions: 8,
            action_spread: 0.25,
            action_seed: 0,
            distance_mm: (6500.0, 9000.0),
            azimuth_deg: (0.0, 360.0),
            elevation_deg: (-10.0, 20.0),
            image_size: (640.0, 480.0),
            crop_size: (256.0, 256.0),
            crop_zoom: (1.0, 1.25),
            mu_h: 700.0,
            noise_px: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        let mut ranges: Vec<(&str, Range)> = self.articulation.ranges().to_vec();
        ranges.extend([
            ("distance_mm", self.distance_mm),
            ("azimuth_deg", self.azimuth_deg),
            ("elevation_deg", self.elevation_deg),
            ("crop_zoom", self.crop_zoom),
        ]);
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("range {name} = [{lo}, {hi}] is not a valid interval"));
            }
        }
        if self.articulation.knee_flex.0 < 0.0 || self.articulation.elbow_flex.0 < 0.0 {
            return bad("knee and elbow flexion must be non-negative".into());
        }
        if !(self.action_spread > 0.0 && self.action_spread <= 1.0) {
            return bad(format!("action spread {} must lie in (0, 1]", self.action_spread));
        }
        if self.subjects == 0 {
            return bad("need at least one subject".into());
        }
        if !(0.0..0.5).contains(&self.scale_jitter) || !(0.0..0.5).contains(&self.bone_jitter) {
            return bad("jitter must lie in [0, 0.5)".into());
        }
        if !(self.distance_mm.0 > 0.0) {
            return bad("camera distance must be positive".into());
        }
        if !(self.crop_zoom.0 >= 1.0) {
            return bad("crop_zoom must be at least 1".into());
        }
        if !(self.mu_h > 0.0 && self.noise_px >= 0.0) {
            return bad("mu_h must be positive and noise_px non-negative".into());
        }
        let (wf, hf) = self.image_size;
        let (w, h) = self.crop_size;
        if !(w > 0.0 && h > 0.0 && w * self.crop_zoom.1 <= wf && h * self.crop_zoom.1 <= hf) {
            return bad("crop does not fit in the full image".into());
        }
        Ok(())
    }
}

/// One ground-truth sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    /// Grouping key for per-sequence evaluation (the subject for synthetic data).
    pub sequence: String,
    pub y_gt: Pose3D,
    pub x_gt: Pose2D,
    pub crop: CropGeometry,
    pub camera: Camera,
    /// Relative path of a feature file holding this record's features, if any.
    #[serde(default)]
    pub features: Option<String>,
}

impl SampleRecord {
    /// Camera-frame depth of every joint.
    pub fn depths(&self) -> Vec<f64> {
        joint_depths(&self.y_gt, &self.camera.extrinsics)
    }

    /// Checks the record's internal consistency; returns a description of every
    /// violation. `noise_free` enables the exact projection checks.
    pub fn audit(&self, topo: &Topology, template: Option<(&[f64], f64)>, noise_free: bool) -> Vec<String> {
        let mut out = Vec::new();
        let (k, e) = (&self.camera.intrinsics, &self.camera.extrinsics);
        match project(&self.y_gt, k, e) {
            Ok(x) => {
                if noise_free {
                    let err = max_abs(x.coords(), self.x_gt.coords());
                    if err > 1e-9 {
                        out.push(format!("projection differs from x_gt by {err:e}"));
                    }
                }
                for (j, uv) in x.joints().enumerate() {
                    if !self.crop.contains_crop_pixel(self.crop.to_crop_pixels(k, uv)) {
                        out.push(format!("joint {j} falls outside the crop"));
                    }
                }
            }
            Err(err) => out.push(format!("projection failed: {err}")),
        }
        if noise_free {
            match unproject(&self.x_gt, &self.depths(), k, e) {
                Ok(y) => {
                    let err = max_abs(y.coords(), self.y_gt.coords());
                    if err > 1e-9 {
                        out.push(format!("unprojection differs from y_gt by {err:e}"));
                    }
                }
                Err(err) => out.push(format!("unprojection failed: {err}")),
            }
        }
        match limbs_loss_value(&self.y_gt, topo) {
            Ok(0.0) => {}
            Ok(v) => out.push(format!("limb fold penalty {v}")),
            Err(err) => out.push(format!("limb check failed: {err}")),
        }
        if let Some((lengths, jitter)) = template {
            let actual = bone_lengths(&self.y_gt, topo).unwrap_or_default();
            let r = topo.reference_bone;
            let slack = jitter + 1e-9;
            for (b, (a, t)) in actual.iter().zip(lengths).enumerate() {
                let q = (a / actual[r]) / (t / lengths[r]);
                if !((q - 1.0).abs() <= slack) {
                    out.push(format!("bone {b} ratio off template by factor {q}"));
                }
            }
        }
        out
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Records plus the joint count declared in the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub joint_count: usize,
    pub records: Vec<SampleRecord>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalized(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

/// Rodrigues rotation of `v` about unit `axis`.
fn rotate(v: V3, axis: V3, angle: f64) -> V3 {
    let (s, c) = angle.sin_cos();
    add(add(scale(v, c), scale(cross(axis, v), s)), scale(axis, dot(axis, v) * (1.0 - c)))
}

const X: V3 = [1.0, 0.0, 0.0];
const Y: V3 = [0.0, 1.0, 0.0];
const Z: V3 = [0.0, 0.0, 1.0];
const DOWN: V3 = [0.0, -1.0, 0.0];

/// Upper-body frame: twist about up, then forward lean, then side bend.
struct Frame {
    axes: [V3; 3],
}

impl Frame {
    fn new(lean: f64, side: f64, twist: f64) -> Self {
        let apply = |v: V3| rotate(rotate(rotate(v, Y, twist), X, lean), Z, side);
        Self { axes: [apply(X), apply(Y), apply(Z)] }
    }

    fn map(&self, v: V3) -> V3 {
        add(add(scale(self.axes[0], v[0]), scale(self.axes[1], v[1])), scale(self.axes[2], v[2]))
    }
}

/// Direction of a limb segment raised from hanging: `flex` towards `+Z`, then
/// `abd` outwards (`side` = +1 left, -1 right).
fn raised(flex: f64, abd: f64, side: f64) -> V3 {
    // Rotating DOWN about +X by -flex swings it towards +Z.
    let v = rotate(DOWN, X, -flex);
    rotate(v, Z, side * abd)
}

/// A subject's bone lengths in bone order.
pub fn subject_bones(config: &SyntheticConfig, subject: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_4150_4553_5f31);
    rng.set_stream(subject);
    let global = 1.0 + uniform(&mut rng, (-config.scale_jitter, config.scale_jitter));
    // Left and right share lengths; jitter is drawn per bone type.
    let mut per_type: Vec<f64> =
        (0..10).map(|_| 1.0 + uniform(&mut rng, (-config.bone_jitter, config.bone_jitter))).collect();
    per_type[3] = 1.0;
    let type_of = [0, 1, 2, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 7, 8, 9];
    BONE_TEMPLATE_MM.iter().zip(type_of).map(|(l, t)| l * global * per_type[t]).collect()
}

/// Joint-angle ranges of action template `action`.
pub fn action_articulation(config: &SyntheticConfig, action: u64) -> Articulation {
    let mut rng = ChaCha8Rng::seed_from_u64(config.action_seed ^ 0x4143_5449_4f4e_5321);
    rng.set_stream(action);
    config.articulation.narrowed(&mut rng, config.action_spread)
}

fn articulate<R: Rng + ?Sized>(rng: &mut R, bones: &[f64], a: &Articulation, topo: &Topology) -> Result<Pose3D> {
    use h36m::*;
    let deg = |rng: &mut R, r: Range| uniform(rng, r).to_radians();
    for _ in 0..POSE_ATTEMPTS {
        let mut j = [[0.0; 3]; 17];
        j[RIGHT_HIP] = [-bones[0], 0.0, 0.0];
        j[LEFT_HIP] = [bones[3], 0.0, 0.0];
        let frame = Frame::new(deg(rng, a.lean), deg(rng, a.side_bend), deg(rng, a.twist));
        j[SPINE] = frame.map([0.0, bones[6], 0.0]);
        j[THORAX] = add(j[SPINE], frame.map([0.0, bones[7], 0.0]));
        j[NECK] = add(j[THORAX], frame.map([0.0, bones[8], 0.0]));
        let nod = deg(rng, a.head_nod);
        j[HEAD] = add(j[NECK], frame.map(rotate([0.0, bones[9], 0.0], X, nod)));

        for (side, hip, knee, ankle, b) in
            [(1.0, LEFT_HIP, LEFT_KNEE, LEFT_ANKLE, 4), (-1.0, RIGHT_HIP, RIGHT_KNEE, RIGHT_ANKLE, 1)]
        {
            let thigh = raised(deg(rng, a.hip_flex), deg(rng, a.hip_abd), side);
            // Knees bend backwards: rotate about Z x thigh.
            let axis = normalized(cross(Z, thigh));
            let shin = rotate(thigh, axis, deg(rng, a.knee_flex));
            j[knee] = add(j[hip], scale(thigh, bones[b]));
            j[ankle] = add(j[knee], scale(shin, bones[b + 1]));
        }

        let partial = Pose3D::from_joints(&j);
        let normal = body_normal(&partial, topo);
        for (side, sh, el, wr, b) in
            [(1.0, LEFT_SHOULDER, LEFT_ELBOW, LEFT_WRIST, 10), (-1.0, RIGHT_SHOULDER, RIGHT_ELBOW, RIGHT_WRIST, 13)]
        {
            j[sh] = add(j[THORAX], frame.map([side * bones[b], 0.0, 0.0]));
            // Redraw each arm until it passes the fold test against this torso.
            for _ in 0..POSE_ATTEMPTS {
                let upper = frame.map(raised(deg(rng, a.shoulder_flex), deg(rng, a.shoulder_abd), side));
                // The elbow is a hinge; at zero twist it folds the forearm
                // towards the torso normal.
                let towards = cross(upper, normal);
                let hinge = if dot(towards, towards).sqrt() > 1e-6 * dot(normal, normal).sqrt() {
                    normalized(towards)
                } else {
                    normalized(cross(upper, if dot(upper, X).abs() < 0.9 { X } else { Y }))
                };
                let axis = rotate(hinge, upper, deg(rng, a.elbow_twist));
                let fore = rotate(upper, axis, deg(rng, a.elbow_flex));
                let p = scale(upper, bones[b + 1]);
                let d = scale(fore, bones[b + 2]);
                if limb_term(normal, p, d) == 0.0 {
                    j[el] = add(j[sh], p);
                    j[wr] = add(j[el], d);
                    break;
                }
            }
        }
        let pose = Pose3D::from_joints(&j);
        if limbs_loss_value(&pose, topo)? == 0.0 {
            return Ok(pose);
        }
    }
    Err(Error::invalid("articulation ranges admit no fold-free pose"))
}

fn sample_record(config: &SyntheticConfig, topo: &Topology, subjects: &[Vec<f64>], id: u64) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(id + 1);
    let subject = id % config.subjects as u64;
    let articulation = if config.actions == 0 {
        config.articulation.clone()
    } else {
        action_articulation(config, rng.random_range(0..config.actions as u64))
    };
    let y = articulate(&mut rng, &subjects[subject as usize], &articulation, topo)?;
    let (w_full, h_full) = config.image_size;
    let (w, h) = config.crop_size;
    for _ in 0..CROP_ATTEMPTS {
        let zoom = uniform(&mut rng, config.crop_zoom);
        let (w_bb, h_bb) = (w * zoom, h * zoom);
        let crop = CropGeometry {
            w_full,
            h_full,
            left: uniform(&mut rng, (0.0, w_full - w_bb)),
            top: uniform(&mut rng, (0.0, h_full - h_bb)),
            w_bb,
            h_bb,
            w,
            h,
            mu_h: config.mu_h,
        };
        let k = intrinsics_from_crop(&crop)?;
        let e = extrinsics_from_angles(
            uniform(&mut rng, config.elevation_deg).to_radians(),
            uniform(&mut rng, config.azimuth_deg).to_radians(),
            uniform(&mut rng, config.distance_mm),
            &k,
        )?;
        let Ok(x) = project(&y, &k, &e) else { continue };
        if joint_depths(&y, &e).iter().any(|d| !(*d > 0.0)) {
            continue;
        }
        if !x.joints().all(|uv| crop.contains_crop_pixel(crop.to_crop_pixels(&k, uv))) {
            continue;
        }
        let x_gt = add_noise(&x, &crop, &k, config.noise_px, &mut rng);
        return Ok(SampleRecord {
            id,
            sequence: format!("S{}", subject + 1),
            y_gt: y,
            x_gt,
            crop,
            camera: Camera { intrinsics: k, extrinsics: e },
            features: None,
        });
    }
    Err(Error::InfeasibleCrop { record: id, attempts: CROP_ATTEMPTS })
}

fn add_noise(x: &Pose2D, crop: &CropGeometry, k: &CameraIntrinsics, sigma_px: f64, rng: &mut ChaCha8Rng) -> Pose2D {
    if sigma_px == 0.0 {
        return x.clone();
    }
    // One crop pixel spans (W_BB / W) * s image-plane units.
    let unit = [crop.w_bb / crop.w * k.s_w, crop.h_bb / crop.h * k.s_h];
    let mut out = x.clone();
    for (i, c) in out.coords_mut().iter_mut().enumerate() {
        let e: f64 = rng.sample(StandardNormal);
        *c += sigma_px * unit[i % 2] * e;
    }
    out
}

/// Deterministic synthetic dataset; records are generated in parallel, each
/// from its own random stream keyed by `(seed, id)`.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let topo = Topology::h36m();
    let subjects: Vec<Vec<f64>> = (0..config.subjects as u64).map(|s| subject_bones(config, s)).collect();
    let records = (0..config.count as u64)
        .into_par_iter()
        .map(|id| sample_record(config, &topo, &subjects, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { joint_count: topo.joint_count(), records })
}

/// Field mapping for external 17-joint data: world positions in mm and one
/// camera per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub id: u64,
    pub sequence: String,
    pub joints_mm: Vec<[f64; 3]>,
    pub crop: CropGeometry,
    pub camera: Camera,
}

impl ExternalRecord {
    pub fn into_sample(self) -> Result<SampleRecord> {
        let y = Pose3D::from_joints(&self.joints_mm);
        let x = project(&y, &self.camera.intrinsics, &self.camera.extrinsics)?;
        Ok(SampleRecord {
            id: self.id,
            sequence: self.sequence,
            y_gt: y,
            x_gt: x,
            crop: self.crop,
            camera: self.camera,
            features: None,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    joint_count: usize,
}

/// Writes every float with 17 significant digits, which round-trips exactly.
struct SigDigits;

impl serde_json::ser::Formatter for SigDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

fn to_line<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(buf)
}

impl Dataset {
    /// Serialized file contents: a header line, then one record per line.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = to_line(&Header {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            joint_count: self.joint_count,
        })?;
        for r in &self.records {
            out.extend(to_line(r)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        Self::read(reader, &path.display().to_string())
    }

    pub fn read<R: BufRead>(reader: R, name: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse { path: name.into(), line, message };
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        if header.format != DATASET_FORMAT {
            return Err(parse_err(1, format!("unknown format {:?}", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Version { what: "dataset", found: header.version, expected: DATASET_VERSION });
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
            if r.y_gt.joint_count() != header.joint_count || r.x_gt.joint_count() != header.joint_count {
                return Err(parse_err(n, format!("record does not have {} joints", header.joint_count)));
            }
            records.push(r);
        }
        Ok(Self { joint_count: header.joint_count, records })
    }

    /// Splits off the last `fraction` of records (by position) as a held-out set.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.records.len();
        let held = ((n as f64) * fraction).round() as usize;
        let cut = n - held.min(n);
        let part = |r: &[SampleRecord]| Dataset { joint_count: self.joint_count, records: r.to_vec() };
        (part(&self.records[..cut]), part(&self.records[cut..]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig { count, seed, ..Default::default() }
    }

    #[test]
    fn empty_config_gives_empty_dataset() {
        assert!(generate(&small(0, 1)).unwrap().records.is_empty());
    }

    #[test]
    fn records_pass_audit() {
        let cfg = small(300, 2);
        let ds = generate(&cfg).unwrap();
        let topo = Topology::h36m();
        for r in &ds.records {
            let v = r.audit(&topo, Some((&BONE_TEMPLATE_MM, cfg.bone_jitter)), true);
            assert!(v.is_empty(), "record {}: {v:?}", r.id);
            let x = r.camera.extrinsics.to_camera(r.y_gt.joint(h36m::PELVIS));
            assert!(x[2] > 0.0);
        }
    }

    #[test]
    fn pelvis_projects_to_origin() {
        let ds = generate(&small(50, 3)).unwrap();
        for r in &ds.records {
            let p = r.x_gt.joint(h36m::PELVIS);
            assert!(p[0].abs() < 1e-9 && p[1].abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_and_roundtrips() {
        let a = generate(&small(40, 4)).unwrap();
        let b = generate(&small(40, 4)).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let back = Dataset::read(&a.to_bytes().unwrap()[..], "mem").unwrap();
        assert_eq!(back, a);
        let c = generate(&small(40, 5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn numbers_have_17_significant_digits() {
        let line = String::from_utf8(to_line(&vec![0.1f64, -2.5e-300, 1.0 / 3.0]).unwrap()).unwrap();
        assert_eq!(line, "[1.0000000000000001e-1,-2.5000000000000000e-300,3.3333333333333331e-1]\n");
    }

    #[test]
    fn malformed_input_reports_line() {
        let ds = generate(&small(3, 6)).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let truncated = &text[..text.len() - 40];
        match Dataset::read(truncated.as_bytes(), "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let header_only = text.lines().next().unwrap().to_string() + "\n";
        assert!(Dataset::read(header_only.as_bytes(), "h").unwrap().records.is_empty());
        let wrong = header_only.replace("\"version\":1", "\"version\":7");
        assert!(matches!(Dataset::read(wrong.as_bytes(), "v"), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn noise_moves_observations_only() {
        let cfg = SyntheticConfig { noise_px: 2.0, ..small(20, 7) };
        let ds = generate(&cfg).unwrap();
        let topo = Topology::h36m();
        for r in &ds.records {
            let clean = project(&r.y_gt, &r.camera.intrinsics, &r.camera.extrinsics).unwrap();
            assert!(max_abs(clean.coords(), r.x_gt.coords()) > 0.0);
            assert!(r.audit(&topo, None, false).is_empty());
        }
    }

    #[test]
    fn bone_ratio_spread_is_bounded() {
        let cfg = small(200, 8);
        let ds = generate(&cfg).unwrap();
        let topo = Topology::h36m();
        let ratios: Vec<Vec<f64>> = ds
            .records
            .iter()
            .map(|r| {
                let l = bone_lengths(&r.y_gt, &topo).unwrap();
                l.iter().map(|v| v / l[topo.reference_bone]).collect()
            })
            .collect();
        for b in 0..16 {
            let vals: Vec<f64> = ratios.iter().map(|r| r[b]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(sd / m <= cfg.bone_jitter, "bone {b}: cv {}", sd / m);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(1, 0);
        cfg.articulation.knee_flex = (-10.0, 20.0);
        assert!(generate(&cfg).is_err());
        let mut cfg = small(1, 0);
        cfg.distance_mm = (5.0, 1.0);
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn impossible_crop_is_reported() {
        let cfg = SyntheticConfig { distance_mm: (1500.0, 1600.0), ..small(1, 0) };
        assert!(matches!(generate(&cfg), Err(Error::InfeasibleCrop { record: 0, .. })));
    }
}
