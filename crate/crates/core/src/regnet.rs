//! Capsule decoder head: one linear map from image features (plus the six
//! intrinsics values) to attention, 3D-pose, camera and presence capsules.
//!
//! The image encoder is abstracted behind [`FeatureProvider`]; a synthetic
//! provider embeds the ground-truth camera-frame pose, a file-backed provider
//! reads precomputed vectors.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{
    intrinsics_from_crop, rotate_about_root_vars, sample_rotation_angle, Camera, CameraIntrinsics, CameraVars,
    CoordIndex,
};
use crate::checkpoint::Checkpoint;
use crate::constraints::{bone_loss, bone_ratios, limbs_loss, rle_loss, BoneRatioStats};
use crate::data::SampleRecord;
use crate::diffopt::{clip_grad_norm, AdamWConfig, AdamWState, LossBalancer, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Standardizer};
use crate::normflow::FlowModel;
use crate::skeleton::{Pose2D, Pose3D, Topology};

pub const CHECKPOINT_KIND: &str = "regressor";
pub const INTRINSICS_FEATURES: usize = 6;
/// Encoder width used by the full-size model.
pub const DEFAULT_FEATURE_WIDTH: usize = 2048;
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Error scale of a zero presence capsule, in image-plane units.
pub const SIGMA_INIT: f64 = 0.02;
pub const DEPTH_FLOOR: f64 = 1e-3;
/// Names of the four loss terms, in balancer order.
pub const TERMS: [&str; 4] = ["bone", "limbs", "nf", "rle"];

/// Supplies the encoder half of the decoder input for a record.
pub trait FeatureProvider {
    fn width(&self) -> usize;
    fn features(&self, record: &SampleRecord) -> Result<Vec<f64>>;
}

/// Fixed random linear embedding of the ground-truth camera-frame pose (in
/// metres), plus Gaussian noise that is deterministic per `(seed, record id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFeatures {
    width: usize,
    joints: usize,
    /// `[width, 3J]`, row-major.
    embedding: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticFeatures {
    pub fn new(width: usize, joints: usize, noise: f64, seed: u64) -> Result<Self> {
        if width == 0 || joints == 0 {
            return Err(Error::invalid("feature width and joint count must be positive"));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::invalid(format!("feature noise {noise} must be finite and non-negative")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4645_4154_5552_4553);
        let scale = 1.0 / ((3 * joints) as f64).sqrt();
        let embedding = (0..width * 3 * joints).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Self { width, joints, embedding, noise, seed })
    }
}

impl FeatureProvider for SyntheticFeatures {
    fn width(&self) -> usize {
        self.width
    }

    fn features(&self, record: &SampleRecord) -> Result<Vec<f64>> {
        if record.y_gt.joint_count() != self.joints {
            return Err(Error::DimensionMismatch { expected: 3 * self.joints, actual: record.y_gt.coords().len() });
        }
        let q: Vec<f64> =
            record.y_gt.joints().flat_map(|p| record.camera.extrinsics.to_camera(p).map(|v| v / 1000.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(record.id.wrapping_add(1));
        Ok(self
            .embedding
            .chunks(q.len())
            .map(|row| {
                let clean: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
                let e: f64 = if self.noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                clean + self.noise * e
            })
            .collect())
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"PLFEAT\0\0";
pub const FEATURE_VERSION: u32 = 1;

/// Precomputed feature vectors keyed by record id.
///
/// Binary layout (little endian): magic `PLFEAT\0\0`, `u32` version, `u32`
/// width, `u64` count, then `count` records of `u64` id followed by `width`
/// `f64` values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureFile {
    width: usize,
    vectors: HashMap<u64, Vec<f64>>,
}

impl FeatureFile {
    pub fn new(width: usize) -> Self {
        Self { width, vectors: HashMap::new() }
    }

    /// Captures `provider`'s features for every record.
    pub fn capture(provider: &dyn FeatureProvider, records: &[SampleRecord]) -> Result<Self> {
        let mut out = Self::new(provider.width());
        for r in records {
            out.insert(r.id, provider.features(r)?)?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, id: u64, v: Vec<f64>) -> Result<()> {
        if v.len() != self.width {
            return Err(Error::DimensionMismatch { expected: self.width, actual: v.len() });
        }
        if self.vectors.insert(id, v).is_some() {
            return Err(Error::invalid(format!("duplicate feature record id {id}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.vectors.len() as u64).to_le_bytes())?;
        let mut ids: Vec<&u64> = self.vectors.keys().collect();
        ids.sort();
        for id in ids {
            w.write_all(&id.to_le_bytes())?;
            for v in &self.vectors[id] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, name: &str) -> Result<Self> {
        let parse = |message: String| Error::Parse { path: name.into(), line: 0, message };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| parse("truncated header".into()))?;
        if &magic != FEATURE_MAGIC {
            return Err(parse("not a feature file".into()));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b).map_err(|_| parse("truncated header".into()))?;
        let version = u32::from_le_bytes(u32b);
        if version != FEATURE_VERSION {
            return Err(Error::Version { what: "feature file", found: version, expected: FEATURE_VERSION });
        }
        r.read_exact(&mut u32b).map_err(|_| parse("truncated header".into()))?;
        let width = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u64b).map_err(|_| parse("truncated header".into()))?;
        let count = u64::from_le_bytes(u64b);
        let mut out = Self::new(width);
        for k in 0..count {
            let truncated = || parse(format!("truncated at record {k} of {count}"));
            r.read_exact(&mut u64b).map_err(|_| truncated())?;
            let id = u64::from_le_bytes(u64b);
            let mut v = Vec::with_capacity(width);
            for _ in 0..width {
                r.read_exact(&mut u64b).map_err(|_| truncated())?;
                v.push(f64::from_le_bytes(u64b));
            }
            if out.vectors.insert(id, v).is_some() {
                return Err(parse(format!("duplicate record id {id}")));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice(), &path.display().to_string())
    }
}

impl FeatureProvider for FeatureFile {
    fn width(&self) -> usize {
        self.width
    }

    fn features(&self, record: &SampleRecord) -> Result<Vec<f64>> {
        self.vectors
            .get(&record.id)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no features stored for record {}", record.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub joints: usize,
    /// Encoder feature width; the decoder input is this plus six intrinsics.
    pub feature_width: usize,
    /// Millimetres per unit of the pose capsule and of the camera depth.
    pub output_scale: f64,
    /// Subject depth produced by a zero camera capsule.
    pub depth_prior: f64,
}

impl DecoderArch {
    pub fn new(joints: usize, feature_width: usize, depth_prior: f64) -> Self {
        Self { joints, feature_width, output_scale: 1000.0, depth_prior }
    }

    pub fn input_width(&self) -> usize {
        self.feature_width + INTRINSICS_FEATURES
    }

    pub fn output_width(&self) -> usize {
        9 * self.joints
    }
}

/// Decoder output split into its capsules, one row per sample.
pub struct CapsuleSplit<'t> {
    /// `[B, J]` softmax weights.
    pub attention: Var<'t>,
    /// `[B, 3J]` pose capsule (attention-scaled, before output scaling).
    pub pose: Var<'t>,
    /// `[B, 3J]` camera capsule (attention-scaled) as `(theta_x, theta_y, depth)` triples.
    pub camera: Var<'t>,
    /// `[B, 2J]` presence capsule (attention-scaled).
    pub presence: Var<'t>,
}

/// Everything a forward pass produces.
pub struct RegVars<'t> {
    pub split: CapsuleSplit<'t>,
    /// Root-centred world pose.
    pub yhat: Var<'t>,
    pub cameras: CameraVars<'t>,
    pub xhat: Var<'t>,
    pub xhat_r: Var<'t>,
    /// Per-coordinate error scale in `(0, 1)`.
    pub sigma: Var<'t>,
}

/// Plain-number forward output for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegOutput {
    pub yhat: Pose3D,
    pub camera: Camera,
    pub xhat: Pose2D,
    pub xhat_r: Pose2D,
    pub sigma: Vec<f64>,
    /// Softmax attention over joints.
    pub attention: Vec<f64>,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DecoderLayout {
    arch: DecoderArch,
    layer: Linear,
    norm: Standardizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub arch: DecoderArch,
    pub norm: Standardizer,
    layer: Linear,
    params: ParamSet,
}

fn repeat_cols(joints: usize, times: usize) -> Rc<[usize]> {
    Rc::from((0..joints).flat_map(|j| std::iter::repeat_n(j, times)).collect::<Vec<_>>())
}

/// Decoder inputs: features followed by the intrinsics values.
pub fn decoder_input(features: &[f64], k: &CameraIntrinsics) -> Vec<f64> {
    let mut row = features.to_vec();
    row.extend(k.as_features());
    row
}

/// Standardization fitted to the decoder inputs of `records`.
pub fn fit_input_norm(provider: &dyn FeatureProvider, records: &[SampleRecord]) -> Result<Standardizer> {
    let rows = records
        .iter()
        .map(|r| Ok(decoder_input(&provider.features(r)?, &r.camera.intrinsics)))
        .collect::<Result<Vec<_>>>()?;
    Standardizer::fit(&rows)
}

impl Decoder {
    /// Small random initialization (a zero map would collapse the pose).
    pub fn new(arch: DecoderArch, norm: Standardizer, seed: u64) -> Result<Self> {
        if arch.joints == 0 || arch.feature_width == 0 {
            return Err(Error::invalid("decoder needs joints > 0 and a positive feature width"));
        }
        if norm.width() != arch.input_width() {
            return Err(Error::DimensionMismatch { expected: arch.input_width(), actual: norm.width() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layer =
            Linear::new(&mut params, "capsules", arch.input_width(), arch.output_width(), Init::Scaled(0.1), &mut rng);
        let j = arch.joints;
        // Attention starts uniform (the identity).
        let out = arch.output_width();
        for (i, w) in params.get_mut(layer.weight).data_mut().iter_mut().enumerate() {
            if i % out < j {
                *w = 0.0;
            }
        }
        Ok(Self { arch, norm, layer, params })
    }

    /// A decoder whose linear map is all zeros (uniform attention, zero capsules).
    pub fn zeros(arch: DecoderArch) -> Result<Self> {
        let norm = Standardizer::identity(arch.input_width());
        let mut d = Self::new(arch, norm, 0)?;
        for t in d.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(d)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Splits the linear map's output into capsules and applies attention:
    /// every joint's pose, camera and presence slices are multiplied by
    /// `J * attention_j`, so uniform attention is the identity.
    pub fn decode<'t>(&self, bound: &[Var<'t>], inputs: Var<'t>) -> Result<CapsuleSplit<'t>> {
        if inputs.cols() != self.arch.input_width() {
            return Err(Error::DimensionMismatch { expected: self.arch.input_width(), actual: inputs.cols() });
        }
        let j = self.arch.joints;
        let out = self.layer.forward(bound, self.norm.apply(inputs)?)?;
        let attention = out.cols_range(0, j).softmax();
        let weight = attention * j as f64;
        let w3 = weight.select_cols(&repeat_cols(j, 3));
        let w2 = weight.select_cols(&repeat_cols(j, 2));
        let camera = {
            let raw = out.cols_range(4 * j, 3 * j);
            let idx = CoordIndex::new(j, 3);
            let depth = (idx.axis(raw, 2) * self.arch.output_scale + self.arch.depth_prior).max_const(DEPTH_FLOOR);
            idx.assemble(&[idx.axis(raw, 0), idx.axis(raw, 1), depth])? * w3
        };
        Ok(CapsuleSplit {
            attention,
            pose: out.cols_range(j, 3 * j) * w3,
            camera,
            presence: out.cols_range(7 * j, 2 * j) * w2,
        })
    }

    /// Full forward pass. `angles` holds one viewpoint change per row.
    pub fn forward_vars<'t>(
        &self,
        bound: &[Var<'t>],
        inputs: Var<'t>,
        intrinsics: &[CameraIntrinsics],
        angles: &[f64],
        root: usize,
    ) -> Result<RegVars<'t>> {
        let tape = inputs.tape();
        if intrinsics.len() != inputs.rows() || angles.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                actual: intrinsics.len().min(angles.len()),
            });
        }
        let split = self.decode(bound, inputs)?;
        let j = self.arch.joints;
        let idx = CoordIndex::new(j, 3);
        let pose = split.pose * self.arch.output_scale;
        let axes: Vec<Var<'t>> = (0..3)
            .map(|a| {
                let c = idx.axis(pose, a);
                c - c.col(root)
            })
            .collect();
        let yhat = idx.assemble(&axes)?;
        let cameras = CameraVars::from_capsule(split.camera, intrinsics)?;
        let xhat = cameras.project(yhat)?;
        let sin = tape.constant(Tensor::from_vec(angles.len(), 1, angles.iter().map(|a| a.sin()).collect())?);
        let cos = tape.constant(Tensor::from_vec(angles.len(), 1, angles.iter().map(|a| a.cos()).collect())?);
        let xhat_r = cameras.project(rotate_about_root_vars(yhat, sin, cos, root)?)?;
        // A zero presence capsule maps to SIGMA_INIT whatever the attention.
        let logit = (SIGMA_INIT / (1.0 - SIGMA_INIT)).ln();
        let sigma = split.presence.offset(logit).sigmoid() * (1.0 - SIGMA_FLOOR) + SIGMA_FLOOR;
        Ok(RegVars { split, yhat, cameras, xhat, xhat_r, sigma })
    }

    /// Forward passes for `records` with viewpoint changes drawn from `rng`.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        provider: &dyn FeatureProvider,
        records: &[SampleRecord],
        topo: &Topology,
        rng: &mut R,
    ) -> Result<Vec<RegOutput>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(256) {
            let angles: Vec<f64> = chunk.iter().map(|_| sample_rotation_angle(rng)).collect();
            let tape = Tape::new();
            let bound = self.params.bind_constant(&tape);
            let (inputs, intrinsics) = batch_inputs(provider, chunk)?;
            let v = self.forward_vars(&bound, tape.constant(inputs), &intrinsics, &angles, topo.root_index)?;
            let cams = v.cameras.snapshot();
            let (y, x, xr, s) = (v.yhat.value(), v.xhat.value(), v.xhat_r.value(), v.sigma.value());
            let att = v.split.attention.value();
            for (b, r) in chunk.iter().enumerate() {
                let mut camera = cams[b];
                camera.intrinsics = r.camera.intrinsics;
                out.push(RegOutput {
                    yhat: Pose3D::new(y.row_slice(b).to_vec())?,
                    camera,
                    xhat: Pose2D::new(x.row_slice(b).to_vec())?,
                    xhat_r: Pose2D::new(xr.row_slice(b).to_vec())?,
                    sigma: s.row_slice(b).to_vec(),
                    attention: att.row_slice(b).to_vec(),
                    theta: angles[b],
                });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let layout = DecoderLayout { arch: self.arch.clone(), layer: self.layer, norm: self.norm.clone() };
        Checkpoint::new(CHECKPOINT_KIND, layout, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let layout: DecoderLayout = ck.layout()?;
        Ok(Self { arch: layout.arch, norm: layout.norm, layer: layout.layer, params: ck.params()? })
    }
}

/// Decoder inputs and intrinsics of a batch. Intrinsics are recomputed from
/// each record's crop.
pub fn batch_inputs(
    provider: &dyn FeatureProvider,
    records: &[SampleRecord],
) -> Result<(Tensor, Vec<CameraIntrinsics>)> {
    let mut rows = Vec::with_capacity(records.len());
    let mut ks = Vec::with_capacity(records.len());
    for r in records {
        let k = intrinsics_from_crop(&r.crop)?;
        let f = provider.features(r)?;
        if f.len() != provider.width() {
            return Err(Error::DimensionMismatch { expected: provider.width(), actual: f.len() });
        }
        rows.push(decoder_input(&f, &k));
        ks.push(k);
    }
    Ok((Tensor::from_rows(&rows)?, ks))
}

/// The four unweighted terms, in [`TERMS`] order.
pub fn reg_terms<'t>(
    v: &RegVars<'t>,
    x_gt: Var<'t>,
    flow: Option<&FlowModel>,
    topo: &Topology,
    stats: &BoneRatioStats,
    length_unit: f64,
    nf_ceiling: Option<f64>,
) -> Result<[Var<'t>; 4]> {
    let tape = v.yhat.tape();
    let nf = match flow {
        Some(f) => f.nf_loss_soft_var(v.xhat_r, nf_ceiling)?,
        None => tape.scalar(0.0),
    };
    // The root projects to the crop centre by construction, so its residual
    // is identically zero and its scale is unidentifiable; it is left out.
    let cols: Rc<[usize]> = (0..v.xhat.cols()).filter(|c| c / 2 != topo.root_index).collect();
    Ok([
        bone_loss(v.yhat, topo, stats)?,
        limbs_loss(v.yhat * (1.0 / length_unit), topo)?,
        nf,
        rle_loss(v.xhat.select_cols(&cols), v.sigma.select_cols(&cols), x_gt.select_cols(&cols))?,
    ])
}

/// Mean over joints of the Euclidean 2D error.
pub fn mean_joint_error(pred: &Pose2D, gt: &Pose2D) -> Result<f64> {
    if pred.joint_count() != gt.joint_count() || pred.joint_count() == 0 {
        return Err(Error::DimensionMismatch { expected: 2 * gt.joint_count(), actual: pred.coords().len() });
    }
    let total: f64 = pred.joints().zip(gt.joints()).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).sum();
    Ok(total / pred.joint_count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub warmup: u64,
    pub length_unit: f64,
    pub nf_ceiling: Option<f64>,
    /// Global gradient-norm cap; one batch with a near-zero reference bone
    /// or a confident outlier otherwise throws the decoder off.
    pub clip_norm: Option<f64>,
    pub disabled: Vec<String>,
}

impl Default for RegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 45,
            batch: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            warmup: 100,
            length_unit: 1000.0,
            nf_ceiling: Some(0.0),
            clip_norm: Some(100.0),
            disabled: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegEpoch {
    pub epoch: usize,
    pub total: f64,
    pub terms: [f64; 4],
    /// Mean 2D joint error of the training forward passes.
    pub joint_error: f64,
}

pub struct RegTrainer<'a> {
    pub decoder: Decoder,
    pub config: RegTrainConfig,
    pub flow: &'a FlowModel,
    pub topology: Topology,
    pub stats: BoneRatioStats,
    pub balancer: LossBalancer,
    pub trace: Vec<RegEpoch>,
}

impl<'a> RegTrainer<'a> {
    pub fn new(decoder: Decoder, flow: &'a FlowModel, topology: Topology, config: RegTrainConfig) -> Self {
        let mut balancer = LossBalancer::regnet(config.warmup);
        for name in &config.disabled {
            balancer.set_weight(name, 0.0);
        }
        Self {
            stats: BoneRatioStats::new(topology.bones.len()),
            decoder,
            flow,
            topology,
            balancer,
            trace: Vec::new(),
            config,
        }
    }

    /// Balanced objective, raw terms and forward values for one batch.
    pub fn batch_objective<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        provider: &dyn FeatureProvider,
        records: &[SampleRecord],
        angles: &[f64],
    ) -> Result<(Var<'t>, [Var<'t>; 4], RegVars<'t>)> {
        let (inputs, ks) = batch_inputs(provider, records)?;
        let v = self.decoder.forward_vars(bound, tape.constant(inputs), &ks, angles, self.topology.root_index)?;
        let x_gt: Vec<&[f64]> = records.iter().map(|r| r.x_gt.coords()).collect();
        let x_gt = tape.constant(Tensor::from_rows(&x_gt)?);
        let nf_on = self.balancer.term_index("nf").map(|i| self.balancer.terms()[i].weight != 0.0) != Some(false);
        let flow = nf_on.then_some(self.flow);
        let terms =
            reg_terms(&v, x_gt, flow, &self.topology, &self.stats, self.config.length_unit, self.config.nf_ceiling)?;
        let total = self.balancer.combine(tape, &terms);
        Ok((total, terms, v))
    }

    pub fn fit(&mut self, provider: &dyn FeatureProvider, records: &[SampleRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::invalid("regressor training needs a nonempty dataset"));
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamWState::new(AdamWConfig::new(cfg.lr, cfg.weight_decay), self.decoder.params.tensors());
        let mut order: Vec<usize> = (0..records.len()).collect();
        let start = self.trace.len();
        for epoch in start..start + cfg.epochs {
            order.shuffle(&mut rng);
            let mut sums = [0.0; 4];
            let (mut total_sum, mut err_sum) = (0.0, 0.0);
            for (step, rows) in order.chunks(cfg.batch.max(1)).enumerate() {
                let batch: Vec<SampleRecord> = rows.iter().map(|&i| records[i].clone()).collect();
                let angles: Vec<f64> = rows.iter().map(|_| sample_rotation_angle(&mut rng)).collect();
                let tape = Tape::new();
                let bound = self.decoder.params.bind(&tape);
                let diverged = || Error::Diverged { stage: "regnet", epoch, step };
                let (total, terms, v) = self.batch_objective(&tape, &bound, provider, &batch, &angles)?;
                let values: Vec<f64> = terms.iter().map(|t| t.item()).collect();
                let tv = total.item();
                if !tv.is_finite() || values.iter().any(|x| !x.is_finite()) {
                    return Err(diverged());
                }
                let ratios = bone_ratios(v.yhat, &self.topology)?.value().clone();
                {
                    let x = v.xhat.value();
                    for (b, r) in batch.iter().enumerate() {
                        err_sum += mean_joint_error(&Pose2D::new(x.row_slice(b).to_vec())?, &r.x_gt)?;
                    }
                }
                let mut grads = tape.backward(total)?;
                let mut g = self.decoder.params.collect_grads(&mut grads, &bound);
                if let Some(c) = cfg.clip_norm {
                    clip_grad_norm(&mut g, c);
                }
                let before = self.decoder.params.clone();
                opt.step(self.decoder.params.tensors_mut(), &g)?;
                if !self.decoder.params.all_finite() {
                    self.decoder.params = before;
                    return Err(diverged());
                }
                self.stats.update(&ratios);
                self.balancer.observe(&values);
                let w = rows.len() as f64;
                for (s, x) in sums.iter_mut().zip(&values) {
                    *s += x * w;
                }
                total_sum += tv * w;
            }
            let n = records.len() as f64;
            self.trace.push(RegEpoch {
                epoch,
                total: total_sum / n,
                terms: sums.map(|s| s / n),
                joint_error: err_sum / n,
            });
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.decoder
            .to_checkpoint()?
            .with_meta("topology_hash", self.topology.content_hash())?
            .with_meta("balancer", &self.balancer)?
            .with_meta("bone_stats", &self.stats)?
            .with_meta("trace", &self.trace)
    }
}

/// Trains a fresh decoder and returns it with its per-epoch trace.
pub fn train_regnet(
    provider: &dyn FeatureProvider,
    records: &[SampleRecord],
    flow: &FlowModel,
    arch: DecoderArch,
    config: RegTrainConfig,
) -> Result<(Decoder, Vec<RegEpoch>)> {
    let norm = fit_input_norm(provider, records)?;
    let decoder = Decoder::new(arch, norm, config.seed)?;
    let mut trainer = RegTrainer::new(decoder, flow, Topology::h36m(), config);
    trainer.fit(provider, records)?;
    Ok((trainer.decoder, trainer.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};
    use crate::diffopt::{numerical_gradient, relative_error};
    use crate::normflow::FlowArch;

    const WIDTH: usize = 12;

    fn records(count: usize) -> Vec<SampleRecord> {
        generate(&SyntheticConfig { count, seed: 21, ..Default::default() }).unwrap().records
    }

    fn provider() -> SyntheticFeatures {
        SyntheticFeatures::new(WIDTH, 17, 0.05, 4).unwrap()
    }

    fn small(records: &[SampleRecord]) -> Decoder {
        let p = provider();
        Decoder::new(DecoderArch::new(17, WIDTH, 5000.0), fit_input_norm(&p, records).unwrap(), 8).unwrap()
    }

    #[test]
    fn capsule_widths_follow_the_joint_count() {
        let arch = DecoderArch::new(17, DEFAULT_FEATURE_WIDTH, 5000.0);
        assert_eq!(arch.input_width(), 2054);
        assert_eq!(arch.output_width(), 153);
        let d = Decoder::zeros(arch).unwrap();
        let tape = Tape::new();
        let bound = d.params().bind_constant(&tape);
        let s = d.decode(&bound, tape.constant(Tensor::zeros(2, 2054))).unwrap();
        let widths = [s.attention.cols(), s.pose.cols(), s.camera.cols(), s.presence.cols()];
        assert_eq!(widths, [17, 51, 51, 34]);
    }

    #[test]
    fn zero_decoder_has_uniform_attention_and_prior_depth() {
        let d = Decoder::zeros(DecoderArch::new(17, WIDTH, 5000.0)).unwrap();
        let tape = Tape::new();
        let bound = d.params().bind_constant(&tape);
        let s = d.decode(&bound, tape.constant(Tensor::zeros(1, WIDTH + 6))).unwrap();
        assert!(s.attention.value().data().iter().all(|a| (a - 1.0 / 17.0).abs() < 1e-15));
        assert!(s.pose.value().data().iter().all(|v| *v == 0.0));
        let cam = s.camera.value();
        for j in 0..17 {
            assert_eq!(cam.data()[3 * j], 0.0);
            assert!((cam.data()[3 * j + 2] - 5000.0).abs() < 1e-9);
        }
        let recs = records(3);
        let out = d.predict(&provider(), &recs, &Topology::h36m(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for o in &out {
            assert!(o.sigma.iter().all(|s| (s - (SIGMA_INIT * (1.0 - SIGMA_FLOOR) + SIGMA_FLOOR)).abs() < 1e-12));
        }
    }

    #[test]
    fn forward_pass_closes_the_root_and_bounds_sigma() {
        let recs = records(40);
        let mut d = small(&recs);
        // Random weights well away from the fresh initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in d.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let topo = Topology::h36m();
        let out = d.predict(&provider(), &recs, &topo, &mut rng).unwrap();
        let (lo, hi) = (10f64.to_radians(), 350f64.to_radians());
        for o in &out {
            let r = topo.root_index;
            assert!(o.yhat.joint(r).iter().all(|v| v.abs() < 1e-9));
            assert!(o.xhat.joint(r).iter().all(|v| v.abs() < 1e-9));
            assert!(o.xhat_r.joint(r).iter().all(|v| v.abs() < 1e-9));
            assert!(o.sigma.iter().all(|s| *s > 0.0 && *s < 1.0));
            assert!((o.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(o.theta >= lo && o.theta <= hi);
        }
    }

    #[test]
    fn uniform_attention_leaves_capsules_unscaled() {
        let recs = records(4);
        let d = small(&recs);
        let tape = Tape::new();
        let bound = d.params().bind_constant(&tape);
        let (inputs, _) = batch_inputs(&provider(), &recs).unwrap();
        let s = d.decode(&bound, tape.constant(inputs.clone())).unwrap();
        // Fresh attention weights are zero, so only the bias could tilt it.
        let raw = d.layer.forward(&bound, d.norm.apply(tape.constant(inputs)).unwrap()).unwrap().value();
        let pose = s.pose.value();
        for b in 0..recs.len() {
            for c in 0..51 {
                assert!((pose.row_slice(b)[c] - raw.row_slice(b)[17 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_file_roundtrip_and_errors() {
        let recs = records(5);
        let file = FeatureFile::capture(&provider(), &recs).unwrap();
        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        let back = FeatureFile::read_from(bytes.as_slice(), "mem").unwrap();
        assert_eq!(back.len(), 5);
        for r in &recs {
            assert_eq!(back.features(r).unwrap(), provider().features(r).unwrap());
        }
        let mut dup = FeatureFile::new(WIDTH);
        dup.insert(1, vec![0.0; WIDTH]).unwrap();
        assert!(dup.insert(1, vec![0.0; WIDTH]).is_err());
        assert!(dup.insert(2, vec![0.0; WIDTH - 1]).is_err());
        let mut missing = recs[0].clone();
        missing.id = 999;
        assert!(back.features(&missing).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeatureFile::read_from(bad.as_slice(), "mem").is_err());
        assert!(FeatureFile::read_from(&bytes[..bytes.len() - 3], "mem").is_err());
    }

    #[test]
    fn synthetic_features_are_deterministic_per_record() {
        let recs = records(3);
        let (a, b) = (provider(), provider());
        assert_eq!(a.features(&recs[1]).unwrap(), b.features(&recs[1]).unwrap());
        assert_ne!(a.features(&recs[1]).unwrap(), a.features(&recs[2]).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_the_decoder() {
        let recs = records(8);
        let d = small(&recs);
        let ck = Checkpoint::from_bytes(&d.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(Decoder::from_checkpoint(&ck).unwrap(), d);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let recs = records(6);
        let d = small(&recs);
        let flow = FlowModel::new(FlowArch::for_topology(&Topology::h36m()), 1).unwrap();
        let topo = Topology::h36m();
        // Fixed targets: uninitialized statistics would follow the batch.
        let mut stats = BoneRatioStats::new(topo.bones.len());
        {
            let tape = Tape::new();
            let y: Vec<&[f64]> = recs.iter().map(|r| r.y_gt.coords()).collect();
            stats.update(&bone_ratios(tape.constant(Tensor::from_rows(&y).unwrap()), &topo).unwrap().value());
        }
        let (inputs, ks) = batch_inputs(&provider(), &recs).unwrap();
        let x_gt: Vec<&[f64]> = recs.iter().map(|r| r.x_gt.coords()).collect();
        let x_gt = Tensor::from_rows(&x_gt).unwrap();
        let angles = vec![0.7; recs.len()];
        let weights = [1.0, 0.1, 0.01, 10.0];
        let objective = |params: &ParamSet, grad: bool| -> (f64, Vec<f64>) {
            let tape = Tape::new();
            let bound = if grad { params.bind(&tape) } else { params.bind_constant(&tape) };
            let v = d.forward_vars(&bound, tape.constant(inputs.clone()), &ks, &angles, topo.root_index).unwrap();
            let terms = reg_terms(&v, tape.constant(x_gt.clone()), Some(&flow), &topo, &stats, 1000.0, None).unwrap();
            let mut total = tape.scalar(0.0);
            for (t, w) in terms.iter().zip(weights) {
                total = total + *t * w;
            }
            let g = if grad {
                let mut grads = tape.backward(total).unwrap();
                params.collect_grads(&mut grads, &bound).iter().flat_map(|t| t.data().to_vec()).collect()
            } else {
                Vec::new()
            };
            (total.item(), g)
        };
        let (_, analytic) = objective(d.params(), true);
        let flat = Tensor::row(d.params().flatten());
        let mut probe = d.params().clone();
        let numeric = numerical_gradient(&flat, 1e-6, |x| {
            probe.assign_flat(x.data()).unwrap();
            objective(&probe, false).0
        });
        let err = relative_error(&Tensor::row(analytic), &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn short_training_reduces_the_2d_error() {
        let recs = records(96);
        let flow = FlowModel::new(FlowArch::for_topology(&Topology::h36m()), 1).unwrap();
        let config = RegTrainConfig { epochs: 8, batch: 16, warmup: 10, ..Default::default() };
        let mut trainer = RegTrainer::new(small(&recs), &flow, Topology::h36m(), config);
        trainer.fit(&provider(), &recs).unwrap();
        let first = trainer.trace[0].joint_error;
        let last = trainer.trace.last().unwrap().joint_error;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(trainer.trace.len(), 8);
    }
}
