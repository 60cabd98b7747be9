//! 3D pose error metrics: MPJPE, Procrustes-aligned PA-MPJPE, scale-normalized
//! N-MPJPE, N-PCK and its AUC, plus report assembly.
//!
//! The metric functions compare poses as given; [`EvalReport::build`]
//! root-centers both poses first, which is the evaluation protocol.
//!
//! Alignments are fitted by least squares, which minimizes the summed squared
//! distance rather than the mean distance. Each aligned error is therefore
//! reported as the best over the fitted transform and the fits of the coarser
//! alignment classes it contains (scale-only, identity), so
//! `pa_mpjpe <= n_mpjpe <= mpjpe` holds on every pair.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Pose3D, Topology};

/// Default N-PCK threshold in millimetres.
pub const PCK_THRESHOLD_MM: f64 = 150.0;
/// AUC grid: thresholds `0, 5, ..., 150` mm.
pub const AUC_STEP_MM: f64 = 5.0;

fn check_pair(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.joint_count() != gt.joint_count() {
        return Err(Error::DimensionMismatch { expected: gt.joint_count(), actual: pred.joint_count() });
    }
    if pred.joint_count() == 0 {
        return Err(Error::invalid("poses have no joints"));
    }
    Ok(())
}

fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> Vec<f64> {
    pred.joints()
        .zip(gt.joints())
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean Euclidean distance between corresponding joints.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mean(&joint_errors(pred, gt)))
}

/// Least-squares scale `<pred, gt> / <pred, pred>`.
pub fn optimal_scale(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check_pair(pred, gt)?;
    let pp: f64 = pred.coords().iter().map(|v| v * v).sum();
    if !(pp > 0.0) {
        return Err(Error::invalid("prediction has zero norm; scale is undefined"));
    }
    let pg: f64 = pred.coords().iter().zip(gt.coords()).map(|(a, b)| a * b).sum();
    Ok(pg / pp)
}

/// Per-joint errors under the better of `s*` and the identity scale.
fn scaled_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    let s = optimal_scale(pred, gt)?;
    let fitted = joint_errors(&pred.scaled(s), gt);
    let plain = joint_errors(pred, gt);
    Ok(if mean(&fitted) <= mean(&plain) { fitted } else { plain })
}

/// MPJPE after scaling `pred` by [`optimal_scale`] (never worse than unscaled).
pub fn n_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    Ok(mean(&scaled_errors(pred, gt)?))
}

/// `pred` mapped by the similarity transform (rotation, uniform scale,
/// translation) that best matches `gt` in the least-squares sense.
/// Reflections are excluded.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    check_pair(pred, gt)?;
    let n = pred.joint_count() as f64;
    let centroid = |p: &Pose3D| p.joints().fold(Vector3::zeros(), |acc, j| acc + Vector3::from(j)) / n;
    let (mp, mg) = (centroid(pred), centroid(gt));
    let pc: Vec<Vector3<f64>> = pred.joints().map(|j| Vector3::from(j) - mp).collect();
    let gc: Vec<Vector3<f64>> = gt.joints().map(|j| Vector3::from(j) - mg).collect();

    let gcov = gc.iter().fold(Matrix3::zeros(), |acc, g| acc + g * g.transpose());
    let sv = gcov.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[1] > 1e-12 * ev[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateGroundTruth);
    }

    let h = pc.iter().zip(&gc).fold(Matrix3::zeros(), |acc, (p, g)| acc + p * g.transpose());
    // `svd` sorts singular values in decreasing order, so the reflection fix
    // lands on the smallest one.
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * correction * u.transpose();
    let pp: f64 = pc.iter().map(|p| p.norm_squared()).sum();
    let s = if pp > 0.0 {
        let sigma = svd.singular_values;
        (sigma[0] + sigma[1] + d * sigma[2]) / pp
    } else {
        0.0
    };
    let joints: Vec<[f64; 3]> = pc.iter().map(|p| (r * p * s + mg).into()).collect();
    Ok(Pose3D::from_joints(&joints))
}

/// MPJPE after Procrustes alignment (never worse than [`n_mpjpe`]).
pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let aligned = mpjpe(&procrustes_align(pred, gt)?, gt)?;
    Ok(aligned.min(n_mpjpe(pred, gt)?))
}

/// Fraction of joints within `threshold_mm` (inclusive) after optimal scaling.
pub fn n_pck(pred: &Pose3D, gt: &Pose3D, threshold_mm: f64) -> Result<f64> {
    if !(threshold_mm >= 0.0) {
        return Err(Error::invalid(format!("PCK threshold must be non-negative, got {threshold_mm}")));
    }
    Ok(pck_of(&scaled_errors(pred, gt)?, threshold_mm))
}

fn pck_of(errors: &[f64], threshold: f64) -> f64 {
    errors.iter().filter(|e| **e <= threshold).count() as f64 / errors.len() as f64
}

fn auc_of(errors: &[f64]) -> f64 {
    let steps = (PCK_THRESHOLD_MM / AUC_STEP_MM).round() as usize;
    let curve: Vec<f64> = (0..=steps).map(|k| pck_of(errors, k as f64 * AUC_STEP_MM)).collect();
    curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / steps as f64
}

/// Trapezoidal mean of [`n_pck`] over thresholds `0, 5, ..., 150` mm.
pub fn auc(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    Ok(auc_of(&scaled_errors(pred, gt)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub n_mpjpe: f64,
    pub n_pck_150: f64,
    pub auc: f64,
}

impl Metrics {
    /// All metrics for one already root-centered pair.
    pub fn of(pred: &Pose3D, gt: &Pose3D) -> Result<Self> {
        let scaled = scaled_errors(pred, gt)?;
        Ok(Self {
            mpjpe: mpjpe(pred, gt)?,
            pa_mpjpe: pa_mpjpe(pred, gt)?,
            n_mpjpe: mean(&scaled),
            n_pck_150: pck_of(&scaled, PCK_THRESHOLD_MM),
            auc: auc_of(&scaled),
        })
    }

    fn mean_of<'a>(items: impl Iterator<Item = &'a Metrics>) -> Self {
        let mut acc = Metrics::default();
        let mut n = 0usize;
        for m in items {
            acc.mpjpe += m.mpjpe;
            acc.pa_mpjpe += m.pa_mpjpe;
            acc.n_mpjpe += m.n_mpjpe;
            acc.n_pck_150 += m.n_pck_150;
            acc.auc += m.auc;
            n += 1;
        }
        if n == 0 {
            return acc;
        }
        let k = 1.0 / n as f64;
        Metrics {
            mpjpe: acc.mpjpe * k,
            pa_mpjpe: acc.pa_mpjpe * k,
            n_mpjpe: acc.n_mpjpe * k,
            n_pck_150: acc.n_pck_150 * k,
            auc: acc.auc * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: u64,
    pub sequence: String,
    pub metrics: Metrics,
}

/// One prediction to score.
pub struct EvalItem<'a> {
    pub id: u64,
    pub sequence: &'a str,
    pub pred: &'a Pose3D,
    pub gt: &'a Pose3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub aggregate: Metrics,
    pub sequences: BTreeMap<String, Metrics>,
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    /// Root-centers every pair on `topo`'s root and scores it.
    pub fn build(items: &[EvalItem<'_>], topo: &Topology) -> Result<Self> {
        let samples = items
            .iter()
            .map(|it| {
                let metrics = Metrics::of(&it.pred.root_centered(topo)?, &it.gt.root_centered(topo)?)?;
                Ok(SampleResult { id: it.id, sequence: it.sequence.to_string(), metrics })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut by_seq: BTreeMap<String, Vec<Metrics>> = BTreeMap::new();
        for s in &samples {
            by_seq.entry(s.sequence.clone()).or_default().push(s.metrics);
        }
        Ok(Self {
            count: samples.len(),
            aggregate: Metrics::mean_of(samples.iter().map(|s| &s.metrics)),
            sequences: by_seq.into_iter().map(|(k, v)| (k, Metrics::mean_of(v.iter()))).collect(),
            samples,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per sample, then one per sequence and a final aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,id,sequence,mpjpe,pa_mpjpe,n_mpjpe,n_pck_150,auc\n");
        let mut row = |kind: &str, id: &str, seq: &str, m: &Metrics| {
            let _ =
                writeln!(out, "{kind},{id},{seq},{},{},{},{},{}", m.mpjpe, m.pa_mpjpe, m.n_mpjpe, m.n_pck_150, m.auc);
        };
        for s in &self.samples {
            row("sample", &s.id.to_string(), &s.sequence, &s.metrics);
        }
        for (seq, m) in &self.sequences {
            row("sequence", "", seq, m);
        }
        row("aggregate", "", "", &self.aggregate);
        out
    }
}
