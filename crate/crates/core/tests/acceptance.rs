//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so that every verdict is printed; exits non-zero on any failure.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, Rotation3, Vector3};
use poselift::camera::{
    extrinsics_from_angles, extrinsics_from_capsule, intrinsics_from_crop, inverse_rotate_azimuth, joint_depths,
    project, rotate_azimuth, rotate_azimuth_about_root, unproject, CameraIntrinsics, CropGeometry,
};
use poselift::cli;
use poselift::constraints::deformation_loss;
use poselift::constraints::{
    bone_loss, bone_ratios, deformation_loss_value, l2d_loss, l2d_loss_value, l3d_loss, l3d_loss_value, limbs_loss,
    rle_loss, BoneRatioStats,
};
use poselift::data::{generate, SampleRecord, SyntheticConfig};
use poselift::diffopt::{numerical_gradient, relative_error, ParamSet, Tape, Tensor, Var};
use poselift::liftnet::{self, constant_depth_lift, LiftTrainConfig, LiftTrainer, Lifter, LifterArch};
use poselift::metrics::{auc, mpjpe, n_mpjpe, n_pck, pa_mpjpe};
use poselift::normflow::{pose_rows, train_flow, FlowArch, FlowModel, FlowTrainConfig, Normalization};
use poselift::regnet::{self, mean_joint_error, Decoder, DecoderArch, RegTrainConfig, RegTrainer, SyntheticFeatures};
use poselift::skeleton::{h36m, Pose2D, Pose3D, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn records(count: usize, seed: u64) -> poselift::Result<Vec<SampleRecord>> {
    Ok(generate(&SyntheticConfig { count, seed, ..Default::default() })?.records)
}

// ---------------------------------------------------------------- 1

fn random_intrinsics(rng: &mut ChaCha8Rng) -> poselift::Result<CameraIntrinsics> {
    let w_bb = rng.random_range(100.0..600.0);
    intrinsics_from_crop(&CropGeometry {
        w_full: rng.random_range(400.0..2000.0),
        h_full: rng.random_range(400.0..2000.0),
        left: rng.random_range(-100.0..800.0),
        top: rng.random_range(-100.0..800.0),
        w_bb,
        h_bb: w_bb * rng.random_range(0.8..1.25),
        w: 256.0,
        h: 256.0,
        mu_h: rng.random_range(500.0..900.0),
    })
}

fn random_root_centred_pose(rng: &mut ChaCha8Rng, topo: &Topology) -> Pose3D {
    let mut coords: Vec<f64> = (0..3 * topo.joint_count()).map(|_| rng.random_range(-900.0..900.0)).collect();
    coords[3 * topo.root_index..3 * topo.root_index + 3].fill(0.0);
    Pose3D::new(coords).unwrap()
}

fn geometry() -> Outcome {
    const CASES: usize = 10_000;
    let t0 = Instant::now();
    let topo = Topology::h36m();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut roundtrip, mut rotation, mut closure) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..CASES {
        let k = random_intrinsics(&mut rng)?;
        let e = extrinsics_from_angles(
            rng.random_range(-0.5..0.5),
            rng.random_range(-3.2..3.2),
            rng.random_range(3000.0..10000.0),
            &k,
        )?;
        let y = random_root_centred_pose(&mut rng, &topo);
        let x = project(&y, &k, &e)?;
        let back = unproject(&x, &joint_depths(&y, &e), &k, &e)?;
        roundtrip = roundtrip.max(max_diff(back.coords(), y.coords()));
        roundtrip = roundtrip.max(max_diff(project(&back, &k, &e)?.coords(), x.coords()));

        let theta = rng.random_range(-7.0..7.0);
        rotation =
            rotation.max(max_diff(inverse_rotate_azimuth(&rotate_azimuth(&y, theta), theta).coords(), y.coords()));
        let shifted = y.translated([rng.random_range(-500.0..500.0), 0.0, rng.random_range(-500.0..500.0)]);
        let turned = rotate_azimuth_about_root(&rotate_azimuth_about_root(&shifted, theta, &topo)?, -theta, &topo)?;
        rotation = rotation.max(max_diff(turned.coords(), shifted.coords()));

        let root = x.joint(topo.root_index);
        closure = closure.max(root[0].abs()).max(root[1].abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = roundtrip < 1e-9 && rotation < 1e-9 && closure < 1e-9 && secs < 10.0;
    Ok((
        pass,
        format!("{CASES} cases: roundtrip {roundtrip:.1e}, rotation {rotation:.1e}, pelvis closure {closure:.1e}, {secs:.2} s"),
    ))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 2

fn closed_forms() -> Outcome {
    let k = intrinsics_from_crop(&CropGeometry {
        w_full: 1000.0,
        h_full: 1000.0,
        left: 100.0,
        top: 0.0,
        w_bb: 500.0,
        h_bb: 500.0,
        w: 224.0,
        h: 224.0,
        mu_h: 1.0,
    })?;
    let f = 1000.0 * 2f64.sqrt();
    let expected = [0.448, 0.448, 0.448 * f, 0.448 * f, 129.024, 173.824];
    let got = [k.s_w, k.s_h, k.f_w, k.f_h, k.c_w, k.c_h];
    let crop_err = max_diff(&got, &expected);

    let k = CameraIntrinsics::new(100.0, 200.0, 10.0, -20.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gamma: Vec<f64> =
        (0..17).flat_map(|_| [rng.random_range(-0.4..0.4), rng.random_range(-3.0..3.0), 5.0]).collect();
    let e = extrinsics_from_capsule(&gamma, &k)?;
    let t_err = max_diff(&e.t, &[-0.5, 0.5, 5.0]);
    let origin = project(&Pose3D::zeros(1), &k, &e)?;
    let origin_err = origin.coords().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pass = crop_err < 1e-6 && t_err < 1e-6 && origin_err < 1e-6;
    Ok((
        pass,
        format!(
            "f_w {:.4}, c_w {:.3}: crop error {crop_err:.1e}; t error {t_err:.1e}; origin lands {origin_err:.1e} from (0,0)",
            0.448 * f,
            129.024
        ),
    ))
}

// ---------------------------------------------------------------- 3

const POINTS: usize = 20;

/// Relative error between the tape gradient and central differences of
/// `f` with respect to every input tensor.
fn input_gradient_error(
    inputs: &[Tensor],
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> poselift::Result<Var<'t>>,
) -> poselift::Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.get(*v).into_vec()).collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let flat = Tensor::row(inputs.iter().flat_map(|t| t.data().to_vec()).collect());
    let numeric = numerical_gradient(&flat, 1e-6, |x| {
        let tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&sizes)
            .map(|(t, &n)| {
                let part = Tensor::from_vec(t.rows(), t.cols(), x.data()[offset..offset + n].to_vec()).unwrap();
                offset += n;
                tape.constant(part)
            })
            .collect();
        f(&tape, &vars).unwrap().item()
    });
    Ok(relative_error(&Tensor::row(analytic), &numeric))
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * gauss(rng))
}

/// Ground-truth-like poses (metres) jittered so that no two points coincide.
fn pose_batch(rng: &mut ChaCha8Rng, recs: &[SampleRecord], batch: usize) -> Tensor {
    let start = rng.random_range(0..recs.len() - batch);
    Tensor::from_fn(batch, 51, |r, c| recs[start + r].y_gt.coords()[c] / 1000.0 + 0.02 * gauss(rng))
}

fn perturbed(params: &ParamSet, rng: &mut ChaCha8Rng, scale: f64) -> ParamSet {
    let mut p = params.clone();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += scale * gauss(rng);
        }
    }
    p
}

/// Parameter-gradient error of a scalar objective built from bound parameters.
fn param_gradient_error(
    params: &ParamSet,
    objective: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> poselift::Result<Var<'t>>,
) -> poselift::Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = objective(&tape, &bound)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<f64> = params.collect_grads(&mut grads, &bound).into_iter().flat_map(Tensor::into_vec).collect();
    let mut probe = params.clone();
    let numeric = numerical_gradient(&Tensor::row(params.flatten()), 1e-6, |x| {
        probe.assign_flat(x.data()).unwrap();
        let tape = Tape::new();
        let bound = probe.bind_constant(&tape);
        objective(&tape, &bound).unwrap().item()
    });
    Ok(relative_error(&Tensor::row(analytic), &numeric))
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let topo = Topology::h36m();
    let recs = records(200, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut stats = BoneRatioStats::new(topo.bones.len());
    {
        let tape = Tape::new();
        let y = Tensor::from_rows(&recs.iter().map(|r| r.y_gt.coords()).collect::<Vec<_>>())?;
        stats.update(&bone_ratios(tape.constant(y), &topo)?.value());
    }
    let mut flow = FlowModel::new(FlowArch { blocks: 2, hidden: 16, ..FlowArch::for_topology(&topo) }, 4)?;
    let randomized = perturbed(flow.params(), &mut rng, 0.1);
    *flow.params_mut() = randomized;

    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..POINTS {
        let x2 = |rng: &mut ChaCha8Rng| random_tensor(rng, 4, 34, 0.5);
        record("L_2D", input_gradient_error(&[x2(&mut rng), x2(&mut rng)], |_, v| l2d_loss(v[0], v[1]))?);
        let y = |rng: &mut ChaCha8Rng| random_tensor(rng, 4, 51, 0.5);
        record("L_3D", input_gradient_error(&[y(&mut rng), y(&mut rng)], |_, v| l3d_loss(v[0], v[1]))?);
        record(
            "L_bone",
            input_gradient_error(&[pose_batch(&mut rng, &recs, 4)], |_, v| bone_loss(v[0], &topo, &stats))?,
        );
        record("L_limbs", input_gradient_error(&[pose_batch(&mut rng, &recs, 4)], |_, v| limbs_loss(v[0], &topo))?);
        record("L_def", input_gradient_error(&[y(&mut rng), y(&mut rng)], |_, v| deformation_loss(v[0], v[1]))?);
        let start = rng.random_range(0..recs.len() - 4);
        let xs = Tensor::from_fn(4, 34, |r, c| recs[start + r].x_gt.coords()[c] + 0.01 * gauss(&mut rng));
        record("L_NF", input_gradient_error(&[xs], |_, v| flow.nf_loss_var(v[0]))?);
        let sigma = Tensor::from_fn(4, 34, |_, _| rng.random_range(0.01..0.5));
        record("L_RLE", input_gradient_error(&[x2(&mut rng), sigma, x2(&mut rng)], |_, v| rle_loss(v[0], v[1], v[2]))?);
    }

    // Composite objectives over network parameters, likelihood terms switched on.
    let flow17 = &flow;
    for point in 0..POINTS as u64 {
        let start = rng.random_range(0..recs.len() - 4);
        let batch: Vec<&SampleRecord> = recs[start..start + 4].iter().collect();
        let angles: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..6.0)).collect();

        let lifter = Lifter::new(LifterArch::new(17, 8, 7000.0), liftnet::fit_input_norm(&recs)?, point)?;
        let config = LiftTrainConfig { warmup: 0, ..Default::default() };
        let mut trainer = LiftTrainer::new(lifter, flow17, topo.clone(), config);
        trainer.stats = stats.clone();
        warm(&mut trainer.balancer, 6);
        let params = perturbed(trainer.lifter.params(), &mut rng, 0.05);
        record(
            "L_lift",
            param_gradient_error(&params, |tape, bound| Ok(trainer.batch_objective(tape, bound, &batch, &angles)?.0))?,
        );

        let provider = SyntheticFeatures::new(12, 17, 0.05, point)?;
        let owned: Vec<SampleRecord> = batch.iter().map(|r| (*r).clone()).collect();
        let decoder = Decoder::new(DecoderArch::new(17, 12, 7000.0), regnet::fit_input_norm(&provider, &recs)?, point)?;
        let mut trainer =
            RegTrainer::new(decoder, flow17, topo.clone(), RegTrainConfig { warmup: 0, ..Default::default() });
        trainer.stats = stats.clone();
        warm(&mut trainer.balancer, 4);
        let params = perturbed(trainer.decoder.params(), &mut rng, 0.05);
        record(
            "L_reg",
            param_gradient_error(&params, |tape, bound| {
                Ok(trainer.batch_objective(tape, bound, &provider, &owned, &angles)?.0)
            })?,
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst.iter().all(|(_, e)| *e < 1e-4) && secs < 120.0;
    let mut detail = format!("{POINTS} points each, worst relative error:");
    for (name, e) in &worst {
        write!(detail, " {name} {e:.1e}")?;
    }
    write!(detail, "; {secs:.1} s")?;
    Ok((pass, detail))
}

/// Marks the balancer as warmed up with a fixed range for every term, so
/// that likelihood terms enter the composite.
fn warm(balancer: &mut poselift::diffopt::LossBalancer, terms: usize) {
    balancer.observe(&vec![0.0; terms]);
    for i in 0..terms {
        balancer.set_range(i, -50.0, 50.0);
    }
}

// ---------------------------------------------------------------- 4

fn numerical_log_det(flow: &FlowModel, layer: usize, x: &[f64]) -> poselift::Result<f64> {
    let d = x.len();
    let h = 1e-5;
    let mut j = DMatrix::zeros(d, d);
    for c in 0..d {
        let (mut a, mut b) = (x.to_vec(), x.to_vec());
        a[c] += h;
        b[c] -= h;
        let (fa, fb) = (flow.apply_layer(layer, &a)?.0, flow.apply_layer(layer, &b)?.0);
        for r in 0..d {
            j[(r, c)] = (fa[r] - fb[r]) / (2.0 * h);
        }
    }
    Ok(j.determinant().abs().ln())
}

fn flow_checks() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = FlowArch { dim: 34, blocks: 2, hidden: 32, normalization: Normalization::None };
    let mut flow = FlowModel::new(arch, 1)?;
    let randomized = perturbed(flow.params(), &mut rng, 0.1);
    *flow.params_mut() = randomized;

    let mut log_det = 0.0f64;
    for _ in 0..5 {
        let mut h: Vec<f64> = (0..34).map(|_| gauss(&mut rng)).collect();
        for layer in 0..flow.layers().len() {
            let (next, analytic) = flow.apply_layer(layer, &h)?;
            log_det = log_det.max((analytic - numerical_log_det(&flow, layer, &h)?).abs());
            h = next;
        }
    }
    let mut roundtrip = 0.0f64;
    for _ in 0..200 {
        let x: Vec<f64> = (0..34).map(|_| 2.0 * gauss(&mut rng)).collect();
        let (z, _) = flow.flow_inverse(&x)?;
        roundtrip = roundtrip.max(max_diff(&flow.flow_forward(&z)?, &x));
    }

    let sample = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..34).map(|_| gauss(rng)).collect()).collect()
    };
    let (train, test) = (sample(8000, &mut rng), sample(2000, &mut rng));
    let config = FlowTrainConfig { epochs: 40, noise: 0.0, seed: 5, ..Default::default() };
    let (one, _) =
        train_flow(&train, FlowArch { dim: 34, blocks: 1, hidden: 32, normalization: Normalization::None }, config)?;
    let nll = test.iter().map(|x| one.nf_loss(x)).sum::<poselift::Result<f64>>()? / test.len() as f64;
    let entropy = 17.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let gap = (nll - entropy).abs() / entropy;

    let secs = t0.elapsed().as_secs_f64();
    let pass = log_det < 1e-5 && roundtrip < 1e-8 && gap < 0.05 && secs < 300.0;
    Ok((
        pass,
        format!(
            "log-det error {log_det:.1e}, roundtrip {roundtrip:.1e}, 1-block held-out NLL {nll:.3} vs entropy {entropy:.3} ({:.2}%), {secs:.1} s",
            100.0 * gap
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn cycle_oracle() -> Outcome {
    let topo = Topology::h36m();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut l2d, mut l3d, mut def) = (0.0f64, 0.0f64, 0.0f64);
    let mut batches = 0;
    for seed in 0..4 {
        for batch in records(256, 100 + seed)?.chunks(64) {
            let mut previous: Option<(Pose3D, Pose3D)> = None;
            for r in batch {
                let theta = rng.random_range(10f64..350.0).to_radians();
                let (k, e) = (&r.camera.intrinsics, &r.camera.extrinsics);
                let yhat = unproject(&r.x_gt, &r.depths(), k, e)?;
                let yhat_r = rotate_azimuth_about_root(&yhat, theta, &topo)?;
                let xhat_r = project(&yhat_r, k, e)?;
                let ytilde_r = unproject(&xhat_r, &joint_depths(&yhat_r, e), k, e)?;
                let ytilde = rotate_azimuth_about_root(&ytilde_r, -theta, &topo)?;
                let xtilde: Pose2D = project(&ytilde, k, e)?;
                l2d = l2d.max(l2d_loss_value(&r.x_gt, &xtilde)?);
                l3d = l3d.max(l3d_loss_value(&yhat_r, &ytilde_r)?);
                if let Some((a, b)) = previous.replace((yhat.clone(), ytilde.clone())) {
                    def = def.max(deformation_loss_value(&a, &yhat, &b, &ytilde)?);
                }
            }
            batches += 1;
        }
    }
    let pass = l2d < 1e-9 && l3d < 1e-9 && def < 1e-9;
    Ok((pass, format!("{batches} batches, worst L_2D {l2d:.1e}, L_3D {l3d:.1e} mm, L_def {def:.1e} mm")))
}

// ---------------------------------------------------------------- 6, 8

struct LiftRun {
    model: f64,
    baseline: f64,
    first: f64,
    last: f64,
}

struct LiftBench {
    train: Vec<SampleRecord>,
    test: Vec<SampleRecord>,
    flow: FlowModel,
}

impl LiftBench {
    fn new() -> poselift::Result<Self> {
        let topo = Topology::h36m();
        let train = records(2000, 1)?;
        let test = records(300, 2)?;
        let xs: Vec<Pose2D> = train.iter().map(|r| r.x_gt.clone()).collect();
        let (flow, _) = train_flow(&pose_rows(&xs), FlowArch::for_topology(&topo), FlowTrainConfig::default())?;
        Ok(Self { train, test, flow })
    }

    fn run(&self, with_nf: bool) -> poselift::Result<LiftRun> {
        let prior = self.train.iter().map(|r| r.camera.extrinsics.t[2]).sum::<f64>() / self.train.len() as f64;
        let mut config = LiftTrainConfig { epochs: 30, batch: 64, seed: 3, ..Default::default() };
        if !with_nf {
            config.disabled.push("nf".into());
        }
        let (lifter, trace) = liftnet::train_liftnet(&self.train, &self.flow, LifterArch::new(17, 256, prior), config)?;
        let (mut model, mut baseline) = (0.0, 0.0);
        for r in &self.test {
            model += pa_mpjpe(&lifter.lift(&r.x_gt, &r.camera)?, &r.y_gt)?;
            baseline += pa_mpjpe(&constant_depth_lift(&r.x_gt, &r.camera, r.camera.extrinsics.t[2])?, &r.y_gt)?;
        }
        let n = self.test.len() as f64;
        Ok(LiftRun {
            model: model / n,
            baseline: baseline / n,
            first: trace[0].total,
            last: trace.last().unwrap().total,
        })
    }
}

fn lift_training(bench: &LiftBench, full: &mut Option<LiftRun>) -> Outcome {
    let t0 = Instant::now();
    let run = bench.run(true)?;
    let reduction = 1.0 - run.model / run.baseline;
    let ratio = run.last / run.first;
    let secs = t0.elapsed().as_secs_f64();
    let pass = reduction >= 0.6 && ratio <= 0.5 && secs < 900.0;
    let detail = format!(
        "PA-MPJPE {:.2} mm vs constant depth {:.2} mm ({:.1}% lower); objective {:.3} -> {:.3} (x{ratio:.2}); {secs:.0} s",
        run.model,
        run.baseline,
        100.0 * reduction,
        run.first,
        run.last
    );
    *full = Some(run);
    Ok((pass, detail))
}

fn ablation(bench: &LiftBench, full: &Option<LiftRun>) -> Outcome {
    let with = match full {
        Some(r) => r.model,
        None => bench.run(true)?.model,
    };
    let without = bench.run(false)?.model;
    Ok((without > with, format!("PA-MPJPE without L_NF {without:.2} mm vs with {with:.2} mm")))
}

// ---------------------------------------------------------------- 7

fn reg_training() -> Outcome {
    const WIDTH: usize = 64;
    let t0 = Instant::now();
    let topo = Topology::h36m();
    let mut train = records(2000, 1)?;
    let test = records(300, 2)?;
    let noisy = [h36m::LEFT_WRIST, h36m::RIGHT_WRIST];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for r in &mut train {
        for &j in &noisy {
            let p = r.x_gt.joint(j).map(|c| c + 0.03 * gauss(&mut rng));
            r.x_gt.set_joint(j, p);
        }
    }
    let xs: Vec<Pose2D> = train.iter().map(|r| r.x_gt.clone()).collect();
    let (flow, _) = train_flow(&pose_rows(&xs), FlowArch::for_topology(&topo), FlowTrainConfig::default())?;

    let provider = SyntheticFeatures::new(WIDTH, 17, 0.05, 5)?;
    let prior = train.iter().map(|r| r.camera.extrinsics.t[2]).sum::<f64>() / train.len() as f64;
    let config = RegTrainConfig { epochs: 30, batch: 64, seed: 3, ..Default::default() };
    let decoder =
        Decoder::new(DecoderArch::new(17, WIDTH, prior), regnet::fit_input_norm(&provider, &train)?, config.seed)?;
    let untrained = decoder.clone();
    let mut trainer = RegTrainer::new(decoder, &flow, topo.clone(), config);
    trainer.fit(&provider, &train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut closure = 0.0f64;
    let mut held_out = |d: &Decoder, set: &[SampleRecord]| -> poselift::Result<(f64, Vec<regnet::RegOutput>)> {
        let out = d.predict(&provider, set, &topo, &mut rng)?;
        let mut err = 0.0;
        for (o, r) in out.iter().zip(set) {
            for p in [o.xhat.joint(topo.root_index), o.xhat_r.joint(topo.root_index)] {
                closure = closure.max(p[0].abs()).max(p[1].abs());
            }
            err += mean_joint_error(&o.xhat, &r.x_gt)?;
        }
        Ok((err / set.len() as f64, out))
    };
    let (before, _) = held_out(&untrained, &test)?;
    let (after, _) = held_out(&trainer.decoder, &test)?;
    let (_, seen) = held_out(&trainer.decoder, &train)?;
    let n = seen.len() as f64;
    let sigma: Vec<f64> =
        (0..17).map(|j| seen.iter().map(|o| (o.sigma[2 * j] + o.sigma[2 * j + 1]) / 2.0).sum::<f64>() / n).collect();
    let noisy_min = noisy.iter().map(|&j| sigma[j]).fold(f64::INFINITY, f64::min);
    let clean_max = (0..17).filter(|j| !noisy.contains(j)).map(|j| sigma[j]).fold(0.0, f64::max);
    let reduction = 1.0 - after / before;
    let secs = t0.elapsed().as_secs_f64();
    let pass = reduction >= 0.7 && closure < 1e-9 && noisy_min > clean_max;
    Ok((
        pass,
        format!(
            "2D error {before:.4} -> {after:.4} ({:.1}% lower); pelvis closure {closure:.1e}; sigma noisy min {noisy_min:.4} vs clean max {clean_max:.4}; {secs:.0} s",
            100.0 * reduction
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn metrics_protocol() -> Outcome {
    const PAIRS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut nesting, mut similarity) = (0.0f64, 0.0f64);
    let (mut monotone, mut auc_ok) = (true, true);
    for i in 0..PAIRS {
        let gt = Pose3D::new((0..51).map(|_| rng.random_range(-900.0..900.0)).collect())?;
        let spread = [1.0, 30.0, 300.0, 3000.0][i % 4];
        let pred = Pose3D::new(gt.coords().iter().map(|v| v * 0.9 + spread * gauss(&mut rng)).collect())?;
        let (pa, n, m) = (pa_mpjpe(&pred, &gt)?, n_mpjpe(&pred, &gt)?, mpjpe(&pred, &gt)?);
        nesting = nesting.max(pa - n).max(n - m);

        let axis = Vector3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)).normalize();
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random_range(-3.1..3.1));
        let s = rng.random_range(0.3..3.0);
        let shift = Vector3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)) * 500.0;
        let joints: Vec<[f64; 3]> = gt
            .joints()
            .map(|p| {
                let q = rot * Vector3::from(p) * s + shift;
                [q.x, q.y, q.z]
            })
            .collect();
        similarity = similarity.max(pa_mpjpe(&Pose3D::from_joints(&joints), &gt)?);

        let mut last = 0.0;
        for t in [10.0, 50.0, 100.0, 150.0, 300.0, 1000.0] {
            let v = n_pck(&pred, &gt, t)?;
            monotone &= v >= last;
            last = v;
        }
        let a = auc(&pred, &gt)?;
        auc_ok &= (0.0..=1.0).contains(&a);
    }
    let pass = nesting <= 1e-9 && similarity < 1e-9 && monotone && auc_ok;
    Ok((
        pass,
        format!("{PAIRS} pairs: nesting slack {nesting:.1e}, similarity PA-MPJPE {similarity:.1e}, n_pck monotone {monotone}, auc in [0,1] {auc_ok}"),
    ))
}

// ---------------------------------------------------------------- 10

const DETERMINISM_CONFIG: &str = r#"
[data.synthetic]
count = 1200
[flow.train]
epochs = 6
[lift]
dim = 64
[lift.train]
epochs = 3
[reg]
feature_width = 32
[reg.train]
epochs = 3
"#;

fn snapshot(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        files.push((entry.file_name().to_string_lossy().into_owned(), std::fs::read(entry.path())?));
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, DETERMINISM_CONFIG)?;
    let out = dir.path().join("out");
    let (config, out_str) = (config.to_str().unwrap().to_string(), out.to_str().unwrap().to_string());
    let stages: [&[&str]; 6] = [
        &["gen"],
        &["train-nf"],
        &["train-lift", "--seed", "2"],
        &["train-reg", "--seed", "2"],
        &["eval"],
        &["eval", "--model", "reg"],
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        if out.exists() {
            std::fs::remove_dir_all(&out)?;
        }
        for stage in stages {
            let args = ["poselift"]
                .iter()
                .copied()
                .chain(stage.iter().copied())
                .chain(["--config", &config, "--out", &out_str]);
            let (mut so, mut se) = (Vec::new(), Vec::new());
            let code = cli::run_with(args, &mut so, &mut se);
            if code != cli::EXIT_OK {
                return Ok((
                    false,
                    format!("{} exited with {code}: {}", stage[0], String::from_utf8_lossy(&se).trim()),
                ));
            }
        }
        runs.push(snapshot(&out)?);
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> =
        runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    let same_set = runs[0].len() == runs[1].len();
    let pass = same_set && differing.is_empty() && names.iter().any(|n| n.ends_with(".ckpt"));
    Ok((pass, format!("{} files compared ({}); differing: {:?}", names.len(), names.join(", "), differing)))
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    let (pass, detail) = match outcome {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {n:2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= report(1, "geometry exactness", geometry());
    ok &= report(2, "closed-form spot checks", closed_forms());
    ok &= report(3, "gradient correctness", gradients());
    ok &= report(4, "flow correctness", flow_checks());
    ok &= report(5, "cycle-consistency oracle", cycle_oracle());
    let mut full = None;
    match LiftBench::new() {
        Ok(bench) => {
            ok &= report(6, "lifter training", lift_training(&bench, &mut full));
            ok &= report(7, "regressor training", reg_training());
            ok &= report(8, "ablation without L_NF", ablation(&bench, &full));
        }
        Err(e) => {
            ok &= report(6, "lifter training", Err(e.into()));
            ok &= report(7, "regressor training", reg_training());
            ok &= report(8, "ablation without L_NF", Err("no lifter benchmark".into()));
        }
    }
    ok &= report(9, "metric protocol", metrics_protocol());
    ok &= report(10, "determinism", determinism());
    if !ok {
        std::process::exit(1);
    }
}
