//! Self-supervised lifter training on synthetic data, compared against the
//! constant-depth baseline.
//!
//! Pass `--no-nf` to drop the flow prior from the objective.

use std::time::Instant;

use poselift::data::{generate, SyntheticConfig};
use poselift::liftnet::{constant_depth_lift, train_liftnet, LiftTrainConfig, LifterArch};
use poselift::metrics::pa_mpjpe;
use poselift::normflow::{pose_rows, train_flow, FlowArch, FlowTrainConfig};
use poselift::skeleton::Topology;

fn main() -> poselift::Result<()> {
    let no_nf = std::env::args().any(|a| a == "--no-nf");
    let topo = Topology::h36m();
    let train = generate(&SyntheticConfig { count: 2000, seed: 1, ..Default::default() })?;
    let test = generate(&SyntheticConfig { count: 300, seed: 2, ..Default::default() })?;

    let xs: Vec<_> = train.records.iter().map(|r| r.x_gt.clone()).collect();
    let t0 = Instant::now();
    let (flow, nll) = train_flow(&pose_rows(&xs), FlowArch::for_topology(&topo), FlowTrainConfig::default())?;
    println!("flow: {} epochs, final NLL {:.3} ({:.1?})", nll.len(), nll.last().unwrap(), t0.elapsed());

    let depth_prior = train.records.iter().map(|r| r.camera.extrinsics.t[2]).sum::<f64>() / train.records.len() as f64;
    let arch = LifterArch::new(topo.joint_count(), 256, depth_prior);
    let mut config = LiftTrainConfig { epochs: 30, batch: 64, seed: 3, ..Default::default() };
    if no_nf {
        config.disabled.push("nf".into());
    }
    let t0 = Instant::now();
    let (lifter, trace) = train_liftnet(&train.records, &flow, arch, config)?;
    for e in &trace {
        println!(
            "epoch {:3}  objective {:8.4}  terms {:?}",
            e.epoch,
            e.total,
            e.terms.map(|v| (v * 1e4).round() / 1e4)
        );
    }
    println!("lifter trained in {:.1?}", t0.elapsed());

    // The baseline puts every joint at the true root depth.
    let (mut model, mut base) = (0.0, 0.0);
    for r in &test.records {
        model += pa_mpjpe(&lifter.lift(&r.x_gt, &r.camera)?, &r.y_gt)?;
        base += pa_mpjpe(&constant_depth_lift(&r.x_gt, &r.camera, r.camera.extrinsics.t[2])?, &r.y_gt)?;
    }
    let n = test.records.len() as f64;
    println!(
        "PA-MPJPE: lifter {:.2} mm, constant depth {:.2} mm ({:.1}% lower)",
        model / n,
        base / n,
        100.0 * (1.0 - model / base)
    );
    Ok(())
}
