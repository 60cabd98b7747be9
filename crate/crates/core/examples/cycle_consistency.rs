//! The lift-rotate-project cycle. With true depths the cycle closes exactly;
//! an untrained lifter (every joint at one depth) leaves a visible residual.

use poselift::camera::{joint_depths, project, rotate_azimuth_about_root, unproject};
use poselift::constraints::{deformation_loss_value, l2d_loss_value, l3d_loss_value};
use poselift::data::{generate, SyntheticConfig};
use poselift::liftnet::{fit_input_norm, Lifter, LifterArch};
use poselift::skeleton::Topology;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> poselift::Result<()> {
    let topo = Topology::h36m();
    let records = generate(&SyntheticConfig { count: 64, seed: 8, ..Default::default() })?.records;

    // Oracle cycle: depth lookups come from the ground truth.
    let (mut l2d, mut l3d, mut def) = (0.0f64, 0.0f64, 0.0f64);
    let mut previous = None;
    for (i, r) in records.iter().enumerate() {
        let theta = (20.0 + 5.0 * i as f64).to_radians();
        let (k, e) = (&r.camera.intrinsics, &r.camera.extrinsics);
        let yhat = unproject(&r.x_gt, &r.depths(), k, e)?;
        let yhat_r = rotate_azimuth_about_root(&yhat, theta, &topo)?;
        let xhat_r = project(&yhat_r, k, e)?;
        let ytilde_r = unproject(&xhat_r, &joint_depths(&yhat_r, e), k, e)?;
        let ytilde = rotate_azimuth_about_root(&ytilde_r, -theta, &topo)?;
        let xtilde = project(&ytilde, k, e)?;
        l2d = l2d.max(l2d_loss_value(&r.x_gt, &xtilde)?);
        l3d = l3d.max(l3d_loss_value(&yhat_r, &ytilde_r)?);
        // Deformation compares pairs of samples in the same batch.
        if let Some((a, b)) = previous.replace((yhat.clone(), ytilde.clone())) {
            def = def.max(deformation_loss_value(&a, &yhat, &b, &ytilde)?);
        }
    }
    println!("oracle cycle, worst case over {} records: L2D {l2d:.1e}, L3D {l3d:.1e}, Ldef {def:.1e}", records.len());

    let prior = records.iter().map(|r| r.camera.extrinsics.t[2]).sum::<f64>() / records.len() as f64;
    let lifter = Lifter::new(LifterArch::new(17, 64, prior), fit_input_norm(&records)?, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = &records[0];
    let c = lifter.cycle(&r.x_gt, &r.camera, &topo, &mut rng)?;
    println!(
        "untrained lifter, turn {:.0} degrees: L2D {:.3}, L3D {:.1} mm",
        c.theta.to_degrees(),
        l2d_loss_value(&r.x_gt, &c.xtilde)?,
        l3d_loss_value(&c.yhat_r, &c.ytilde_r)?
    );
    Ok(())
}
