//! Perspective camera round trips: intrinsics from a crop, extrinsics from a
//! camera capsule, projection, unprojection and rotation about the root.

use poselift::camera::{
    extrinsics_from_capsule, intrinsics_from_crop, joint_depths, project, rotate_azimuth_about_root, unproject,
    CropGeometry,
};
use poselift::data::{generate, SyntheticConfig};
use poselift::skeleton::Topology;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> poselift::Result<()> {
    let crop = CropGeometry {
        w_full: 1000.0,
        h_full: 1000.0,
        left: 200.0,
        top: 300.0,
        w_bb: 256.0,
        h_bb: 256.0,
        w: 256.0,
        h: 256.0,
        mu_h: 700.0,
    };
    let k = intrinsics_from_crop(&crop)?;
    println!("intrinsics: f = ({:.6}, {:.6}), c = ({:.6}, {:.6})", k.f_w, k.f_h, k.c_w, k.c_h);

    // Every joint votes (theta_x, theta_y, w_p); the mean sets the camera and
    // the translation puts the world origin on image (0, 0).
    let capsule: Vec<f64> = (0..17).flat_map(|_| [0.1, -0.4, 5000.0]).collect();
    let e = extrinsics_from_capsule(&capsule, &k)?;
    println!("extrinsics: t = {:?}, orthogonality error {:.1e}", e.t, e.orthogonality_error());

    let topo = Topology::h36m();
    let record = generate(&SyntheticConfig { count: 1, seed: 4, ..Default::default() })?.records.remove(0);
    let (k, e) = (record.camera.intrinsics, record.camera.extrinsics);
    let x = project(&record.y_gt, &k, &e)?;
    let back = unproject(&x, &joint_depths(&record.y_gt, &e), &k, &e)?;
    println!("project/unproject round trip: {:.2e} mm", max_diff(back.coords(), record.y_gt.coords()));
    println!("pelvis in the image: {:?}", x.joint(topo.root_index));

    let turned = rotate_azimuth_about_root(&record.y_gt, 120f64.to_radians(), &topo)?;
    let undone = rotate_azimuth_about_root(&turned, -120f64.to_radians(), &topo)?;
    println!("rotate/inverse-rotate round trip: {:.2e} mm", max_diff(undone.coords(), record.y_gt.coords()));
    println!("pelvis after a 120 degree turn: {:?}", project(&turned, &k, &e)?.joint(topo.root_index));
    Ok(())
}
