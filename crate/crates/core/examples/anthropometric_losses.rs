//! Bone-ratio and limb-fold penalties on plausible and broken poses.

use poselift::constraints::{body_normal, bone_loss_value, bone_ratios, limbs_loss_value, BoneRatioStats};
use poselift::data::{generate, SyntheticConfig};
use poselift::diffopt::{Tape, Tensor};
use poselift::skeleton::{h36m, Topology};

fn main() -> poselift::Result<()> {
    let topo = Topology::h36m();
    let poses: Vec<_> = generate(&SyntheticConfig { count: 256, seed: 6, ..Default::default() })?
        .records
        .into_iter()
        .map(|r| r.y_gt)
        .collect();

    // Running bone-ratio statistics from the whole set.
    let mut stats = BoneRatioStats::new(topo.bone_count());
    let tape = Tape::new();
    let batch = tape.constant(Tensor::from_rows(&poses)?);
    stats.update(&bone_ratios(batch, &topo)?.value());

    let pose = &poses[0];
    println!("body normal of pose 0: {:?}", body_normal(pose, &topo).map(|v| v.round()));
    println!(
        "plausible pose: bone {:.2e}, limbs {:.2e}",
        bone_loss_value(std::slice::from_ref(pose), &topo, &stats)?,
        limbs_loss_value(pose, &topo)?
    );

    // Stretch the left forearm to twice its length.
    let mut long = pose.clone();
    let (e, w) = (long.joint(h36m::LEFT_ELBOW), long.joint(h36m::LEFT_WRIST));
    long.set_joint(h36m::LEFT_WRIST, std::array::from_fn(|i| e[i] + 2.0 * (w[i] - e[i])));
    println!("stretched forearm: bone {:.2e}", bone_loss_value(&[long], &topo, &stats)?);

    // Mirror the right knee through the hip-ankle line so the leg bends the wrong way.
    let mut bent = pose.clone();
    let (hip, knee, ankle) = (bent.joint(h36m::RIGHT_HIP), bent.joint(h36m::RIGHT_KNEE), bent.joint(h36m::RIGHT_ANKLE));
    let mid: [f64; 3] = std::array::from_fn(|i| 0.5 * (hip[i] + ankle[i]));
    bent.set_joint(h36m::RIGHT_KNEE, std::array::from_fn(|i| 2.0 * mid[i] - knee[i]));
    println!("backward knee: limbs {:.2e}", limbs_loss_value(&bent, &topo)?);
    Ok(())
}
