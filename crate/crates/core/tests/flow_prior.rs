use poselift::data::{generate, SyntheticConfig};
use poselift::normflow::{pose_rows, train_flow, FlowArch, FlowModel, FlowTrainConfig};
use poselift::skeleton::{h36m, Pose2D, Topology};

fn swapped(x: &Pose2D, pairs: &[(usize, usize)]) -> Pose2D {
    let mut s = x.clone();
    for &(a, b) in pairs {
        let (pa, pb) = (s.joint(a), s.joint(b));
        s.set_joint(a, pb);
        s.set_joint(b, pa);
    }
    s
}

#[test]
fn trained_prior_prefers_plausible_poses() {
    let topo = Topology::h36m();
    let train = generate(&SyntheticConfig { count: 1500, seed: 1, ..Default::default() }).unwrap().records;
    let test = generate(&SyntheticConfig { count: 100, seed: 2, ..Default::default() }).unwrap().records;
    let xs: Vec<_> = train.iter().map(|r| r.x_gt.clone()).collect();
    let arch = FlowArch { blocks: 4, hidden: 64, ..FlowArch::for_topology(&topo) };
    let (flow, trace) =
        train_flow(&pose_rows(&xs), arch, FlowTrainConfig { epochs: 20, ..Default::default() }).unwrap();
    assert!(trace.last().unwrap() < &trace[0]);

    // Knees bent the wrong way round: hips stay, knees and ankles swap sides.
    let legs = [(h36m::RIGHT_KNEE, h36m::LEFT_KNEE), (h36m::RIGHT_ANKLE, h36m::LEFT_ANKLE)];
    let arms = [(h36m::LEFT_ELBOW, h36m::RIGHT_ELBOW), (h36m::LEFT_WRIST, h36m::RIGHT_WRIST)];
    let mean = |f: &dyn Fn(&Pose2D) -> Pose2D| {
        test.iter().map(|r| flow.nf_loss(f(&r.x_gt).coords()).unwrap()).sum::<f64>() / test.len() as f64
    };
    let real = mean(&|x| x.clone());
    let legs_nll = mean(&|x| swapped(x, &legs));
    let arms_nll = mean(&|x| swapped(x, &arms));
    assert!(real < legs_nll && real < arms_nll, "held-out {real}, legs {legs_nll}, arms {arms_nll}");

    // The density survives a checkpoint roundtrip bit for bit.
    let back = FlowModel::from_checkpoint(&flow.to_checkpoint().unwrap()).unwrap();
    for r in test.iter().take(5) {
        assert_eq!(back.log_prob(r.x_gt.coords()).unwrap(), flow.log_prob(r.x_gt.coords()).unwrap());
    }
}

#[test]
fn density_is_invariant_to_image_translation_and_scale() {
    // The root/head normalization removes both.
    let topo = Topology::h36m();
    let flow = FlowModel::new(FlowArch::for_topology(&topo), 3).unwrap();
    let x = generate(&SyntheticConfig { count: 1, seed: 9, ..Default::default() }).unwrap().records[0].x_gt.clone();
    let moved = x.scaled(1.7).translated([0.3, -0.2]);
    let (a, b) = (flow.nf_loss(x.coords()).unwrap(), flow.nf_loss(moved.coords()).unwrap());
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}
