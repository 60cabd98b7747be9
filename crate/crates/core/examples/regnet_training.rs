//! Capsule-decoder training on synthetic features. The wrists' 2D targets
//! carry extra noise, which the learned error scales should pick up.

use poselift::data::{generate, SyntheticConfig};
use poselift::normflow::{pose_rows, train_flow, FlowArch, FlowTrainConfig};
use poselift::regnet::{
    fit_input_norm, mean_joint_error, Decoder, DecoderArch, RegTrainConfig, RegTrainer, SyntheticFeatures,
};
use poselift::skeleton::{h36m, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const WIDTH: usize = 64;

fn main() -> poselift::Result<()> {
    let topo = Topology::h36m();
    let mut train = generate(&SyntheticConfig { count: 2000, seed: 1, ..Default::default() })?.records;
    let test = generate(&SyntheticConfig { count: 300, seed: 2, ..Default::default() })?.records;

    let noisy = [h36m::LEFT_WRIST, h36m::RIGHT_WRIST];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for r in &mut train {
        for &j in &noisy {
            let p = r.x_gt.joint(j).map(|c| c + 0.03 * rng.sample::<f64, _>(StandardNormal));
            r.x_gt.set_joint(j, p);
        }
    }

    let xs: Vec<_> = train.iter().map(|r| r.x_gt.clone()).collect();
    let (flow, _) = train_flow(&pose_rows(&xs), FlowArch::for_topology(&topo), FlowTrainConfig::default())?;

    let provider = SyntheticFeatures::new(WIDTH, topo.joint_count(), 0.05, 5)?;
    let depth_prior = train.iter().map(|r| r.camera.extrinsics.t[2]).sum::<f64>() / train.len() as f64;
    let arch = DecoderArch::new(topo.joint_count(), WIDTH, depth_prior);
    let config = RegTrainConfig { epochs: 30, batch: 64, seed: 3, ..Default::default() };
    let decoder = Decoder::new(arch, fit_input_norm(&provider, &train)?, config.seed)?;
    let untrained = decoder.clone();
    let mut trainer = RegTrainer::new(decoder, &flow, topo.clone(), config);
    trainer.fit(&provider, &train)?;
    for e in &trainer.trace {
        println!("epoch {:3}  objective {:8.4}  2D error {:.5}", e.epoch, e.total, e.joint_error);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut held_out = |d: &Decoder| -> poselift::Result<f64> {
        let out = d.predict(&provider, &test, &topo, &mut rng)?;
        let total =
            out.iter().zip(&test).map(|(o, r)| mean_joint_error(&o.xhat, &r.x_gt)).sum::<poselift::Result<f64>>()?;
        Ok(total / test.len() as f64)
    };
    let before = held_out(&untrained)?;
    let after = held_out(&trainer.decoder)?;
    println!("held-out 2D error: {before:.5} -> {after:.5} ({:.1}% lower)", 100.0 * (1.0 - after / before));

    let out = trainer.decoder.predict(&provider, &train, &topo, &mut rng)?;
    let n = out.len() as f64;
    println!("mean error scale per joint:");
    for j in 0..topo.joint_count() {
        let sigma = out.iter().map(|o| (o.sigma[2 * j] + o.sigma[2 * j + 1]) / 2.0).sum::<f64>() / n;
        let mark = if noisy.contains(&j) { "  (noisy)" } else { "" };
        println!("  {:>14} {sigma:.5}{mark}", topo.joint_name(j));
    }
    Ok(())
}
