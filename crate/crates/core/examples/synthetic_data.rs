//! Generates a synthetic dataset, audits every record and round-trips the
//! dataset file.

use poselift::data::{generate, Dataset, SyntheticConfig, BONE_TEMPLATE_MM};
use poselift::skeleton::Topology;

fn main() -> poselift::Result<()> {
    let config = SyntheticConfig { count: 500, seed: 9, ..Default::default() };
    let ds = generate(&config)?;
    let topo = Topology::h36m();

    let violations: usize =
        ds.records.iter().map(|r| r.audit(&topo, Some((&BONE_TEMPLATE_MM, config.bone_jitter)), true).len()).sum();
    println!("{} records, {violations} invariant violations", ds.records.len());

    let r = &ds.records[0];
    println!(
        "record 0: subject {}, pelvis depth {:.0} mm, crop {:.0}x{:.0} at ({:.0}, {:.0})",
        r.sequence, r.camera.extrinsics.t[2], r.crop.w_bb, r.crop.h_bb, r.crop.left, r.crop.top
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("dataset.jsonl");
    ds.save(&path)?;
    let back = Dataset::load(&path)?;
    println!("{} bytes on disk, round trip exact: {}", std::fs::metadata(&path)?.len(), back == ds);

    let (train, test) = ds.split(0.2);
    println!("split: {} train / {} held out", train.records.len(), test.records.len());
    Ok(())
}
