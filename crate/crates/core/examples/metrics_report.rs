//! Pose metrics on perturbed copies of ground truth, and an evaluation report
//! in both output formats.

use poselift::data::{generate, SyntheticConfig};
use poselift::metrics::{auc, mpjpe, n_mpjpe, n_pck, pa_mpjpe, EvalItem, EvalReport};
use poselift::skeleton::Topology;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> poselift::Result<()> {
    let topo = Topology::h36m();
    let records = generate(&SyntheticConfig { count: 40, seed: 12, ..Default::default() })?.records;
    let gt = records[0].y_gt.root_centered(&topo)?;

    let scaled = gt.scaled(1.2);
    println!(
        "scaled by 1.2:   MPJPE {:7.2}  N-MPJPE {:.2e}  PA-MPJPE {:.2e}",
        mpjpe(&scaled, &gt)?,
        n_mpjpe(&scaled, &gt)?,
        pa_mpjpe(&scaled, &gt)?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noisy = gt.clone();
    noisy.coords_mut().iter_mut().for_each(|v| *v += rng.random_range(-60.0..60.0));
    println!(
        "uniform noise:   MPJPE {:7.2}  N-MPJPE {:7.2}  PA-MPJPE {:7.2}  N-PCK@50 {:.3}  AUC {:.3}",
        mpjpe(&noisy, &gt)?,
        n_mpjpe(&noisy, &gt)?,
        pa_mpjpe(&noisy, &gt)?,
        n_pck(&noisy, &gt, 50.0)?,
        auc(&noisy, &gt)?
    );

    let preds: Vec<_> = records
        .iter()
        .map(|r| {
            let mut p = r.y_gt.clone();
            p.coords_mut().iter_mut().for_each(|v| *v += rng.random_range(-40.0..40.0));
            p
        })
        .collect();
    let items: Vec<EvalItem<'_>> = records
        .iter()
        .zip(&preds)
        .map(|(r, p)| EvalItem { id: r.id, sequence: &r.sequence, pred: p, gt: &r.y_gt })
        .collect();
    let report = EvalReport::build(&items, &topo)?;
    for (seq, m) in &report.sequences {
        println!("{seq}: PA-MPJPE {:.2}", m.pa_mpjpe);
    }
    let csv = report.to_csv();
    println!("CSV has {} lines; aggregate row:\n{}", csv.lines().count(), csv.lines().last().unwrap());
    Ok(())
}
