//! Metric walkthrough: confusion counts, precision/recall/F1, per-class IoU
//! and a threshold sweep over a noisy score map.
//!
//! cargo run --release --example evaluate

use slidekit::evaluation::{confusion, f1_score, mean_iou, prf, sweep_threshold, EvalKind, EvalReport};
use slidekit::inference::{threshold, Provenance, ScoreMap};
use slidekit::rng::Rng;
use slidekit::synthgen::{generate_scene, SceneSpec};

fn main() -> slidekit::Result<()> {
    // Reference precision/recall pairs.
    for (p, r) in [(0.572, 0.788), (0.542, 0.846)] {
        println!("precision {p} recall {r} -> F1 {:.3}", f1_score(p, r).unwrap_or(f64::NAN));
    }

    let pred = [1, 1, 0, 0, 1, 0, 0, 0];
    let truth = [1, 0, 1, 0, 1, 0, 0, 1];
    let c = confusion(&pred, &truth)?;
    println!("{c:?} -> {:?}", prf(&c)?);
    print!("{}", EvalReport::from_labels(EvalKind::Patch, &pred, &truth, 0.5)?.render_table("toy"));

    // A score map that is the truth plus noise.
    let (_, mask) = generate_scene(&SceneSpec {
        width: 256,
        height: 256,
        blob_count: 4,
        seed: 5,
        ..Default::default()
    })?;
    let mut rng = Rng::new(1);
    let values = mask
        .data()
        .iter()
        .map(|&m| (0.4 * m as f64 + 0.6 * rng.uniform()) as f32)
        .collect();
    let sm = ScoreMap::new(256, 256, values, Provenance::SegProb)?;
    let sweep = sweep_threshold(&sm, &mask, 21)?;
    for p in sweep.points.iter().step_by(4) {
        println!("t={:.2}  mean IoU {:.3}", p.threshold, p.mean_iou.unwrap_or(f64::NAN));
    }
    println!("best t={:.2}: mean IoU {:.3}", sweep.best_threshold, sweep.best_mean_iou);
    let iou = mean_iou(&threshold(&sm, sweep.best_threshold)?, &mask)?;
    println!("per-class IoU at best t: {:?}", iou.per_class);
    Ok(())
}
