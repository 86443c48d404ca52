//! Pixel-level supervised detection: train the dilated-bottleneck segmenter
//! on the train half of the grid and sweep its probability map over the
//! test half.
//!
//! cargo run --release --example train_segmenter -- [epochs]

use slidekit::evaluation::{evaluate_score_map, sweep_threshold_region};
use slidekit::inference::{segment_raster, Blend};
use slidekit::models::{build, ModelSpec};
use slidekit::patching::{extract_mask_patch, extract_patch, make_grid, split, BorderPolicy};
use slidekit::raster::{standardize, Mask};
use slidekit::synthgen::{generate_scene, SceneSpec};
use slidekit::training::{train_segmenter, AdamState, TrainOptions};

fn main() -> slidekit::Result<()> {
    let epochs = std::env::args().nth(1).map_or(40, |s| s.parse().expect("epochs"));
    let (r, mask) = generate_scene(&SceneSpec {
        seed: 7,
        ..Default::default()
    })?;
    let x = standardize(&r);
    let grid = make_grid(x.width(), x.height(), 64, 64, BorderPolicy::DropPartial)?;
    let s = split(&grid, 0.5, 11)?;
    let mut patches = Vec::new();
    let mut masks = Vec::new();
    for &i in &s.train {
        patches.push(extract_patch(&x, &grid, i)?);
        masks.push(Mask::new(64, 64, extract_mask_patch(&mask, &grid, i)?)?);
    }

    let model = build(&ModelSpec::segmenter(3).with_seed(1))?;
    for line in model.topology() {
        println!("  {line}");
    }
    let mut opt = AdamState::new(&model);
    let opts = TrainOptions {
        epochs,
        batch_size: 8,
        seed: 2,
        max_steps: None,
    };
    let (model, report) = train_segmenter(model, &patches, &masks, &opts, &mut opt)?;
    println!("{} steps in {:.1}s", report.steps, report.wall_time);

    let probs = segment_raster(&model, &x, 64, 32, Blend::Hann)?;
    let mut test_region = Mask::zeros(x.width(), x.height());
    for &i in &s.test {
        let c = grid.cells[i];
        for y in c.row..c.row + 64 {
            for xx in c.col..c.col + 64 {
                test_region.set(xx, y, true);
            }
        }
    }
    let sweep = sweep_threshold_region(&probs, &mask, &test_region, 101)?;
    println!(
        "test region: best mean IoU {:.3} at t={:.2}, best foreground IoU {:.3}",
        sweep.best_mean_iou,
        sweep.best_threshold,
        sweep.best_foreground_iou.unwrap_or(0.0)
    );
    print!("{}", evaluate_score_map(&probs, &mask, 0.5)?.render_table("segmenter (whole scene)"));
    Ok(())
}
