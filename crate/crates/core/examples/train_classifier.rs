//! Patch-level supervised detection: train the residual classifier on the
//! train half of a 64-pixel grid and report accuracy, F1, precision and
//! recall on both halves.
//!
//! cargo run --release --example train_classifier -- [epochs]

use slidekit::evaluation::evaluate_patch_classifier;
use slidekit::inference::classify_raster;
use slidekit::models::{build, ModelSpec};
use slidekit::patching::{extract_patch, make_grid, patch_label, split, BorderPolicy};
use slidekit::raster::standardize;
use slidekit::synthgen::{generate_scene, SceneSpec};
use slidekit::training::{train_classifier, AdamState, TrainOptions};

fn main() -> slidekit::Result<()> {
    let epochs = std::env::args().nth(1).map_or(50, |s| s.parse().expect("epochs"));
    let (r, mask) = generate_scene(&SceneSpec {
        seed: 7,
        ..Default::default()
    })?;
    let x = standardize(&r);
    let grid = make_grid(x.width(), x.height(), 64, 64, BorderPolicy::DropPartial)?;
    let labels = (0..grid.len())
        .map(|i| patch_label(&mask, &grid, i, 0.01))
        .collect::<slidekit::Result<Vec<_>>>()?;
    let s = split(&grid, 0.5, 11)?;
    let patches = s
        .train
        .iter()
        .map(|&i| extract_patch(&x, &grid, i))
        .collect::<slidekit::Result<Vec<_>>>()?;
    let train_labels: Vec<u8> = s.train.iter().map(|&i| labels[i]).collect();

    let model = build(&ModelSpec::patch_classifier(3).with_seed(1))?;
    println!("classifier with {} parameters", model.param_count());
    let mut opt = AdamState::new(&model);
    let opts = TrainOptions {
        epochs,
        batch_size: 8,
        seed: 2,
        max_steps: None,
    };
    let (model, report) = train_classifier(model, &patches, &train_labels, &opts, &mut opt)?;
    println!("{} steps in {:.1}s", report.steps, report.wall_time);

    for (name, cells) in [("train", &s.train), ("test", &s.test)] {
        let rep = evaluate_patch_classifier(&model, &x, &grid, cells, &labels)?;
        print!("{}", rep.render_table(&format!("classifier ({name})")));
    }
    let map = classify_raster(&model, &x, &grid)?;
    let flagged = map.values().iter().filter(|&&v| v >= 0.5).count();
    println!("pixels inside flagged cells: {flagged}");
    Ok(())
}
