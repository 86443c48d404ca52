//! Unsupervised detection: train the denoiser on patches whose landslide
//! coverage is below 50%, reconstruct the scene and sweep the SSIM anomaly
//! map against the ground truth.
//!
//! cargo run --release --example train_anomaly -- [epochs] [out_dir]

use std::path::PathBuf;

use slidekit::evaluation::sweep_threshold;
use slidekit::inference::{anomaly_map, reconstruct_full, AnomalyMode, Blend};
use slidekit::models::{build, save_model, ModelSpec};
use slidekit::objective::SsimConfig;
use slidekit::patching::{extract_patch, filter_unsupervised, make_grid, BorderPolicy};
use slidekit::raster::standardize;
use slidekit::synthgen::{generate_scene, SceneSpec};
use slidekit::training::{train_denoiser, AdamState, NoiseSpec, TrainOptions};

fn main() -> slidekit::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(10, |s| s.parse().expect("epochs"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/examples/anomaly".into()));
    std::fs::create_dir_all(&out)?;

    let (r, mask) = generate_scene(&SceneSpec {
        seed: 7,
        ..Default::default()
    })?;
    let x = standardize(&r);
    let grid = make_grid(x.width(), x.height(), 64, 32, BorderPolicy::DropPartial)?;
    let keep = filter_unsupervised(&mask, &grid, 0.5)?;
    let patches = keep
        .iter()
        .map(|&i| extract_patch(&x, &grid, i))
        .collect::<slidekit::Result<Vec<_>>>()?;
    println!("{} of {} patches pass the coverage filter", patches.len(), grid.len());

    let model = build(&ModelSpec::denoiser(3).with_seed(1))?;
    let mut opt = AdamState::new(&model);
    let opts = TrainOptions {
        epochs,
        batch_size: 8,
        seed: 2,
        max_steps: None,
    };
    let ssim = SsimConfig::default();
    let (model, report) = train_denoiser(model, &patches, &NoiseSpec::gaussian(1.0, 3), &opts, &mut opt, &ssim)?;
    if let Some((first, last)) = report.smoothed_ends(20) {
        println!("{} steps in {:.1}s, loss {first:.3} -> {last:.3}", report.steps, report.wall_time);
    }
    save_model(&model, &out.join("denoiser.slkm"))?;

    let recon = reconstruct_full(&model, &x, 64, 32, Blend::Hann)?;
    for mode in [AnomalyMode::Ssim, AnomalyMode::Residual] {
        let sm = anomaly_map(&x, &recon, mode, &ssim)?;
        let s = sweep_threshold(&sm, &mask, 101)?;
        println!(
            "{mode:?}: best mean IoU {:.3} at t={:.2}, best foreground IoU {:.3} at t={:.2}",
            s.best_mean_iou,
            s.best_threshold,
            s.best_foreground_iou.unwrap_or(0.0),
            s.best_foreground_threshold.unwrap_or(0.0)
        );
        if mode == AnomalyMode::Ssim {
            sm.save(&out.join("anomaly.png"), "synthetic seed 7", serde_json::json!({"stride": 32}))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
