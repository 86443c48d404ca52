//! Sliding-window inference with a saved denoiser, then a thresholded
//! overlay of the anomaly map. Trains a small model first when no model
//! path is given.
//!
//! cargo run --release --example infer_and_render -- [model.slkm] [out_dir]

use std::path::PathBuf;

use slidekit::cli::{encode_rgb_png, render_overlay, Palette};
use slidekit::inference::{anomaly_map, reconstruct_full, threshold, AnomalyMode, Blend};
use slidekit::models::{build, load_model, Model, ModelSpec};
use slidekit::objective::SsimConfig;
use slidekit::patching::{extract_patch, filter_unsupervised, make_grid, BorderPolicy};
use slidekit::raster::{save_mask, standardize, Mask, Raster};
use slidekit::synthgen::{generate_scene, SceneSpec};
use slidekit::training::{train_denoiser, AdamState, NoiseSpec, TrainOptions};

fn quick_model(x: &Raster, mask: &Mask) -> slidekit::Result<Model> {
    let grid = make_grid(x.width(), x.height(), 64, 32, BorderPolicy::DropPartial)?;
    let patches = filter_unsupervised(mask, &grid, 0.5)?
        .iter()
        .map(|&i| extract_patch(x, &grid, i))
        .collect::<slidekit::Result<Vec<_>>>()?;
    let model = build(&ModelSpec::denoiser(x.channels()).with_width(8).with_seed(1))?;
    let mut opt = AdamState::new(&model);
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 8,
        seed: 2,
        max_steps: None,
    };
    let (model, _) = train_denoiser(model, &patches, &NoiseSpec::gaussian(1.0, 3), &opts, &mut opt, &SsimConfig::default())?;
    Ok(model)
}

fn main() -> slidekit::Result<()> {
    let mut args = std::env::args().skip(1);
    let model_path = args.next().map(PathBuf::from);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/examples/render".into()));
    std::fs::create_dir_all(&out)?;

    let (r, mask) = generate_scene(&SceneSpec {
        seed: 7,
        ..Default::default()
    })?;
    let x = standardize(&r);
    let model = match model_path {
        Some(p) => load_model(&p)?,
        None => {
            println!("no model given; training a small denoiser for 3 epochs");
            quick_model(&x, &mask)?
        }
    };
    let p = model.spec().patch_size;
    let recon = reconstruct_full(&model, &x, p, p / 2, Blend::Hann)?;
    let sm = anomaly_map(&x, &recon, AnomalyMode::Ssim, &SsimConfig::default())?;

    for t in [0.2, 0.3, 0.4] {
        let hits = threshold(&sm, t)?;
        let img = render_overlay(&r, &sm, t, Palette::Red)?;
        let name = format!("overlay_t{:02}.png", (t * 100.0) as u32);
        std::fs::write(out.join(&name), encode_rgb_png(&img)?)?;
        save_mask(&hits, &out.join(format!("mask_t{:02}.png", (t * 100.0) as u32)))?;
        println!("t={t:.1}: {} pixels flagged -> {name}", hits.count_ones());
    }
    println!("wrote {}", out.display());
    Ok(())
}
