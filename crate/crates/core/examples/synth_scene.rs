//! Generate a synthetic scene with landslide-like blobs and write it out.
//!
//! cargo run --release --example synth_scene -- [seed] [out_dir]

use std::path::PathBuf;

use slidekit::raster::{save_mask, save_png, BitDepth};
use slidekit::synthgen::{generate_scene_detailed, SceneSpec};

fn main() -> slidekit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(7, |s| s.parse().expect("seed"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/examples/synth".into()));
    std::fs::create_dir_all(&out)?;

    let spec = SceneSpec {
        seed,
        ..Default::default()
    };
    let scene = generate_scene_detailed(&spec)?;
    save_png(&scene.raster, &out.join("scene.png"), BitDepth::Eight)?;
    save_mask(&scene.mask, &out.join("mask.png"))?;

    let n = (spec.width * spec.height) as f64;
    println!("{}x{} scene, {} blobs", spec.width, spec.height, scene.blobs.len());
    for b in &scene.blobs {
        println!("  centre ({:.0}, {:.0})  radii {:.1} x {:.1}", b.cx, b.cy, b.rx, b.ry);
    }
    println!("landslide prevalence {:.4}", scene.mask.count_ones() as f64 / n);
    println!("wrote {}", out.display());
    Ok(())
}
