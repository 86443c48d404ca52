//! Tile a scene into a patch grid, label cells, apply the unsupervised
//! coverage filter and split the grid into train and test halves.
//!
//! cargo run --release --example tile_and_split -- [patch] [stride]

use slidekit::patching::{filter_unsupervised, landslide_coverage, make_grid, patch_label, split, BorderPolicy};
use slidekit::synthgen::{generate_scene, SceneSpec};

fn main() -> slidekit::Result<()> {
    let mut args = std::env::args().skip(1);
    let patch = args.next().map_or(64, |s| s.parse().expect("patch size"));
    let stride = args.next().map_or(patch, |s| s.parse().expect("stride"));

    let (raster, mask) = generate_scene(&SceneSpec {
        seed: 7,
        ..Default::default()
    })?;
    for policy in [BorderPolicy::DropPartial, BorderPolicy::PadReflect] {
        let g = make_grid(raster.width(), raster.height(), patch, stride, policy)?;
        println!("{policy:?}: {} cells", g.len());
    }

    let grid = make_grid(raster.width(), raster.height(), patch, stride, BorderPolicy::DropPartial)?;
    let positives = (0..grid.len())
        .map(|i| patch_label(&mask, &grid, i, 0.01))
        .collect::<slidekit::Result<Vec<_>>>()?
        .iter()
        .filter(|&&l| l == 1)
        .count();
    let max_cov = (0..grid.len())
        .map(|i| landslide_coverage(&mask, &grid, i))
        .collect::<slidekit::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let keep = filter_unsupervised(&mask, &grid, 0.5)?;
    println!("positive cells: {positives}/{}", grid.len());
    println!("largest landslide coverage in a cell: {max_cov:.3}");
    println!("cells passing the < 50% coverage filter: {}", keep.len());

    let s = split(&grid, 0.5, 11)?;
    println!("split (seed 11): train {} / test {}", s.train.len(), s.test.len());
    println!("first test cells: {:?}", &s.test[..s.test.len().min(8)]);
    Ok(())
}
