//! SSIM between a scene and degraded copies of it, and the per-pixel
//! anomaly score map derived from SSIM.
//!
//! cargo run --release --example ssim_scores

use slidekit::inference::{anomaly_map, AnomalyMode};
use slidekit::objective::{dynamic_range, ssim_value, SsimConfig};
use slidekit::raster::Raster;
use slidekit::rng::Rng;
use slidekit::synthgen::{generate_scene, SceneSpec};
use slidekit::tensor::Tensor;

fn main() -> slidekit::Result<()> {
    let (r, mask) = generate_scene(&SceneSpec {
        width: 128,
        height: 128,
        channels: 1,
        blob_count: 2,
        seed: 3,
        ..Default::default()
    })?;
    let x = r.to_tensor::<f64>();
    let cfg = SsimConfig::default().with_dynamic_range(dynamic_range([&x]));

    let mut rng = Rng::new(1);
    for sigma in [0.0, 2.0, 8.0, 32.0] {
        let noise = Tensor::<f64>::randn(x.shape(), sigma, &mut rng);
        let y = Tensor::new(x.shape(), x.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())?;
        let (s, _) = ssim_value(&x, &y, &cfg)?;
        println!("noise sigma {sigma:>4}: SSIM {s:.4}");
    }

    // Flatten the blobs to their mean: the score map should light up there.
    let mean = r.data().iter().map(|&v| v as f64).sum::<f64>() / r.data().len() as f64;
    let flat: Vec<f32> = r
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m == 1 { mean as f32 } else { v })
        .collect();
    let recon = Raster::new(r.width(), r.height(), 1, flat)?;
    let sm = anomaly_map(&r, &recon, AnomalyMode::Ssim, &SsimConfig::default())?;
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for (&v, &m) in sm.values().iter().zip(mask.data()) {
        let acc = if m == 1 { &mut inside } else { &mut outside };
        acc.0 += v as f64;
        acc.1 += 1;
    }
    println!(
        "mean anomaly score inside blobs {:.3}, outside {:.3}",
        inside.0 / inside.1 as f64,
        outside.0 / outside.1 as f64
    );
    Ok(())
}
