use slidekit::inference::*;
use slidekit::models::{build, Model, ModelSpec};
use slidekit::objective::SsimConfig;
use slidekit::patching::{extract_patch, make_grid, BorderPolicy};
use slidekit::raster::Raster;
use slidekit::rng::Rng;
use slidekit::tensor::Tensor;

fn random_raster(w: usize, h: usize, c: usize, seed: u64) -> Raster {
    let mut rng = Rng::new(seed);
    let t: Tensor = Tensor::randn(&[c, h, w], 1.0, &mut rng);
    Raster::from_tensor(&t).unwrap()
}

fn zero_params(m: &mut Model) {
    for t in m.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// relu(x) - relu(-x) = x: the first conv splits each channel into its
/// positive and negative parts, the second passes them on, the head recombines.
fn identity_denoiser(c: usize, p: usize) -> Model {
    let mut m = build(&ModelSpec::denoiser(c).with_depth(1).with_width(8).with_patch_size(p)).unwrap();
    zero_params(&mut m);
    let ps = m.params_mut();
    let w1 = ps.get_mut("enc0.conv1.weight").unwrap();
    for k in 0..c {
        w1.data_mut()[((k * c + k) * 3 + 1) * 3 + 1] = 1.0;
        w1.data_mut()[(((c + k) * c + k) * 3 + 1) * 3 + 1] = -1.0;
    }
    let w2 = ps.get_mut("enc0.conv2.weight").unwrap();
    for k in 0..8 {
        w2.data_mut()[((k * 8 + k) * 3 + 1) * 3 + 1] = 1.0;
    }
    let head = ps.get_mut("head.weight").unwrap();
    for k in 0..c {
        head.data_mut()[k * 8 + k] = 1.0;
        head.data_mut()[k * 8 + c + k] = -1.0;
    }
    m
}

#[test]
fn identity_denoiser_reproduces_input() {
    let r = random_raster(50, 37, 3, 1);
    let m = identity_denoiser(3, 16);
    for stride in [16, 8, 5, 1] {
        for blend in [Blend::Average, Blend::Hann] {
            let out = reconstruct_full(&m, &r, 16, stride, blend).unwrap();
            let err = out
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err < 1e-5, "stride {stride} {blend:?}: {err}");
        }
    }
}

#[test]
fn no_overlap_is_tile_concatenation() {
    let r = random_raster(48, 32, 1, 2);
    let m = build(&ModelSpec::denoiser(1).with_depth(2).with_width(4).with_patch_size(16).with_seed(3)).unwrap();
    let out = reconstruct_full(&m, &r, 16, 16, Blend::Hann).unwrap();
    let g = make_grid(48, 32, 16, 16, BorderPolicy::DropPartial).unwrap();
    for i in 0..g.len() {
        let c = g.cell(i).unwrap();
        let y = m.forward(&extract_patch(&r, &g, i).unwrap()).unwrap();
        for py in 0..16 {
            for px in 0..16 {
                assert_eq!(out.get(c.col + px, c.row + py, 0), y.at3(0, py, px));
            }
        }
    }
}

#[test]
fn blends_agree_on_single_cover() {
    let r = random_raster(32, 32, 2, 4);
    let m = build(&ModelSpec::denoiser(2).with_depth(1).with_width(4).with_patch_size(16).with_seed(5)).unwrap();
    let a = reconstruct_full(&m, &r, 16, 16, Blend::Average).unwrap();
    let h = reconstruct_full(&m, &r, 16, 16, Blend::Hann).unwrap();
    for (x, y) in a.data().iter().zip(h.data()) {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
    }
}

#[test]
fn raster_smaller_than_patch_is_rejected() {
    let m = identity_denoiser(1, 16);
    assert!(reconstruct_full(&m, &random_raster(15, 40, 1, 0), 16, 8, Blend::Hann).is_err());
    assert!(reconstruct_full(&m, &random_raster(40, 40, 1, 0), 16, 17, Blend::Hann).is_err());
}

#[test]
fn every_pixel_is_covered_and_weights_normalize() {
    for (w, h, p) in [(37, 29, 8), (16, 16, 16), (20, 33, 16)] {
        for stride in 1..=p {
            for blend in [Blend::Average, Blend::Hann] {
                let g = make_grid(w, h, p, stride, BorderPolicy::PadReflect).unwrap();
                let wts = blend_weights(p, blend);
                let mut acc = BlendAccumulator::new(w, h, 1);
                for i in 0..g.len() {
                    acc.add(&g, i, &Tensor::ones(&[1, p, p]), &wts).unwrap();
                }
                assert!(acc.coverage().iter().all(|&c| c > 0.0));
                assert!(acc.finish().iter().all(|v| (v - 1.0).abs() < 1e-6));
            }
        }
    }
}

#[test]
fn identical_reconstruction_scores_zero() {
    let r = random_raster(24, 24, 3, 6);
    for mode in [AnomalyMode::Ssim, AnomalyMode::Residual] {
        let sm = anomaly_map(&r, &r, mode, &SsimConfig::default()).unwrap();
        assert!(sm.values().iter().all(|&v| v.abs() < 1e-6), "{mode:?}");
    }
}

#[test]
fn injected_square_tops_the_anomaly_map() {
    let (w, h) = (40, 40);
    let base = Raster::new(w, h, 1, vec![10.0; w * h]).unwrap();
    let mut data = vec![10.0f32; w * h];
    for y in 15..23 {
        for x in 20..28 {
            data[y * w + x] = 200.0;
        }
    }
    let x = Raster::new(w, h, 1, data).unwrap();
    for mode in [AnomalyMode::Ssim, AnomalyMode::Residual] {
        let sm = anomaly_map(&x, &base, mode, &SsimConfig::default()).unwrap();
        let (best, _) = sm
            .values()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let (bx, by) = (best % w, best / w);
        assert!((20..28).contains(&bx) && (15..23).contains(&by), "{mode:?}: ({bx},{by})");
    }
}

#[test]
fn random_pairs_score_in_unit_interval() {
    for seed in 0..5 {
        let a = random_raster(20, 18, 2, seed);
        let b = random_raster(20, 18, 2, seed + 100);
        for mode in [AnomalyMode::Ssim, AnomalyMode::Residual] {
            let sm = anomaly_map(&a, &b, mode, &SsimConfig::default()).unwrap();
            assert!(sm.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn anomaly_dims_must_match() {
    let a = random_raster(20, 18, 1, 0);
    let b = random_raster(18, 20, 1, 0);
    assert!(anomaly_map(&a, &b, AnomalyMode::Residual, &SsimConfig::default()).is_err());
}

#[test]
fn threshold_extremes() {
    let sm = ScoreMap::new(3, 1, vec![0.0, 0.5, 1.0], Provenance::SegProb).unwrap();
    assert_eq!(threshold(&sm, 0.0).unwrap().data(), &[1, 1, 1]);
    assert_eq!(threshold(&sm, 1.0).unwrap().data(), &[0, 0, 1]);
    assert!(threshold(&sm, 1.01).is_err());
}

/// logit = 10·mean(relu(x)) - 5, so bright (1) cells score σ(5) and dark
/// (0) cells σ(-5).
fn mean_classifier(p: usize) -> Model {
    let mut m = build(&ModelSpec::patch_classifier(1).with_depth(1).with_width(4).with_patch_size(p)).unwrap();
    zero_params(&mut m);
    let ps = m.params_mut();
    ps.get_mut("stem.weight").unwrap().data_mut()[4] = 1.0;
    ps.get_mut("head.weight").unwrap().data_mut()[0] = 10.0;
    ps.get_mut("head.bias").unwrap().data_mut()[0] = -5.0;
    m
}

fn checkerboard(cells: usize, p: usize) -> Raster {
    let n = cells * p;
    let data = (0..n * n)
        .map(|i| (((i % n) / p + (i / n) / p) % 2) as f32)
        .collect();
    Raster::new(n, n, 1, data).unwrap()
}

#[test]
fn constant_classifier_gives_uniform_map() {
    let mut m = mean_classifier(8);
    m.params_mut().get_mut("head.weight").unwrap().data_mut()[0] = 0.0;
    let r = random_raster(24, 24, 1, 0);
    let g = make_grid(24, 24, 8, 4, BorderPolicy::PadReflect).unwrap();
    let sm = classify_raster(&m, &r, &g).unwrap();
    let p = 1.0 / (1.0 + 5f32.exp());
    assert!(sm.values().iter().all(|v| (v - p).abs() < 1e-6));
    assert_eq!(sm.provenance(), Provenance::PatchProb);
}

#[test]
fn checkerboard_cells_fill_exactly() {
    let (cells, p) = (4, 8);
    let r = checkerboard(cells, p);
    let m = mean_classifier(p);
    let g = make_grid(r.width(), r.height(), p, p, BorderPolicy::DropPartial).unwrap();
    let sm = classify_raster(&m, &r, &g).unwrap();
    let hi = m.forward(&Tensor::ones(&[1, p, p])).unwrap().item();
    let lo = m.forward(&Tensor::zeros(&[1, p, p])).unwrap().item();
    assert!(hi > 0.99 && lo < 0.01);
    for y in 0..r.height() {
        for x in 0..r.width() {
            let want = if (x / p + y / p) % 2 == 1 { hi } else { lo };
            assert_eq!(sm.get(x, y), want);
        }
    }
}

#[test]
fn overlaps_average_covering_cells() {
    let p = 8;
    let r = checkerboard(3, p);
    let m = mean_classifier(p);
    let g = make_grid(r.width(), r.height(), p, p / 2, BorderPolicy::DropPartial).unwrap();
    let sm = classify_raster(&m, &r, &g).unwrap();
    let probs: Vec<f32> = (0..g.len())
        .map(|i| m.forward(&extract_patch(&r, &g, i).unwrap()).unwrap().item())
        .collect();
    for y in 0..r.height() {
        for x in 0..r.width() {
            let covering: Vec<f64> = g
                .cells
                .iter()
                .zip(&probs)
                .filter(|(c, _)| (c.col..c.col + p).contains(&x) && (c.row..c.row + p).contains(&y))
                .map(|(_, &q)| q as f64)
                .collect();
            let want = covering.iter().sum::<f64>() / covering.len() as f64;
            assert!((sm.get(x, y) as f64 - want).abs() < 1e-6, "({x},{y})");
        }
    }
}

#[test]
fn empty_grid_is_rejected() {
    let m = mean_classifier(8);
    let r = random_raster(6, 6, 1, 0);
    assert!(make_grid(6, 6, 8, 8, BorderPolicy::DropPartial).is_err());
    let mut g = make_grid(16, 16, 8, 8, BorderPolicy::DropPartial).unwrap();
    g.cells.clear();
    let err = classify_raster(&m, &r, &g).unwrap_err();
    assert!(matches!(err, slidekit::Error::Empty(_)));
}

fn small_segmenter(seed: u64) -> Model {
    let mut s = ModelSpec::segmenter(1).with_depth(1).with_width(4).with_patch_size(16).with_seed(seed);
    s.dilation_rates = vec![1, 2];
    build(&s).unwrap()
}

#[test]
fn symmetric_logits_give_one_half() {
    let mut m = small_segmenter(1);
    for name in ["head.weight", "head.bias"] {
        m.params_mut().get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let sm = segment_raster(&m, &random_raster(40, 30, 1, 2), 16, 8, Blend::Hann).unwrap();
    assert!(sm.values().iter().all(|&v| v == 0.5));
    assert_eq!(sm.provenance(), Provenance::SegProb);
}

#[test]
fn no_overlap_segmentation_is_per_patch_softmax() {
    let m = small_segmenter(2);
    let r = random_raster(32, 48, 1, 3);
    let sm = segment_raster(&m, &r, 16, 16, Blend::Average).unwrap();
    let g = make_grid(32, 48, 16, 16, BorderPolicy::DropPartial).unwrap();
    for i in 0..g.len() {
        let c = g.cell(i).unwrap();
        let l = m.forward(&extract_patch(&r, &g, i).unwrap()).unwrap();
        for py in 0..16 {
            for px in 0..16 {
                let (a, b) = (l.at3(0, py, px) as f64, l.at3(1, py, px) as f64);
                let want = b.exp() / (a.exp() + b.exp());
                assert!((sm.get(c.col + px, c.row + py) as f64 - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn hann_blend_hides_seams_on_smooth_input() {
    let (w, h, p) = (64, 16, 16);
    let data = (0..w * h).map(|i| ((i % w) as f32 / w as f32 * 3.0).sin()).collect();
    let r = Raster::new(w, h, 1, data).unwrap();
    let m = small_segmenter(7);
    let sm = segment_raster(&m, &r, p, p / 2, Blend::Hann).unwrap();

    // Largest horizontal step inside any single window's own prediction.
    let g = make_grid(w, h, p, p / 2, BorderPolicy::PadReflect).unwrap();
    let mut within = 0.0f64;
    for i in 0..g.len() {
        let l = m.forward(&extract_patch(&r, &g, i).unwrap()).unwrap();
        let prob = |y: usize, x: usize| 1.0 / (1.0 + ((l.at3(0, y, x) - l.at3(1, y, x)) as f64).exp());
        for y in 0..p {
            for x in 1..p {
                within = within.max((prob(y, x) - prob(y, x - 1)).abs());
            }
        }
    }
    let mut seam = 0.0f64;
    for y in 0..h {
        for x in (p / 2..w).step_by(p / 2) {
            seam = seam.max((sm.get(x, y) as f64 - sm.get(x - 1, y) as f64).abs());
        }
    }
    assert!(seam <= within, "seam {seam} within {within}");
}

#[test]
fn score_map_round_trips_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.png");
    let vals: Vec<f32> = (0..60).map(|i| i as f32 / 59.0).collect();
    let sm = ScoreMap::new(10, 6, vals, Provenance::AnomalySsim).unwrap();
    sm.save(&path, "scene.png", serde_json::json!({"stride": 8})).unwrap();
    let (back, side) = ScoreMap::load(&path).unwrap();
    assert_eq!(back.provenance(), Provenance::AnomalySsim);
    assert_eq!(side.source, "scene.png");
    for (a, b) in back.values().iter().zip(sm.values()) {
        assert!((a - b).abs() <= 1.0 / 65535.0);
    }
}

#[test]
fn score_map_rejects_out_of_range() {
    assert!(ScoreMap::new(2, 1, vec![0.2, 1.5], Provenance::SegProb).is_err());
    assert!(ScoreMap::new(2, 1, vec![0.2, f32::NAN], Provenance::SegProb).is_err());
    assert!(ScoreMap::new(2, 2, vec![0.2], Provenance::SegProb).is_err());
}
