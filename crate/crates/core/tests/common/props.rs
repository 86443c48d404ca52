//! Property suites shared by the `properties` tests and the acceptance run.
//! Each suite uses a deterministic proptest runner so failures reproduce.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use slidekit::cli::{grayscale_base, render_overlay, Palette};
use slidekit::inference::{blend_weights, threshold, Blend, BlendAccumulator, Provenance, ScoreMap};
use slidekit::objective::{ssim_value, SsimConfig};
use slidekit::patching::{make_grid, split_cells, BorderPolicy, SplitMode};
use slidekit::raster::Raster;
use slidekit::tensor::Tensor;

pub type Outcome = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn finish<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Outcome {
    r.map_err(|e| e.to_string())
}

fn policy() -> impl Strategy<Value = BorderPolicy> {
    prop_oneof![Just(BorderPolicy::DropPartial), Just(BorderPolicy::PadReflect)]
}

fn blend() -> impl Strategy<Value = Blend> {
    prop_oneof![Just(Blend::Average), Just(Blend::Hann)]
}

fn palette() -> impl Strategy<Value = Palette> {
    prop_oneof![
        Just(Palette::Red),
        Just(Palette::Yellow),
        Just(Palette::Magenta),
        Just(Palette::Cyan)
    ]
}

/// Identical inputs give identical grids; drop-partial cells lie fully
/// inside the raster and pad-reflect origins tile it completely.
pub fn grid_determinism() -> Outcome {
    let strat = (1usize..160, 1usize..160, 1usize..48, 0.0f64..1.0, policy());
    finish(runner(256).run(&strat, |(w, h, p, frac, pol)| {
        let stride = 1 + ((p - 1) as f64 * frac) as usize;
        let a = make_grid(w, h, p, stride, pol);
        let b = make_grid(w, h, p, stride, pol);
        prop_assert_eq!(a.is_ok(), b.is_ok());
        let Ok(g) = a else { return Ok(()) };
        prop_assert_eq!(&g, &b.unwrap());
        match pol {
            BorderPolicy::DropPartial => {
                let n = ((w - p) / stride + 1) * ((h - p) / stride + 1);
                prop_assert_eq!(g.len(), n);
                prop_assert!(g.cells.iter().all(|c| c.col + p <= w && c.row + p <= h));
            }
            BorderPolicy::PadReflect => {
                let mut hit = vec![false; w * h];
                for c in &g.cells {
                    prop_assert!(c.col < w && c.row < h);
                    for y in c.row..(c.row + p).min(h) {
                        for x in c.col..(c.col + p).min(w) {
                            hit[y * w + x] = true;
                        }
                    }
                }
                prop_assert!(hit.iter().all(|&v| v));
            }
        }
        Ok(())
    }))
}

/// Train and test partition the cells, sizes follow the ratio, and the
/// assignment depends only on the seed.
pub fn split_partition() -> Outcome {
    let strat = (1usize..400, 0.01f64..0.99, any::<u64>(), prop_oneof![Just(SplitMode::Random), Just(SplitMode::Contiguous)]);
    finish(runner(256).run(&strat, |(n, ratio, seed, mode)| {
        let s = split_cells(n, ratio, seed, mode).unwrap();
        prop_assert_eq!(&s, &split_cells(n, ratio, seed, mode).unwrap());
        prop_assert_eq!(s.train.len(), (ratio * n as f64).floor() as usize);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        Ok(())
    }))
}

fn score_map() -> impl Strategy<Value = ScoreMap> {
    (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
        proptest::collection::vec(prop_oneof![0.0f32..=1.0, Just(0.0), Just(0.5), Just(1.0)], w * h)
            .prop_map(move |v| ScoreMap::new(w, h, v, Provenance::AnomalySsim).unwrap())
    })
}

/// Raising the cutoff never adds class-1 pixels.
pub fn threshold_monotonicity() -> Outcome {
    let strat = (score_map(), 0.0f64..=1.0, 0.0f64..=1.0);
    finish(runner(256).run(&strat, |(sm, a, b)| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m_lo = threshold(&sm, lo).unwrap();
        let m_hi = threshold(&sm, hi).unwrap();
        prop_assert!(m_hi.data().iter().zip(m_lo.data()).all(|(&h, &l)| h <= l));
        prop_assert_eq!(threshold(&sm, 0.0).unwrap().count_ones(), sm.values().len());
        Ok(())
    }))
}

/// Per-pixel blend weights normalize to 1 for any stride and size.
pub fn blend_normalization() -> Outcome {
    let strat = (1usize..80, 1usize..80, 1usize..24, 0.0f64..1.0, blend());
    finish(runner(192).run(&strat, |(w, h, p, frac, b)| {
        let stride = 1 + ((p - 1) as f64 * frac) as usize;
        let g = make_grid(w, h, p, stride, BorderPolicy::PadReflect).unwrap();
        let wts = blend_weights(p, b);
        let mut acc = BlendAccumulator::new(w, h, 1);
        for i in 0..g.len() {
            acc.add(&g, i, &Tensor::ones(&[1, p, p]), &wts).unwrap();
        }
        prop_assert!(acc.coverage().iter().all(|&c| c > 0.0));
        prop_assert!(acc.finish().iter().all(|v| (v - 1.0).abs() < 1e-6));
        Ok(())
    }))
}

/// The tinted pixel set of an overlay is exactly `threshold(sm, t)`.
pub fn render_threshold_agreement() -> Outcome {
    let strat = (score_map(), 0.0f64..=1.0, palette(), 1usize..4).prop_flat_map(|(sm, t, pal, c)| {
        let n = sm.width() * sm.height() * c;
        (Just(sm), Just(t), Just(pal), Just(c), proptest::collection::vec(0.0f32..255.0, n))
    });
    finish(runner(192).run(&strat, |(sm, t, pal, c, data)| {
        let (w, h) = (sm.width(), sm.height());
        let r = Raster::new(w, h, c, data).unwrap();
        let img = render_overlay(&r, &sm, t, pal).unwrap();
        let base = grayscale_base(&r);
        let mask = threshold(&sm, t).unwrap();
        for y in 0..h {
            for x in 0..w {
                let g = base[y * w + x];
                let tinted = img.get_pixel(x as u32, y as u32).0 != [g, g, g];
                prop_assert_eq!(tinted, mask.get(x, y) == 1);
            }
        }
        Ok(())
    }))
}

/// SSIM is symmetric and equals 1 on identical inputs.
pub fn ssim_symmetry() -> Outcome {
    let strat = (1usize..3, 11usize..24, 11usize..24).prop_flat_map(|(c, h, w)| {
        let n = c * h * w;
        (
            Just([c, h, w]),
            proptest::collection::vec(-3.0f64..3.0, n),
            proptest::collection::vec(-3.0f64..3.0, n),
        )
    });
    finish(runner(64).run(&strat, |(shape, a, b)| {
        let x = Tensor::new(&shape, a).unwrap();
        let y = Tensor::new(&shape, b).unwrap();
        let cfg = SsimConfig::default().with_dynamic_range(6.0);
        let (xy, _) = ssim_value(&x, &y, &cfg).unwrap();
        let (yx, _) = ssim_value(&y, &x, &cfg).unwrap();
        let (xx, _) = ssim_value(&x, &x, &cfg).unwrap();
        prop_assert!((xy - yx).abs() < 1e-6, "{} vs {}", xy, yx);
        prop_assert!((xx - 1.0).abs() < 1e-6);
        Ok(())
    }))
}
