use std::path::Path;
use std::process::{Command, Output};

use slidekit::cli::{grayscale_base, render_overlay, Palette, LEGEND_HEIGHT};
use slidekit::inference::{threshold, Provenance, ScoreMap};
use slidekit::raster::{load_mask, load_raster, save_mask, Mask};
use slidekit::rng::Rng;

fn slidekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slidekit"))
        .args(args)
        .env_remove("SLIDEKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = slidekit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn small_scene(dir: &Path) {
    ok(&[
        "synth", "--out", s(dir), "--seed", "7", "--width", "128", "--height", "128",
        "--channels", "1", "--blob-count", "3", "--radius-min", "8", "--radius-max", "14",
    ]);
}

#[test]
fn synth_is_byte_identical_on_rerun() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--seed", "7", "--out", s(out), "--width", "96", "--height", "80"]);
    }
    for f in ["scene.png", "mask.png", "scene.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = json(&a.join("synth.run.json"));
    assert_eq!(log["command"], "synth");
    assert_eq!(log["config"]["seed"], 7);
    let r = load_raster(&a.join("scene.png")).unwrap();
    assert_eq!((r.width(), r.height(), r.channels()), (96, 80, 3));
}

#[test]
fn eval_on_perfect_prediction_reports_unit_iou() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path());
    let mask = d.path().join("mask.png");
    let rep = d.path().join("eval.json");
    ok(&["eval", "--mask", s(&mask), "--pred", s(&mask), "--out", s(&rep)]);
    let v = json(&rep);
    assert_eq!(v["report"]["mean_iou"], 1.0);
    assert_eq!(v["report"]["population"], 128 * 128);
    assert!(d.path().join("eval.txt").exists());
}

#[test]
fn empty_unsupervised_filter_exits_with_data_error() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path());
    let full = d.path().join("full.png");
    save_mask(&Mask::new(128, 128, vec![1; 128 * 128]).unwrap(), &full).unwrap();
    let model = d.path().join("m.slkm");
    let out = slidekit(&[
        "train-anomaly", "--raster", s(&d.path().join("scene.png")), "--mask", s(&full),
        "--out", s(&model), "--patch-size", "32", "--epochs", "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unsupervised training filter") && err.contains("50%"), "{err}");
    assert!(!model.exists());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(slidekit(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(slidekit(&["frobnicate"]).status.code(), Some(1));
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 1, "sede": 2}"#).unwrap();
    let out = slidekit(&["synth", "--config", s(&cfg), "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
    assert_eq!(slidekit(&["tile", "--out", s(&d.path().join("g.json"))]).status.code(), Some(1));
    assert_eq!(slidekit(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let out = slidekit(&[
        "tile", "--raster", s(&d.path().join("nope.png")), "--out", s(&d.path().join("g.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 3, "width": 64, "height": 64, "blob_count": 1}"#).unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b), "--seed", "4"]);
    assert_eq!(json(&a.join("synth.run.json"))["config"]["seed"], 3);
    assert_eq!(json(&b.join("synth.run.json"))["config"]["seed"], 4);
    assert_eq!(json(&b.join("synth.run.json"))["config"]["width"], 64);
}

fn random_map(w: usize, h: usize, seed: u64) -> ScoreMap {
    let mut rng = Rng::new(seed);
    ScoreMap::new(w, h, (0..w * h).map(|_| rng.uniform() as f32).collect(), Provenance::AnomalySsim).unwrap()
}

#[test]
fn render_tints_exactly_the_thresholded_pixels() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path());
    let scene = d.path().join("scene.png");
    let score = d.path().join("score.png");
    let sm = random_map(128, 128, 3);
    sm.save(&score, "scene.png", serde_json::json!({})).unwrap();
    let (sm, _) = ScoreMap::load(&score).unwrap();
    let r = load_raster(&scene).unwrap();
    let base = grayscale_base(&r);
    for t in ["0", "0.3", "0.75", "1"] {
        let img = d.path().join(format!("o{t}.png"));
        let mask = d.path().join(format!("m{t}.png"));
        ok(&[
            "render", "--raster", s(&scene), "--score", s(&score), "--threshold", t,
            "--out", s(&img), "--mask-out", s(&mask),
        ]);
        let want = threshold(&sm, t.parse().unwrap()).unwrap();
        assert_eq!(load_mask(&mask).unwrap(), want);
        let png = image::open(&img).unwrap().to_rgb8();
        assert_eq!(png.height() as usize, 128 + LEGEND_HEIGHT);
        for y in 0..128 {
            for x in 0..128 {
                let p = png.get_pixel(x as u32, y as u32).0;
                let g = base[y * 128 + x];
                assert_eq!(p != [g, g, g], want.get(x, y) == 1, "t={t} ({x},{y})");
            }
        }
        if t == "0" {
            assert_eq!(want.count_ones(), 128 * 128);
        }
    }
}

#[test]
fn zero_scores_render_the_plain_base() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path());
    let r = load_raster(&d.path().join("scene.png")).unwrap();
    let sm = ScoreMap::new(128, 128, vec![0.0; 128 * 128], Provenance::SegProb).unwrap();
    let img = render_overlay(&r, &sm, 0.5, Palette::Red).unwrap();
    let base = grayscale_base(&r);
    for (i, &g) in base.iter().enumerate() {
        assert_eq!(img.get_pixel((i % 128) as u32, (i / 128) as u32).0, [g, g, g]);
    }
    assert!(render_overlay(&r, &random_map(64, 128, 0), 0.5, Palette::Red).is_err());
}

#[test]
fn full_pipeline_smoke() {
    let d = tempfile::tempdir().unwrap();
    let p = |f: &str| d.path().join(f);
    small_scene(d.path());
    let scene = p("scene.png");
    let mask = p("mask.png");
    ok(&["tile", "--raster", s(&scene), "--mask", s(&mask), "--patch-size", "32", "--stride", "32", "--out", s(&p("grid.json"))]);
    let grid = json(&p("grid.json"));
    assert_eq!(grid["grid"]["cells"].as_array().unwrap().len(), 16);
    ok(&["split", "--grid", s(&p("grid.json")), "--ratio", "0.5", "--seed", "1", "--out", s(&p("split.json"))]);
    let split = json(&p("split.json"));
    assert_eq!(split["train"].as_array().unwrap().len() + split["test"].as_array().unwrap().len(), 16);

    let (grid_path, split_path) = (p("grid.json"), p("split.json"));
    let (cls, seg) = (p("cls.slkm"), p("seg.slkm"));
    let common = [
        "--raster", s(&scene), "--mask", s(&mask), "--grid", s(&grid_path), "--split", s(&split_path),
        "--patch-size", "32", "--depth", "1", "--base-width", "4", "--epochs", "1",
    ];
    let mut args = vec!["train-patch", "--out", s(&cls)];
    args.extend(common);
    ok(&args);
    assert!(p("cls.slkm.report.json").exists() && p("cls.slkm.opt").exists());
    let mut args = vec!["train-seg", "--out", s(&seg), "--dilation-rates", "1,2"];
    args.extend(common);
    ok(&args);
    ok(&[
        "train-anomaly", "--raster", s(&scene), "--mask", s(&mask), "--out", s(&p("den.slkm")),
        "--patch-size", "32", "--stride", "32", "--depth", "1", "--base-width", "4", "--epochs", "1",
    ]);
    let report = json(&p("den.slkm.report.json"));
    assert!(report["loss_history"].as_array().unwrap().iter().all(|v| v.is_f64()));

    for (model, prov) in [("cls", "patch_prob"), ("seg", "seg_prob"), ("den", "anomaly_ssim")] {
        let score = p(&format!("{model}.score.png"));
        ok(&["infer", "--model", s(&p(&format!("{model}.slkm"))), "--raster", s(&scene), "--out", s(&score)]);
        let (sm, side) = ScoreMap::load(&score).unwrap();
        assert_eq!((sm.width(), sm.height()), (128, 128));
        assert_eq!(serde_json::to_value(side.provenance).unwrap(), prov);
        let rep = p(&format!("{model}.eval.json"));
        ok(&["eval", "--score", s(&score), "--mask", s(&mask), "--steps", "11", "--out", s(&rep)]);
        assert!(json(&rep)["sweep"]["points"].as_array().unwrap().len() == 11);
        ok(&["render", "--raster", s(&scene), "--score", s(&score), "--out", s(&p(&format!("{model}.overlay.png")))]);
    }
    let rep = p("patch.eval.json");
    ok(&[
        "eval", "--model", s(&p("cls.slkm")), "--raster", s(&scene), "--mask", s(&mask),
        "--grid", s(&p("grid.json")), "--split", s(&p("split.json")), "--out", s(&rep),
    ]);
    assert_eq!(json(&rep)["report"]["population"], split["test"].as_array().unwrap().len());
}
