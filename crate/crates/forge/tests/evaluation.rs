mod common;

use zigan_core::evaluation::{top1_accuracy, train_recognizer, RecognizerTraining};
use zigan_core::glyph::{synthetic_style, GlyphImage};
use zigan_core::training::{TrainConfig, TrainState};
use zigan_forge::checkpoint::{load_recognizer, save_recognizer};
use zigan_forge::corpus::{build_shot_split, write_synthetic_corpus};
use zigan_forge::pipeline::evaluate_suite;

fn generator_state() -> TrainState {
    TrainState::new(TrainConfig { resolution: 64, width_divisor: 16, batch_size: 2, shots: 4, seed: 9, ..TrainConfig::default() }).unwrap()
}

#[test]
fn grid_is_capped_at_fifty_columns() {
    let dir = tempfile::tempdir().unwrap();
    let f = common::font();
    let chars: Vec<char> = ('A'..='Z').chain('a'..='z').chain('0'..='5').collect();
    let style = dir.path().join("style");
    write_synthetic_corpus(&f, &chars, &style, 1, 0.1, 0, 64).unwrap();
    let split = build_shot_split(&style, &f, 1, 4, 2, 64, 1).unwrap();
    assert_eq!(split.test.len(), 54);
    let state = generator_state();
    let out = dir.path().join("eval");
    let r = evaluate_suite(&state.model.gen_s, &split, None, 0.0, &out, "init").unwrap();
    assert_eq!(r.grid, Some((3, 50)));
    assert_eq!(r.test_size, 54);
    let grid = image::open(out.join("grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (50 * 64, 3 * 64));
    assert!(r.suite.accuracy.is_none() && r.suite.fid.is_none());
    assert!((0.0..=1.0).contains(&r.suite.iou.mean));

    let small = build_shot_split(&style, &f, 1, 50, 2, 64, 1).unwrap();
    let r = evaluate_suite(&state.model.gen_s, &small, None, 0.0, &dir.path().join("eval2"), "init").unwrap();
    assert_eq!(r.grid, Some((3, 8)));
}

#[test]
fn empty_test_set_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let style = common::synthetic_style_dir(dir.path(), 64);
    let f = common::font();
    let split = build_shot_split(&style, &f, 1, 12, 2, 64, 1).unwrap();
    assert!(split.test.is_empty());
    let out = dir.path().join("eval");
    let r = evaluate_suite(&generator_state().model.gen_s, &split, None, 0.0, &out, "init").unwrap();
    assert!(r.suite.iou.empty);
    assert_eq!(r.grid, None);
    assert!(!out.join("grid.png").exists());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iou"]["empty"], true);
    assert_eq!(summary["test_size"], 0);
}

fn digit_corpus() -> (Vec<GlyphImage>, Vec<char>) {
    let f = common::font();
    let classes: Vec<char> = ('0'..='9').collect();
    let mut images = Vec::new();
    for &c in &classes {
        let g = f.render(c, 32).unwrap();
        images.push(synthetic_style(&g, 0.2, 1, 2).unwrap());
        images.push(synthetic_style(&g, -0.15, 0, 3).unwrap());
        images.push(GlyphImage::new(g.into_pixels(), c, 1).unwrap());
    }
    (images, classes)
}

#[test]
fn recognizer_learns_rendered_digits() {
    let (images, classes) = digit_corpus();
    let recipe = RecognizerTraining { epochs: 20, batch_size: 8, base_width: 8, ..RecognizerTraining::default() };
    let trained = train_recognizer(&images, &classes, recipe, 11).unwrap();
    assert!(trained.train_accuracy >= 0.99, "train accuracy {}", trained.train_accuracy);
    let report = top1_accuracy(&trained.recognizer, &images, &classes).unwrap();
    assert!(report.mean >= 0.99);
    assert_eq!(report.per_style.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    save_recognizer(&trained, dir.path()).unwrap();
    let back = load_recognizer(dir.path()).unwrap();
    assert_eq!(back, trained);
    assert_eq!(top1_accuracy(&back.recognizer, &images, &classes).unwrap(), report);
}
