mod common;

use std::collections::BTreeSet;

use image::{GrayImage, Luma};
use zigan_core::glyph::{binarize, SOURCE_STYLE};
use zigan_core::Error as CoreError;
use zigan_forge::corpus::*;
use zigan_forge::imageio::load_glyph;
use zigan_forge::render::{render_source_glyph, SourceFont};
use zigan_forge::ForgeError;

#[test]
fn rendered_glyph_has_ink_and_background() {
    let g = render_source_glyph(common::font_path(), 'A', 256).unwrap();
    assert_eq!(g.size(), 256);
    assert_eq!(g.style_id, SOURCE_STYLE);
    let d = g.pixels().data();
    assert!(d.iter().any(|&v| v < 0.0));
    assert!(d.contains(&1.0));
    assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
    // channels are identical copies
    let plane = 256 * 256;
    assert_eq!(&d[..plane], &d[plane..2 * plane]);
}

#[test]
fn missing_glyph_and_bad_font() {
    let f = common::font();
    assert!(matches!(f.render('\u{E000}', 256), Err(ForgeError::MissingGlyph(_))));
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ttf");
    std::fs::write(&bogus, b"not a font").unwrap();
    assert!(matches!(SourceFont::open(&bogus), Err(ForgeError::BadFontFile(_))));
    assert!(f.render('A', 16).is_err());
}

#[test]
fn rendering_is_deterministic() {
    let f = common::font();
    let a = f.render('\u{00C6}', 64).unwrap();
    let b = f.render('\u{00C6}', 64).unwrap();
    assert_eq!(a.pixels().data(), b.pixels().data());
}

#[test]
fn glyph_is_centered_inside_the_margin() {
    let f = common::font();
    for (c, size) in [('W', 256), ('g', 128), ('|', 64), ('\u{2588}', 64)] {
        let m = binarize(&f.render(c, size).unwrap(), 0.0);
        let ink: Vec<(usize, usize)> = (0..size * size).filter(|&i| m.bits[i]).map(|i| (i / size, i % size)).collect();
        let (r0, r1) = (ink.iter().map(|p| p.0).min().unwrap(), ink.iter().map(|p| p.0).max().unwrap());
        let (c0, c1) = (ink.iter().map(|p| p.1).min().unwrap(), ink.iter().map(|p| p.1).max().unwrap());
        let margin = (size as f64 * 0.1).floor() as usize - 1;
        assert!(r0 >= margin && c0 >= margin && r1 < size - margin && c1 < size - margin, "{c:?} {r0}..{r1} {c0}..{c1}");
        let centre = (size as f64 - 1.0) / 2.0;
        assert!(((r0 + r1) as f64 / 2.0 - centre).abs() <= 1.5, "{c:?} rows {r0}..{r1}");
        assert!(((c0 + c1) as f64 / 2.0 - centre).abs() <= 1.5, "{c:?} cols {c0}..{c1}");
    }
}

#[test]
fn scans_are_padded_resized_and_replicated() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("U+0041.png");
    // 40x20 gray scan with a black left half
    GrayImage::from_fn(40, 20, |x, _| Luma([if x < 20 { 0 } else { 255 }])).save(&p).unwrap();
    let g = load_glyph(&p, 'A', 2, 40).unwrap();
    assert_eq!(g.size(), 40);
    assert_eq!(g.style_id, 2);
    // padding rows above and below stay white
    assert_eq!(g.intensity(0, 5), 1.0);
    assert_eq!(g.intensity(20, 5), -1.0);
    assert_eq!(g.intensity(20, 35), 1.0);
    let d = g.pixels().data();
    assert_eq!(&d[..1600], &d[1600..3200]);
}

#[test]
fn shot_split_partitions_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let style = common::synthetic_style_dir(dir.path(), 64);
    let f = common::font();
    let corpus = list_corpus(&style).unwrap();
    assert_eq!(corpus.len(), 12);
    for shots in [1, 5, 12] {
        let s = build_shot_split(&style, &f, 1, shots, 3, 64, 2).unwrap();
        assert_eq!(s.train.len(), shots);
        assert_eq!(s.corpus_size(), 12);
        let train: BTreeSet<char> = s.train.iter().map(|p| p.codepoint()).collect();
        let test: BTreeSet<char> = s.test.iter().map(|p| p.codepoint()).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.union(&test).copied().collect::<Vec<_>>(), corpus);
        for p in s.train.iter().chain(&s.test) {
            assert_eq!(p.source, f.render(p.codepoint(), 64).unwrap());
            assert_eq!(p.target.style_id, 1);
        }
    }
    let err = build_shot_split(&style, &f, 1, 13, 3, 64, 1).unwrap_err();
    assert!(matches!(err, ForgeError::Core(CoreError::InsufficientCorpus { needed: 13, available: 12 })));
}

#[test]
fn workers_do_not_change_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let style = common::synthetic_style_dir(dir.path(), 64);
    let f = common::font();
    let a = build_shot_split(&style, &f, 1, 4, 8, 64, 1).unwrap();
    let b = build_shot_split(&style, &f, 1, 4, 8, 64, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unpaired_pool_is_seeded() {
    let f = common::font();
    let universe: Vec<char> = ('a'..='z').chain(['\u{E000}', '\u{E001}']).collect();
    let a = build_unpaired_pool(&f, 10, 4, &universe, 64, 1).unwrap();
    let b = build_unpaired_pool(&f, 10, 4, &universe, 64, 2).unwrap();
    assert_eq!(a.codepoints(), b.codepoints());
    assert_eq!(a, b);
    let cps: BTreeSet<char> = a.codepoints().into_iter().collect();
    assert_eq!(cps.len(), 10);
    assert!(cps.iter().all(|c| c.is_ascii_lowercase()));
    let c = build_unpaired_pool(&f, 10, 5, &universe, 64, 1).unwrap();
    assert_ne!(a.codepoints(), c.codepoints());
    assert_eq!(build_unpaired_pool(&f, 0, 4, &universe, 64, 1).unwrap().size(), 0);
    // the two private-use entries cannot be rendered
    let err = build_unpaired_pool(&f, 27, 4, &universe, 64, 1).unwrap_err();
    assert!(matches!(err, ForgeError::Core(CoreError::InsufficientCorpus { needed: 27, available: 26 })));
    let (seed, listed) = parse_pool_manifest(&pool_manifest(&a, 4)).unwrap();
    assert_eq!((seed, listed), (4, a.codepoints()));
}

#[test]
fn synthetic_corpus_round_trips_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let f = common::font();
    let written = write_synthetic_corpus(&f, &['Q', 'R'], dir.path(), 3, 0.2, 1, 64).unwrap();
    for g in written {
        let back = load_glyph(&glyph_path(dir.path(), g.codepoint), g.codepoint, 3, 64).unwrap();
        let max = g.pixels().data().iter().zip(back.pixels().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max <= 1.0 / 127.5 + 1e-6, "quantization error {max}");
    }
}
