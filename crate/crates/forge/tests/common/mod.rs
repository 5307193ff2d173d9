#![allow(dead_code)]

use std::path::{Path, PathBuf};

use zigan_forge::config::RunConfig;
use zigan_forge::corpus::write_synthetic_corpus;
use zigan_forge::render::SourceFont;

pub fn font_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/DejaVuSans.ttf")
}

pub fn font() -> SourceFont {
    SourceFont::open(font_path()).unwrap()
}

/// Twelve capital letters written as a sheared, thickened style corpus.
pub fn synthetic_style_dir(root: &Path, size: usize) -> PathBuf {
    let dir = root.join("style1");
    let chars: Vec<char> = ('A'..='L').collect();
    write_synthetic_corpus(&font(), &chars, &dir, 1, 0.15, 1, size).unwrap();
    dir
}

/// A run small enough for tests: 64 px, width / 16, 4 shots, 8 pool glyphs.
pub fn tiny_config(root: &Path) -> RunConfig {
    let style = synthetic_style_dir(root, 64);
    let text = format!(
        "font = {}\nstyle_dir = {}\nwork_dir = {}\nresolution = 64\nwidth_divisor = 16\nbatch_size = 2\n\
         shots = 4\nepochs = 2\ncheckpoint_every = 1\nlr0 = 0.001\npool_size = 8\npool_range = U+0061-U+007A\n\
         seed = 5\nrecognizer_epochs = 2\nrecognizer_width = 4\nrecognizer_batch = 8\n",
        font_path().display(),
        style.display(),
        root.join("work").display()
    );
    RunConfig::parse(&text).unwrap()
}

pub fn write_config(root: &Path, cfg: &RunConfig) -> PathBuf {
    let p = root.join("run.conf");
    std::fs::write(&p, cfg.to_text()).unwrap();
    p
}
