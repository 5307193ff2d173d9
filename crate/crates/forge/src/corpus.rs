//! Style corpora on disk and the datasets built from them.
//!
//! A style directory holds one image per character named `U+XXXX.png`.

use std::path::{Path, PathBuf};

use zigan_core::glyph::{
    codepoint_label, parse_codepoint, plan_split, pool_order, synthetic_style, GlyphImage, PairedSample, ShotSplit, SplitPlan, UnpairedPool,
};
use zigan_core::Error as CoreError;

use crate::error::{ForgeError, Result, ResultExt};
use crate::imageio::{load_glyph, save_png, to_rgb};
use crate::render::SourceFont;

/// Codepoints present in a style directory, ascending. Files with other
/// names are ignored.
pub fn list_corpus(style_dir: &Path) -> Result<Vec<char>> {
    let entries = std::fs::read_dir(style_dir).map_err(|e| ForgeError::io(style_dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ForgeError::io(style_dir, e))?;
        let name = entry.file_name();
        let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".png")) else { continue };
        if let Some(c) = parse_codepoint(stem) {
            out.push(c);
        }
    }
    out.sort_unstable();
    Ok(out)
}

pub fn glyph_path(style_dir: &Path, c: char) -> PathBuf {
    style_dir.join(format!("{}.png", codepoint_label(c)))
}

/// Maps `f` over `items` on up to `workers` threads; output order matches
/// input order whatever the scheduling.
pub fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<U>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Pairs every planned codepoint with its scan and a fresh source render.
pub fn materialize_split(plan: &SplitPlan, style_dir: &Path, font: &SourceFont, canvas: usize, workers: usize) -> Result<ShotSplit> {
    let pair = |&c: &char| -> Result<PairedSample> {
        let target = load_glyph(&glyph_path(style_dir, c), c, plan.style_id, canvas)?;
        let source = font.render(c, canvas)?;
        Ok(PairedSample::new(source, target)?)
    };
    let ctx = |c: &char| format!("style {} {}", plan.style_id, codepoint_label(*c));
    let with_ctx = |c: &char| pair(c).context(|| ctx(c));
    Ok(ShotSplit {
        style_id: plan.style_id,
        shots: plan.shots,
        seed: plan.seed,
        train: par_map(&plan.train, workers, with_ctx)?,
        test: par_map(&plan.test, workers, with_ctx)?,
    })
}

/// Seeded choice of `shots` training characters from `style_dir`, the rest
/// held out for testing.
pub fn build_shot_split(
    style_dir: &Path,
    font: &SourceFont,
    style_id: u32,
    shots: usize,
    seed: u64,
    canvas: usize,
    workers: usize,
) -> Result<ShotSplit> {
    let corpus = list_corpus(style_dir)?;
    let plan = plan_split(&corpus, style_id, shots, seed)?;
    materialize_split(&plan, style_dir, font, canvas, workers)
}

/// `count` distinct source glyphs, visiting `universe` in seeded order and
/// skipping characters the font cannot render.
pub fn build_unpaired_pool(
    font: &SourceFont,
    count: usize,
    seed: u64,
    universe: &[char],
    canvas: usize,
    workers: usize,
) -> Result<UnpairedPool> {
    let order: Vec<char> = pool_order(universe, seed).into_iter().filter(|&c| font.has_glyph(c)).collect();
    if order.len() < count {
        return Err(CoreError::InsufficientCorpus { needed: count, available: order.len() }.into());
    }
    let images = par_map(&order[..count], workers, |&c| font.render(c, canvas))?;
    Ok(UnpairedPool::new(images)?)
}

/// Text manifest of a pool: a `seed,count` line, then one codepoint per
/// line in pool order.
pub fn pool_manifest(pool: &UnpairedPool, seed: u64) -> String {
    let mut out = format!("{},{}\n", seed, pool.size());
    for c in pool.codepoints() {
        out.push_str(&codepoint_label(c));
        out.push('\n');
    }
    out
}

pub fn parse_pool_manifest(text: &str) -> Result<(u64, Vec<char>)> {
    let bad = |m: String| ForgeError::Data(format!("pool manifest: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let (seed, count) = header.split_once(',').ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let seed = seed.trim().parse().map_err(|_| bad(format!("bad seed {seed:?}")))?;
    let count: usize = count.trim().parse().map_err(|_| bad(format!("bad count {count:?}")))?;
    let cps: Vec<char> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_codepoint(l.trim()).ok_or_else(|| bad(format!("bad codepoint {l:?}"))))
        .collect::<Result<_>>()?;
    if cps.len() != count {
        return Err(bad(format!("{} entries for count {count}", cps.len())));
    }
    Ok((seed, cps))
}

/// Renders `chars` and writes a programmatically distorted copy of each as
/// a style corpus.
pub fn write_synthetic_corpus(
    font: &SourceFont,
    chars: &[char],
    out_dir: &Path,
    style_id: u32,
    shear: f32,
    grow: usize,
    canvas: usize,
) -> Result<Vec<GlyphImage>> {
    std::fs::create_dir_all(out_dir).map_err(|e| ForgeError::io(out_dir, e))?;
    let mut out = Vec::with_capacity(chars.len());
    for &c in chars {
        let g = synthetic_style(&font.render(c, canvas)?, shear, grow, style_id)?;
        save_png(&glyph_path(out_dir, c), &to_rgb(g.pixels()))?;
        out.push(g);
    }
    Ok(out)
}

/// Codepoints in the inclusive range `lo..=hi` that the font maps.
pub fn font_range(font: &SourceFont, lo: char, hi: char) -> Vec<char> {
    font.coverage().into_iter().filter(|c| (lo..=hi).contains(c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<u32> = (0..37).collect();
        for w in [1, 2, 3, 8, 100] {
            let out = par_map(&items, w, |&x| Ok(x * 2)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        let err = par_map(&items, 4, |&x| if x == 20 { Err(ForgeError::Data("x".into())) } else { Ok(x) });
        assert!(err.is_err());
    }

    #[test]
    fn pool_manifest_round_trip() {
        let text = "7,2\nU+4E00\nU+0041\n";
        assert_eq!(parse_pool_manifest(text).unwrap(), (7, vec!['\u{4E00}', 'A']));
        assert!(parse_pool_manifest("7,3\nU+4E00\n").is_err());
    }
}
