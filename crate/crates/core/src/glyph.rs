//! Glyph images and dataset partitions.
//!
//! Pixels are stored as a `1 x 3 x S x S` tensor in `[-1, 1]`, white
//! background at `+1` and black ink at `-1`. Style 0 is the standard source
//! font; target calligraphy styles are numbered from 1.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_CANVAS: usize = 256;
pub const DEFAULT_INK_THRESHOLD: f32 = 0.0;
pub const SOURCE_STYLE: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImage {
    pixels: Tensor,
    pub codepoint: char,
    pub style_id: u32,
}

impl GlyphImage {
    /// Wraps a `1 x 3 x S x S` tensor whose values all lie in `[-1, 1]`.
    pub fn new(pixels: Tensor, codepoint: char, style_id: u32) -> Result<Self> {
        let s = pixels.shape();
        if s.n != 1 || s.c != 3 || s.h != s.w || s.h == 0 {
            return Err(Error::ShapeMismatch(format!("glyph pixels must be 1x3xSxS, got {s}")));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!("glyph pixel {v} outside [-1, 1]")));
        }
        Ok(GlyphImage { pixels, codepoint, style_id })
    }

    pub fn size(&self) -> usize {
        self.pixels.shape().h
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    /// Channel mean at `(row, col)`.
    pub fn intensity(&self, row: usize, col: usize) -> f32 {
        let s = self.size();
        let d = self.pixels.data();
        let i = row * s + col;
        (d[i] + d[s * s + i] + d[2 * s * s + i]) / 3.0
    }
}

/// Linear map `v / 127.5 - 1` of an interleaved `H x W x C` integer image
/// (`C` = 1 or 3) into a three-channel planar tensor.
pub fn normalize_image(raw: &[i32], height: usize, width: usize, channels: usize) -> Result<Tensor> {
    if channels != 1 && channels != 3 {
        return Err(Error::ShapeMismatch(format!("{channels} channels (expected 1 or 3)")));
    }
    if raw.len() != height * width * channels {
        return Err(Error::ShapeMismatch(format!("{} values for {height}x{width}x{channels}", raw.len())));
    }
    if let Some(&v) = raw.iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::BadRange { value: v as f64 });
    }
    let plane = height * width;
    let mut out = Tensor::zeros(Shape::new(1, 3, height, width));
    let d = out.data_mut();
    for p in 0..plane {
        for c in 0..3 {
            let src = if channels == 1 { raw[p] } else { raw[p * 3 + c] };
            d[c * plane + p] = (src as f64 / 127.5 - 1.0) as f32;
        }
    }
    Ok(out)
}

/// Inverse of [`normalize_image`] for a single item, as interleaved RGB bytes.
pub fn denormalize_image(pixels: &Tensor) -> Vec<u8> {
    let s = pixels.shape();
    let plane = s.plane();
    let d = pixels.data();
    let mut out = Vec::with_capacity(plane * s.c);
    for p in 0..plane {
        for c in 0..s.c {
            out.push(to_byte(d[c * plane + p]));
        }
    }
    out
}

pub fn to_byte(v: f32) -> u8 {
    libm::round((v as f64 + 1.0) * 127.5).clamp(0.0, 255.0) as u8
}

/// Boolean ink mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub size: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Ink where the channel mean falls below `threshold`.
pub fn binarize(img: &GlyphImage, threshold: f32) -> Mask {
    let s = img.size();
    let bits = (0..s * s).map(|i| img.intensity(i / s, i % s) < threshold).collect();
    Mask { size: s, bits }
}

/// Paired standard-font source and target-style glyph of one character.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub source: GlyphImage,
    pub target: GlyphImage,
}

impl PairedSample {
    pub fn new(source: GlyphImage, target: GlyphImage) -> Result<Self> {
        if source.codepoint != target.codepoint {
            return Err(Error::InvalidConfig(format!(
                "pair codepoints differ: {} vs {}",
                codepoint_label(source.codepoint),
                codepoint_label(target.codepoint)
            )));
        }
        if source.style_id != SOURCE_STYLE || target.style_id == SOURCE_STYLE {
            return Err(Error::InvalidConfig("pair must be (source style 0, target style > 0)".into()));
        }
        if source.size() != target.size() {
            return Err(Error::ShapeMismatch(format!("pair sizes {} vs {}", source.size(), target.size())));
        }
        Ok(PairedSample { source, target })
    }

    pub fn codepoint(&self) -> char {
        self.source.codepoint
    }
}

/// Which codepoints of a style corpus go to training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub style_id: u32,
    pub shots: usize,
    pub seed: u64,
    /// Sorted ascending.
    pub train: Vec<char>,
    /// Sorted ascending.
    pub test: Vec<char>,
}

/// Seeded uniform choice of `shots` training codepoints; the rest is test.
/// The input order does not matter.
pub fn plan_split(corpus: &[char], style_id: u32, shots: usize, seed: u64) -> Result<SplitPlan> {
    if shots == 0 {
        return Err(Error::InvalidConfig("shots must be positive".into()));
    }
    let mut sorted: Vec<char> = corpus.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < shots {
        return Err(Error::InsufficientCorpus { needed: shots, available: sorted.len() });
    }
    let mut r = rng::derive(seed, Domain::ShotSplit, style_id as u64);
    let chosen = rand::seq::index::sample(&mut r, sorted.len(), shots);
    let mut is_train = alloc::vec![false; sorted.len()];
    for i in chosen.iter() {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(shots), Vec::with_capacity(sorted.len() - shots));
    for (cp, t) in sorted.into_iter().zip(is_train) {
        if t {
            train.push(cp);
        } else {
            test.push(cp);
        }
    }
    Ok(SplitPlan { style_id, shots, seed, train, test })
}

impl SplitPlan {
    /// Text manifest: a `style_id,shots,seed` line, then `U+XXXX,train|test`
    /// per sample sorted by codepoint.
    pub fn manifest(&self) -> String {
        let mut lines: Vec<(char, &str)> = self.train.iter().map(|&c| (c, "train")).chain(self.test.iter().map(|&c| (c, "test"))).collect();
        lines.sort_unstable();
        let mut out = format!("{},{},{}\n", self.style_id, self.shots, self.seed);
        for (c, kind) in lines {
            out.push_str(&codepoint_label(c));
            out.push(',');
            out.push_str(kind);
            out.push('\n');
        }
        out
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidConfig(format!("split manifest: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!("bad header {header:?}")));
        }
        let style_id = fields[0].parse().map_err(|_| bad(format!("bad style id {:?}", fields[0])))?;
        let shots = fields[1].parse().map_err(|_| bad(format!("bad shots {:?}", fields[1])))?;
        let seed = fields[2].parse().map_err(|_| bad(format!("bad seed {:?}", fields[2])))?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (cp, kind) = line.split_once(',').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            let cp = parse_codepoint(cp.trim()).ok_or_else(|| bad(format!("bad codepoint {cp:?}")))?;
            match kind.trim() {
                "train" => train.push(cp),
                "test" => test.push(cp),
                other => return Err(bad(format!("unknown split {other:?}"))),
            }
        }
        if train.len() != shots {
            return Err(bad(format!("{} train lines for {shots} shots", train.len())));
        }
        Ok(SplitPlan { style_id, shots, seed, train, test })
    }
}

/// `U+4E00` style label (at least four uppercase hex digits).
pub fn codepoint_label(c: char) -> String {
    format!("U+{:04X}", c as u32)
}

pub fn parse_codepoint(label: &str) -> Option<char> {
    let hex = label.strip_prefix("U+").or_else(|| label.strip_prefix("u+"))?;
    if hex.is_empty() || hex.len() > 6 {
        return None;
    }
    u32::from_str_radix(hex, 16).ok().and_then(char::from_u32)
}

/// Per-style few-shot partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSplit {
    pub style_id: u32,
    pub shots: usize,
    pub seed: u64,
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl ShotSplit {
    pub fn plan(&self) -> SplitPlan {
        SplitPlan {
            style_id: self.style_id,
            shots: self.shots,
            seed: self.seed,
            train: self.train.iter().map(PairedSample::codepoint).collect(),
            test: self.test.iter().map(PairedSample::codepoint).collect(),
        }
    }

    pub fn corpus_size(&self) -> usize {
        self.train.len() + self.test.len()
    }
}

/// Unpaired standard-font glyphs used by the style objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnpairedPool {
    pub images: Vec<GlyphImage>,
}

impl UnpairedPool {
    pub fn new(images: Vec<GlyphImage>) -> Result<Self> {
        if images.iter().any(|g| g.style_id != SOURCE_STYLE) {
            return Err(Error::InvalidConfig("unpaired pool must hold source-style glyphs only".into()));
        }
        Ok(UnpairedPool { images })
    }

    pub fn size(&self) -> usize {
        self.images.len()
    }

    pub fn codepoints(&self) -> Vec<char> {
        self.images.iter().map(|g| g.codepoint).collect()
    }
}

/// Seeded visiting order of a codepoint universe. The pool builder renders
/// codepoints in this order until it has collected enough glyphs.
pub fn pool_order(universe: &[char], seed: u64) -> Vec<char> {
    let mut order: Vec<char> = universe.to_vec();
    order.sort_unstable();
    order.dedup();
    let mut r = rng::derive(seed, Domain::UnpairedPool, 0);
    order.shuffle(&mut r);
    order
}

/// Programmatic "calligraphy" used by the synthetic experiments: a horizontal
/// shear about the canvas centre followed by ink dilation of `grow` pixels.
pub fn synthetic_style(src: &GlyphImage, shear: f32, grow: usize, style_id: u32) -> Result<GlyphImage> {
    let s = src.size();
    let centre = (s as f32 - 1.0) / 2.0;
    let mut gray = alloc::vec![1.0f32; s * s];
    for r in 0..s {
        let shift = shear * (centre - r as f32);
        for c in 0..s {
            let x = c as f32 - shift;
            let x0 = libm::floorf(x);
            let t = x - x0;
            let sample = |xi: f32| -> f32 {
                if xi < 0.0 || xi >= s as f32 {
                    1.0
                } else {
                    src.intensity(r, xi as usize)
                }
            };
            gray[r * s + c] = (1.0 - t) * sample(x0) + t * sample(x0 + 1.0);
        }
    }
    for _ in 0..grow {
        let prev = gray.clone();
        for r in 0..s {
            for c in 0..s {
                let mut m = prev[r * s + c];
                for (dr, dc) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                    let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < s && (cc as usize) < s {
                        m = m.min(prev[rr as usize * s + cc as usize]);
                    }
                }
                gray[r * s + c] = m;
            }
        }
    }
    let mut data = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        data.extend(gray.iter().map(|v| v.clamp(-1.0, 1.0)));
    }
    GlyphImage::new(Tensor::from_vec(Shape::new(1, 3, s, s), data)?, src.codepoint, style_id)
}
