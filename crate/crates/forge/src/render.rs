//! Standard-font glyph rasterization.

use std::path::{Path, PathBuf};

use ab_glyph::{Font, FontVec, PxScale, ScaleFont};
use zigan_core::glyph::{codepoint_label, normalize_image, GlyphImage, SOURCE_STYLE};

use crate::error::{ForgeError, Result};

/// Fraction of the canvas left blank on each side.
pub const MARGIN: f32 = 0.1;
pub const MIN_CANVAS: usize = 32;

/// A parsed TrueType/OpenType font.
pub struct SourceFont {
    font: FontVec,
    path: PathBuf,
}

impl std::fmt::Debug for SourceFont {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SourceFont").field("path", &self.path).finish()
    }
}

impl SourceFont {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| ForgeError::io(path, e))?;
        let font = FontVec::try_from_vec(bytes).map_err(|_| ForgeError::BadFontFile(path.to_path_buf()))?;
        Ok(SourceFont { font, path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn has_glyph(&self, c: char) -> bool {
        self.font.glyph_id(c).0 != 0
    }

    /// Every mapped codepoint, ascending.
    pub fn coverage(&self) -> Vec<char> {
        let mut v: Vec<char> = self.font.codepoint_ids().map(|(_, c)| c).filter(|&c| self.has_glyph(c)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Black-on-white glyph centered on a `canvas x canvas` image.
    ///
    /// The em square is scaled to the area inside the margins, so relative
    /// glyph sizes survive; a glyph whose ink box would overflow that area is
    /// shrunk to fit. Glyphs without an outline (spaces) render blank.
    pub fn render(&self, c: char, canvas: usize) -> Result<GlyphImage> {
        if canvas < MIN_CANVAS {
            return Err(ForgeError::Config(format!("canvas {canvas} is below {MIN_CANVAS}")));
        }
        if !self.has_glyph(c) {
            return Err(ForgeError::MissingGlyph(codepoint_label(c)));
        }
        let inner = canvas as f32 * (1.0 - 2.0 * MARGIN);
        let mut coverage = vec![0.0f32; canvas * canvas];
        if let Some(outline) = self.outline(c, inner) {
            let b = outline.px_bounds();
            let fit = (inner / b.width().max(1.0)).min(inner / b.height().max(1.0)).min(1.0);
            let outline = if fit < 1.0 { self.outline(c, inner * fit).unwrap_or(outline) } else { outline };
            let b = outline.px_bounds();
            let x0 = ((canvas as f32 - b.width()) / 2.0).round() as i64;
            let y0 = ((canvas as f32 - b.height()) / 2.0).round() as i64;
            outline.draw(|x, y, v| {
                let (px, py) = (x0 + x as i64, y0 + y as i64);
                if (0..canvas as i64).contains(&px) && (0..canvas as i64).contains(&py) {
                    let cell = &mut coverage[py as usize * canvas + px as usize];
                    *cell = (*cell + v).min(1.0);
                }
            });
        }
        let raw: Vec<i32> = coverage.iter().map(|&v| (255.0 * (1.0 - v)).round() as i32).collect();
        let pixels = normalize_image(&raw, canvas, canvas, 1)?;
        Ok(GlyphImage::new(pixels, c, SOURCE_STYLE)?)
    }

    fn outline(&self, c: char, px: f32) -> Option<ab_glyph::OutlinedGlyph> {
        let scaled = self.font.as_scaled(PxScale::from(px));
        let glyph = scaled.scaled_glyph(c);
        self.font.outline_glyph(glyph)
    }
}

/// Opens `font_path` and renders one glyph.
pub fn render_source_glyph(font_path: impl AsRef<Path>, c: char, canvas: usize) -> Result<GlyphImage> {
    SourceFont::open(font_path)?.render(c, canvas)
}
