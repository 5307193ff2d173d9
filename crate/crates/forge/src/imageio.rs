//! PNG reading and writing, image grids and atomic file output.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{imageops, DynamicImage, GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use zigan_core::glyph::{denormalize_image, normalize_image, GlyphImage};
use zigan_core::tensor::{Shape, Tensor};

use crate::error::{ForgeError, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = parent_dir(path);
    std::fs::create_dir_all(&dir).map_err(|e| ForgeError::io(&dir, e))?;
    let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(&dir).map_err(|e| ForgeError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| ForgeError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| ForgeError::io(path, e))?;
    tmp.persist(path).map_err(|e| ForgeError::io(path, e.error))?;
    Ok(())
}

/// Builds a directory next to `target` with `fill`, then swaps it into place.
/// On any failure the previous content of `target` is left untouched.
pub fn write_dir_atomic(target: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = parent_dir(target);
    std::fs::create_dir_all(&parent).map_err(|e| ForgeError::io(&parent, e))?;
    let tmp = tempfile::Builder::new().prefix(".tmp-").tempdir_in(&parent).map_err(|e| ForgeError::io(&parent, e))?;
    fill(tmp.path())?;
    let staged = tmp.keep();
    if target.exists() {
        let old = parent.join(format!(".old-{}", std::process::id()));
        std::fs::rename(target, &old).map_err(|e| ForgeError::io(target, e))?;
        std::fs::rename(&staged, target).map_err(|e| ForgeError::io(target, e))?;
        std::fs::remove_dir_all(&old).map_err(|e| ForgeError::io(&old, e))?;
    } else {
        std::fs::rename(&staged, target).map_err(|e| ForgeError::io(target, e))?;
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Reads a scan, pads it to a square on white and resizes it to `canvas`.
/// Grayscale files keep one channel until normalization replicates it.
pub fn load_glyph(path: &Path, codepoint: char, style_id: u32, canvas: usize) -> Result<GlyphImage> {
    let img = image::open(path).map_err(|e| ForgeError::Image { path: path.to_path_buf(), source: e })?;
    let color = img.color().has_color();
    let pixels = if color {
        let rgb = fit_square(&img.to_rgb8(), Rgb([255; 3]), canvas);
        normalize_image(&rgb.as_raw().iter().map(|&b| b as i32).collect::<Vec<_>>(), canvas, canvas, 3)?
    } else {
        let gray = fit_square(&img.to_luma8(), Luma([255]), canvas);
        normalize_image(&gray.as_raw().iter().map(|&b| b as i32).collect::<Vec<_>>(), canvas, canvas, 1)?
    };
    Ok(GlyphImage::new(pixels, codepoint, style_id)?)
}

fn fit_square<P: image::Pixel<Subpixel = u8> + 'static>(
    img: &image::ImageBuffer<P, Vec<u8>>,
    background: P,
    canvas: usize,
) -> image::ImageBuffer<P, Vec<u8>> {
    let (w, h) = img.dimensions();
    let side = w.max(h);
    let mut square = image::ImageBuffer::from_pixel(side, side, background);
    imageops::overlay(&mut square, img, ((side - w) / 2) as i64, ((side - h) / 2) as i64);
    if side as usize == canvas {
        square
    } else {
        imageops::resize(&square, canvas as u32, canvas as u32, imageops::FilterType::Triangle)
    }
}

/// 8-bit RGB copy of a `1 x 3 x S x S` tensor.
pub fn to_rgb(pixels: &Tensor) -> RgbImage {
    let s = pixels.shape();
    RgbImage::from_raw(s.w as u32, s.h as u32, denormalize_image(pixels)).expect("three-channel item")
}

pub fn from_rgb(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let raw: Vec<i32> = img.as_raw().iter().map(|&b| b as i32).collect();
    Ok(normalize_image(&raw, h as usize, w as usize, 3)?)
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img.clone())
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ForgeError::Image { path: PathBuf::from("<memory>"), source: e })?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &png_bytes(img)?)
}

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    save_png(path, &DynamicImage::ImageLuma8(img.clone()).to_rgb8())
}

/// Cells laid out row-major, each `cell x cell`; missing cells stay white.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cell: usize,
    pub image: RgbImage,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, cell: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || cell == 0 {
            return Err(ForgeError::Data(format!("empty grid {rows}x{cols} of {cell}px cells")));
        }
        let image = RgbImage::from_pixel((cols * cell) as u32, (rows * cell) as u32, Rgb([255; 3]));
        Ok(Grid { rows, cols, cell, image })
    }

    pub fn put(&mut self, row: usize, col: usize, tile: &RgbImage) -> Result<()> {
        if row >= self.rows || col >= self.cols || tile.dimensions() != (self.cell as u32, self.cell as u32) {
            return Err(ForgeError::Data(format!("tile {row},{col} does not fit the grid")));
        }
        imageops::replace(&mut self.image, tile, (col * self.cell) as i64, (row * self.cell) as i64);
        Ok(())
    }
}

/// Heat values in `[0, 1]` as a black-red-yellow-white ramp.
pub fn heat_to_rgb(values: &[f32], size: usize) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let v = values[y as usize * size + x as usize].clamp(0.0, 1.0) * 3.0;
        let ch = |t: f32| (t.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([ch(v), ch(v - 1.0), ch(v - 2.0)])
    })
}

/// A white `1 x 3 x S x S` canvas.
pub fn blank(size: usize) -> Tensor {
    Tensor::full(Shape::new(1, 3, size, size), 1.0)
}
