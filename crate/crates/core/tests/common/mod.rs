#![allow(dead_code)]

use zigan_core::glyph::{synthetic_style, GlyphImage, PairedSample, ShotSplit, UnpairedPool};
use zigan_core::tensor::{Shape, Tensor};

/// A few axis-aligned strokes placed by a hash of `seed`.
pub fn stroke_glyph(seed: u32, size: usize) -> GlyphImage {
    let mut gray = vec![1.0f32; size * size];
    let mut h = seed.wrapping_mul(2_654_435_761).max(1);
    let mut next = || {
        h ^= h << 13;
        h ^= h >> 17;
        h ^= h << 5;
        h as usize
    };
    let margin = size / 6;
    for _ in 0..3 {
        let horizontal = next() % 2 == 0;
        let pos = margin + next() % (size - 2 * margin);
        let from = margin + next() % (size / 4);
        let to = size - margin - next() % (size / 4);
        for t in from..to {
            for w in 0..(size / 32).max(1) {
                let (r, c) = if horizontal { (pos + w, t) } else { (t, pos + w) };
                gray[r.min(size - 1) * size + c.min(size - 1)] = -1.0;
            }
        }
    }
    let data: Vec<f32> = (0..3).flat_map(|_| gray.iter().copied()).collect();
    let cp = char::from_u32(0x4E00 + seed).unwrap();
    GlyphImage::new(Tensor::from_vec(Shape::new(1, 3, size, size), data).unwrap(), cp, 0).unwrap()
}

pub fn pair(seed: u32, size: usize) -> PairedSample {
    let src = stroke_glyph(seed, size);
    let target = synthetic_style(&src, 0.15, 1, 1).unwrap();
    PairedSample::new(src, target).unwrap()
}

pub fn split(train: usize, test: usize, size: usize) -> ShotSplit {
    ShotSplit {
        style_id: 1,
        shots: train,
        seed: 0,
        train: (0..train as u32).map(|i| pair(i, size)).collect(),
        test: (1000..1000 + test as u32).map(|i| pair(i, size)).collect(),
    }
}

pub fn pool(n: usize, size: usize) -> UnpairedPool {
    UnpairedPool::new((5000..5000 + n as u32).map(|i| stroke_glyph(i, size)).collect()).unwrap()
}
