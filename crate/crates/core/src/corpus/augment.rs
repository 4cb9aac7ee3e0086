//! Training-time augmentation: a random square sub-crop covering 40% to
//! 100% of the image area, resized back to the input size, followed by a
//! horizontal flip with probability one half.

use image::{Rgb, RgbImage};
use rand::Rng;

pub const MIN_AREA: f64 = 0.4;
pub const MAX_AREA: f64 = 1.0;

/// The random draws behind one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Sub-crop area as a fraction of the image area.
    pub area: f64,
    /// Sub-crop side in pixels, derived from `area`.
    pub side: u32,
    pub x0: u32,
    pub y0: u32,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity(size: u32) -> Self {
        Self {
            area: 1.0,
            side: size,
            x0: 0,
            y0: 0,
            flip: false,
        }
    }
}

pub fn sample_augment<R: Rng + ?Sized>(rng: &mut R, size: u32) -> AugmentParams {
    let area = rng.random_range(MIN_AREA..=MAX_AREA);
    let side = ((area.sqrt() * size as f64).round() as u32).clamp(1, size);
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    let flip = rng.random_bool(0.5);
    AugmentParams {
        area,
        side,
        x0,
        y0,
        flip,
    }
}

/// Crops, resizes bilinearly to the original size, then optionally mirrors.
/// Samples never leave the sub-crop rectangle.
pub fn apply_augment(image: &RgbImage, p: &AugmentParams) -> RgbImage {
    let n = image.width();
    assert_eq!(n, image.height(), "augmentation expects a square image");
    let scale = p.side as f64 / n as f64;
    let lo_x = p.x0 as f64;
    let lo_y = p.y0 as f64;
    let hi_x = (p.x0 + p.side - 1) as f64;
    let hi_y = (p.y0 + p.side - 1) as f64;
    RgbImage::from_fn(n, n, |i, j| {
        let i = if p.flip { n - 1 - i } else { i };
        let sx = (lo_x + (i as f64 + 0.5) * scale - 0.5).clamp(lo_x, hi_x);
        let sy = (lo_y + (j as f64 + 0.5) * scale - 0.5).clamp(lo_y, hi_y);
        let x0 = sx.floor();
        let y0 = sy.floor();
        let (tx, ty) = (sx - x0, sy - y0);
        let x0 = x0 as u32;
        let y0 = y0 as u32;
        let x1 = (x0 + 1).min(hi_x as u32);
        let y1 = (y0 + 1).min(hi_y as u32);
        let a = image.get_pixel(x0, y0).0;
        let b = image.get_pixel(x1, y0).0;
        let c = image.get_pixel(x0, y1).0;
        let d = image.get_pixel(x1, y1).0;
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
            let bot = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
            out[ch] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

pub fn augment<R: Rng + ?Sized>(image: &RgbImage, rng: &mut R) -> RgbImage {
    let p = sample_augment(rng, image.width());
    apply_augment(image, &p)
}
