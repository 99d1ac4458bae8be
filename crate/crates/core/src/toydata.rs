//! Procedural images for smoke tests and desk-scale experiments: a smooth
//! two-color gradient with a few flat disks and rectangles on top.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{save_png, RgbImage};

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]
}

pub fn toy_image<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> RgbImage {
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let span = (height + width) as f64 / 2.0;
    let disks: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(0.1..0.35) * span,
                color(rng),
            )
        })
        .collect();
    let rect = {
        let h = rng.random_range(0.2..0.5) * height as f64;
        let w = rng.random_range(0.2..0.5) * width as f64;
        let top = rng.random_range(0.0..height as f64 - h);
        let left = rng.random_range(0.0..width as f64 - w);
        (top, left, h, w, color(rng))
    };
    RgbImage::from_fn(height, width, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = (((fy - height as f64 / 2.0) * sa + (fx - width as f64 / 2.0) * ca) / span + 0.5).clamp(0.0, 1.0);
        let mut px: [f64; 3] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t);
        let (top, left, h, w, rc) = rect;
        if fy >= top && fy < top + h && fx >= left && fx < left + w {
            px = rc;
        }
        for &(cy, cx, r, dc) in &disks {
            if (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r {
                px = dc;
            }
        }
        px.map(|v| v.round().clamp(0.0, 255.0) as u8)
    })
}

pub fn toy_images(n: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| toy_image(size, size, &mut rng)).collect()
}

/// Write `n` toy images as `toy_0000.png`, ... into `dir`.
pub fn write_toy_dataset(dir: impl AsRef<Path>, n: usize, size: usize, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, img) in toy_images(n, size, seed).iter().enumerate() {
        save_png(img, dir.join(format!("toy_{i:04}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_varied() {
        let a = toy_images(3, 32, 1);
        assert_eq!(a, toy_images(3, 32, 1));
        assert_ne!(a[0], a[1]);
        assert_ne!(a, toy_images(3, 32, 2));
        assert!(a.iter().all(|im| im.shape() == (32, 32)));
    }
}
