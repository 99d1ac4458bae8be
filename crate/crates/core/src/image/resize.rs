//! Separable bicubic resampling with an antialiasing prefilter when shrinking,
//! following the conventional imresize-style degradation used to make SR
//! training and benchmark inputs.

use super::RgbImage;
use crate::error::{Error, Result};

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source indices and normalized weights of one output sample.
struct Contribution {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

fn contributions(in_len: usize, out_len: usize, antialias: bool) -> Vec<Contribution> {
    let scale = out_len as f64 / in_len as f64;
    let kscale = if scale < 1.0 && antialias { scale } else { 1.0 };
    let kernel_width = 4.0 / kscale;
    let taps = kernel_width.ceil() as usize + 2;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let left = (center - kernel_width / 2.0).floor() as isize;
            let mut indices = Vec::with_capacity(taps);
            let mut weights = Vec::with_capacity(taps);
            for p in 0..taps as isize {
                let idx = left + p;
                let w = kscale * cubic_kernel(kscale * (center - idx as f64));
                if w != 0.0 {
                    indices.push(symmetric(idx, in_len));
                    weights.push(w);
                }
            }
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            Contribution { indices, weights }
        })
        .collect()
}

/// Half-sample symmetric extension: `-1 -> 0`, `n -> n - 1`.
fn symmetric(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let r = i.rem_euclid(period);
    (if r < n { r } else { period - 1 - r }) as usize
}

/// Resample to `out_h x out_w`, returning three unrounded channel planes.
pub fn bicubic_resize_planes(img: &RgbImage, out_h: usize, out_w: usize, antialias: bool) -> [Vec<f64>; 3] {
    let (h, w) = img.shape();
    let rows = contributions(h, out_h, antialias);
    let cols = contributions(w, out_w, antialias);
    std::array::from_fn(|c| {
        // vertical pass: out_h x w
        let mut tmp = vec![0.0; out_h * w];
        for (oy, con) in rows.iter().enumerate() {
            for x in 0..w {
                let mut acc = 0.0;
                for (&iy, &wt) in con.indices.iter().zip(&con.weights) {
                    acc += wt * img.get(iy, x)[c] as f64;
                }
                tmp[oy * w + x] = acc;
            }
        }
        // horizontal pass: out_h x out_w
        let mut out = vec![0.0; out_h * out_w];
        for oy in 0..out_h {
            for (ox, con) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for (&ix, &wt) in con.indices.iter().zip(&con.weights) {
                    acc += wt * tmp[oy * w + ix];
                }
                out[oy * out_w + ox] = acc;
            }
        }
        out
    })
}

fn to_image(planes: &[Vec<f64>; 3], h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(h, w, |y, x| {
        std::array::from_fn(|c| planes[c][y * w + x].round().clamp(0.0, 255.0) as u8)
    })
}

/// Shrink by an integer factor. Both sides must be divisible by `factor`;
/// use [`RgbImage::center_crop_to_multiple`] first otherwise.
pub fn bicubic_downscale(img: &RgbImage, factor: usize) -> Result<RgbImage> {
    if factor < 2 {
        return Err(Error::Argument(format!("downscale factor {factor} < 2")));
    }
    let (h, w) = img.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Argument(format!(
            "{h}x{w} image is not divisible by {factor}; center-crop first"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    Ok(to_image(&bicubic_resize_planes(img, oh, ow, true), oh, ow))
}

/// Enlarge by an integer factor (the bicubic baseline).
pub fn bicubic_upscale(img: &RgbImage, factor: usize) -> Result<RgbImage> {
    if factor < 1 {
        return Err(Error::Argument("upscale factor must be positive".into()));
    }
    let (oh, ow) = (img.height() * factor, img.width() * factor);
    Ok(to_image(&bicubic_resize_planes(img, oh, ow, false), oh, ow))
}
