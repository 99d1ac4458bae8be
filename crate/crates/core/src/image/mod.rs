//! Raster images and everything between PNG files and model tensors.

mod patches;
mod resize;

pub use patches::{extract_patches, patch_origins, stitch_patches, PatchGrid};
pub use resize::{bicubic_downscale, bicubic_resize_planes, bicubic_upscale, cubic_kernel};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.height, self.width)
    }
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} samples for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, pixels).expect("non-empty")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, pixels).expect("non-empty")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Argument(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x| self.get(top + y, left + x)))
    }

    /// Center crop to the largest size whose sides are multiples of `factor`.
    pub fn center_crop_to_multiple(&self, factor: usize) -> Result<(Self, CropInfo)> {
        if factor == 0 {
            return Err(Error::Argument("crop factor must be positive".into()));
        }
        let h = self.height / factor * factor;
        let w = self.width / factor * factor;
        if h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "{}x{} image is smaller than factor {factor}",
                self.height, self.width
            )));
        }
        let top = (self.height - h) / 2;
        let left = (self.width - w) / 2;
        let info = CropInfo {
            top,
            left,
            height: h,
            width: w,
            original: (self.height, self.width),
        };
        Ok((self.crop(top, left, h, w)?, info))
    }

    /// Extend to at least `min_height x min_width` by mirroring at the bottom
    /// and right edges (the edge sample itself is not repeated).
    pub fn reflect_pad(&self, min_height: usize, min_width: usize) -> Self {
        let h = self.height.max(min_height);
        let w = self.width.max(min_width);
        Self::from_fn(h, w, |y, x| self.get(mirror(y, self.height), mirror(x, self.width)))
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Geometry of a center crop, kept for evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropInfo {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub original: (usize, usize),
}

impl CropInfo {
    pub fn is_identity(&self) -> bool {
        (self.height, self.width) == self.original
    }
}

/// Decode an image file; any alpha channel is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ::image::ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| format_err(e.to_string()))?;
    let decoded = reader.decode().map_err(|e| format_err(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::new(h as usize, w as usize, rgb.into_raw())
}

/// Write an 8-bit RGB PNG.
pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = ::image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|e| match e {
            ::image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

/// BT.601 studio-swing luma plane, samples nominally in `[16, 235]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaPlane {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<f64>,
}

impl LumaPlane {
    pub fn new(height: usize, width: usize, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != height * width {
            return Err(Error::Shape(format!(
                "{} samples for a {height}x{width} plane",
                samples.len()
            )));
        }
        Ok(Self {
            height,
            width,
            samples,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    /// Drop `shave` samples from every border.
    pub fn shave(&self, shave: usize) -> Result<Self> {
        if 2 * shave >= self.height || 2 * shave >= self.width {
            return Err(Error::Argument(format!(
                "shave {shave} leaves nothing of a {}x{} plane",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height - 2 * shave, self.width - 2 * shave);
        let mut samples = Vec::with_capacity(h * w);
        for y in 0..h {
            let row = (y + shave) * self.width + shave;
            samples.extend_from_slice(&self.samples[row..row + w]);
        }
        Self::new(h, w, samples)
    }
}

pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    16.0 + (65.481 * r as f64 + 128.553 * g as f64 + 24.966 * b as f64) / 255.0
}

pub fn rgb_to_luma(img: &RgbImage) -> LumaPlane {
    let samples = img
        .pixels
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect();
    LumaPlane {
        height: img.height,
        width: img.width,
        samples,
    }
}

/// Map one 8-bit sample to `[-1, 1]`.
pub fn normalize_sample<T: Scalar>(v: u8) -> T {
    T::lit(v as f64) / T::lit(127.5) - T::one()
}

/// Inverse of [`normalize_sample`], rounding half away from zero and clipping.
pub fn denormalize_sample<T: Scalar>(v: T) -> u8 {
    let x = ((v.as_f64() + 1.0) * 127.5).round();
    x.clamp(0.0, 255.0) as u8
}

/// `[1, 3, H, W]` tensor with values in `[-1, 1]`.
pub fn normalize<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let hw = img.height * img.width;
    let mut data = vec![T::zero(); 3 * hw];
    for (i, p) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = normalize_sample(p[c]);
        }
    }
    Tensor::new(vec![1, 3, img.height, img.width], data)
}

pub fn normalize_batch<T: Scalar>(imgs: &[RgbImage]) -> Tensor<T> {
    let items: Vec<Tensor<T>> = imgs.iter().map(normalize).collect();
    Tensor::stack_batch(&items)
}

/// Batch item `index` of a `[N, 3, H, W]` tensor as an image.
pub fn denormalize<T: Scalar>(t: &Tensor<T>, index: usize) -> RgbImage {
    let (n, c, h, w) = t.dims4();
    assert_eq!(c, 3, "expected 3 channels");
    assert!(index < n);
    let hw = h * w;
    let base = index * 3 * hw;
    let mut pixels = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for ch in 0..3 {
            pixels.push(denormalize_sample(t.data()[base + ch * hw + i]));
        }
    }
    RgbImage::new(h, w, pixels).expect("non-empty")
}
