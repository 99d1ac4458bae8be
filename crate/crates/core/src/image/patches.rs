//! Patch extraction and uniform-average stitching.

use super::RgbImage;
use crate::error::{Error, Result};

/// Square patches covering an image, in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<RgbImage>,
    pub source_shape: (usize, usize),
}

impl PatchGrid {
    pub fn row_origins(&self) -> Vec<usize> {
        patch_origins(self.source_shape.0, self.patch_size, self.stride)
    }

    pub fn col_origins(&self) -> Vec<usize> {
        patch_origins(self.source_shape.1, self.patch_size, self.stride)
    }

    /// Same grid with every patch replaced and the geometry scaled by
    /// `factor` (used to stitch super-resolved patches).
    pub fn rescaled(&self, patches: Vec<RgbImage>, factor: usize) -> Self {
        Self {
            patch_size: self.patch_size * factor,
            stride: self.stride * factor,
            rows: self.rows,
            cols: self.cols,
            patches,
            source_shape: (self.source_shape.0 * factor, self.source_shape.1 * factor),
        }
    }
}

/// Window origins along one axis: every `stride` from 0, plus a final
/// end-aligned window when the regular ones fall short of the edge.
pub fn patch_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + patch <= dim {
        out.push(pos);
        pos += stride;
    }
    let last = *out.last().expect("patch fits at least once");
    if last + patch < dim {
        out.push(dim - patch);
    }
    out
}

pub fn extract_patches(img: &RgbImage, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::Argument("patch size must be at least 1".into()));
    }
    if stride == 0 || stride > patch_size {
        return Err(Error::Argument(format!(
            "stride {stride} must be in 1..={patch_size}"
        )));
    }
    let (h, w) = img.shape();
    if patch_size > h || patch_size > w {
        return Err(Error::Argument(format!(
            "patch size {patch_size} exceeds {h}x{w} image"
        )));
    }
    let ys = patch_origins(h, patch_size, stride);
    let xs = patch_origins(w, patch_size, stride);
    let mut patches = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            patches.push(img.crop(y, x, patch_size, patch_size)?);
        }
    }
    Ok(PatchGrid {
        patch_size,
        stride,
        rows: ys.len(),
        cols: xs.len(),
        patches,
        source_shape: (h, w),
    })
}

/// Reassemble a grid, averaging overlaps with uniform weights and rounding
/// half away from zero. Exact tilings reproduce the source bit for bit.
pub fn stitch_patches(grid: &PatchGrid) -> Result<RgbImage> {
    let (h, w) = grid.source_shape;
    if grid.patch_size == 0 || grid.stride == 0 || grid.stride > grid.patch_size {
        return Err(Error::Structure(format!(
            "patch size {} / stride {}",
            grid.patch_size, grid.stride
        )));
    }
    if grid.patch_size > h || grid.patch_size > w {
        return Err(Error::Structure(format!(
            "patch size {} exceeds source {h}x{w}",
            grid.patch_size
        )));
    }
    let ys = grid.row_origins();
    let xs = grid.col_origins();
    if ys.len() != grid.rows || xs.len() != grid.cols || grid.rows * grid.cols != grid.patches.len() {
        return Err(Error::Structure(format!(
            "{}x{} grid with {} patches does not match geometry {}x{}",
            grid.rows,
            grid.cols,
            grid.patches.len(),
            ys.len(),
            xs.len()
        )));
    }
    if let Some(bad) = grid
        .patches
        .iter()
        .position(|p| p.shape() != (grid.patch_size, grid.patch_size))
    {
        return Err(Error::Structure(format!(
            "patch {bad} is {:?}, expected {}x{}",
            grid.patches[bad].shape(),
            grid.patch_size,
            grid.patch_size
        )));
    }
    let mut sum = vec![0.0f64; h * w * 3];
    let mut count = vec![0u32; h * w];
    for (r, &y0) in ys.iter().enumerate() {
        for (c, &x0) in xs.iter().enumerate() {
            let patch = &grid.patches[r * grid.cols + c];
            for py in 0..grid.patch_size {
                for px in 0..grid.patch_size {
                    let i = (y0 + py) * w + x0 + px;
                    count[i] += 1;
                    let v = patch.get(py, px);
                    for ch in 0..3 {
                        sum[i * 3 + ch] += v[ch] as f64;
                    }
                }
            }
        }
    }
    let pixels = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i / 3] as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::new(h, w, pixels)
}
