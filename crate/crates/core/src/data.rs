//! Image folders and training batches.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{bicubic_downscale, load_image, normalize_batch, RgbImage};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by file name.
pub fn image_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Identifier of an image file: its stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// In-memory collection of HR training images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    pub fn from_images(images: Vec<RgbImage>) -> Self {
        let ids = (0..images.len()).map(|i| format!("{i:04}")).collect();
        Self { ids, images }
    }

    /// Load every image in `dir`; any unreadable file is an error.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let files = image_files(dir)?;
        let mut ids = Vec::with_capacity(files.len());
        let mut images = Vec::with_capacity(files.len());
        for f in &files {
            images.push(load_image(f)?);
            ids.push(image_id(f));
        }
        Ok(Self { ids, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Uniformly placed `size x size` crop, reflection-padding small images.
pub fn random_crop<R: Rng + ?Sized>(img: &RgbImage, size: usize, rng: &mut R) -> RgbImage {
    let img = img.reflect_pad(size, size);
    let top = rng.random_range(0..=img.height() - size);
    let left = rng.random_range(0..=img.width() - size);
    img.crop(top, left, size, size).expect("crop inside padded image")
}

/// Normalized HR crops and, for conditional training, their bicubic LR
/// counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub y: Option<Tensor<f32>>,
}

impl Batch {
    pub fn from_images(hr: &[RgbImage], scale: Option<usize>) -> Result<Self> {
        let y = match scale {
            Some(s) => {
                let lr = hr.iter().map(|h| bicubic_downscale(h, s)).collect::<Result<Vec<_>>>()?;
                Some(normalize_batch(&lr))
            }
            None => None,
        };
        Ok(Self {
            x: normalize_batch(hr),
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw `batch_size` random crops (image index, then crop offset, per item).
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    crop: usize,
    scale: Option<usize>,
    rng: &mut R,
) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let crops: Vec<RgbImage> = (0..batch_size)
        .map(|_| {
            let i = rng.random_range(0..dataset.len());
            random_crop(&dataset.images[i], crop, rng)
        })
        .collect();
    Batch::from_images(&crops, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_png;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discovers_images_by_extension() {
        let tmp = tempfile::tempdir().unwrap();
        save_png(&RgbImage::filled(4, 4, [1, 2, 3]), tmp.path().join("b.png")).unwrap();
        save_png(&RgbImage::filled(4, 4, [4, 5, 6]), tmp.path().join("a.PNG")).unwrap();
        fs::write(tmp.path().join("notes.txt"), "x").unwrap();
        let files = image_files(tmp.path()).unwrap();
        let names: Vec<_> = files.iter().map(|f| image_id(f)).collect();
        assert_eq!(names, vec!["a", "b"]);
        let ds = Dataset::load_dir(tmp.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images[0].get(0, 0), [4, 5, 6]);
        assert!(matches!(image_files(tmp.path().join("nope")), Err(Error::NotFound(_))));
    }

    #[test]
    fn batches_are_reproducible() {
        let ds = Dataset::from_images(vec![
            RgbImage::from_fn(20, 24, |y, x| [y as u8, x as u8, 0]),
            RgbImage::filled(6, 6, [9, 9, 9]),
        ]);
        let a = sample_batch(&ds, 3, 8, Some(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_batch(&ds, 3, 8, Some(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.shape(), &[3, 3, 8, 8]);
        assert_eq!(a.y.as_ref().unwrap().shape(), &[3, 3, 2, 2]);
        let c = sample_batch(&ds, 1, 8, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(c.y.is_none());
        assert!(sample_batch(&Dataset::default(), 1, 8, None, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
