//! Y-channel PSNR / SSIM, dataset reports and temperature sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{image_files, image_id};
use crate::error::{Error, Result};
use crate::image::{bicubic_downscale, bicubic_upscale, load_image, rgb_to_luma, save_png, CropInfo, LumaPlane, RgbImage};
use crate::params::ParamStore;
use crate::sr::SrModel;
use crate::vdvae::DecodeMode;

pub const COLOR_CONVENTION: &str = "ycbcr_bt601_studio_swing";
pub const DOWNSCALE_KERNEL: &str = "bicubic_a-0.5_antialias";

fn check_pair(a: &RgbImage, b: &RgbImage, shave: usize) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "reference {:?} and candidate {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = a.shape();
    if 2 * shave >= h || 2 * shave >= w {
        return Err(Error::Argument(format!("shave {shave} leaves nothing of a {h}x{w} image")));
    }
    Ok(())
}

/// PSNR of two luma planes after shaving; `+inf` when they are identical.
pub fn psnr_luma(a: &LumaPlane, b: &LumaPlane, shave: usize) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Argument("luma planes differ in shape".into()));
    }
    let (a, b) = (a.shave(shave)?, b.shave(shave)?);
    let mse = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.samples.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    })
}

pub fn psnr_y(reference: &RgbImage, candidate: &RgbImage, shave: usize) -> Result<f64> {
    check_pair(reference, candidate, shave)?;
    psnr_luma(&rgb_to_luma(reference), &rgb_to_luma(candidate), shave)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Separable 'valid' filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; oh * w];
    for y in 0..oh {
        for x in 0..w {
            rows[y * w + x] = (0..k).map(|i| taps[i] * plane[(y + i) * w + x]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[y * w + x + i]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two luma planes after shaving: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, L = 255, averaged over every window
/// position that fits inside the plane.
pub fn ssim_luma(a: &LumaPlane, b: &LumaPlane, shave: usize) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Argument("luma planes differ in shape".into()));
    }
    let (a, b) = (a.shave(shave)?, b.shave(shave)?);
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "{h}x{w} after shaving is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps();
    let x = &a.samples;
    let y = &b.samples;
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let sxx = filter_valid(&prod(x, x), h, w, &taps);
    let syy = filter_valid(&prod(y, y), h, w, &taps);
    let sxy = filter_valid(&prod(x, y), h, w, &taps);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim_y(reference: &RgbImage, candidate: &RgbImage, shave: usize) -> Result<f64> {
    check_pair(reference, candidate, shave)?;
    ssim_luma(&rgb_to_luma(reference), &rgb_to_luma(candidate), shave)
}

/// One image to super-resolve, with its reference.
#[derive(Debug, Clone, Copy)]
pub struct EvalInput<'a> {
    pub id: &'a str,
    pub lr: &'a RgbImage,
    pub reference: &'a RgbImage,
}

/// A super-resolution method under evaluation.
pub trait SrMethod {
    fn name(&self) -> String;
    fn upscale(&self, input: &EvalInput<'_>, temperature: f64, seed: u64) -> Result<RgbImage>;
}

/// Patchwise VDVAE-SR inference.
pub struct VdvaeSrMethod {
    pub model: SrModel,
    pub params: ParamStore<f32>,
    pub patch_size: usize,
    pub overlap: usize,
    pub decode: DecodeMode,
}

impl SrMethod for VdvaeSrMethod {
    fn name(&self) -> String {
        format!("vdvae_sr_{}", self.model.config().condition_mode)
    }

    fn upscale(&self, input: &EvalInput<'_>, temperature: f64, seed: u64) -> Result<RgbImage> {
        Ok(self
            .model
            .super_resolve_image(&self.params, input.lr, self.patch_size, self.overlap, temperature, seed, self.decode)?
            .image)
    }
}

pub struct BicubicMethod {
    pub scale: usize,
}

impl SrMethod for BicubicMethod {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn upscale(&self, input: &EvalInput<'_>, _temperature: f64, _seed: u64) -> Result<RgbImage> {
        bicubic_upscale(input.lr, self.scale)
    }
}

/// Returns the reference; pins the top of both metric scales.
pub struct IdentityStub;

impl SrMethod for IdentityStub {
    fn name(&self) -> String {
        "identity_stub".into()
    }

    fn upscale(&self, input: &EvalInput<'_>, _temperature: f64, _seed: u64) -> Result<RgbImage> {
        Ok(input.reference.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub temperature: f64,
    pub scale: usize,
    pub seed: u64,
    pub shave: usize,
    /// Folder of LR images matched to HR files by name; bicubic
    /// downscaling of the HR image otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            scale: 4,
            seed: 0,
            shave: 4,
            lr_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    /// `+inf` for identical images.
    pub psnr_y: Option<f64>,
    pub ssim_y: Option<f64>,
    pub failed: bool,
    pub error: Option<String>,
    /// Center crop applied to make the HR image divisible by the scale.
    pub crop: Option<CropInfo>,
}

/// Evaluation settings recorded alongside the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub method: String,
    pub shave: usize,
    pub color_convention: String,
    pub temperature: f64,
    pub seed: u64,
    pub scale: usize,
    pub lr_source: String,
    pub downscale_kernel: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dataset: String,
    pub rows: Vec<MetricRow>,
    /// Mean over successful rows with finite PSNR.
    pub mean_psnr_y: Option<f64>,
    /// Mean over successful rows.
    pub mean_ssim_y: Option<f64>,
    pub protocol: Protocol,
}

impl MetricReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.failed).count()
    }

    pub fn infinite_psnr(&self) -> usize {
        self.rows.iter().filter(|r| r.psnr_y == Some(f64::INFINITY)).count()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

fn evaluate_file(
    method: &dyn SrMethod,
    path: &Path,
    opts: &EvalOptions,
) -> Result<(f64, f64, Option<CropInfo>)> {
    let hr = load_image(path)?;
    let (hr, crop) = hr.center_crop_to_multiple(opts.scale)?;
    let lr = match &opts.lr_dir {
        Some(dir) => {
            let name = path.file_name().ok_or_else(|| Error::NotFound(path.to_path_buf()))?;
            let lr = load_image(dir.join(name))?;
            let want = (hr.height() / opts.scale, hr.width() / opts.scale);
            if lr.shape() != want {
                return Err(Error::Argument(format!(
                    "paired LR image is {:?}, expected {want:?}",
                    lr.shape()
                )));
            }
            lr
        }
        None => bicubic_downscale(&hr, opts.scale)?,
    };
    let id = image_id(path);
    let input = EvalInput {
        id: &id,
        lr: &lr,
        reference: &hr,
    };
    let out = method.upscale(&input, opts.temperature, opts.seed)?;
    let psnr = psnr_y(&hr, &out, opts.shave)?;
    let ssim = ssim_y(&hr, &out, opts.shave)?;
    Ok((psnr, ssim, (!crop.is_identity()).then_some(crop)))
}

/// Super-resolve every image of `dataset_dir` and score it. Images that
/// cannot be read or scored become failed rows.
pub fn evaluate_dataset(method: &dyn SrMethod, dataset_dir: impl AsRef<Path>, opts: &EvalOptions) -> Result<MetricReport> {
    let dir = dataset_dir.as_ref();
    if opts.scale < 2 {
        return Err(Error::Argument(format!("scale {} < 2", opts.scale)));
    }
    let files = image_files(dir)?;
    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let image_id = image_id(path);
        rows.push(match evaluate_file(method, path, opts) {
            Ok((p, s, crop)) => MetricRow {
                image_id,
                psnr_y: Some(p),
                ssim_y: Some(s),
                failed: false,
                error: None,
                crop,
            },
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                MetricRow {
                    image_id,
                    psnr_y: None,
                    ssim_y: None,
                    failed: true,
                    error: Some(e.to_string()),
                    crop: None,
                }
            }
        });
    }
    Ok(MetricReport {
        dataset: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        mean_psnr_y: mean(rows.iter().filter_map(|r| r.psnr_y).filter(|p| p.is_finite())),
        mean_ssim_y: mean(rows.iter().filter_map(|r| r.ssim_y)),
        rows,
        protocol: Protocol {
            method: method.name(),
            shave: opts.shave,
            color_convention: COLOR_CONVENTION.into(),
            temperature: opts.temperature,
            seed: opts.seed,
            scale: opts.scale,
            lr_source: match &opts.lr_dir {
                Some(d) => format!("paired:{}", d.display()),
                None => "bicubic_downscale".into(),
            },
            downscale_kernel: DOWNSCALE_KERNEL.into(),
        },
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    dataset: &'a str,
    images: usize,
    failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_psnr_y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_ssim_y: Option<f64>,
    infinite_psnr_excluded: usize,
    note: &'static str,
    protocol: &'a Protocol,
    crops: Vec<CropRecord>,
}

#[derive(Serialize)]
struct CropRecord {
    image_id: String,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

/// Write `report.csv` and `summary.toml` into `out_dir`.
pub fn write_report(report: &MetricReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let mut csv = String::from("image_id,psnr_y,ssim_y,failed\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.image_id,
            fmt_metric(r.psnr_y),
            fmt_metric(r.ssim_y),
            r.failed as u8
        ));
    }
    fs::write(out.join("report.csv"), csv)?;
    let summary = Summary {
        dataset: &report.dataset,
        images: report.rows.len(),
        failed: report.failed(),
        mean_psnr_y: report.mean_psnr_y,
        mean_ssim_y: report.mean_ssim_y,
        infinite_psnr_excluded: report.infinite_psnr(),
        note: "PSNR of identical images is +inf and excluded from the PSNR mean; failed rows are excluded from both means",
        protocol: &report.protocol,
        crops: report
            .rows
            .iter()
            .filter_map(|r| {
                r.crop.map(|c| CropRecord {
                    image_id: r.image_id.clone(),
                    top: c.top,
                    left: c.left,
                    height: c.height,
                    width: c.width,
                })
            })
            .collect(),
    };
    let text = toml::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join("summary.toml"), text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub temperature: f64,
    pub mean_psnr_y: Option<f64>,
    pub mean_ssim_y: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<MetricReport>,
}

pub fn temperature_sweep(
    method: &dyn SrMethod,
    dataset_dir: impl AsRef<Path>,
    temps: &[f64],
    opts: &EvalOptions,
) -> Result<SweepResult> {
    if temps.is_empty() {
        return Err(Error::Argument("no temperatures given".into()));
    }
    if let Some(t) = temps.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Argument(format!("temperature {t} outside [0, 1]")));
    }
    let mut rows = Vec::with_capacity(temps.len());
    let mut reports = Vec::with_capacity(temps.len());
    for &t in temps {
        let report = evaluate_dataset(
            method,
            dataset_dir.as_ref(),
            &EvalOptions {
                temperature: t,
                ..opts.clone()
            },
        )?;
        rows.push(SweepRow {
            temperature: t,
            mean_psnr_y: report.mean_psnr_y,
            mean_ssim_y: report.mean_ssim_y,
        });
        reports.push(report);
    }
    Ok(SweepResult { rows, reports })
}

/// Write `sweep.csv` and the `sweep.png` line plot into `out_dir`.
pub fn write_sweep(sweep: &SweepResult, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let mut csv = String::from("temperature,mean_psnr_y,mean_ssim_y\n");
    for r in &sweep.rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.temperature,
            fmt_metric(r.mean_psnr_y),
            fmt_metric(r.mean_ssim_y)
        ));
    }
    fs::write(out.join("sweep.csv"), csv)?;
    save_png(&plot_sweep(&sweep.rows), out.join("sweep.png"))
}

const PANEL_W: usize = 400;
const PANEL_H: usize = 240;
const MARGIN: usize = 30;

/// Two stacked panels, PSNR (blue) over SSIM (red), temperature on x.
/// Each panel's y range spans its own data; tick marks sit at the
/// temperatures.
pub fn plot_sweep(rows: &[SweepRow]) -> RgbImage {
    let mut img = RgbImage::filled(2 * PANEL_H, PANEL_W, [255; 3]);
    let temps: Vec<f64> = rows.iter().map(|r| r.temperature).collect();
    let series = [
        (rows.iter().map(|r| r.mean_psnr_y).collect::<Vec<_>>(), [30, 90, 200]),
        (rows.iter().map(|r| r.mean_ssim_y).collect::<Vec<_>>(), [200, 50, 40]),
    ];
    for (panel, (values, color)) in series.iter().enumerate() {
        draw_panel(&mut img, panel * PANEL_H, &temps, values, *color);
    }
    img
}

fn draw_panel(img: &mut RgbImage, top: usize, xs: &[f64], ys: &[Option<f64>], color: [u8; 3]) {
    let (x0, x1) = (MARGIN as f64, (PANEL_W - MARGIN / 2) as f64);
    let (y0, y1) = ((top + PANEL_H - MARGIN) as f64, (top + MARGIN / 2) as f64);
    let black = [0, 0, 0];
    line(img, (x0, y0), (x1, y0), black);
    line(img, (x0, y0), (x0, y1), black);
    let tmin = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let tmax = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let finite: Vec<f64> = ys.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let vmin = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sx = |t: f64| {
        if tmax > tmin {
            x0 + (t - tmin) / (tmax - tmin) * (x1 - x0 - 10.0) + 5.0
        } else {
            (x0 + x1) / 2.0
        }
    };
    let sy = |v: f64| {
        if vmax > vmin {
            y0 - (v - vmin) / (vmax - vmin) * (y0 - y1 - 10.0) - 5.0
        } else {
            (y0 + y1) / 2.0
        }
    };
    for &t in xs {
        line(img, (sx(t), y0), (sx(t), y0 + 5.0), black);
    }
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter_map(|(&t, v)| v.filter(|v| v.is_finite()).map(|v| (sx(t), sy(v))))
        .collect();
    for w in pts.windows(2) {
        line(img, w[0], w[1], color);
    }
    for &(px, py) in &pts {
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(img, px + dx as f64, py + dy as f64, color);
            }
        }
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, color: [u8; 3]) {
    let (xi, yi) = (x.round(), y.round());
    if xi >= 0.0 && yi >= 0.0 && (xi as usize) < img.width() && (yi as usize) < img.height() {
        img.set(yi as usize, xi as usize, color);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), color);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> LumaPlane {
        LumaPlane::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
        RgbImage::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_reference_values() {
        let a = plane(8, 8, |y, x| 100.0 + (y * x) as f64);
        assert_eq!(psnr_luma(&a, &a, 0).unwrap(), f64::INFINITY);
        let b = plane(8, 8, |y, x| 101.0 + (y * x) as f64);
        assert!((psnr_luma(&a, &b, 0).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        let c = plane(8, 8, |y, x| 116.0 + (y * x) as f64);
        assert!((psnr_luma(&a, &c, 2).unwrap() - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-9);
        let img = RgbImage::filled(8, 8, [10, 20, 30]);
        assert_eq!(psnr_y(&img, &img, 1).unwrap(), f64::INFINITY);
        assert!(psnr_y(&img, &RgbImage::filled(8, 9, [0; 3]), 0).is_err());
        assert!(psnr_y(&img, &img, 4).is_err());
    }

    #[test]
    fn shave_restricts_to_the_interior() {
        let a = RgbImage::filled(12, 12, [50; 3]);
        let mut b = a.clone();
        b.set(0, 0, [255; 3]);
        assert!(psnr_y(&a, &b, 0).unwrap().is_finite());
        assert_eq!(psnr_y(&a, &b, 1).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_inversion_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 20, 24);
        assert_eq!(ssim_y(&a, &a, 0).unwrap(), 1.0);
        assert_eq!(ssim_y(&a, &a, 4).unwrap(), 1.0);
        let bars = RgbImage::from_fn(32, 32, |_, x| if (x / 4) % 2 == 0 { [255; 3] } else { [0; 3] });
        let inv = RgbImage::from_fn(32, 32, |y, x| bars.get(y, x).map(|v| 255 - v));
        assert!(ssim_y(&bars, &inv, 0).unwrap() < 0.1);
        assert!(matches!(ssim_y(&a, &a, 5), Err(Error::Argument(_))));
    }

    fn ssim_brute_force(a: &LumaPlane, b: &LumaPlane) -> f64 {
        let g = |i: f64, j: f64| (-(i * i + j * j) / (2.0 * 1.5 * 1.5)).exp();
        let norm: f64 = (0..11).flat_map(|i| (0..11).map(move |j| g(i as f64 - 5.0, j as f64 - 5.0))).sum();
        let (c1, c2) = (6.5025, 58.5225);
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=a.height - 11 {
            for x in 0..=a.width - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g(i as f64 - 5.0, j as f64 - 5.0) / norm;
                        let (u, v) = (a.at(y + i, x + j), b.at(y + i, x + j));
                        mx += wgt * u;
                        my += wgt * v;
                        sxx += wgt * u * u;
                        syy += wgt * v * v;
                        sxy += wgt * u * v;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w) in [(11, 11), (14, 19), (23, 16)] {
            let a = plane(h, w, |_, _| rng.random_range(16.0..235.0));
            let b = plane(h, w, |y, x| (a.at(y, x) + rng.random_range(-30.0..30.0)).clamp(16.0, 235.0));
            let got = ssim_luma(&a, &b, 0).unwrap();
            assert!((got - ssim_brute_force(&a, &b)).abs() < 1e-10, "{h}x{w}");
        }
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = random_image(&mut rng, 16, 16);
            let b = random_image(&mut rng, 16, 16);
            assert!((psnr_y(&a, &b, 1).unwrap() - psnr_y(&b, &a, 1).unwrap()).abs() < 1e-9);
            assert!((ssim_y(&a, &b, 1).unwrap() - ssim_y(&b, &a, 1).unwrap()).abs() < 1e-9);
        }
    }

    fn write_set(dir: &Path, n: usize) {
        fs::create_dir_all(dir).unwrap();
        for (i, img) in crate::toydata::toy_images(n, 34, 3).iter().enumerate() {
            save_png(img, dir.join(format!("img{i}.png"))).unwrap();
        }
    }

    #[test]
    fn dataset_report_with_stub_and_bicubic() {
        let tmp = tempfile::tempdir().unwrap();
        let set = tmp.path().join("set");
        write_set(&set, 2);
        fs::write(set.join("broken.png"), b"not a png").unwrap();
        let opts = EvalOptions::default();

        let stub = evaluate_dataset(&IdentityStub, &set, &opts).unwrap();
        assert_eq!(stub.rows.len(), 3);
        assert_eq!(stub.failed(), 1);
        let ok: Vec<_> = stub.rows.iter().filter(|r| !r.failed).collect();
        assert!(ok.iter().all(|r| r.psnr_y == Some(f64::INFINITY) && r.ssim_y == Some(1.0)));
        assert_eq!(stub.mean_psnr_y, None);
        assert_eq!(stub.mean_ssim_y, Some(1.0));
        // 34 is not divisible by 4: center-cropped to 32.
        assert_eq!(ok[0].crop.unwrap().height, 32);

        let bic = evaluate_dataset(&BicubicMethod { scale: 4 }, &set, &opts).unwrap();
        let finite: Vec<f64> = bic.rows.iter().filter_map(|r| r.psnr_y).collect();
        assert_eq!(finite.len(), 2);
        assert!(finite.iter().all(|p| p.is_finite() && *p > 0.0));
        let m = bic.mean_psnr_y.unwrap();
        assert!((m - (finite[0] + finite[1]) / 2.0).abs() < 1e-12);

        write_report(&bic, tmp.path().join("out")).unwrap();
        let csv = fs::read_to_string(tmp.path().join("out/report.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image_id,psnr_y,ssim_y,failed");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "broken,,,1");
        let summary = fs::read_to_string(tmp.path().join("out/summary.toml")).unwrap();
        for key in ["shave = 4", "temperature = 0.1", "seed = 0", COLOR_CONVENTION] {
            assert!(summary.contains(key), "{key} missing from {summary}");
        }

        write_report(&stub, tmp.path().join("stub")).unwrap();
        let csv = fs::read_to_string(tmp.path().join("stub/report.csv")).unwrap();
        assert!(csv.contains(",inf,1.000000,0"));
    }

    #[test]
    fn paired_lr_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let hr = tmp.path().join("hr");
        let lr = tmp.path().join("lr");
        write_set(&hr, 1);
        fs::create_dir_all(&lr).unwrap();
        let img = load_image(hr.join("img0.png")).unwrap();
        let (crop, _) = img.center_crop_to_multiple(4).unwrap();
        save_png(&bicubic_downscale(&crop, 4).unwrap(), lr.join("img0.png")).unwrap();
        let bic = BicubicMethod { scale: 4 };
        let a = evaluate_dataset(&bic, &hr, &EvalOptions::default()).unwrap();
        let b = evaluate_dataset(
            &bic,
            &hr,
            &EvalOptions {
                lr_dir: Some(lr.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.rows, b.rows);
        assert!(b.protocol.lr_source.starts_with("paired:"));
    }

    #[test]
    fn sweep_rows_and_plot() {
        let tmp = tempfile::tempdir().unwrap();
        let set = tmp.path().join("set");
        write_set(&set, 1);
        let bic = BicubicMethod { scale: 4 };
        let opts = EvalOptions::default();
        let s = temperature_sweep(&bic, &set, &[0.1, 0.8], &opts).unwrap();
        assert_eq!(s.rows.len(), 2);
        let single = evaluate_dataset(&bic, &set, &EvalOptions { temperature: 0.1, ..opts.clone() }).unwrap();
        assert_eq!(s.rows[0].mean_psnr_y, single.mean_psnr_y);
        write_sweep(&s, tmp.path().join("out")).unwrap();
        let csv = fs::read_to_string(tmp.path().join("out/sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let png = load_image(tmp.path().join("out/sweep.png")).unwrap();
        assert_eq!(png.shape(), (2 * PANEL_H, PANEL_W));
        assert!(temperature_sweep(&bic, &set, &[], &opts).is_err());
        assert!(temperature_sweep(&bic, &set, &[1.5], &opts).is_err());
    }

    fn arb_pair() -> impl proptest::strategy::Strategy<Value = (RgbImage, RgbImage)> {
        use proptest::prelude::*;
        (12usize..20, 12usize..20).prop_flat_map(|(h, w)| {
            let px = proptest::collection::vec(any::<u8>(), h * w * 3);
            (px.clone(), px).prop_map(move |(a, b)| {
                let img = |d: Vec<u8>| RgbImage::from_fn(h, w, |y, x| {
                    let i = 3 * (y * w + x);
                    [d[i], d[i + 1], d[i + 2]]
                });
                (img(a), img(b))
            })
        })
    }

    proptest::proptest! {
        #[test]
        fn metrics_are_symmetric_and_bounded((a, b) in arb_pair()) {
            let p = psnr_y(&a, &b, 0).unwrap();
            proptest::prop_assert_eq!(p, psnr_y(&b, &a, 0).unwrap());
            proptest::prop_assert!(p > 0.0);
            let s = ssim_y(&a, &b, 0).unwrap();
            proptest::prop_assert!((s - ssim_y(&b, &a, 0).unwrap()).abs() < 1e-12);
            proptest::prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
            proptest::prop_assert!((ssim_y(&a, &a, 0).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn shave_equals_cropping((a, b) in arb_pair(), shave in 0usize..3) {
            let (h, w) = a.shape();
            let crop = |img: &RgbImage| img.crop(shave, shave, h - 2 * shave, w - 2 * shave).unwrap();
            let (ca, cb) = (crop(&a), crop(&b));
            proptest::prop_assert!((psnr_y(&a, &b, shave).unwrap() - psnr_y(&ca, &cb, 0).unwrap()).abs() < 1e-9);
            if h - 2 * shave >= 11 && w - 2 * shave >= 11 {
                proptest::prop_assert!((ssim_y(&a, &b, shave).unwrap() - ssim_y(&ca, &cb, 0).unwrap()).abs() < 1e-12);
            }
        }
    }
}
