//! Image quality metrics and seeded dataset evaluation.
//!
//! Metrics work on float planes on the 0-255 scale. SSIM uses the usual
//! single-scale constants: an 11x11 Gaussian window with standard deviation
//! 1.5, `K1 = 0.01`, `K2 = 0.03` and `L = 255`, averaged over the positions
//! where the window fits entirely inside the image.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::imageio::{list_images, read_image, to_unit, GrayImage, ImageError};
use crate::model::{ModelError, ModelGraph};
use crate::tensor::{Scalar, Tensor};
use crate::train::add_awgn;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PEAK: f64 = 255.0;
pub const REPORT_HEADER: &str = "dataset,sigma,image,psnr_noisy,psnr,ssim";
pub const MEAN_ROW: &str = "__mean__";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("image sizes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("noise level must be a non-negative number, got {0}")]
    NegativeSigma(f64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{image}: {source}")]
    InImage {
        image: String,
        #[source]
        source: Box<EvalError>,
    },
}

/// Row-major float image on the 0-255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane size");
        Plane { width, height, data }
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Plane::new(img.width(), img.height(), img.pixels().iter().map(|&p| p as f64).collect())
    }

    /// Unit-range `(1, 1, h, w)` tensor scaled by 255, without clipping.
    pub fn from_unit_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Plane::new(t.w(), t.h(), t.data().iter().map(|v| v.as_f64() * PEAK).collect())
    }

    pub fn clipped(&self) -> Self {
        Plane::new(self.width, self.height, self.data.iter().map(|v| v.clamp(0.0, PEAK)).collect())
    }

    /// Round half away from zero into bytes (after clipping).
    pub fn to_gray(&self) -> GrayImage {
        let px = self.data.iter().map(|v| v.clamp(0.0, PEAK).round() as u8).collect();
        GrayImage::new(self.width, self.height, px).expect("plane dimensions are positive")
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

fn same_dims(a: &Plane, b: &Plane) -> Result<(), EvalError> {
    if a.dims() != b.dims() {
        return Err(EvalError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` with `test` clipped to `[0, 255]`; identical
/// images give `+inf`.
pub fn psnr(reference: &Plane, test: &Plane) -> Result<f64, EvalError> {
    same_dims(reference, test)?;
    let sse: f64 = reference
        .data
        .iter()
        .zip(&test.data)
        .map(|(r, t)| (r - t.clamp(0.0, PEAK)).powi(2))
        .sum();
    let mse = sse / reference.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable valid-region filtering.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over the valid region.
pub fn ssim(reference: &Plane, test: &Plane) -> Result<f64, EvalError> {
    same_dims(reference, test)?;
    let (w, h) = reference.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall(w, h));
    }
    let taps = gaussian_taps();
    let (x, y) = (&reference.data, &test.data);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect() };
    let mu_x = filter_valid(x, w, h, &taps);
    let mu_y = filter_valid(y, w, h, &taps);
    let xx = filter_valid(&prod(|a, _| a * a), w, h, &taps);
    let yy = filter_valid(&prod(|_, b| b * b), w, h, &taps);
    let xy = filter_valid(&prod(|a, b| a * b), w, h, &taps);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Per-image noise seed from the run seed and the image name, stable across
/// platforms and independent of evaluation order.
pub fn noise_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct ImageEval {
    pub psnr_noisy: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Network output clipped to `[0, 255]`.
    pub denoised: Plane,
}

/// Corrupt `clean` with noise from `seed`, run the network on the whole
/// unclipped noisy image and score the clipped output.
pub fn evaluate_image<T: Scalar>(
    model: &ModelGraph<T>,
    clean: &GrayImage,
    sigma: f64,
    seed: u64,
) -> Result<ImageEval, EvalError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(EvalError::NegativeSigma(sigma));
    }
    let clean_t: Tensor<T> = to_unit(clean);
    let noisy = add_awgn(&clean_t, sigma, &mut ChaCha8Rng::seed_from_u64(seed))
        .expect("sigma validated above");
    let out = model.infer(&noisy)?;
    let reference = Plane::from_gray(clean);
    let noisy = Plane::from_unit_tensor(&noisy).clipped();
    let denoised = Plane::from_unit_tensor(&out).clipped();
    Ok(ImageEval {
        psnr_noisy: psnr(&reference, &noisy)?,
        psnr: psnr(&reference, &denoised)?,
        ssim: ssim(&reference, &denoised)?,
        denoised,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub sigma: f64,
    pub image: String,
    pub psnr_noisy: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Arithmetic means of the rows for each `(dataset, sigma)` pair, in
    /// order of first appearance, labelled `__mean__`.
    pub fn aggregates(&self) -> Vec<EvalRow> {
        let mut groups: Vec<(EvalRow, usize)> = Vec::new();
        for r in &self.rows {
            match groups
                .iter_mut()
                .find(|(g, _)| g.dataset == r.dataset && g.sigma.to_bits() == r.sigma.to_bits())
            {
                Some((g, n)) => {
                    g.psnr_noisy += r.psnr_noisy;
                    g.psnr += r.psnr;
                    g.ssim += r.ssim;
                    *n += 1;
                }
                None => groups.push((
                    EvalRow {
                        image: MEAN_ROW.to_string(),
                        ..r.clone()
                    },
                    1,
                )),
            }
        }
        groups
            .into_iter()
            .map(|(mut g, n)| {
                let n = n as f64;
                g.psnr_noisy /= n;
                g.psnr /= n;
                g.ssim /= n;
                g
            })
            .collect()
    }

    /// CSV text: header, per-image rows, then aggregate rows. PSNR has two
    /// decimals, SSIM four; infinite PSNR renders as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(self.aggregates().iter()) {
            let _ = writeln!(
                out,
                "{},{},{},{:.2},{:.2},{:.4}",
                csv_field(&r.dataset),
                r.sigma,
                csv_field(&r.image),
                r.psnr_noisy,
                r.psnr,
                r.ssim
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_report_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, report.to_csv()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Evaluate every image of `dir` (lexicographic order). Images are scored in
/// parallel; `on_image` then sees each result in order.
pub fn evaluate_dataset_with<T, F>(
    model: &ModelGraph<T>,
    dir: impl AsRef<Path>,
    dataset: &str,
    sigma: f64,
    seed: u64,
    mut on_image: F,
) -> Result<EvalReport, EvalError>
where
    T: Scalar,
    F: FnMut(&str, &ImageEval) -> Result<(), EvalError>,
{
    let paths = list_images(dir)?;
    let results: Vec<Result<(String, ImageEval), EvalError>> = paths
        .par_iter()
        .map(|path| {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let scored = read_image(path)
                .map_err(EvalError::from)
                .and_then(|img| evaluate_image(model, &img, sigma, noise_seed(seed, &name)));
            scored
                .map(|e| (name.clone(), e))
                .map_err(|e| EvalError::InImage {
                    image: name,
                    source: Box::new(e),
                })
        })
        .collect();
    let mut report = EvalReport::default();
    for r in results {
        let (image, e) = r?;
        on_image(&image, &e)?;
        report.rows.push(EvalRow {
            dataset: dataset.to_string(),
            sigma,
            image,
            psnr_noisy: e.psnr_noisy,
            psnr: e.psnr,
            ssim: e.ssim,
        });
    }
    Ok(report)
}

pub fn evaluate_dataset<T: Scalar>(
    model: &ModelGraph<T>,
    dir: impl AsRef<Path>,
    dataset: &str,
    sigma: f64,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    evaluate_dataset_with(model, dir, dataset, sigma, seed, |_, _| Ok(()))
}
