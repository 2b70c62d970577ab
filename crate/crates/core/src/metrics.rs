//! PSNR and SSIM on magnitude images, and their aggregation.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kspace::ComplexImage;

/// PSNR of identical images is infinite; aggregates clamp it here.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Pointwise modulus of a two-channel image.
pub fn magnitude(img: &ComplexImage) -> Vec<f64> {
    img.magnitude()
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with peak 1.0. Identical images give `+inf`.
pub fn psnr(reference: &[f64], reconstruction: &[f64]) -> Result<f64> {
    check_len(reference, reconstruction)?;
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let mse = reference
        .iter()
        .zip(reconstruction)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Local SSIM map with an 11x11 Gaussian window (sigma 1.5), evaluated only
/// where the window fits. Images smaller than 11 pixels use the largest odd
/// window that fits.
pub fn ssim_map(reference: &[f64], reconstruction: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    check_len(reference, reconstruction)?;
    if reference.len() != height * width || height == 0 || width == 0 {
        return Err(Error::shape(height * width, reference.len()));
    }
    let mut size = SSIM_WINDOW.min(height).min(width);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let x = reference;
    let y = reconstruction;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, height, width, &k);
    let mu_y = filter_valid(y, height, width, &k);
    let e_xx = filter_valid(&xx, height, width, &k);
    let e_yy = filter_valid(&yy, height, width, &k);
    let e_xy = filter_valid(&xy, height, width, &k);
    Ok((0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Mean local SSIM, dynamic range 1.0.
pub fn ssim(reference: &[f64], reconstruction: &[f64], height: usize, width: usize) -> Result<f64> {
    let map = ssim_map(reference, reconstruction, height, width)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Divides both images by the reference maximum.
pub fn normalize_pair(reference: &[f64], reconstruction: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let peak = reference.iter().copied().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    (
        reference.iter().map(|v| v * scale).collect(),
        reconstruction.iter().map(|v| v * scale).collect(),
    )
}

/// PSNR and SSIM of the magnitudes of `rec` against `target`, after
/// normalizing by the target's peak.
pub fn image_metrics(target: &ComplexImage, rec: &ComplexImage) -> Result<(f64, f64)> {
    if target.shape() != rec.shape() {
        return Err(Error::shape(target.shape(), rec.shape()));
    }
    let (r, x) = normalize_pair(&magnitude(target), &magnitude(rec));
    Ok((psnr(&r, &x)?, ssim(&r, &x, target.height(), target.width())?))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn serialize_db<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let opt: Vec<Option<f64>> = values.iter().map(|v| v.is_finite().then_some(*v)).collect();
    opt.serialize(s)
}

fn deserialize_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(opt.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect())
}

/// Mean and population standard deviation with the per-image values.
/// Infinite per-image values are written as JSON `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub per_image: Vec<f64>,
}

impl Summary {
    /// Aggregates, clamping every value to at most `cap`.
    pub fn new(per_image: Vec<f64>, cap: f64) -> Self {
        let clamped: Vec<f64> = per_image.iter().map(|v| v.min(cap)).collect();
        let (mean, std) = mean_std(&clamped);
        Summary { mean, std, per_image }
    }
}

/// Per-fold metrics file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Summary,
    pub ssim: Summary,
}

impl MetricReport {
    pub fn from_pairs(values: &[(f64, f64)]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no images to evaluate".into()));
        }
        Ok(MetricReport {
            psnr: Summary::new(values.iter().map(|v| v.0).collect(), PSNR_CAP_DB),
            ssim: Summary::new(values.iter().map(|v| v.1).collect(), f64::INFINITY),
        })
    }
}

/// Mean and standard deviation of per-fold means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAggregate {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl FoldAggregate {
    pub fn new(per_fold: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_fold);
        FoldAggregate { per_fold, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub psnr: FoldAggregate,
    pub ssim: FoldAggregate,
}

impl CrossValidationReport {
    pub fn from_folds(folds: &[MetricReport]) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::InvalidArgument("no folds to aggregate".into()));
        }
        Ok(CrossValidationReport {
            psnr: FoldAggregate::new(folds.iter().map(|f| f.psnr.mean).collect()),
            ssim: FoldAggregate::new(folds.iter().map(|f| f.ssim.mean).collect()),
        })
    }
}

/// Full-scale cross-validated results the reference network reported.
/// Shipped for comparison only; desk-scale runs do not approach them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferenceTarget {
    pub dataset: &'static str,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

pub const REFERENCE_TARGETS: [ReferenceTarget; 2] = [
    ReferenceTarget { dataset: "cardiac", psnr_mean: 34.8653, psnr_std: 0.9126, ssim_mean: 0.9342, ssim_std: 0.0028 },
    ReferenceTarget { dataset: "brain", psnr_mean: 31.7616, psnr_std: 0.0774, ssim_mean: 0.8882, ssim_std: 0.0011 },
];
