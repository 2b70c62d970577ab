use std::path::Path;

use emr_core::data::Sample;
use emr_core::metrics::{magnitude, normalize_pair};
use emr_core::ComplexImage;
use image::{GrayImage, Luma};

use crate::error::{CliError, CliResult};

/// Error maps saturate at this absolute difference, so maps from different
/// methods share one scale.
pub const ERROR_SCALE: f64 = 0.2;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_gray(path: &Path, values: &[f64], height: usize, width: usize) -> CliResult<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| Luma([to_u8(values[y as usize * width + x as usize])]));
    img.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes target, zero-filled, reconstruction and |error| PNGs per slice.
/// Magnitudes are scaled by the target's maximum.
pub fn emit(dir: &Path, samples: &[Sample], recs: &[ComplexImage]) -> CliResult<usize> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = 0;
    for (s, rec) in samples.iter().zip(recs) {
        let (h, w) = s.pair.y.shape();
        let truth = magnitude(&s.pair.y);
        let (t, r) = normalize_pair(&truth, &magnitude(rec));
        let (_, z) = normalize_pair(&truth, &magnitude(&s.pair.x));
        let err: Vec<f64> = t.iter().zip(&r).map(|(a, b)| (a - b).abs() / ERROR_SCALE).collect();
        let stem = format!("{}_{:04}", s.subject, s.slice);
        for (kind, values) in [("target", &t), ("zero_filled", &z), ("recon", &r), ("error", &err)] {
            write_gray(&dir.join(format!("{stem}_{kind}.png")), values, h, w)?;
            written += 1;
        }
    }
    Ok(written)
}
