//! Dataset ingestion (raw little-endian float32 slices plus a JSON manifest),
//! Shepp-Logan phantoms for desk-scale runs, and retrospective undersampling.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{self, fft2c, ifft2c, make_cartesian_mask, undersample, ComplexImage, KSpaceGrid, SamplingMask};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const DTYPE_F32_LE: &str = "float32-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub subject_id: String,
    /// Slice files relative to the manifest's directory.
    pub slices: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: u32,
    pub name: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub dtype: String,
    /// Raw intensity range as recorded by the exporter; informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_range: Option<[f64; 2]>,
    pub subjects: Vec<SubjectEntry>,
}

/// Conventional slice file name.
pub fn slice_file_name(subject_id: &str, slice: usize) -> String {
    format!("subject_{subject_id}_slice_{slice}.f32")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Real-valued slices, row-major `H * W`, normalized to `[0, 1]`.
    pub slices: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn slice_count(&self) -> usize {
        self.subjects.iter().map(|s| s.slices.len()).sum()
    }

    /// Slices of one subject as two-channel images with zero imaginary part.
    pub fn images(&self, subject: &str) -> Result<Vec<ComplexImage>> {
        let s = self
            .subjects
            .iter()
            .find(|s| s.id == subject)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subject {subject:?}")))?;
        s.slices
            .iter()
            .map(|v| ComplexImage::from_real(self.height, self.width, v))
            .collect()
    }
}

fn ingest(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_slice(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| ingest(path, e.to_string()))?;
    if bytes.len() != 4 * len {
        return Err(ingest(
            path,
            format!("expected {} bytes ({len} float32 values), found {}", 4 * len, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(ingest(path, format!("non-finite value at index {i}")));
    }
    if let Some(i) = values.iter().position(|&v| v < 0.0) {
        return Err(ingest(path, format!("negative intensity at index {i}")));
    }
    Ok(values)
}

/// Loads a manifest and its slices; every subject is divided by its own maximum.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| ingest(manifest_path, e.to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| ingest(manifest_path, e.to_string()))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(ingest(manifest_path, format!("unsupported schema {}", manifest.schema)));
    }
    if manifest.dtype != DTYPE_F32_LE {
        return Err(ingest(manifest_path, format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.height == 0 || manifest.width == 0 {
        return Err(ingest(manifest_path, "image dimensions must be positive"));
    }
    let mut seen = HashSet::new();
    for s in &manifest.subjects {
        if !seen.insert(s.subject_id.as_str()) {
            return Err(ingest(manifest_path, format!("duplicate subject id {:?}", s.subject_id)));
        }
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let len = manifest.height * manifest.width;
    let subjects = manifest
        .subjects
        .par_iter()
        .map(|entry| {
            let mut slices = entry
                .slices
                .iter()
                .map(|rel| read_slice(&base.join(rel), len))
                .collect::<Result<Vec<_>>>()?;
            let max = slices
                .iter()
                .flat_map(|s| s.iter().copied())
                .fold(0.0f64, f64::max);
            if max > 0.0 {
                for s in &mut slices {
                    for v in s.iter_mut() {
                        *v /= max;
                    }
                }
            }
            Ok(Subject {
                id: entry.subject_id.clone(),
                slices,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: manifest.name,
        height: manifest.height,
        width: manifest.width,
        subjects,
    })
}

/// Writes `dataset` as float32 slices plus `manifest.json` under `dir`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(dataset.subjects.len());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &dataset.subjects {
        let mut files = Vec::with_capacity(s.slices.len());
        for (k, slice) in s.slices.iter().enumerate() {
            let name = slice_file_name(&s.id, k);
            let bytes: Vec<u8> = slice.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            for &v in slice {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let path = dir.join(&name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            files.push(PathBuf::from(name));
        }
        subjects.push(SubjectEntry {
            subject_id: s.id.clone(),
            slices: files,
        });
    }
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA,
        name: dataset.name.clone(),
        height: dataset.height,
        width: dataset.width,
        dtype: DTYPE_F32_LE.into(),
        value_range: lo.is_finite().then_some([lo, hi]),
        subjects,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// One ellipse: intensity added inside `((x-x0)/a)^2 + ((y-y0)/b)^2 <= 1`
/// after rotating by `angle` degrees. Coordinates span `[-1, 1]`, y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub intensity: f64,
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub height: usize,
    pub width: usize,
    pub ellipses: Vec<Ellipse>,
}

/// Modified (higher-contrast) Shepp-Logan head, ten ellipses.
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { intensity: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, angle: 0.0 },
    Ellipse { intensity: -0.8, a: 0.6624, b: 0.874, x0: 0.0, y0: -0.0184, angle: 0.0 },
    Ellipse { intensity: -0.2, a: 0.11, b: 0.31, x0: 0.22, y0: 0.0, angle: -18.0 },
    Ellipse { intensity: -0.2, a: 0.16, b: 0.41, x0: -0.22, y0: 0.0, angle: 18.0 },
    Ellipse { intensity: 0.1, a: 0.21, b: 0.25, x0: 0.0, y0: 0.35, angle: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: 0.1, angle: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: -0.1, angle: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.023, x0: -0.08, y0: -0.605, angle: 0.0 },
    Ellipse { intensity: 0.1, a: 0.023, b: 0.023, x0: 0.0, y0: -0.606, angle: 0.0 },
    Ellipse { intensity: 0.1, a: 0.023, b: 0.046, x0: 0.06, y0: -0.605, angle: 0.0 },
];

impl Phantom {
    pub fn shepp_logan(height: usize, width: usize) -> Self {
        Phantom {
            height,
            width,
            ellipses: SHEPP_LOGAN.to_vec(),
        }
    }

    /// Shepp-Logan with each ellipse jittered in position, size, angle and
    /// contrast. Serves as a distinct synthetic "subject".
    pub fn jittered(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ellipses = SHEPP_LOGAN.to_vec();
        let skull_scale = rng.gen_range(0.9..1.05);
        for (i, e) in ellipses.iter_mut().enumerate() {
            if i < 2 {
                e.a *= skull_scale;
                e.b *= skull_scale;
                continue;
            }
            e.x0 += rng.gen_range(-0.06..0.06);
            e.y0 += rng.gen_range(-0.06..0.06);
            e.a *= rng.gen_range(0.75..1.3);
            e.b *= rng.gen_range(0.75..1.3);
            e.angle += rng.gen_range(-20.0..20.0);
            e.intensity *= rng.gen_range(0.6..1.6);
        }
        Phantom { height, width, ellipses }
    }

    /// Rasterizes at pixel centers and clips to `[0, 1]`.
    pub fn render(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut img = vec![0.0; h * w];
        for e in &self.ellipses {
            let (sin, cos) = e.angle.to_radians().sin_cos();
            for i in 0..h {
                let y = 1.0 - (2.0 * i as f64 + 1.0) / h as f64;
                for j in 0..w {
                    let x = (2.0 * j as f64 + 1.0) / w as f64 - 1.0;
                    let (dx, dy) = (x - e.x0, y - e.y0);
                    let u = dx * cos + dy * sin;
                    let v = -dx * sin + dy * cos;
                    if (u / e.a).powi(2) + (v / e.b).powi(2) <= 1.0 {
                        img[i * w + j] += e.intensity;
                    }
                }
            }
        }
        for v in &mut img {
            *v = v.clamp(0.0, 1.0);
        }
        img
    }
}

/// Standard Shepp-Logan phantom rasterized at `H x W`.
pub fn shepp_logan(height: usize, width: usize) -> Result<Vec<f64>> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!(
            "phantom needs at least 8x8 pixels, got {height}x{width}"
        )));
    }
    Ok(Phantom::shepp_logan(height, width).render())
}

/// Synthetic dataset: `subjects` jittered phantoms, each imaged as
/// `slices` further-jittered variants.
pub fn phantom_dataset(subjects: usize, slices: usize, size: usize, seed: u64) -> Dataset {
    let subjects = (0..subjects)
        .map(|s| Subject {
            id: format!("{s:03}"),
            slices: (0..slices)
                .map(|k| {
                    let ph = Phantom::jittered(size, size, kspace::mask_seed(seed, (s * 1000 + k) as u64));
                    ph.render()
                })
                .collect(),
        })
        .collect();
    Dataset {
        name: "phantom".into(),
        height: size,
        width: size,
        subjects,
    }
}

/// Retrospectively undersampled training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedPair {
    /// Zero-filled reconstruction.
    pub x: ComplexImage,
    /// Measured (undersampled) k-space.
    pub k0: KSpaceGrid,
    pub mask: SamplingMask,
    /// Fully-sampled target.
    pub y: ComplexImage,
}

pub fn simulate_pair(img: &ComplexImage, rate: f64, seed: u64) -> Result<SimulatedPair> {
    let k_full = fft2c(img)?;
    let mask = make_cartesian_mask(img.height(), img.width(), rate, seed)?;
    let k0 = undersample(&k_full, &mask)?;
    let x = ifft2c(&k0)?;
    Ok(SimulatedPair {
        x,
        k0,
        mask,
        y: img.clone(),
    })
}

/// A simulated pair tagged with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject: String,
    pub slice: usize,
    pub pair: SimulatedPair,
}

/// Simulates every slice of the listed subjects. Masks are seeded by
/// `(seed, global slice index)` where the index counts slices over the whole
/// dataset, so a slice gets the same mask whichever split it lands in.
pub fn simulate_subjects(dataset: &Dataset, subjects: &[String], rate: f64, seed: u64) -> Result<Vec<Sample>> {
    let mut offsets = std::collections::HashMap::new();
    let mut acc = 0usize;
    for s in &dataset.subjects {
        offsets.insert(s.id.as_str(), acc);
        acc += s.slices.len();
    }
    let mut jobs = Vec::new();
    for id in subjects {
        let subject = dataset
            .subjects
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subject {id:?}")))?;
        for (k, slice) in subject.slices.iter().enumerate() {
            jobs.push((id.clone(), k, offsets[id.as_str()] + k, slice));
        }
    }
    jobs.into_par_iter()
        .map(|(subject, slice, global, values)| {
            let img = ComplexImage::from_real(dataset.height, dataset.width, values)?;
            let pair = simulate_pair(&img, rate, kspace::mask_seed(seed, global as u64))?;
            Ok(Sample { subject, slice, pair })
        })
        .collect()
}
