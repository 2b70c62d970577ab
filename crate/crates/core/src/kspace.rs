//! Centered orthonormal Fourier transforms, Cartesian line masks and the
//! data-consistency operators used at the end of every cascade component.
//!
//! Images and k-space grids are stored as two real planes (real part, then
//! imaginary part) of `H x W` row-major samples. The zero frequency of a
//! grid sits at `(H / 2, W / 2)`.

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! two_channel_grid {
    ($name:ident) => {
        impl $name {
            pub fn zeros(height: usize, width: usize) -> Self {
                $name {
                    height,
                    width,
                    data: vec![0.0; 2 * height * width],
                }
            }

            /// Builds from a `(2, H, W)` buffer, rejecting empty grids and non-finite entries.
            pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                if height == 0 || width == 0 {
                    return Err(Error::InvalidInput(format!(
                        "grid dimensions must be positive, got {height}x{width}"
                    )));
                }
                if data.len() != 2 * height * width {
                    return Err(Error::shape(2 * height * width, data.len()));
                }
                if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "non-finite value at flat index {pos}"
                    )));
                }
                Ok($name {
                    height,
                    width,
                    data,
                })
            }

            pub fn from_parts(height: usize, width: usize, re: &[f64], im: &[f64]) -> Result<Self> {
                let mut data = Vec::with_capacity(2 * height * width);
                data.extend_from_slice(re);
                data.extend_from_slice(im);
                Self::from_vec(height, width, data)
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

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            pub fn re(&self) -> &[f64] {
                &self.data[..self.height * self.width]
            }

            pub fn im(&self) -> &[f64] {
                &self.data[self.height * self.width..]
            }

            /// `(real, imaginary)` at row `i`, column `j`.
            pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
                let p = self.height * self.width;
                let idx = i * self.width + j;
                (self.data[idx], self.data[p + idx])
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            fn ensure_finite(&self) -> Result<()> {
                if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "non-finite value at flat index {pos}"
                    )));
                }
                Ok(())
            }
        }
    };
}

/// Two-channel spatial image: channel 0 real part, channel 1 imaginary part.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Two-channel centered frequency-domain grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

two_channel_grid!(ComplexImage);
two_channel_grid!(KSpaceGrid);

impl ComplexImage {
    /// Real-valued image with a zero imaginary channel.
    pub fn from_real(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        let zeros = vec![0.0; height * width];
        Self::from_parts(height, width, values, &zeros)
    }

    /// Pointwise modulus `sqrt(re^2 + im^2)`.
    pub fn magnitude(&self) -> Vec<f64> {
        self.re()
            .iter()
            .zip(self.im())
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }
}

/// Row-sampled Cartesian mask. Row `i` is acquired across the full width iff
/// `i` is in `lines`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaskFile", into = "MaskFile")]
pub struct SamplingMask {
    height: usize,
    width: usize,
    rate: f64,
    seed: u64,
    lines: Vec<usize>,
    sampled: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    rate: f64,
    seed: u64,
    lines: Vec<usize>,
}

impl TryFrom<MaskFile> for SamplingMask {
    type Error = Error;

    fn try_from(f: MaskFile) -> Result<Self> {
        let mut mask = SamplingMask::from_lines(f.height, f.width, f.lines)?;
        mask.rate = f.rate;
        mask.seed = f.seed;
        Ok(mask)
    }
}

impl From<SamplingMask> for MaskFile {
    fn from(m: SamplingMask) -> Self {
        MaskFile {
            height: m.height,
            width: m.width,
            rate: m.rate,
            seed: m.seed,
            lines: m.lines,
        }
    }
}

impl SamplingMask {
    /// Mask from an explicit set of rows. The nominal rate becomes `|lines| / H`.
    pub fn from_lines(height: usize, width: usize, lines: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        let set: BTreeSet<usize> = lines.iter().copied().collect();
        if set.len() != lines.len() {
            return Err(Error::InvalidArgument("duplicate mask lines".into()));
        }
        if let Some(&bad) = set.iter().find(|&&i| i >= height) {
            return Err(Error::InvalidArgument(format!(
                "mask line {bad} outside [0, {height})"
            )));
        }
        let mut sampled = vec![false; height];
        for &i in &set {
            sampled[i] = true;
        }
        Ok(SamplingMask {
            height,
            width,
            rate: set.len() as f64 / height as f64,
            seed: 0,
            lines: set.into_iter().collect(),
            sampled,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::from_lines(height, width, (0..height).collect()).expect("valid full mask")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sorted sampled row indices.
    pub fn lines(&self) -> &[usize] {
        &self.lines
    }

    pub fn is_sampled(&self, row: usize) -> bool {
        self.sampled[row]
    }

    /// Mask value at `(i, j)`; constant along the width axis.
    pub fn value(&self, i: usize, _j: usize) -> f64 {
        if self.sampled[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn ensure_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::InvalidArgument(format!(
                "mask is {}x{} but grid is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// `round-half-up(rate * H)`, never below one line.
pub fn sampled_line_count(height: usize, rate: f64) -> usize {
    let count = (rate * height as f64 + 0.5).floor() as usize;
    count.clamp(1, height)
}

/// Draws `round-half-up(rate * H)` distinct rows uniformly without replacement.
pub fn make_cartesian_mask(height: usize, width: usize, rate: f64, seed: u64) -> Result<SamplingMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling rate must lie in (0, 1], got {rate}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask dimensions must be positive, got {height}x{width}"
        )));
    }
    let count = sampled_line_count(height, rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = sample(&mut rng, height, count).into_vec();
    let mut mask = SamplingMask::from_lines(height, width, lines)?;
    mask.rate = rate;
    mask.seed = seed;
    Ok(mask)
}

/// Per-image mask seed derived from a run seed and the image's position in the dataset.
pub fn mask_seed(global_seed: u64, image_index: u64) -> u64 {
    splitmix64(global_seed ^ splitmix64(image_index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Centered orthonormal 2-D transform of a `(2, H, W)` buffer.
pub(crate) fn centered_fft(height: usize, width: usize, data: &[f64], direction: FftDirection) -> Vec<f64> {
    let plane = height * width;
    debug_assert_eq!(data.len(), 2 * plane);
    let (hs, ws) = (height / 2, width / 2);

    // ifftshift while loading: buf[i][j] = x[(i + H/2) % H][(j + W/2) % W]
    let mut buf = vec![Complex::new(0.0, 0.0); plane];
    for i in 0..height {
        let si = (i + hs) % height;
        for j in 0..width {
            let sj = (j + ws) % width;
            let src = si * width + sj;
            buf[i * width + j] = Complex::new(data[src], data[plane + src]);
        }
    }

    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft(width, direction), p.plan_fft(height, direction))
    });
    let mut scratch = vec![Complex::new(0.0, 0.0); row_fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(width) {
        row_fft.process_with_scratch(row, &mut scratch);
    }
    let mut cols = vec![Complex::new(0.0, 0.0); plane];
    for i in 0..height {
        for j in 0..width {
            cols[j * height + i] = buf[i * width + j];
        }
    }
    scratch.resize(col_fft.get_inplace_scratch_len(), Complex::new(0.0, 0.0));
    for col in cols.chunks_exact_mut(height) {
        col_fft.process_with_scratch(col, &mut scratch);
    }

    // fftshift while storing: out[(i + H/2) % H][(j + W/2) % W] = y[i][j]
    let scale = 1.0 / (plane as f64).sqrt();
    let mut out = vec![0.0; 2 * plane];
    for j in 0..width {
        let dj = (j + ws) % width;
        for i in 0..height {
            let v = cols[j * height + i] * scale;
            let dst = ((i + hs) % height) * width + dj;
            out[dst] = v.re;
            out[plane + dst] = v.im;
        }
    }
    out
}

/// Orthonormal, centered forward transform.
pub fn fft2c(img: &ComplexImage) -> Result<KSpaceGrid> {
    img.ensure_finite()?;
    Ok(KSpaceGrid {
        height: img.height,
        width: img.width,
        data: centered_fft(img.height, img.width, &img.data, FftDirection::Forward),
    })
}

/// Exact inverse of [`fft2c`].
pub fn ifft2c(k: &KSpaceGrid) -> Result<ComplexImage> {
    k.ensure_finite()?;
    Ok(ComplexImage {
        height: k.height,
        width: k.width,
        data: centered_fft(k.height, k.width, &k.data, FftDirection::Inverse),
    })
}

/// Zeroes every unsampled row in both channels.
pub fn undersample(k_full: &KSpaceGrid, mask: &SamplingMask) -> Result<KSpaceGrid> {
    mask.ensure_shape(k_full.height, k_full.width)?;
    let mut out = k_full.clone();
    zero_rows(&mut out.data, k_full.height, k_full.width, |i| !mask.is_sampled(i));
    Ok(out)
}

/// Hard replacement `m * k0 + (1 - m) * k_rec`.
pub fn data_consistency(k_rec: &KSpaceGrid, k0: &KSpaceGrid, mask: &SamplingMask) -> Result<KSpaceGrid> {
    if k_rec.shape() != k0.shape() {
        return Err(Error::InvalidArgument(format!(
            "reconstruction {:?} and measurement {:?} differ in shape",
            k_rec.shape(),
            k0.shape()
        )));
    }
    mask.ensure_shape(k_rec.height, k_rec.width)?;
    let mut out = k_rec.clone();
    replace_rows(&mut out.data, &k0.data, k_rec.height, k_rec.width, mask);
    Ok(out)
}

/// Two-step data consistency: replace sampled rows, take the modulus as a
/// real image, then replace sampled rows again.
pub fn tdc(s: &ComplexImage, k0: &KSpaceGrid, mask: &SamplingMask) -> Result<ComplexImage> {
    check_tdc_shapes(s, k0, mask)?;
    s.ensure_finite()?;
    let (out, _) = tdc_raw(s.height, s.width, &s.data, &k0.data, mask);
    Ok(ComplexImage {
        height: s.height,
        width: s.width,
        data: out,
    })
}

pub(crate) fn check_tdc_shapes(s: &ComplexImage, k0: &KSpaceGrid, mask: &SamplingMask) -> Result<()> {
    if s.shape() != k0.shape() {
        return Err(Error::InvalidArgument(format!(
            "image {:?} and measurement {:?} differ in shape",
            s.shape(),
            k0.shape()
        )));
    }
    mask.ensure_shape(s.height, s.width)
}

fn zero_rows(data: &mut [f64], height: usize, width: usize, drop: impl Fn(usize) -> bool) {
    let plane = height * width;
    for i in (0..height).filter(|&i| drop(i)) {
        data[i * width..(i + 1) * width].fill(0.0);
        data[plane + i * width..plane + (i + 1) * width].fill(0.0);
    }
}

fn replace_rows(data: &mut [f64], k0: &[f64], height: usize, width: usize, mask: &SamplingMask) {
    let plane = height * width;
    for &i in mask.lines() {
        for off in [i * width, plane + i * width] {
            data[off..off + width].copy_from_slice(&k0[off..off + width]);
        }
    }
}

/// `ifft2c(dc(fft2c(s)))` on raw buffers.
fn dc_image(height: usize, width: usize, s: &[f64], k0: &[f64], mask: &SamplingMask) -> Vec<f64> {
    let mut k = centered_fft(height, width, s, FftDirection::Forward);
    replace_rows(&mut k, k0, height, width, mask);
    centered_fft(height, width, &k, FftDirection::Inverse)
}

/// Projection onto the unsampled rows, `ifft2c((1 - m) * fft2c(v))`.
/// It is the linear part of the data-consistency step and is self-adjoint.
fn unsampled_projection(height: usize, width: usize, v: &[f64], mask: &SamplingMask) -> Vec<f64> {
    let mut k = centered_fft(height, width, v, FftDirection::Forward);
    zero_rows(&mut k, height, width, |i| mask.is_sampled(i));
    centered_fft(height, width, &k, FftDirection::Inverse)
}

/// Returns the TDC output and the intermediate image after the first replacement.
pub(crate) fn tdc_raw(
    height: usize,
    width: usize,
    s: &[f64],
    k0: &[f64],
    mask: &SamplingMask,
) -> (Vec<f64>, Vec<f64>) {
    let plane = height * width;
    let first = dc_image(height, width, s, k0, mask);
    let mut real = vec![0.0; 2 * plane];
    for p in 0..plane {
        real[p] = first[p].hypot(first[plane + p]);
    }
    (dc_image(height, width, &real, k0, mask), first)
}

/// Vector-Jacobian product of [`tdc_raw`] with respect to `s`.
pub(crate) fn tdc_backward_raw(
    height: usize,
    width: usize,
    first: &[f64],
    grad_out: &[f64],
    mask: &SamplingMask,
) -> Vec<f64> {
    let plane = height * width;
    let g_real = unsampled_projection(height, width, grad_out, mask);
    // only channel 0 of the modulus image depends on the input
    let mut g_first = vec![0.0; 2 * plane];
    for p in 0..plane {
        let (re, im) = (first[p], first[plane + p]);
        let r = re.hypot(im);
        if r > 0.0 {
            g_first[p] = g_real[p] * re / r;
            g_first[plane + p] = g_real[p] * im / r;
        }
    }
    unsampled_projection(height, width, &g_first, mask)
}
