//! 2D discrete Fourier analysis: spectra, amplitude, an adaptive
//! cumulative-energy cutoff, and radial low/high-pass masks.
//!
//! Spectra are stored DC-centered: shifted column `sx` holds signed frequency
//! `sx - W/2` (integer division), and likewise for rows. Radii are normalized
//! so that 1 is the largest radius present in the grid, measured in cycles
//! per pixel, `sqrt((fx/W)² + (fy/H)²)`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::scene::ImageBuffer;

/// Largest imaginary residue tolerated when returning to a real image.
pub const IMAGINARY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum FrequencyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spectrum has no energy")]
    DegenerateSpectrum,
    #[error("inverse transform left an imaginary residue of {0:e}")]
    ConjugateSymmetry(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Per-channel complex spectrum in DC-centered layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    width: usize,
    height: usize,
    channels: usize,
    /// Channel-major planes, each `height × width` row-major.
    data: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![Complex::new(0.0, 0.0); width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Coefficient at shifted position `(sx, sy)` of channel `c`.
    pub fn get(&self, sx: usize, sy: usize, c: usize) -> Complex<f64> {
        self.data[(c * self.height + sy) * self.width + sx]
    }

    pub fn set(&mut self, sx: usize, sy: usize, c: usize, v: Complex<f64>) {
        let (w, h) = (self.width, self.height);
        self.data[(c * h + sy) * w + sx] = v;
    }

    /// Coefficient at signed frequency `(fx, fy)`, taken modulo the grid.
    pub fn at_frequency(&self, fx: i64, fy: i64, c: usize) -> Complex<f64> {
        let sx = (fx + (self.width / 2) as i64).rem_euclid(self.width as i64) as usize;
        let sy = (fy + (self.height / 2) as i64).rem_euclid(self.height as i64) as usize;
        self.get(sx, sy, c)
    }

    pub fn data(&self) -> &[Complex<f64>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<f64>] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Spectrum) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// `√(Re² + Im²)` per bin and channel, in the centered layout.
    pub fn amplitude(&self) -> ImageBuffer {
        self.to_image(|z| z.norm())
    }

    pub fn phase(&self) -> ImageBuffer {
        self.to_image(|z| z.arg())
    }

    /// Amplitude-squared summed over channels, one value per bin.
    pub fn bin_energy(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        (0..plane)
            .map(|i| {
                (0..self.channels)
                    .map(|c| self.data[c * plane + i].norm_sqr())
                    .sum()
            })
            .collect()
    }

    /// Multiplies every channel bin-wise by `mask`.
    pub fn masked(&self, mask: &FrequencyMask) -> Result<Spectrum, FrequencyError> {
        if mask.width != self.width || mask.height != self.height {
            return Err(FrequencyError::ShapeMismatch(format!(
                "mask {}x{} vs spectrum {}x{}",
                mask.width, mask.height, self.width, self.height
            )));
        }
        let plane = self.width * self.height;
        let mut out = self.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v *= mask.weights[i % plane];
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Spectrum) -> Result<Spectrum, FrequencyError> {
        if !self.same_shape(other) {
            return Err(FrequencyError::ShapeMismatch(
                "spectra differ in shape".into(),
            ));
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(out)
    }

    fn to_image(&self, f: impl Fn(Complex<f64>) -> f64) -> ImageBuffer {
        let plane = self.width * self.height;
        ImageBuffer::from_fn(self.width, self.height, self.channels, |x, y, c| {
            f(self.data[c * plane + y * self.width + x])
        })
    }
}

/// In-place unnormalized 2D FFT of a row-major `h × w` plane.
fn fft2_in_place(plane: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in plane.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

/// Forward transform `F(u,v) = Σ f(x,y)·exp(-2πi(ux/W + vy/H))` per channel,
/// returned DC-centered.
pub fn dft2(img: &ImageBuffer) -> Spectrum {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut spec = Spectrum::zeros(w, h, ch);
    let mut plane = vec![Complex::new(0.0, 0.0); w * h];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = Complex::new(img.get(x, y, c), 0.0);
            }
        }
        fft2_in_place(&mut plane, w, h, false);
        for ky in 0..h {
            for kx in 0..w {
                spec.set((kx + w / 2) % w, (ky + h / 2) % h, c, plane[ky * w + kx]);
            }
        }
    }
    spec
}

/// Inverse transform, normalized by `1/(W·H)`, returning complex planes in
/// spatial layout (channel-major).
pub fn idft2_complex(spec: &Spectrum) -> Vec<Complex<f64>> {
    let (w, h, ch) = (spec.width, spec.height, spec.channels);
    let norm = 1.0 / (w * h) as f64;
    let mut out = Vec::with_capacity(w * h * ch);
    let mut plane = vec![Complex::new(0.0, 0.0); w * h];
    for c in 0..ch {
        for ky in 0..h {
            for kx in 0..w {
                plane[ky * w + kx] = spec.get((kx + w / 2) % w, (ky + h / 2) % h, c);
            }
        }
        fft2_in_place(&mut plane, w, h, true);
        out.extend(plane.iter().map(|z| z * norm));
    }
    out
}

/// Inverse transform back to a real image. Fails if the imaginary part
/// exceeds [`IMAGINARY_TOLERANCE`].
pub fn idft2(spec: &Spectrum) -> Result<ImageBuffer, FrequencyError> {
    let (w, h) = (spec.width, spec.height);
    let planes = idft2_complex(spec);
    let residue = planes.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if residue > IMAGINARY_TOLERANCE {
        return Err(FrequencyError::ConjugateSymmetry(residue));
    }
    Ok(ImageBuffer::from_fn(w, h, spec.channels, |x, y, c| {
        planes[(c * h + y) * w + x].re
    }))
}

/// Signed frequency of shifted index `s` on an axis of length `n`.
fn signed_frequency(s: usize, n: usize) -> i64 {
    s as i64 - (n / 2) as i64
}

/// Exact integer radius key `fx²·H² + fy²·W²` of every bin, in centered
/// layout. Ordering by key equals ordering by radius.
fn radius_keys(w: usize, h: usize) -> Vec<u128> {
    let (w2, h2) = ((w * w) as u128, (h * h) as u128);
    let mut keys = Vec::with_capacity(w * h);
    for sy in 0..h {
        let fy = signed_frequency(sy, h).unsigned_abs() as u128;
        for sx in 0..w {
            let fx = signed_frequency(sx, w).unsigned_abs() as u128;
            keys.push(fx * fx * h2 + fy * fy * w2);
        }
    }
    keys
}

/// Normalized radius of every bin in the centered layout (1 at the corner).
pub fn normalized_radii(w: usize, h: usize) -> Vec<f64> {
    let keys = radius_keys(w, h);
    let max = keys.iter().copied().max().unwrap_or(0);
    keys.iter()
        .map(|k| {
            if max == 0 {
                0.0
            } else {
                (*k as f64 / max as f64).sqrt()
            }
        })
        .collect()
}

/// One step of a cumulative radial energy profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialStep {
    /// Normalized radius.
    pub radius: f64,
    /// Fraction of total energy within `radius`.
    pub energy_fraction: f64,
    /// Fraction of total energy within `radius`, excluding the DC bin.
    pub energy_fraction_no_dc: f64,
    /// Fraction of all bins within `radius`.
    pub bin_fraction: f64,
}

/// Cumulative energy at each distinct radius occurring in the grid.
pub fn radial_profile(spec: &Spectrum) -> Vec<RadialStep> {
    let (w, h) = (spec.width, spec.height);
    let keys = radius_keys(w, h);
    let energy = spec.bin_energy();
    let key_max = keys.iter().copied().max().unwrap_or(0);
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by_key(|i| keys[*i]);
    let total: f64 = energy.iter().sum();
    let dc = energy[(h / 2) * w + w / 2];
    let total_ac = total - dc;
    let n = keys.len() as f64;

    let mut out: Vec<RadialStep> = Vec::new();
    let mut cum = 0.0;
    let mut cum_ac = 0.0;
    let mut count = 0usize;
    let mut pos = 0;
    while pos < idx.len() {
        let key = keys[idx[pos]];
        while pos < idx.len() && keys[idx[pos]] == key {
            let i = idx[pos];
            cum += energy[i];
            if key != 0 {
                cum_ac += energy[i];
            }
            count += 1;
            pos += 1;
        }
        let radius = if key_max == 0 {
            0.0
        } else {
            (key as f64 / key_max as f64).sqrt()
        };
        out.push(RadialStep {
            radius,
            energy_fraction: if total > 0.0 { cum / total } else { 0.0 },
            energy_fraction_no_dc: if total_ac > 0.0 {
                cum_ac / total_ac
            } else {
                0.0
            },
            bin_fraction: count as f64 / n,
        });
    }
    out
}

/// Smallest occurring radius whose enclosed energy (summed over channels)
/// reaches `energy_fraction` of the total. A fraction of 1 always returns 1.
pub fn adaptive_cutoff(spec: &Spectrum, energy_fraction: f64) -> Result<f64, FrequencyError> {
    if !(0.0..=1.0).contains(&energy_fraction) {
        return Err(FrequencyError::InvalidParameter(format!(
            "energy fraction {energy_fraction} outside [0, 1]"
        )));
    }
    let (w, h) = (spec.width, spec.height);
    let energy = spec.bin_energy();
    let total: f64 = energy.iter().sum();
    if !(total > 0.0) {
        return Err(FrequencyError::DegenerateSpectrum);
    }
    if energy_fraction >= 1.0 {
        return Ok(1.0);
    }
    let keys = radius_keys(w, h);
    let key_max = keys.iter().copied().max().unwrap_or(0);
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by_key(|i| keys[*i]);
    let target = energy_fraction * total;
    let mut cum = 0.0;
    let mut pos = 0;
    while pos < idx.len() {
        let key = keys[idx[pos]];
        while pos < idx.len() && keys[idx[pos]] == key {
            cum += energy[idx[pos]];
            pos += 1;
        }
        if cum >= target {
            return Ok(if key_max == 0 {
                0.0
            } else {
                (key as f64 / key_max as f64).sqrt()
            });
        }
    }
    Ok(1.0)
}

/// Per-bin weights in `[0, 1]`, in the centered layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    width: usize,
    height: usize,
    cutoff: f64,
    weights: Vec<f64>,
}

impl FrequencyMask {
    pub fn all_pass(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cutoff: 1.0,
            weights: vec![1.0; width * height],
        }
    }

    pub fn from_weights(
        width: usize,
        height: usize,
        cutoff: f64,
        weights: Vec<f64>,
    ) -> Result<Self, FrequencyError> {
        if weights.len() != width * height {
            return Err(FrequencyError::ShapeMismatch(format!(
                "{} weights for a {width}x{height} grid",
                weights.len()
            )));
        }
        if weights.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FrequencyError::InvalidParameter(
                "mask weights outside [0, 1]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            cutoff,
            weights,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at shifted position `(sx, sy)`.
    pub fn get(&self, sx: usize, sy: usize) -> f64 {
        self.weights[sy * self.width + sx]
    }

    pub fn is_all_pass(&self) -> bool {
        self.weights.iter().all(|v| *v == 1.0)
    }

    /// `1 - self`, bin-wise.
    pub fn complement(&self) -> FrequencyMask {
        FrequencyMask {
            width: self.width,
            height: self.height,
            cutoff: self.cutoff,
            weights: self.weights.iter().map(|v| 1.0 - v).collect(),
        }
    }
}

/// Radial low-pass and its exact complement. The low-pass is 1 up to
/// `cutoff`, falls along a raised cosine over `softness` bins, then is 0.
pub fn make_masks(
    width: usize,
    height: usize,
    cutoff: f64,
    softness: f64,
) -> Result<(FrequencyMask, FrequencyMask), FrequencyError> {
    if width == 0 || height == 0 {
        return Err(FrequencyError::InvalidParameter("empty grid".into()));
    }
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(FrequencyError::InvalidParameter(format!(
            "cutoff {cutoff} outside [0, 1]"
        )));
    }
    if !(softness >= 0.0) || !softness.is_finite() {
        return Err(FrequencyError::InvalidParameter(format!(
            "softness {softness} must be >= 0"
        )));
    }
    let radii = normalized_radii(width, height);
    // One bin along the longer axis, in normalized-radius units.
    let (w, h) = (width as f64, height as f64);
    let (hw, hh) = ((width / 2) as f64 / w, (height / 2) as f64 / h);
    let r_max = (hw * hw + hh * hh).sqrt();
    let bin = if r_max > 0.0 {
        1.0 / (w.max(h) * r_max)
    } else {
        0.0
    };
    let transition = softness * bin;
    let weights: Vec<f64> = radii
        .iter()
        .map(|&r| {
            if r <= cutoff {
                1.0
            } else if transition > 0.0 && r < cutoff + transition {
                0.5 * (1.0 + (std::f64::consts::PI * (r - cutoff) / transition).cos())
            } else {
                0.0
            }
        })
        .collect();
    let low = FrequencyMask {
        width,
        height,
        cutoff,
        weights,
    };
    let high = low.complement();
    Ok((low, high))
}

/// `iDFT(mask ⊙ DFT(img))`, keeping the real part.
pub fn bandlimit(img: &ImageBuffer, mask: &FrequencyMask) -> Result<ImageBuffer, FrequencyError> {
    if mask.is_all_pass() && mask.width == img.width() && mask.height == img.height() {
        return Ok(img.clone());
    }
    idft2(&dft2(img).masked(mask)?)
}
