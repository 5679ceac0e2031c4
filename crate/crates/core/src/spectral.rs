//! 2-D DFT machinery: forward/inverse transforms, magnitude/phase split,
//! radial band partitions, low-pass masks and radial profiles.
//!
//! Conventions:
//! - the forward transform is unnormalized, the inverse carries `1/(HW)`;
//! - spectra are stored unshifted (DC at `(0, 0)`), one `H×W` plane per channel;
//! - radius is the wrapped ("min-image") distance from DC, normalized per axis
//!   by the Nyquist frequency and scaled so the corner `(H/2, W/2)` has radius 1.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest imaginary residue tolerated by [`idft`], relative to the largest real output.
pub const IMAG_RESIDUE_TOLERANCE: f64 = 1e-4;
/// Absolute floor for the residue check, so all-zero outputs are not rejected for rounding noise.
const IMAG_RESIDUE_FLOOR: f64 = 1e-9;

/// Per-channel complex spectrum, channel-planar with DC at `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    channels: usize,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, channels: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != height * width * channels {
            return Err(Error::shape(format!(
                "spectrum {height}x{width}x{channels} needs {} coefficients, got {}",
                height * width * channels,
                coeffs.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            coeffs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn index(&self, u: usize, v: usize, c: usize) -> usize {
        (c * self.height + u) * self.width + v
    }

    pub fn get(&self, u: usize, v: usize, c: usize) -> Complex64 {
        self.coeffs[self.index(u, v, c)]
    }

    /// Replaces every coefficient by the average of itself and the conjugate of its
    /// mirror `(-u, -v)`, which makes the inverse transform exactly real.
    pub fn hermitian_symmetrize(&mut self) {
        let (h, w) = (self.height, self.width);
        let src = self.coeffs.clone();
        for c in 0..self.channels {
            for u in 0..h {
                for v in 0..w {
                    let i = (c * h + u) * w + v;
                    let j = (c * h + (h - u) % h) * w + (w - v) % w;
                    self.coeffs[i] = 0.5 * (src[i] + src[j].conj());
                }
            }
        }
    }
}

/// Polar form of a spectrum: magnitudes `A ≥ 0` and phases in `(-π, π]`,
/// laid out like [`Spectrum`].
#[derive(Debug, Clone, PartialEq)]
pub struct MagPhase {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl MagPhase {
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, PlanCache)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
    /// Working memory kept across calls. Large per-call buffers otherwise go back
    /// to the OS on free and page-fault in again on every transform.
    /// Holds a staging plane and the FFT scratch.
    static SCRATCH: RefCell<(Vec<Complex64>, Vec<Complex64>)> =
        const { RefCell::new((Vec::new(), Vec::new())) };
}

fn with_scratch<T>(f: impl FnOnce(&mut Vec<Complex64>, &mut Vec<Complex64>) -> T) -> T {
    SCRATCH.with(|cell| {
        let (plane, scratch) = &mut *cell.borrow_mut();
        f(plane, scratch)
    })
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                let dir = if inverse {
                    FftDirection::Inverse
                } else {
                    FftDirection::Forward
                };
                planner.plan_fft(len, dir)
            })
            .clone()
    })
}

/// Tile side for the blocked transpose; keeps both tiles resident in L1.
const TRANSPOSE_TILE: usize = 16;

/// Writes the transpose of the `rows×cols` row-major `src` into `dst`.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r0 in (0..rows).step_by(TRANSPOSE_TILE) {
        for c0 in (0..cols).step_by(TRANSPOSE_TILE) {
            for r in r0..(r0 + TRANSPOSE_TILE).min(rows) {
                for c in c0..(c0 + TRANSPOSE_TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// In-place unnormalized 2-D FFT of one `h×w` row-major plane. `scratch` is
/// grown as needed and holds the transpose and FFT buffers.
fn fft2_plane(plane: &mut [Complex64], h: usize, w: usize, inverse: bool, scratch: &mut Vec<Complex64>) {
    let rows = plan(w, inverse);
    let cols = plan(h, inverse);
    let fft_len = rows.get_inplace_scratch_len().max(cols.get_inplace_scratch_len());
    if scratch.len() < h * w + fft_len {
        scratch.resize(h * w + fft_len, Complex64::default());
    }
    let (buf, fft_scratch) = scratch.split_at_mut(h * w);
    rows.process_with_scratch(plane, &mut fft_scratch[..rows.get_inplace_scratch_len()]);
    // Columns: transpose, transform rows of length h, transpose back.
    transpose(plane, buf, h, w);
    cols.process_with_scratch(buf, &mut fft_scratch[..cols.get_inplace_scratch_len()]);
    transpose(buf, plane, w, h);
}

pub fn ensure_power_of_two(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 || !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Unsupported(format!(
            "spatial size {h}x{w}: both sides must be powers of two and at least 2"
        )));
    }
    Ok(())
}

/// Forward 2-D DFT of each channel of an `[H, W, C]` tensor:
/// `F(u,v) = Σ_{h,w} x(h,w)·exp(-2πi(uh/H + vw/W))`.
pub fn dft(image: &Tensor) -> Result<Spectrum> {
    let (h, w, c) = image.hwc()?;
    ensure_power_of_two(h, w)?;
    image.check_finite()?;
    let data = image.data();
    let mut coeffs = vec![Complex64::default(); h * w * c];
    with_scratch(|_, scratch| {
        for ch in 0..c {
            let plane = &mut coeffs[ch * h * w..(ch + 1) * h * w];
            for (p, z) in plane.iter_mut().enumerate() {
                *z = Complex64::new(data[p * c + ch] as f64, 0.0);
            }
            fft2_plane(plane, h, w, false, scratch);
        }
    });
    Spectrum::new(h, w, c, coeffs)
}

/// Inverse transform returning the real part as `f64` (`[H, W, C]` interleaved)
/// together with the largest imaginary residue.
pub fn idft_real(spectrum: &Spectrum) -> Result<(Vec<f64>, f64)> {
    let (h, w, c) = (spectrum.height, spectrum.width, spectrum.channels);
    ensure_power_of_two(h, w)?;
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; h * w * c];
    let mut residue = 0.0f64;
    with_scratch(|staging, scratch| {
        let n = h * w;
        if staging.len() < n {
            staging.resize(n, Complex64::default());
        }
        for ch in 0..c {
            let plane = &mut staging[..n];
            plane.copy_from_slice(&spectrum.coeffs[ch * n..(ch + 1) * n]);
            fft2_plane(plane, h, w, true, scratch);
            for (p, z) in plane.iter().enumerate() {
                out[p * c + ch] = z.re * scale;
                residue = residue.max((z.im * scale).abs());
            }
        }
    });
    Ok((out, residue))
}

/// Inverse 2-D DFT. Fails with [`Error::Asymmetry`] when the discarded imaginary part
/// exceeds `1e-4 · max|x|`.
pub fn idft(spectrum: &Spectrum) -> Result<Tensor> {
    let (values, residue) = idft_real(spectrum)?;
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let limit = IMAG_RESIDUE_TOLERANCE * max_abs.max(IMAG_RESIDUE_FLOOR);
    if residue > limit {
        return Err(Error::Asymmetry { residue, limit });
    }
    Tensor::from_f64(vec![spectrum.height, spectrum.width, spectrum.channels], &values)
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut y = theta.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

pub fn decompose(spectrum: &Spectrum) -> MagPhase {
    let (magnitude, phase) = spectrum
        .coeffs
        .iter()
        .map(|z| {
            if z.re == 0.0 && z.im == 0.0 {
                (0.0, 0.0)
            } else {
                (z.norm(), wrap_angle(z.im.atan2(z.re)))
            }
        })
        .unzip();
    MagPhase {
        height: spectrum.height,
        width: spectrum.width,
        channels: spectrum.channels,
        magnitude,
        phase,
    }
}

pub fn recompose(mp: &MagPhase) -> Result<Spectrum> {
    if mp.magnitude.len() != mp.phase.len() {
        return Err(Error::shape("magnitude and phase lengths differ"));
    }
    if let Some(a) = mp.magnitude.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::Numerical(format!("negative or NaN magnitude {a}")));
    }
    let coeffs = mp
        .magnitude
        .iter()
        .zip(&mp.phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    Spectrum::new(mp.height, mp.width, mp.channels, coeffs)
}

/// Squared normalized radius of frequency `(u, v)` as an exact ratio
/// `num / den`, with `den = H²W²`.
fn radius_sq_ratio(u: usize, v: usize, h: usize, w: usize) -> (u128, u128) {
    let du = u.min(h - u) as u128;
    let dv = v.min(w - v) as u128;
    let (h2, w2) = ((h * h) as u128, (w * w) as u128);
    (2 * (du * du * w2 + dv * dv * h2), h2 * w2)
}

/// Normalized radius in `[0, 1]`: 0 at DC, 1 at the corner `(H/2, W/2)`.
pub fn normalized_radius(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let (num, den) = radius_sq_ratio(u, v, h, w);
    (num as f64 / den as f64).sqrt()
}

/// Assignment of every frequency cell to one of `n` radial annuli.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPartition {
    pub height: usize,
    pub width: usize,
    pub n_bands: usize,
    /// Band index of each `(u, v)`, row-major.
    pub assignment: Vec<usize>,
    pub band_sizes: Vec<usize>,
}

/// Partitions an `h×w` spectrum into `n` annuli: cell `(u, v)` goes to
/// `min(floor(n·r), n-1)` for normalized radius `r`. Fails if any band is empty.
pub fn make_band_partition(h: usize, w: usize, n: usize) -> Result<BandPartition> {
    if n == 0 {
        return Err(Error::config("band count must be at least 1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("empty spectrum"));
    }
    let n128 = n as u128;
    let mut assignment = Vec::with_capacity(h * w);
    let mut band_sizes = vec![0usize; n];
    for u in 0..h {
        for v in 0..w {
            // Largest k with k ≤ n·r, i.e. k²·den ≤ n²·num, evaluated exactly.
            let (num, den) = radius_sq_ratio(u, v, h, w);
            let target = n128 * n128 * num;
            let mut k = ((n as f64) * (num as f64 / den as f64).sqrt()) as u128;
            while k > 0 && k * k * den > target {
                k -= 1;
            }
            while (k + 1) * (k + 1) * den <= target {
                k += 1;
            }
            let band = (k as usize).min(n - 1);
            assignment.push(band);
            band_sizes[band] += 1;
        }
    }
    if let Some(empty) = band_sizes.iter().position(|&s| s == 0) {
        return Err(Error::config(format!(
            "band {empty} of {n} is empty for a {h}x{w} spectrum; use fewer bands"
        )));
    }
    Ok(BandPartition {
        height: h,
        width: w,
        n_bands: n,
        assignment,
        band_sizes,
    })
}

/// Band means `M_i = (1/|B_i|) Σ_{(u,v)∈B_i} A(u,v)`, computed per channel and then
/// averaged over channels.
pub fn band_means(magnitude: &MagPhase, partition: &BandPartition) -> Result<Vec<f64>> {
    band_means_of(
        &magnitude.magnitude,
        magnitude.height,
        magnitude.width,
        magnitude.channels,
        partition,
    )
}

/// [`band_means`] over a raw channel-planar magnitude field.
pub fn band_means_of(
    field: &[f64],
    h: usize,
    w: usize,
    channels: usize,
    partition: &BandPartition,
) -> Result<Vec<f64>> {
    if partition.height != h || partition.width != w || field.len() != h * w * channels {
        return Err(Error::shape(format!(
            "magnitude {h}x{w}x{channels} does not match partition {}x{}",
            partition.height, partition.width
        )));
    }
    let n = partition.n_bands;
    let mut means = vec![0.0; n];
    for ch in 0..channels {
        let mut sums = vec![0.0; n];
        for (p, &a) in field[ch * h * w..(ch + 1) * h * w].iter().enumerate() {
            sums[partition.assignment[p]] += a;
        }
        for (m, (s, &size)) in means.iter_mut().zip(sums.iter().zip(&partition.band_sizes)) {
            *m += s / size as f64;
        }
    }
    for m in &mut means {
        *m /= channels as f64;
    }
    Ok(means)
}

/// Hard low-pass selector over an `h×w` spectrum: 1 where normalized radius ≤ cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMask {
    pub height: usize,
    pub width: usize,
    pub cutoff: f64,
    pub values: Vec<f64>,
}

impl FilterMask {
    pub fn is_set(&self, cell: usize) -> bool {
        self.values[cell] > 0.5
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }
}

pub fn lowpass_mask(h: usize, w: usize, cutoff: f64) -> Result<FilterMask> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::config(format!(
            "low-pass cutoff must lie in (0, 1), got {cutoff}"
        )));
    }
    let limit = cutoff * cutoff;
    let mut values = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (num, den) = radius_sq_ratio(u, v, h, w);
            let inside = (num as f64 / den as f64) <= limit;
            values.push(if inside { 1.0 } else { 0.0 });
        }
    }
    Ok(FilterMask {
        height: h,
        width: w,
        cutoff,
        values,
    })
}

/// Band-mean magnitude per radial band, for plotting and CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    pub band_mean_magnitude: Vec<f64>,
}

impl RadialProfile {
    /// CSV with header `band,mean_magnitude`, one row per band.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,mean_magnitude\n");
        for (i, m) in self.band_mean_magnitude.iter().enumerate() {
            out.push_str(&format!("{i},{m}\n"));
        }
        out
    }

    pub fn n_bands(&self) -> usize {
        self.band_mean_magnitude.len()
    }
}

pub fn radial_profile(magnitude: &MagPhase, partition: &BandPartition) -> Result<RadialProfile> {
    Ok(RadialProfile {
        band_mean_magnitude: band_means(magnitude, partition)?,
    })
}

/// Convenience: radial profile of an image's magnitude spectrum.
pub fn image_profile(image: &Tensor, partition: &BandPartition) -> Result<RadialProfile> {
    radial_profile(&decompose(&dft(image)?), partition)
}

/// True for the cells that are their own mirror under `(u, v) → (-u, -v)`;
/// the DFT of a real signal is real there.
pub fn is_self_conjugate(u: usize, v: usize, h: usize, w: usize) -> bool {
    (2 * u).is_multiple_of(h) && (2 * v).is_multiple_of(w)
}
