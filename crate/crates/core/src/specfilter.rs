//! Frequency-domain filtering: 2-D DFT, radial Log-Gabor band-pass,
//! spectral derivatives, the Riesz transform and the depth ramp mask.
//!
//! Every filter here is a point-wise multiplier on the periodic DFT of its
//! input. Multipliers that are odd in frequency (first and third
//! derivatives, Riesz) are zeroed on the Nyquist row/column of even-sized
//! grids so that they stay Hermitian and real inputs give real outputs.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::imagecore::Image2D;

/// How the monogenic LPE term combines the odd components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpeMode {
    /// `sum |M1| - sqrt(M2^2 + M3^2)`.
    Corrected,
    /// The printed form `sum |M1| - sqrt(M2^2 + M2^3)`.
    Literal,
}

/// Denominator used by the weighted mean phase angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LwpaMode {
    /// `sqrt(sum M1^2 + sum M2^2)`.
    Literal,
    /// `sqrt((sum M2)^2 + (sum M3)^2)`.
    Corrected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub num_scales: usize,
    /// Wavelength of the finest scale, in pixels.
    pub min_wavelength: f64,
    pub scale_multiplier: f64,
    pub sigma_on_f: f64,
    pub ramp_power: f64,
    /// Filter the half-sample mirror extension of each image instead of the
    /// image itself, so the periodic transform never sees a wrap-around edge.
    pub symmetric_extension: bool,
    pub lpe_mode: LpeMode,
    pub lwpa_mode: LwpaMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            num_scales: 3,
            min_wavelength: 24.0,
            scale_multiplier: 1.8,
            sigma_on_f: 0.55,
            ramp_power: 1.0,
            symmetric_extension: true,
            lpe_mode: LpeMode::Corrected,
            lwpa_mode: LwpaMode::Literal,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 {
            return Err(Error::Config("filter.num_scales must be positive".into()));
        }
        if !(self.min_wavelength >= 2.0) {
            return Err(Error::Config(format!(
                "filter.min_wavelength must be at least 2 px, got {}",
                self.min_wavelength
            )));
        }
        if !(self.scale_multiplier > 1.0) {
            return Err(Error::Config("filter.scale_multiplier must exceed 1".into()));
        }
        if !(self.sigma_on_f > 0.0 && self.sigma_on_f < 1.0) {
            return Err(Error::Config("filter.sigma_on_f must lie in (0, 1)".into()));
        }
        if !(self.ramp_power >= 0.0 && self.ramp_power.is_finite()) {
            return Err(Error::Config("filter.ramp_power must be non-negative".into()));
        }
        Ok(())
    }

    /// Centre wavelength in pixels of scale `scale_index`.
    pub fn wavelength(&self, scale_index: usize) -> f64 {
        self.min_wavelength * self.scale_multiplier.powi(scale_index as i32)
    }
}

/// Complex spectrum or complex-valued image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "complex field {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(ComplexField { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn real(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn imag(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.im).collect()
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.data.iter().fold(0.0, |m, z| m.max(z.im.abs()))
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

fn transpose(data: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Unnormalized 2-D transform in place (row pass, then column pass).
fn fft2_in_place(data: &mut Vec<Complex64>, rows: usize, cols: usize, inverse: bool) {
    plan(cols, inverse).process(data);
    let mut t = transpose(data, rows, cols);
    plan(rows, inverse).process(&mut t);
    *data = transpose(&t, cols, rows);
}

pub fn dft2_forward(image: &Image2D) -> ComplexField {
    let mut data: Vec<Complex64> = image.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut data, image.rows(), image.cols(), false);
    ComplexField {
        rows: image.rows(),
        cols: image.cols(),
        data,
    }
}

/// Normalized inverse transform keeping the complex result.
pub fn dft2_inverse_complex(field: &ComplexField) -> ComplexField {
    let mut data = field.data.clone();
    fft2_in_place(&mut data, field.rows, field.cols, true);
    let scale = 1.0 / (field.rows * field.cols) as f64;
    for z in &mut data {
        *z *= scale;
    }
    ComplexField {
        rows: field.rows,
        cols: field.cols,
        data,
    }
}

/// Normalized inverse transform; returns the real part.
pub fn dft2_inverse(field: &ComplexField, spacing: crate::imagecore::Spacing) -> Image2D {
    let z = dft2_inverse_complex(field);
    Image2D::from_fn(z.rows, z.cols, spacing, |r, c| z.get(r, c).re)
}

/// Signed frequency of DFT bin `k` out of `n`, in cycles per pixel.
/// The Nyquist bin of an even length maps to -0.5.
#[inline]
pub fn signed_frequency(k: usize, n: usize) -> f64 {
    if 2 * k < n {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}

#[inline]
fn is_nyquist(k: usize, n: usize) -> bool {
    n % 2 == 0 && 2 * k == n
}

/// Frequency coordinates handed to spectral multipliers.
#[derive(Debug, Clone, Copy)]
pub struct FreqBin {
    /// Row (vertical) frequency, cycles per pixel.
    pub fy: f64,
    /// Column (horizontal) frequency, cycles per pixel.
    pub fx: f64,
    pub nyquist_y: bool,
    pub nyquist_x: bool,
}

impl FreqBin {
    pub fn radius(&self) -> f64 {
        self.fx.hypot(self.fy)
    }
}

fn multiply_spectrum(
    spectrum: &ComplexField,
    multiplier: impl Fn(FreqBin) -> Complex64,
) -> ComplexField {
    let (rows, cols) = (spectrum.rows, spectrum.cols);
    let mut data = spectrum.data.clone();
    for r in 0..rows {
        for c in 0..cols {
            let bin = FreqBin {
                fy: signed_frequency(r, rows),
                fx: signed_frequency(c, cols),
                nyquist_y: is_nyquist(r, rows),
                nyquist_x: is_nyquist(c, cols),
            };
            data[r * cols + c] *= multiplier(bin);
        }
    }
    ComplexField { rows, cols, data }
}

/// `(r / (rows - 1))^ramp_power` down each column, with `0^0 = 1`.
pub fn depth_ramp(rows: usize, cols: usize, ramp_power: f64) -> Result<Image2D> {
    if rows < 2 || cols == 0 {
        return Err(Error::Config(format!("depth ramp needs rows >= 2, got {rows}x{cols}")));
    }
    if !(ramp_power >= 0.0) {
        return Err(Error::Config("ramp power must be non-negative".into()));
    }
    let denom = (rows - 1) as f64;
    Ok(Image2D::from_fn(rows, cols, Default::default(), |r, _| {
        // powf already gives 0^0 = 1
        (r as f64 / denom).powf(ramp_power)
    }))
}

/// Radial Log-Gabor transfer function at radial frequency `radius`
/// (cycles/pixel) for centre wavelength `wavelength` (pixels).
pub fn log_gabor_gain(radius: f64, wavelength: f64, sigma_on_f: f64) -> f64 {
    if radius <= 0.0 {
        return 0.0;
    }
    // omega / omega0 = radius * wavelength
    let l = (radius * wavelength).ln();
    let s = sigma_on_f.ln();
    (-(l * l) / (2.0 * s * s)).exp()
}

/// Band-passes `image` at `scale_index`; returns the real (even) response and
/// the filtered spectrum.
pub fn log_gabor_bandpass(
    image: &Image2D,
    cfg: &FilterConfig,
    scale_index: usize,
) -> Result<(Image2D, ComplexField)> {
    cfg.validate()?;
    if scale_index >= cfg.num_scales {
        return Err(Error::Config(format!(
            "scale index {scale_index} out of range for {} scales",
            cfg.num_scales
        )));
    }
    Ok(bandpass_at(image, cfg.wavelength(scale_index), cfg.sigma_on_f))
}

/// Log-Gabor band-pass for an already validated wavelength.
pub(crate) fn bandpass_at(image: &Image2D, wavelength: f64, sigma_on_f: f64) -> (Image2D, ComplexField) {
    let spectrum = dft2_forward(image);
    let filtered = multiply_spectrum(&spectrum, |b| {
        Complex64::new(log_gabor_gain(b.radius(), wavelength, sigma_on_f), 0.0)
    });
    let mut even = dft2_inverse(&filtered, image.spacing());
    flush_roundoff(&mut even, image);
    (even, filtered)
}

/// Zeroes output values at transform round-off level relative to the input,
/// so a band-pass of a constant image is exactly zero.
fn flush_roundoff(out: &mut Image2D, input: &Image2D) {
    let scale = input.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = ROUNDOFF_FLOOR * scale;
    for v in out.data_mut() {
        if v.abs() <= floor {
            *v = 0.0;
        }
    }
}

const ROUNDOFF_FLOOR: f64 = 1e-13;

/// Derivatives of an image by spectral multiplication. `x` runs along
/// columns, `y` along rows.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub gx: Image2D,
    pub gy: Image2D,
    pub gxx: Image2D,
    pub gxy: Image2D,
    pub gyy: Image2D,
    pub laplacian: Image2D,
    /// Gradient of the Laplacian, `d/dx lap` and `d/dy lap`.
    pub lap_x: Image2D,
    pub lap_y: Image2D,
}

const TWO_PI: f64 = 2.0 * PI;

pub fn spectral_derivatives(image: &Image2D) -> Derivatives {
    let spectrum = dft2_forward(image);
    let sp = image.spacing();
    let apply = |m: &dyn Fn(FreqBin) -> Complex64| dft2_inverse(&multiply_spectrum(&spectrum, m), sp);
    let i = Complex64::new(0.0, 1.0);

    let dx = move |b: FreqBin| if b.nyquist_x { Complex64::new(0.0, 0.0) } else { i * (TWO_PI * b.fx) };
    let dy = move |b: FreqBin| if b.nyquist_y { Complex64::new(0.0, 0.0) } else { i * (TWO_PI * b.fy) };
    let lap = |b: FreqBin| -(TWO_PI * TWO_PI) * (b.fx * b.fx + b.fy * b.fy);

    Derivatives {
        gx: apply(&dx),
        gy: apply(&dy),
        gxx: apply(&|b| Complex64::new(-(TWO_PI * b.fx).powi(2), 0.0)),
        gxy: apply(&|b| {
            if b.nyquist_x || b.nyquist_y {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(-(TWO_PI * TWO_PI) * b.fx * b.fy, 0.0)
            }
        }),
        gyy: apply(&|b| Complex64::new(-(TWO_PI * b.fy).powi(2), 0.0)),
        laplacian: apply(&|b| Complex64::new(lap(b), 0.0)),
        lap_x: apply(&|b| dx(b) * lap(b)),
        lap_y: apply(&|b| dy(b) * lap(b)),
    }
}

/// Riesz multipliers `-i fx/|f|` and `-i fy/|f|`, zero at DC. With the
/// forward transform `exp(-2 pi i k n / N)` this sends `cos(2 pi x / N)` to
/// `sin(2 pi x / N)` in the horizontal component.
pub fn riesz_multipliers(b: FreqBin) -> (Complex64, Complex64) {
    let r = b.radius();
    if r == 0.0 {
        return (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    }
    let mx = if b.nyquist_x { 0.0 } else { -b.fx / r };
    let my = if b.nyquist_y { 0.0 } else { -b.fy / r };
    (Complex64::new(0.0, mx), Complex64::new(0.0, my))
}

/// Odd (Riesz) components of a band-passed image: horizontal `M2`, vertical `M3`.
pub fn riesz_components(even_band: &Image2D) -> (Image2D, Image2D) {
    let spectrum = dft2_forward(even_band);
    let sp = even_band.spacing();
    let m2 = dft2_inverse(&multiply_spectrum(&spectrum, |b| riesz_multipliers(b).0), sp);
    let m3 = dft2_inverse(&multiply_spectrum(&spectrum, |b| riesz_multipliers(b).1), sp);
    (m2, m3)
}

/// Half-sample symmetric extension to `2 rows x 2 cols`; the original image
/// occupies the top-left quadrant.
pub fn mirror_extend(image: &Image2D) -> Image2D {
    let (rows, cols) = image.dims();
    Image2D::from_fn(2 * rows, 2 * cols, image.spacing(), |r, c| {
        let rr = if r < rows { r } else { 2 * rows - 1 - r };
        let cc = if c < cols { c } else { 2 * cols - 1 - c };
        image.get(rr, cc)
    })
}

/// Runs `f` on the mirror extension of `image` when `extend` is set and
/// crops every returned image back to the original size.
pub(crate) fn on_domain<const N: usize>(
    image: &Image2D,
    extend: bool,
    f: impl FnOnce(&Image2D) -> [Image2D; N],
) -> [Image2D; N] {
    if !extend {
        return f(image);
    }
    let (rows, cols) = image.dims();
    let out = f(&mirror_extend(image));
    out.map(|im| im.crop(0, 0, rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Spacing;

    fn sp() -> Spacing {
        Spacing::default()
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut im = Image2D::zeros(6, 5, sp());
        im.set(0, 0, 1.0);
        let f = dft2_forward(&im);
        for z in f.data() {
            assert!((z.re - 1.0).abs() < 1e-14 && z.im.abs() < 1e-14);
        }
    }

    #[test]
    fn depth_ramp_examples() {
        let r = depth_ramp(3, 2, 1.0).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
        let r = depth_ramp(4, 3, 0.0).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));
        let r = depth_ramp(5, 1, 2.0).unwrap();
        assert!((r.get(2, 0) - 0.25).abs() < 1e-15);
        assert!(depth_ramp(1, 4, 1.0).is_err());
    }

    #[test]
    fn log_gabor_gain_peaks_at_centre() {
        assert!((log_gabor_gain(1.0 / 24.0, 24.0, 0.55) - 1.0).abs() < 1e-15);
        assert_eq!(log_gabor_gain(0.0, 24.0, 0.55), 0.0);
        assert!(log_gabor_gain(0.2, 24.0, 0.55) < 1.0);
    }

    #[test]
    fn constant_image_band_is_zero() {
        let im = Image2D::filled(20, 17, sp(), 0.7);
        let (even, _) = log_gabor_bandpass(&im, &FilterConfig::default(), 0).unwrap();
        assert!(even.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centre_frequency_cosine_passes_unchanged() {
        let n = 48;
        let im = Image2D::from_fn(n, n, sp(), |_, c| (2.0 * PI * c as f64 / 24.0).cos());
        let (even, _) = log_gabor_bandpass(&im, &FilterConfig::default(), 0).unwrap();
        for (a, b) in even.data().iter().zip(im.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_config_and_scale_rejected() {
        let im = Image2D::zeros(8, 8, sp());
        let cfg = FilterConfig {
            min_wavelength: 1.5,
            ..Default::default()
        };
        assert!(matches!(log_gabor_bandpass(&im, &cfg, 0), Err(Error::Config(_))));
        assert!(log_gabor_bandpass(&im, &FilterConfig::default(), 3).is_err());
    }

    #[test]
    fn sine_derivative() {
        let n = 32;
        let k = 2.0 * PI / n as f64;
        let im = Image2D::from_fn(n, n, sp(), |_, c| (k * c as f64).sin());
        let d = spectral_derivatives(&im);
        for r in 0..n {
            for c in 0..n {
                assert!((d.gx.get(r, c) - k * (k * c as f64).cos()).abs() < 1e-10);
                assert!(d.gy.get(r, c).abs() < 1e-10);
                assert!((d.gxx.get(r, c) + k * k * (k * c as f64).sin()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_image_has_zero_derivatives() {
        let d = spectral_derivatives(&Image2D::filled(9, 12, sp(), 3.0));
        for f in [&d.gx, &d.gy, &d.gxx, &d.gxy, &d.gyy, &d.laplacian, &d.lap_x, &d.lap_y] {
            assert!(f.data().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn riesz_of_zero_is_zero() {
        let (m2, m3) = riesz_components(&Image2D::zeros(8, 8, sp()));
        assert!(m2.data().iter().chain(m3.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn mirror_extension_is_symmetric() {
        let im = Image2D::from_fn(3, 4, sp(), |r, c| (r * 10 + c) as f64);
        let e = mirror_extend(&im);
        assert_eq!(e.dims(), (6, 8));
        assert_eq!(e.get(3, 0), im.get(2, 0));
        assert_eq!(e.get(5, 7), im.get(0, 0));
        assert_eq!(e.crop(0, 0, 3, 4), im);
    }
}
