//! Discrete Fourier transforms and contrast transfer function modulation.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Image;
use crate::scalar::Real;

/// Signed frequency of FFT bin `m` on an `n`-point axis (Nyquist maps to `-n/2`).
#[inline]
pub fn freq_index(m: usize, n: usize) -> i64 {
    if m < n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

/// Complex spectrum laid out like the image it came from, in FFT bin order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage<T> {
    pub height: usize,
    pub width: usize,
    pub pixel_size: T,
    pub data: Vec<Complex<T>>,
}

/// Planned unitary 2D transform pair for one image size.
///
/// Both directions carry a `1/sqrt(H W)` factor so that Parseval holds with
/// unit constant and `inverse(forward(x)) == x`.
pub struct Fft2<T: Real> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.height, self.width)
    }
}

fn check_pow2(n: usize, what: &str) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::config(format!("{what} must be a power of two, got {n}")));
    }
    Ok(())
}

impl<T: Real> Fft2<T> {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_pow2(height, "image height")?;
        check_pow2(width, "image width")?;
        let mut planner = FftPlanner::new();
        Ok(Fft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            col_fwd: planner.plan_fft_forward(height),
            row_inv: planner.plan_fft_inverse(width),
            col_inv: planner.plan_fft_inverse(height),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn run(&self, data: &mut [Complex<T>], forward: bool) {
        let (h, w) = (self.height, self.width);
        let (rows, cols) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        rows.process(data);
        let mut column = vec![Complex::new(T::zero(), T::zero()); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = data[r * w + c];
            }
            cols.process(&mut column);
            for r in 0..h {
                data[r * w + c] = column[r];
            }
        }
        let norm = T::one() / T::lit(((h * w) as f64).sqrt());
        for v in data.iter_mut() {
            *v *= norm;
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::input(format!(
                "transform planned for {}x{}, got {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image<T>) -> Result<SpectralImage<T>> {
        self.check(image.height, image.width)?;
        let mut data: Vec<Complex<T>> = image
            .data
            .iter()
            .map(|v| Complex::new(*v, T::zero()))
            .collect();
        self.run(&mut data, true);
        Ok(SpectralImage {
            height: image.height,
            width: image.width,
            pixel_size: image.pixel_size,
            data,
        })
    }

    /// Inverse transform keeping the real part.
    pub fn inverse(&self, spectrum: &SpectralImage<T>) -> Result<Image<T>> {
        self.check(spectrum.height, spectrum.width)?;
        let mut data = spectrum.data.clone();
        self.run(&mut data, false);
        Ok(Image {
            height: spectrum.height,
            width: spectrum.width,
            pixel_size: spectrum.pixel_size,
            data: data.into_iter().map(|c| c.re).collect(),
        })
    }
}

/// Unitary forward transform of a power-of-two image.
pub fn fft2<T: Real>(image: &Image<T>) -> Result<SpectralImage<T>> {
    Fft2::new(image.height, image.width)?.forward(image)
}

/// Unitary inverse transform (real part) of a power-of-two spectrum.
pub fn ifft2<T: Real>(spectrum: &SpectralImage<T>) -> Result<Image<T>> {
    Fft2::new(spectrum.height, spectrum.width)?.inverse(spectrum)
}

/// Microscope optics of one particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    pub enabled: bool,
    pub voltage_kv: f64,
    pub cs_mm: f64,
    pub amplitude_contrast: f64,
    pub defocus_u_a: f64,
    pub defocus_v_a: f64,
    pub astigmatism_angle_deg: f64,
    pub phase_shift_rad: f64,
    pub b_factor_a2: f64,
}

impl Default for CtfParams {
    fn default() -> Self {
        CtfParams {
            enabled: true,
            voltage_kv: 300.0,
            cs_mm: 2.7,
            amplitude_contrast: 0.1,
            defocus_u_a: 15000.0,
            defocus_v_a: 15000.0,
            astigmatism_angle_deg: 0.0,
            phase_shift_rad: 0.0,
            b_factor_a2: 0.0,
        }
    }
}

impl CtfParams {
    pub fn disabled() -> Self {
        CtfParams {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voltage_kv > 0.0 && self.voltage_kv.is_finite()) {
            return Err(Error::input("CTF voltage must be positive"));
        }
        if !(0.0..=1.0).contains(&self.amplitude_contrast) {
            return Err(Error::input("amplitude contrast must lie in [0, 1]"));
        }
        let rest = [
            self.cs_mm,
            self.defocus_u_a,
            self.defocus_v_a,
            self.astigmatism_angle_deg,
            self.phase_shift_rad,
            self.b_factor_a2,
        ];
        if rest.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("CTF parameters must be finite"));
        }
        Ok(())
    }

    /// Defocus along the frequency direction `theta` (radians).
    pub fn defocus_at(&self, theta: f64) -> f64 {
        let astig = self.astigmatism_angle_deg.to_radians();
        0.5 * (self.defocus_u_a
            + self.defocus_v_a
            + (self.defocus_u_a - self.defocus_v_a) * (2.0 * (theta - astig)).cos())
    }

    /// CTF value at spatial frequency `(kx, ky)` in 1/Å.
    pub fn value_at(&self, kx: f64, ky: f64) -> f64 {
        let lambda = electron_wavelength(self.voltage_kv);
        let k2 = kx * kx + ky * ky;
        let theta = ky.atan2(kx);
        let cs = self.cs_mm * 1e7;
        let chi = PI * lambda * self.defocus_at(theta) * k2 - 0.5 * PI * cs * lambda.powi(3) * k2 * k2
            + self.phase_shift_rad;
        let w = self.amplitude_contrast;
        let ctf = -(1.0 - w * w).sqrt() * chi.sin() - w * chi.cos();
        ctf * (-self.b_factor_a2 * k2 / 4.0).exp()
    }
}

/// Relativistic electron wavelength in Å for an accelerating voltage in kV.
pub fn electron_wavelength(voltage_kv: f64) -> f64 {
    let v = voltage_kv * 1e3;
    12.264_324_7 / (v * (1.0 + 0.978_466e-6 * v)).sqrt()
}

/// Evaluates the CTF on the frequency layout of an `height x width` transform.
pub fn ctf_evaluate<T: Real>(
    params: &CtfParams,
    height: usize,
    width: usize,
    pixel_size: f64,
) -> Result<Vec<T>> {
    params.validate()?;
    if !(pixel_size > 0.0) {
        return Err(Error::input("pixel size must be positive"));
    }
    let mut grid = Vec::with_capacity(height * width);
    for r in 0..height {
        let ky = freq_index(r, height) as f64 / (height as f64 * pixel_size);
        for c in 0..width {
            let kx = freq_index(c, width) as f64 / (width as f64 * pixel_size);
            grid.push(T::lit(params.value_at(kx, ky)));
        }
    }
    Ok(grid)
}

/// A CTF evaluated on a fixed image grid, ready to modulate images.
#[derive(Debug, Clone)]
pub struct CtfGrid<T: Real> {
    values: Vec<T>,
    fft: Arc<Fft2<T>>,
}

impl<T: Real> CtfGrid<T> {
    pub fn new(params: &CtfParams, height: usize, width: usize, pixel_size: f64) -> Result<Self> {
        let fft = Arc::new(Fft2::new(height, width)?);
        Self::with_plan(params, fft, pixel_size)
    }

    pub fn with_plan(params: &CtfParams, fft: Arc<Fft2<T>>, pixel_size: f64) -> Result<Self> {
        let (h, w) = fft.shape();
        Ok(CtfGrid {
            values: ctf_evaluate(params, h, w, pixel_size)?,
            fft,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// `ifft2(fft2(image) * ctf)`.
    pub fn apply(&self, image: &Image<T>) -> Result<Image<T>> {
        let mut spec = self.fft.forward(image)?;
        for (v, c) in spec.data.iter_mut().zip(&self.values) {
            *v *= *c;
        }
        self.fft.inverse(&spec)
    }
}

/// Modulates an image by the CTF; identity when the CTF is disabled.
pub fn apply_ctf<T: Real>(image: &Image<T>, params: &CtfParams, pixel_size: f64) -> Result<Image<T>> {
    if !params.enabled {
        return Ok(image.clone());
    }
    if image.height != image.width {
        return Err(Error::input("CTF modulation needs a square image"));
    }
    CtfGrid::new(params, image.height, image.width, pixel_size)?.apply(image)
}

/// Shares CTF grids between particles with identical optics.
#[derive(Debug)]
pub struct CtfCache<T: Real> {
    fft: Arc<Fft2<T>>,
    pixel_size: f64,
    grids: HashMap<[u64; 9], Arc<CtfGrid<T>>>,
}

impl<T: Real> CtfCache<T> {
    pub fn new(box_size: usize, pixel_size: f64) -> Result<Self> {
        Ok(CtfCache {
            fft: Arc::new(Fft2::new(box_size, box_size)?),
            pixel_size,
            grids: HashMap::new(),
        })
    }

    /// Grid for `params`, or `None` when the CTF is disabled.
    pub fn get(&mut self, params: &CtfParams) -> Result<Option<Arc<CtfGrid<T>>>> {
        if !params.enabled {
            return Ok(None);
        }
        let key = [
            params.voltage_kv,
            params.cs_mm,
            params.amplitude_contrast,
            params.defocus_u_a,
            params.defocus_v_a,
            params.astigmatism_angle_deg,
            params.phase_shift_rad,
            params.b_factor_a2,
            self.pixel_size,
        ]
        .map(f64::to_bits);
        if let Some(g) = self.grids.get(&key) {
            return Ok(Some(g.clone()));
        }
        let grid = Arc::new(CtfGrid::with_plan(params, self.fft.clone(), self.pixel_size)?);
        self.grids.insert(key, grid.clone());
        Ok(Some(grid))
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}
