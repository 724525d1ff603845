//! Frequency-domain texture highlighting.
//!
//! Images are transformed with a 2-D DFT, the zero frequency is moved to the
//! grid center at `(⌊h/2⌋, ⌊w/2⌋)`, a binary window mask is applied and the
//! result is transformed back. Masks are centered axis-aligned squares whose
//! side is `√ρ` of each image dimension.

use std::sync::Arc;

use image::RgbImage;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Real-valued single-channel grid, row-major (`data[row * width + col]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape {
                expected: format!("{width}x{height}={}", width * height),
                actual: data.len().to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// One channel of an RGB image scaled to `[0, 1]`.
    pub fn from_channel(img: &RgbImage, channel: usize) -> Self {
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[channel] as f64 / 255.0).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }
}

/// DC-centered complex spectrum of a grid.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    /// Grid coordinates (row, col) of the zero-frequency bin.
    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Low,
    High,
    Band,
}

/// Binary frequency window with the fractions it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqMask {
    pub width: usize,
    pub height: usize,
    pub kind: MaskKind,
    pub rho_l: Option<f64>,
    pub rho_h: Option<f64>,
    data: Vec<bool>,
}

impl FreqMask {
    pub fn all_ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            kind: MaskKind::Low,
            rho_l: Some(1.0),
            rho_h: None,
            data: vec![true; width * height],
        }
    }

    pub fn all_zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            kind: MaskKind::High,
            rho_l: None,
            rho_h: Some(1.0),
            data: vec![false; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn ones_fraction(&self) -> f64 {
        self.ones() as f64 / self.data.len() as f64
    }
}

/// Inclusive index window `[lo, hi]` along one axis of length `n`.
fn window(rho: f64, n: usize) -> (usize, usize) {
    let s = rho.sqrt();
    let lo = ((1.0 - s) / 2.0 * n as f64).floor() as usize;
    let hi = ((1.0 + s) / 2.0 * n as f64).floor() as usize;
    (lo.min(n - 1), hi.min(n - 1))
}

/// Centered square window: `true` where both frequency indices fall inside
/// `[(1-√ρ)/2·n, (1+√ρ)/2·n]`, endpoints floored.
pub fn make_mask(rho: f64, width: usize, height: usize) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("mask fraction {rho} outside [0, 1]")));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("mask dimensions must be positive"));
    }
    let (u0, u1) = window(rho, width);
    let (v0, v1) = window(rho, height);
    let mut data = vec![false; width * height];
    for v in v0..=v1 {
        for u in u0..=u1 {
            data[v * width + u] = true;
        }
    }
    Ok(data)
}

pub fn lowpass_mask(rho_l: f64, width: usize, height: usize) -> Result<FreqMask> {
    Ok(FreqMask {
        width,
        height,
        kind: MaskKind::Low,
        rho_l: Some(rho_l),
        rho_h: None,
        data: make_mask(rho_l, width, height)?,
    })
}

pub fn highpass_mask(rho_h: f64, width: usize, height: usize) -> Result<FreqMask> {
    let data = make_mask(rho_h, width, height)?
        .into_iter()
        .map(|b| !b)
        .collect();
    Ok(FreqMask {
        width,
        height,
        kind: MaskKind::High,
        rho_l: None,
        rho_h: Some(rho_h),
        data,
    })
}

/// Keeps the low-pass window of `rho_l` minus the core of `rho_h`.
pub fn bandpass_mask(rho_l: f64, rho_h: f64, width: usize, height: usize) -> Result<FreqMask> {
    if rho_l <= rho_h {
        return Err(Error::invalid(format!(
            "band-pass needs rho_l > rho_h, got {rho_l} <= {rho_h}"
        )));
    }
    let low = lowpass_mask(rho_l, width, height)?;
    let high = highpass_mask(rho_h, width, height)?;
    let data = low.data.iter().zip(&high.data).map(|(&a, &b)| a && b).collect();
    Ok(FreqMask {
        width,
        height,
        kind: MaskKind::Band,
        rho_l: Some(rho_l),
        rho_h: Some(rho_h),
        data,
    })
}

/// Planned 2-D transform for one grid size.
#[derive(Clone)]
pub struct Fft2d {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2d({}x{})", self.width, self.height)
    }
}

impl Fft2d {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            col_fwd: planner.plan_fft_forward(height),
            row_inv: planner.plan_fft_inverse(width),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        if (width, height) != (self.width, self.height) {
            return Err(Error::Shape {
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{width}x{height}"),
            });
        }
        Ok(())
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let (w, h) = (self.width, self.height);
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut t = transpose(buf, w, h);
        cols.process(&mut t);
        let back = transpose(&t, h, w);
        buf.copy_from_slice(&back);
    }

    pub fn forward(&self, x: &Grid) -> Result<Spectrum> {
        self.check(x.width, x.height)?;
        if let Some(i) = x.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite input at index {i}")));
        }
        let mut buf: Vec<Complex64> = x.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        Ok(Spectrum {
            width: x.width,
            height: x.height,
            data: shift(&buf, x.width, x.height, false),
        })
    }

    /// Undoes the centering and the transform; returns the complex result.
    pub fn inverse(&self, s: &Spectrum) -> Result<Vec<Complex64>> {
        self.check(s.width, s.height)?;
        let mut buf = shift(&s.data, s.width, s.height, true);
        self.transform(&mut buf, true);
        let norm = 1.0 / (s.width * s.height) as f64;
        buf.iter_mut().for_each(|c| *c *= norm);
        Ok(buf)
    }

    /// Masked inverse transform; real part and the largest imaginary magnitude.
    pub fn filter(&self, x: &Grid, mask: &FreqMask) -> Result<(Grid, f64)> {
        self.check(mask.width, mask.height)?;
        let mut s = self.forward(x)?;
        for (c, &keep) in s.data.iter_mut().zip(&mask.data) {
            if !keep {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        let out = self.inverse(&s)?;
        let max_imag = out.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        let data = out.into_iter().map(|c| c.re).collect();
        Ok((Grid::new(x.width, x.height, data)?, max_imag))
    }
}

fn transpose(buf: &[Complex64], w: usize, h: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); w * h];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = buf[r * w + c];
        }
    }
    out
}

/// `fftshift` (forward) or `ifftshift` (inverse) over both axes.
fn shift(buf: &[Complex64], w: usize, h: usize, inverse: bool) -> Vec<Complex64> {
    let (dr, dc) = (h / 2, w / 2);
    let mut out = vec![Complex64::new(0.0, 0.0); w * h];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = ((r + dr) % h, (c + dc) % w);
            if inverse {
                out[r * w + c] = buf[sr * w + sc];
            } else {
                out[sr * w + sc] = buf[r * w + c];
            }
        }
    }
    out
}

pub fn forward_spectrum(x: &Grid) -> Result<Spectrum> {
    Fft2d::new(x.width, x.height).forward(x)
}

/// Band-limited texture of `x` under `mask`; the real part of the inverse
/// transform is returned.
pub fn extract_texture(x: &Grid, mask: &FreqMask) -> Result<Grid> {
    if (x.width, x.height) != (mask.width, mask.height) {
        return Err(Error::Shape {
            expected: format!("{}x{}", mask.width, mask.height),
            actual: format!("{}x{}", x.width, x.height),
        });
    }
    Ok(Fft2d::new(x.width, x.height).filter(x, mask)?.0)
}

/// Per-channel texture of an RGB image with pixel values scaled to `[0, 1]`.
pub fn extract_texture_rgb(img: &RgbImage, mask: &FreqMask, fft: &Fft2d) -> Result<[Grid; 3]> {
    let t = |c| fft.filter(&Grid::from_channel(img, c), mask).map(|(g, _)| g);
    Ok([t(0)?, t(1)?, t(2)?])
}

/// Spectral energy of `x` inside `mask`, normalized so that the all-ones mask
/// gives the spatial energy (Parseval).
pub fn band_energy(x: &Grid, mask: &FreqMask) -> Result<f64> {
    let s = forward_spectrum(x)?;
    if (s.width, s.height) != (mask.width, mask.height) {
        return Err(Error::Shape {
            expected: format!("{}x{}", mask.width, mask.height),
            actual: format!("{}x{}", s.width, s.height),
        });
    }
    let e: f64 = s
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| m)
        .map(|(c, _)| c.norm_sqr())
        .sum();
    Ok(e / (x.width * x.height) as f64)
}

/// Mean per-channel band energy of an RGB image.
pub fn rgb_band_energy(img: &RgbImage, mask: &FreqMask) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..3 {
        total += band_energy(&Grid::from_channel(img, c), mask)?;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cosine(w: usize, h: usize, fu: f64, fv: f64, amp: f64) -> Grid {
        Grid::from_fn(w, h, |r, c| {
            amp * (2.0 * PI * (fu * c as f64 / w as f64 + fv * r as f64 / h as f64)).cos()
        })
    }

    #[test]
    fn constant_image_is_all_dc() {
        let x = Grid::new(16, 12, vec![3.0; 16 * 12]).unwrap();
        let s = forward_spectrum(&x).unwrap();
        let (cr, cc) = s.center();
        assert!((s.at(cr, cc).re - 3.0 * 16.0 * 12.0).abs() < 1e-9);
        for r in 0..12 {
            for c in 0..16 {
                if (r, c) != (cr, cc) {
                    assert!(s.at(r, c).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cosine_has_two_symmetric_bins() {
        // cos(2π(3c/32 + 5r/32)) has bins at ±(5, 3) around the center, each with
        // magnitude w·h/2.
        let x = cosine(32, 32, 3.0, 5.0, 1.0);
        let s = forward_spectrum(&x).unwrap();
        let (cr, cc) = s.center();
        let mut hits = vec![];
        for r in 0..32 {
            for c in 0..32 {
                if s.at(r, c).norm() > 1e-6 {
                    hits.push((r, c, s.at(r, c)));
                }
            }
        }
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().any(|&(r, c, _)| (r, c) == (cr + 5, cc + 3)));
        assert!(hits.iter().any(|&(r, c, _)| (r, c) == (cr - 5, cc - 3)));
        for (_, _, v) in hits {
            assert!((v.re - 512.0).abs() < 1e-9 && v.im.abs() < 1e-9);
        }
    }

    #[test]
    fn make_mask_degenerate_cases() {
        assert!(make_mask(1.0, 20, 30).unwrap().iter().all(|&b| b));
        let m = make_mask(0.0, 64, 64).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[32 * 64 + 32]);
        assert!(make_mask(-0.1, 8, 8).is_err());
        assert!(make_mask(1.1, 8, 8).is_err());
    }

    #[test]
    fn make_mask_paper_fraction() {
        let m = make_mask(0.0576, 100, 100).unwrap();
        let frac = m.iter().filter(|&&b| b).count() as f64 / 1e4;
        assert!((frac - 0.0576).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn bandpass_degenerate_and_errors() {
        let band = bandpass_mask(1.0, 0.0, 64, 64).unwrap();
        assert_eq!(band.ones(), 64 * 64 - 1);
        assert!(!band.at(32, 32));
        assert_eq!(highpass_mask(1.0, 10, 10).unwrap().ones(), 0);
        assert!(bandpass_mask(0.1, 0.1, 8, 8).is_err());
        assert!(bandpass_mask(0.01, 0.1, 8, 8).is_err());
    }

    #[test]
    fn bandpass_is_a_ring() {
        let (w, h) = (100, 100);
        let band = bandpass_mask(0.0576, 0.0036, w, h).unwrap();
        let low = lowpass_mask(0.0576, w, h).unwrap();
        let core = make_mask(0.0036, w, h).unwrap();
        let overlap = low
            .values()
            .iter()
            .zip(&core)
            .filter(|(&a, &b)| a && b)
            .count();
        assert_eq!(band.ones(), low.ones() - overlap);
        assert!(!band.at(50, 50));
        let frac = band.ones_fraction();
        assert!((frac - (0.0576 - 0.0036)).abs() < 0.02, "{frac}");
    }

    #[test]
    fn identity_and_annihilating_filters() {
        let x = Grid::from_fn(20, 14, |r, c| ((r * 7 + c * 3) % 11) as f64 - 4.0);
        let same = extract_texture(&x, &FreqMask::all_ones(20, 14)).unwrap();
        for (a, b) in same.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-9);
        }
        let zero = extract_texture(&x, &FreqMask::all_zeros(20, 14)).unwrap();
        assert!(zero.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dimension_mismatch_and_nonfinite() {
        let x = Grid::zeros(8, 8);
        assert!(extract_texture(&x, &FreqMask::all_ones(8, 9)).is_err());
        let mut y = Grid::zeros(4, 4);
        y.data[5] = f64::NAN;
        assert!(forward_spectrum(&y).is_err());
    }

    #[test]
    fn symmetric_mask_has_negligible_imaginary_part() {
        // √ρ·w/2 integral -> window symmetric about the center bin.
        let mask = bandpass_mask(0.25, 0.0625, 64, 64).unwrap();
        let x = Grid::from_fn(64, 64, |r, c| ((r * 13 + c * 29) % 17) as f64 / 17.0);
        let (_, imag) = Fft2d::new(64, 64).filter(&x, &mask).unwrap();
        assert!(imag <= 1e-9, "{imag}");
    }

    #[test]
    fn band_energy_of_all_ones_is_spatial_energy() {
        let x = cosine(32, 16, 2.0, 1.0, 0.5);
        let e = band_energy(&x, &FreqMask::all_ones(32, 16)).unwrap();
        assert!((e - x.energy()).abs() < 1e-9);
    }
}
