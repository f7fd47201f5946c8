//! Static spectral reduction: median windowing over wavelength ranges.
//!
//! A cube collapses to one channel by taking, per pixel, the median
//! reflectance over the bands inside a wavelength window, then min-max
//! normalizing. Vessels absorb strongly between 500 and 600 nm, so the
//! hemoglobin window yields high vessel/background contrast; three windows
//! stacked give an RGB-like composite.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{minmax_2d, ChannelMeaning, HsiCube, ReducedImage};
use crate::error::{Error, Result};

/// Inclusive wavelength interval in nanometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavelengthWindow {
    pub lo_nm: f64,
    pub hi_nm: f64,
}

impl WavelengthWindow {
    pub fn new(lo_nm: f64, hi_nm: f64) -> Result<Self> {
        if !(lo_nm < hi_nm) {
            return Err(Error::invalid(format!(
                "window bounds must satisfy lo < hi, got [{lo_nm}, {hi_nm}]"
            )));
        }
        Ok(Self { lo_nm, hi_nm })
    }

    /// Parses "lo:hi" in nanometres.
    pub fn parse(text: &str) -> Result<Self> {
        let (lo, hi) = text
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("window '{text}' is not of the form lo:hi")))?;
        let lo: f64 = lo
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad window bound '{lo}'")))?;
        let hi: f64 = hi
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad window bound '{hi}'")))?;
        Self::new(lo, hi)
    }
}

impl std::fmt::Display for WavelengthWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.lo_nm, self.hi_nm)
    }
}

/// The hemoglobin absorption window.
pub fn window_500_600() -> WavelengthWindow {
    WavelengthWindow { lo_nm: 500.0, hi_nm: 600.0 }
}

pub fn window_400_500() -> WavelengthWindow {
    WavelengthWindow { lo_nm: 400.0, hi_nm: 500.0 }
}

pub fn window_600_800() -> WavelengthWindow {
    WavelengthWindow { lo_nm: 600.0, hi_nm: 800.0 }
}

/// R ← 600–1000 nm, G ← 500–600 nm, B ← 400–500 nm.
pub fn default_rgb_windows() -> [WavelengthWindow; 3] {
    [
        WavelengthWindow { lo_nm: 600.0, hi_nm: 1000.0 },
        WavelengthWindow { lo_nm: 500.0, hi_nm: 600.0 },
        WavelengthWindow { lo_nm: 400.0, hi_nm: 500.0 },
    ]
}

/// Indices of the cube bands whose wavelength falls inside the window
/// (inclusive on both ends), in axis order.
pub fn band_indices(cube: &HsiCube, window: &WavelengthWindow) -> Result<Vec<usize>> {
    let indices: Vec<usize> = cube
        .wavelengths_nm()
        .iter()
        .enumerate()
        .filter(|(_, &wl)| wl >= window.lo_nm && wl <= window.hi_nm)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(Error::EmptyWindow { lo: window.lo_nm, hi: window.hi_nm });
    }
    Ok(indices)
}

/// Per-pixel median over the window's bands, before normalization.
/// An even band count takes the mean of the two middle values.
pub fn window_median_raw(cube: &HsiCube, window: &WavelengthWindow) -> Result<Array2<f32>> {
    let indices = band_indices(cube, window)?;
    let (h, w) = (cube.height(), cube.width());
    let mut out = Array2::<f32>::zeros((h, w));
    let mut scratch: Vec<f32> = Vec::with_capacity(indices.len());
    for y in 0..h {
        for x in 0..w {
            scratch.clear();
            for &b in &indices {
                scratch.push(cube.data()[[y, x, b]]);
            }
            out[[y, x]] = median_in_place(&mut scratch);
        }
    }
    Ok(out)
}

/// Median windowing: per-pixel median over the window, min-max normalized.
pub fn window_median(cube: &HsiCube, window: &WavelengthWindow) -> Result<ReducedImage> {
    let raw = window_median_raw(cube, window)?;
    ReducedImage::grayscale(minmax_2d(raw))
}

/// Three-window composite; channel `c` is `window_median` over `windows[c]`.
pub fn rgb_windowing(cube: &HsiCube, windows: &[WavelengthWindow; 3]) -> Result<ReducedImage> {
    let (h, w) = (cube.height(), cube.width());
    let mut data = ndarray::Array3::<f32>::zeros((h, w, 3));
    for (c, window) in windows.iter().enumerate() {
        let channel = minmax_2d(window_median_raw(cube, window)?);
        data.slice_mut(ndarray::s![.., .., c]).assign(&channel);
    }
    ReducedImage::new(data, ChannelMeaning::Rgb)
}

fn median_in_place(values: &mut [f32]) -> f32 {
    let n = values.len();
    debug_assert!(n > 0);
    let mid = n / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f32::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid]
            .iter()
            .copied()
            .max_by(f32::total_cmp)
            .expect("non-empty lower half");
        (lower + upper) / 2.0
    }
}
