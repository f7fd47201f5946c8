//! Hyperspectral cube: an H×W×C reflectance array with a wavelength axis.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Reflectance cube with one spectrum per pixel.
///
/// Data is stored `(H, W, C)` with the spectral axis last, so a pixel's
/// spectrum is contiguous. The wavelength axis is in nanometres and strictly
/// increasing; its length always equals the number of bands.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    data: Array3<f32>,
    wavelengths_nm: Vec<f64>,
}

impl HsiCube {
    pub fn new(data: Array3<f32>, wavelengths_nm: Vec<f64>) -> Result<Self> {
        let bands = data.shape()[2];
        if bands != wavelengths_nm.len() {
            return Err(Error::BandCountMismatch {
                data_bands: bands,
                axis_bands: wavelengths_nm.len(),
            });
        }
        check_strictly_increasing(&wavelengths_nm)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("cube data".into()));
        }
        Ok(Self { data, wavelengths_nm })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn wavelengths_nm(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    pub fn into_parts(self) -> (Array3<f32>, Vec<f64>) {
        (self.data, self.wavelengths_nm)
    }

    /// Spatial crop, keeping all bands. Bounds are checked by the caller.
    pub(crate) fn crop(&self, y: usize, x: usize, size: usize) -> HsiCube {
        let view = self.data.slice(ndarray::s![y..y + size, x..x + size, ..]);
        HsiCube {
            data: view.to_owned(),
            wavelengths_nm: self.wavelengths_nm.clone(),
        }
    }
}

pub(crate) fn check_strictly_increasing(axis: &[f64]) -> Result<()> {
    for (i, pair) in axis.windows(2).enumerate() {
        if pair[0] >= pair[1] {
            return Err(Error::NonMonotonicWavelengths {
                index: i + 1,
                prev: pair[0],
                next: pair[1],
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_band_count_mismatch() {
        let data = Array3::<f32>::zeros((2, 2, 3));
        let err = HsiCube::new(data, vec![400.0, 500.0]).unwrap_err();
        assert!(matches!(err, Error::BandCountMismatch { .. }));
    }

    #[test]
    fn rejects_non_monotonic_axis() {
        let data = Array3::<f32>::zeros((2, 2, 3));
        let err = HsiCube::new(data, vec![500.0, 500.0, 600.0]).unwrap_err();
        assert!(matches!(err, Error::NonMonotonicWavelengths { index: 1, .. }));
    }

    #[test]
    fn rejects_non_finite_data() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[0, 1, 1]] = f32::NAN;
        let err = HsiCube::new(data, vec![400.0, 500.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
