//! On-disk formats: JSON-header cubes with raw float32 payloads, and PNG
//! masks / reduced images.
//!
//! Cube layout is band-sequential (BSQ): the raw file holds `bands` full
//! H×W planes of little-endian f32, one band after another. The header is a
//! small JSON document next to the payload:
//!
//! ```json
//! {
//!   "height": 64, "width": 64, "bands": 32,
//!   "dtype": "float32", "interleave": "BSQ", "byte_order": "little",
//!   "wavelengths_nm": [400.0, ...],
//!   "data_file": "cube_000.raw"
//! }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{ChannelMeaning, HsiCube, Mask, ReducedImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub interleave: String,
    pub byte_order: String,
    pub wavelengths_nm: Vec<f64>,
    pub data_file: String,
}

impl CubeHeader {
    fn validate(&self) -> Result<()> {
        if self.dtype != "float32" {
            return Err(Error::invalid(format!("unsupported dtype '{}'", self.dtype)));
        }
        if self.interleave != "BSQ" {
            return Err(Error::invalid(format!("unsupported interleave '{}'", self.interleave)));
        }
        if self.byte_order != "little" {
            return Err(Error::invalid(format!("unsupported byte order '{}'", self.byte_order)));
        }
        if self.wavelengths_nm.len() != self.bands {
            return Err(Error::BandCountMismatch {
                data_bands: self.bands,
                axis_bands: self.wavelengths_nm.len(),
            });
        }
        Ok(())
    }
}

/// Reads a cube from its JSON header; the raw payload path is resolved
/// relative to the header's directory.
pub fn load_cube(header_path: impl AsRef<Path>) -> Result<HsiCube> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: CubeHeader = serde_json::from_str(&text)?;
    header.validate()?;

    let raw_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data_file);
    let expected = (header.height * header.width * header.bands * 4) as u64;
    let meta = fs::metadata(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if meta.len() != expected {
        return Err(Error::CubeSizeMismatch {
            path: raw_path,
            expected,
            actual: meta.len(),
        });
    }

    let mut bytes = Vec::with_capacity(expected as usize);
    fs::File::open(&raw_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&raw_path, e))?;

    let mut values = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }

    // BSQ: values arrive as (C, H, W); permute into (H, W, C).
    let bsq = Array3::from_shape_vec((header.bands, header.height, header.width), values)
        .map_err(|e| Error::invalid(format!("raw payload shape: {e}")))?;
    let data = bsq.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
    HsiCube::new(data, header.wavelengths_nm)
}

/// Writes a cube as JSON header + raw BSQ payload. `data_file` is stored in
/// the header and resolved relative to the header's directory.
pub fn save_cube(cube: &HsiCube, header_path: impl AsRef<Path>, data_file: &str) -> Result<()> {
    let header_path = header_path.as_ref();
    let header = CubeHeader {
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        dtype: "float32".into(),
        interleave: "BSQ".into(),
        byte_order: "little".into(),
        wavelengths_nm: cube.wavelengths_nm().to_vec(),
        data_file: data_file.to_string(),
    };
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let raw_path = dir.join(data_file);
    let bsq = cube.data().view().permuted_axes([2, 0, 1]);
    let mut bytes = Vec::with_capacity(cube.height() * cube.width() * cube.bands() * 4);
    for &v in bsq.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(&raw_path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(&raw_path, e))?;

    let text = serde_json::to_string_pretty(&header)?;
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;
    Ok(())
}

/// Masks are 8-bit grayscale PNGs using 0 and 255.
pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (mask.height(), mask.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for (y, row) in mask.data().outer_iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            img.put_pixel(x as u32, y as u32, Luma([if v == 1 { 255 } else { 0 }]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Reads a mask PNG; any value above 127 counts as foreground.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let img = image::open(path.as_ref())?.into_luma8();
    let (w, h) = img.dimensions();
    let mut data = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        data[[y as usize, x as usize]] = u8::from(p.0[0] > 127);
    }
    Mask::new(data)
}

/// Reduced images are written as 16-bit grayscale or 8-bit RGB PNG; values
/// are assumed normalized to [0, 1] and are clamped on write.
pub fn save_reduced_png(image: &ReducedImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (image.height(), image.width());
    match image.meaning() {
        ChannelMeaning::Grayscale => {
            let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let v = image.data()[[y, x, 0]].clamp(0.0, 1.0);
                    img.put_pixel(x as u32, y as u32, Luma([(v * 65535.0).round() as u16]));
                }
            }
            img.save(path)?;
        }
        ChannelMeaning::Rgb => {
            let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [0, 1, 2].map(|c| {
                        (image.data()[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8
                    });
                    img.put_pixel(x as u32, y as u32, Rgb(px));
                }
            }
            img.save(path)?;
        }
    }
    Ok(())
}

/// Reads a grayscale (8- or 16-bit) or RGB PNG back into a [0, 1] image.
pub fn load_reduced_png(path: impl AsRef<Path>) -> Result<ReducedImage> {
    let img = image::open(path.as_ref())?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            let mut data = Array3::<f32>::zeros((h as usize, w as usize, 3));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[[y as usize, x as usize, c]] = p.0[c] as f32 / 255.0;
                }
            }
            ReducedImage::new(data, ChannelMeaning::Rgb)
        }
        other => {
            let gray = other.into_luma16();
            let (w, h) = gray.dimensions();
            let mut data = Array3::<f32>::zeros((h as usize, w as usize, 1));
            for (x, y, p) in gray.enumerate_pixels() {
                data[[y as usize, x as usize, 0]] = p.0[0] as f32 / 65535.0;
            }
            ReducedImage::new(data, ChannelMeaning::Grayscale)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn header_arithmetic_two_by_two_by_three() {
        // 2*2*3 f32 values = 48 bytes on disk.
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((2, 2, 3), |(y, x, c)| (y * 6 + x * 3 + c) as f32);
        let cube = HsiCube::new(data, vec![400.0, 500.0, 600.0]).unwrap();
        let header = dir.path().join("cube.json");
        save_cube(&cube, &header, "cube.raw").unwrap();
        assert_eq!(fs::metadata(dir.path().join("cube.raw")).unwrap().len(), 48);
        let loaded = load_cube(&header).unwrap();
        assert_eq!(loaded, cube);
    }

    #[test]
    fn size_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::<f32>::zeros((2, 2, 3));
        let cube = HsiCube::new(data, vec![400.0, 500.0, 600.0]).unwrap();
        let header = dir.path().join("cube.json");
        save_cube(&cube, &header, "cube.raw").unwrap();
        // Truncate the payload behind the header's back.
        fs::write(dir.path().join("cube.raw"), [0u8; 20]).unwrap();
        let err = load_cube(&header).unwrap_err();
        assert!(matches!(err, Error::CubeSizeMismatch { .. }));
    }

    #[test]
    fn non_monotonic_wavelengths_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::<f32>::zeros((2, 2, 3));
        let cube = HsiCube::new(data, vec![400.0, 500.0, 600.0]).unwrap();
        let header_path = dir.path().join("cube.json");
        save_cube(&cube, &header_path, "cube.raw").unwrap();
        // Corrupt the axis in the header.
        let text = fs::read_to_string(&header_path).unwrap();
        let text = text.replace("400.0", "500.0");
        fs::write(&header_path, text).unwrap();
        let err = load_cube(&header_path).unwrap_err();
        assert!(matches!(err, Error::NonMonotonicWavelengths { .. }));
    }

    #[test]
    fn cube_roundtrip_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5 {
            let (h, w, c) = (
                rng.random_range(2..9),
                rng.random_range(2..9),
                rng.random_range(2..12),
            );
            let data = Array3::from_shape_fn((h, w, c), |_| rng.random::<f32>() * 10.0 - 5.0);
            let mut wl: Vec<f64> = (0..c).map(|b| 400.0 + b as f64 * 10.0).collect();
            for v in wl.iter_mut() {
                *v += rng.random::<f64>();
            }
            let cube = HsiCube::new(data, wl).unwrap();
            let header = dir.path().join(format!("c{i}.json"));
            save_cube(&cube, &header, &format!("c{i}.raw")).unwrap();
            let loaded = load_cube(&header).unwrap();
            // Bit-exact: compare raw bit patterns, not approximate values.
            assert!(cube
                .data()
                .iter()
                .zip(loaded.data().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(cube.wavelengths_nm(), loaded.wavelengths_nm());
        }
    }

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array2::<u8>::zeros((5, 4));
        data[[0, 0]] = 1;
        data[[4, 3]] = 1;
        let mask = Mask::new(data).unwrap();
        let path = dir.path().join("m.png");
        save_mask_png(&mask, &path).unwrap();
        let loaded = load_mask_png(&path).unwrap();
        assert_eq!(&loaded, &mask);
    }
}
