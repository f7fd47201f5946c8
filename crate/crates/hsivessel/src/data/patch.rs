//! Deterministic raster-order patch extraction.

use crate::data::{SampleImage, SamplePair};
use crate::error::{Error, Result};

/// Splits a sample into a raster-order grid of `size`×`size` patches.
///
/// Grid positions advance by `stride`; when the last patch would overhang the
/// image it is shifted inward so every patch is full-size (no padding).
/// Masks are cropped identically.
pub fn extract_patches(pair: &SamplePair, size: usize, stride: usize) -> Result<Vec<SamplePair>> {
    let (h, w) = (pair.image().height(), pair.image().width());
    if size == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if size > h || size > w {
        return Err(Error::invalid(format!(
            "patch size {size} exceeds image dims {h}x{w}"
        )));
    }
    let ys = grid_positions(h, size, stride);
    let xs = grid_positions(w, size, stride);

    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            let image = match pair.image() {
                SampleImage::Reduced(im) => SampleImage::Reduced(im.crop(y, x, size)),
                SampleImage::Cube(c) => SampleImage::Cube(c.crop(y, x, size)),
            };
            let mask = pair.mask().map(|m| m.crop(y, x, size));
            let id = format!("{}_y{y}_x{x}", pair.id());
            out.push(SamplePair::new(image, mask, pair.domain(), id)?);
        }
    }
    Ok(out)
}

/// Start offsets along one axis: multiples of `stride`, with the final
/// position clamped to `len - size` so the last patch stays in bounds.
fn grid_positions(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = len - size;
    let mut positions = Vec::new();
    let mut p = 0;
    loop {
        if p >= last {
            positions.push(last);
            break;
        }
        positions.push(p);
        p += stride;
    }
    positions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, Mask, ReducedImage};
    use ndarray::{Array2, Array3};

    fn sample(h: usize, w: usize) -> SamplePair {
        let img = ReducedImage::new(
            Array3::from_shape_fn((h, w, 1), |(y, x, _)| (y * w + x) as f32),
            crate::data::ChannelMeaning::Grayscale,
        )
        .unwrap();
        let mask = Mask::new(Array2::from_shape_fn((h, w), |(y, x)| ((y + x) % 2) as u8)).unwrap();
        SamplePair::new(SampleImage::Reduced(img), Some(mask), Domain::Source, "img").unwrap()
    }

    #[test]
    fn exact_tiling_64() {
        let patches = extract_patches(&sample(64, 64), 32, 32).unwrap();
        assert_eq!(patches.len(), 4);
        for p in &patches {
            assert_eq!(p.image().height(), 32);
            assert_eq!(p.image().width(), 32);
        }
    }

    #[test]
    fn overhanging_row_is_shifted_inward() {
        // 65 rows with size 32, stride 32: rows 0, 32, then 33 (shifted inward).
        let patches = extract_patches(&sample(65, 64), 32, 32).unwrap();
        assert_eq!(patches.len(), 6);
        let ids: Vec<&str> = patches.iter().map(|p| p.id()).collect();
        assert!(ids.contains(&"img_y33_x0"));
        assert!(ids.contains(&"img_y33_x32"));
        // The shifted row covers rows 33..65 (inclusive bounds: 33..=64).
        assert!(!ids.iter().any(|id| id.starts_with("img_y64")));
    }

    #[test]
    fn patch_masks_equal_full_mask_crops() {
        let pair = sample(48, 40);
        let patches = extract_patches(&pair, 16, 16).unwrap();
        let full = pair.mask().unwrap();
        for p in &patches {
            // Recover the offsets from the id.
            let parts: Vec<&str> = p.id().rsplitn(3, '_').collect();
            let x: usize = parts[0][1..].parse().unwrap();
            let y: usize = parts[1][1..].parse().unwrap();
            let crop = full.crop(y, x, 16);
            assert_eq!(p.mask().unwrap(), &crop);
        }
    }

    #[test]
    fn oversize_patch_is_an_error() {
        assert!(extract_patches(&sample(16, 16), 32, 8).is_err());
    }
}
