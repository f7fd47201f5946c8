//! Synthetic source- and target-domain phantoms for desk-scale runs.
//!
//! Both domains share the same vessel geometry generator: a seeded branching
//! random walk that grows a single connected tree of decreasing width until a
//! requested pixel coverage is reached. The source phantom renders the tree
//! as a bright structure on a dark, unevenly lit grayscale background; the
//! target phantom embeds it in a reflectance cube where vessel pixels absorb
//! strongly between 500 and 600 nm, so the two domains deliberately disagree
//! on contrast polarity.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{HsiCube, Mask, ReducedImage};
use crate::error::{Error, Result};

/// In-window absorption depth of vessel pixels when `noise_sigma` is small.
/// The generator raises the depth to `3.5 * noise_sigma` when necessary so
/// the vessel/background contrast stays above three noise sigmas.
pub const ABSORPTION_DEPTH: f64 = 0.25;

/// Parameters of one synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_bands: usize,
    pub wavelength_range_nm: (f64, f64),
    /// Fraction of pixels covered by vessels, hit within ±50% relative.
    pub vessel_density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_bands: 32,
            wavelength_range_nm: (400.0, 1000.0),
            vessel_density: 0.10,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid("phantom dimensions must be at least 16"));
        }
        if self.n_bands == 0 {
            return Err(Error::invalid("phantom needs at least one band"));
        }
        let (lo, hi) = self.wavelength_range_nm;
        if !(lo < hi) {
            return Err(Error::invalid("wavelength range low must be below high"));
        }
        if !(self.vessel_density > 0.0 && self.vessel_density < 1.0) {
            return Err(Error::invalid("vessel density must lie in (0, 1)"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be nonnegative"));
        }
        Ok(())
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        let (lo, hi) = self.wavelength_range_nm;
        if self.n_bands == 1 {
            return vec![lo];
        }
        let step = (hi - lo) / (self.n_bands - 1) as f64;
        (0..self.n_bands).map(|i| lo + step * i as f64).collect()
    }
}

/// One walker of the branching random walk.
struct Walker {
    y: f64,
    x: f64,
    dir: f64,
    radius: f64,
    remaining: usize,
}

/// Grows a single connected vessel tree covering ≈`density` of the image.
///
/// New branches always start from a point already on the tree, so the result
/// is one connected component by construction.
fn grow_vessel_tree(height: usize, width: usize, density: f64, rng: &mut ChaCha12Rng) -> Mask {
    let total = (height * width) as f64;
    let target = (density * total).max(1.0);
    let mut painted = Array2::<u8>::zeros((height, width));
    let mut covered = 0usize;
    // Centerline points available as branch anchors.
    let mut anchors: Vec<(f64, f64, f64)> = Vec::new(); // (y, x, radius at that point)

    let max_radius = ((height.min(width) as f64) / 28.0).clamp(1.2, 3.0);
    let walk_cap = (height.max(width) * 2).max(40);

    let paint_disk = |painted: &mut Array2<u8>, covered: &mut usize, cy: f64, cx: f64, r: f64| {
        let r_out = r.max(0.5);
        let y0 = (cy - r_out).floor().max(0.0) as usize;
        let y1 = ((cy + r_out).ceil() as usize).min(height - 1);
        let x0 = (cx - r_out).floor().max(0.0) as usize;
        let x1 = ((cx + r_out).ceil() as usize).min(width - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r_out * r_out && painted[[y, x]] == 0 {
                    painted[[y, x]] = 1;
                    *covered += 1;
                }
            }
        }
    };

    // Trunk: enter from a random border point heading inward.
    let trunk = {
        let side = rng.random_range(0..4u8);
        let (y, x, dir) = match side {
            0 => (1.0, rng.random_range(0.2..0.8) * width as f64, std::f64::consts::FRAC_PI_2),
            1 => (height as f64 - 2.0, rng.random_range(0.2..0.8) * width as f64, -std::f64::consts::FRAC_PI_2),
            2 => (rng.random_range(0.2..0.8) * height as f64, 1.0, 0.0),
            _ => (rng.random_range(0.2..0.8) * height as f64, width as f64 - 2.0, std::f64::consts::PI),
        };
        Walker { y, x, dir, radius: max_radius, remaining: walk_cap }
    };

    let mut queue = vec![trunk];
    let mut safety = 0usize;
    'grow: loop {
        safety += 1;
        if safety > 4000 {
            break;
        }
        let mut walker = match queue.pop() {
            Some(w) => w,
            None => {
                if covered as f64 >= target {
                    break;
                }
                // Re-seed from an existing anchor to stay connected.
                match anchors.as_slice() {
                    [] => break,
                    list => {
                        let (y, x, r) = list[rng.random_range(0..list.len())];
                        let dir = rng.random_range(0.0..std::f64::consts::TAU);
                        Walker {
                            y,
                            x,
                            dir,
                            radius: (r * 0.8).max(0.6),
                            remaining: walk_cap / 2,
                        }
                    }
                }
            }
        };

        while walker.remaining > 0 {
            walker.remaining -= 1;
            walker.dir += rng.random_range(-0.22..0.22);
            walker.y += walker.dir.sin();
            walker.x += walker.dir.cos();
            if walker.y < 1.0
                || walker.x < 1.0
                || walker.y > height as f64 - 2.0
                || walker.x > width as f64 - 2.0
            {
                break;
            }
            walker.radius = (walker.radius * 0.997).max(0.6);
            paint_disk(&mut painted, &mut covered, walker.y, walker.x, walker.radius);
            anchors.push((walker.y, walker.x, walker.radius));

            if covered as f64 >= target {
                break 'grow;
            }
            // Occasional branch, thinner than the parent.
            if walker.radius > 0.8 && rng.random::<f64>() < 0.035 {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                queue.push(Walker {
                    y: walker.y,
                    x: walker.x,
                    dir: walker.dir + sign * rng.random_range(0.5..1.1),
                    radius: (walker.radius * 0.75).max(0.6),
                    remaining: walker.remaining / 2 + 10,
                });
            }
        }
    }

    Mask::new(painted).expect("binary by construction")
}

/// Smooth absorption profile: full strength inside [500, 600] nm with
/// Gaussian falloff outside, so neighbouring windows see weaker contrast.
fn hemoglobin_absorption(wavelength_nm: f64) -> f64 {
    if (500.0..=600.0).contains(&wavelength_nm) {
        1.0
    } else {
        let d = if wavelength_nm < 500.0 {
            500.0 - wavelength_nm
        } else {
            wavelength_nm - 600.0
        };
        (-(d / 55.0).powi(2)).exp()
    }
}

/// Target-domain phantom: reflectance cube plus ground-truth vessel mask.
///
/// Background pixels share one smooth spectrum; vessel pixels subtract a
/// hemoglobin-like absorption dip centred on 500–600 nm whose in-window depth
/// is `max(ABSORPTION_DEPTH, 3.5 * noise_sigma)`. Per-voxel Gaussian noise is
/// added on top. Deterministic given the spec (including seed).
pub fn make_target_phantom(spec: &PhantomSpec) -> Result<(HsiCube, Mask)> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let mask = grow_vessel_tree(spec.height, spec.width, spec.vessel_density, &mut rng);

    let wavelengths = spec.wavelengths();
    let depth = ABSORPTION_DEPTH.max(3.5 * spec.noise_sigma);

    // Smooth tissue-like background spectrum rising towards the near infrared.
    let background: Vec<f64> = wavelengths
        .iter()
        .map(|&wl| 0.55 + 0.25 / (1.0 + (-(wl - 650.0) / 120.0).exp()))
        .collect();

    let mut data = Array3::<f32>::zeros((spec.height, spec.width, spec.n_bands));
    for y in 0..spec.height {
        for x in 0..spec.width {
            let vessel = mask.data()[[y, x]] == 1;
            for (b, &wl) in wavelengths.iter().enumerate() {
                let mut v = background[b];
                if vessel {
                    v -= depth * hemoglobin_absorption(wl);
                }
                data[[y, x, b]] = v as f32;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma).expect("sigma >= 0");
        for v in data.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).max(0.0) as f32;
        }
    }

    let cube = HsiCube::new(data, wavelengths)?;
    Ok((cube, mask))
}

/// Source-domain phantom: grayscale vessel image plus mask.
///
/// Vessels are rendered brighter than the background and a smooth
/// illumination gradient is added, giving the opposite contrast polarity to
/// the target domain. Deterministic given the spec.
pub fn make_source_phantom(spec: &PhantomSpec) -> Result<(ReducedImage, Mask)> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(2));
    let mask = grow_vessel_tree(spec.height, spec.width, spec.vessel_density, &mut rng);

    // Random linear illumination gradient over the field of view.
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let amplitude = rng.random_range(0.08..0.16);
    let (gy, gx) = (angle.sin(), angle.cos());
    let diag = ((spec.height * spec.height + spec.width * spec.width) as f64).sqrt();

    let mut data = Array2::<f32>::zeros((spec.height, spec.width));
    for y in 0..spec.height {
        for x in 0..spec.width {
            let t = (gy * y as f64 + gx * x as f64) / diag;
            let mut v = 0.30 + amplitude * t;
            if mask.data()[[y, x]] == 1 {
                v += 0.40;
            }
            data[[y, x]] = v as f32;
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma).expect("sigma >= 0");
        for v in data.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }

    Ok((ReducedImage::grayscale(data)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec { seed, ..PhantomSpec::default() }
    }

    #[test]
    fn target_phantom_is_deterministic() {
        let (a_cube, a_mask) = make_target_phantom(&spec(42)).unwrap();
        let (b_cube, b_mask) = make_target_phantom(&spec(42)).unwrap();
        assert_eq!(a_mask, b_mask);
        assert!(a_cube
            .data()
            .iter()
            .zip(b_cube.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn source_phantom_is_deterministic() {
        let (a_img, a_mask) = make_source_phantom(&spec(43)).unwrap();
        let (b_img, b_mask) = make_source_phantom(&spec(43)).unwrap();
        assert_eq!(a_mask, b_mask);
        assert_eq!(a_img, b_img);
    }

    fn band_window_mean(cube: &HsiCube, mask: &Mask, want_vessel: bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..cube.height() {
            for x in 0..cube.width() {
                if (mask.data()[[y, x]] == 1) != want_vessel {
                    continue;
                }
                for (b, &wl) in cube.wavelengths_nm().iter().enumerate() {
                    if (500.0..=600.0).contains(&wl) {
                        sum += cube.data()[[y, x, b]] as f64;
                        n += 1;
                    }
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn noiseless_contrast_equals_absorption_depth() {
        let mut s = spec(7);
        s.noise_sigma = 0.0;
        let (cube, mask) = make_target_phantom(&s).unwrap();
        let contrast = band_window_mean(&cube, &mask, false) - band_window_mean(&cube, &mask, true);
        assert!((contrast - ABSORPTION_DEPTH).abs() < 1e-6, "contrast {contrast}");
    }

    #[test]
    fn vessels_absorb_in_window_across_seeds() {
        for seed in 0..20 {
            let s = spec(seed);
            let (cube, mask) = make_target_phantom(&s).unwrap();
            let bg = band_window_mean(&cube, &mask, false);
            let vessel = band_window_mean(&cube, &mask, true);
            assert!(
                bg - vessel >= 3.0 * s.noise_sigma,
                "seed {seed}: bg {bg} vessel {vessel}"
            );
        }
    }

    #[test]
    fn source_vessels_brighter_than_background() {
        for seed in 0..20 {
            let (img, mask) = make_source_phantom(&spec(seed)).unwrap();
            let mut v_sum = 0.0;
            let mut v_n = 0;
            let mut b_sum = 0.0;
            let mut b_n = 0;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let val = img.data()[[y, x, 0]] as f64;
                    if mask.data()[[y, x]] == 1 {
                        v_sum += val;
                        v_n += 1;
                    } else {
                        b_sum += val;
                        b_n += 1;
                    }
                }
            }
            assert!(v_sum / v_n as f64 > b_sum / b_n as f64, "seed {seed}");
        }
    }

    /// Flood-fill connectivity oracle (8-connected).
    fn connected_components(mask: &Mask) -> usize {
        let (h, w) = (mask.height(), mask.width());
        let mut seen = Array2::<u8>::zeros((h, w));
        let mut components = 0;
        for sy in 0..h {
            for sx in 0..w {
                if mask.data()[[sy, sx]] == 0 || seen[[sy, sx]] == 1 {
                    continue;
                }
                components += 1;
                let mut stack = vec![(sy, sx)];
                seen[[sy, sx]] = 1;
                while let Some((y, x)) = stack.pop() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if mask.data()[[ny, nx]] == 1 && seen[[ny, nx]] == 0 {
                                seen[[ny, nx]] = 1;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
            }
        }
        components
    }

    #[test]
    fn vessel_tree_is_one_component() {
        for seed in 0..10 {
            let (_, mask) = make_source_phantom(&spec(seed)).unwrap();
            assert_eq!(connected_components(&mask), 1, "seed {seed}");
        }
    }

    #[test]
    fn coverage_within_half_relative_band() {
        for seed in 0..10 {
            let s = spec(seed);
            let (_, mask) = make_target_phantom(&s).unwrap();
            let cov = mask.coverage();
            assert!(
                cov >= 0.5 * s.vessel_density && cov <= 1.5 * s.vessel_density,
                "seed {seed}: coverage {cov}"
            );
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = PhantomSpec::default();
        s.height = 8;
        assert!(make_target_phantom(&s).is_err());
        let mut s = PhantomSpec::default();
        s.wavelength_range_nm = (900.0, 500.0);
        assert!(make_target_phantom(&s).is_err());
        let mut s = PhantomSpec::default();
        s.vessel_density = 0.0;
        assert!(make_source_phantom(&s).is_err());
    }
}
