//! Per-channel intensity normalization into [0, 1].

use ndarray::ArrayViewMut2;
use serde::{Deserialize, Serialize};

use crate::data::ReducedImage;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormalizeMode {
    /// Affine map of each channel's [min, max] onto [0, 1].
    MinMax,
    /// Clip each channel to its [p_lo, p_hi] percentiles, then min-max.
    PercentileClip { p_lo: f64, p_hi: f64 },
}

/// Maps every channel into [0, 1]. A constant channel has no usable range
/// and is set to all zeros instead of raising.
pub fn normalize(image: &ReducedImage, mode: NormalizeMode) -> Result<ReducedImage> {
    let mut data = image.data().clone();
    let k = image.channels();
    for c in 0..k {
        let mut channel = data.slice_mut(ndarray::s![.., .., c]);
        match mode {
            NormalizeMode::MinMax => normalize_channel_minmax(&mut channel),
            NormalizeMode::PercentileClip { p_lo, p_hi } => {
                clip_channel_percentiles(&mut channel, p_lo, p_hi);
                normalize_channel_minmax(&mut channel);
            }
        }
    }
    ReducedImage::new(data, image.meaning())
}

pub(crate) fn normalize_channel_minmax(channel: &mut ArrayViewMut2<f32>) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in channel.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= 0.0 {
        channel.fill(0.0);
    } else {
        channel.mapv_inplace(|v| (v - lo) / range);
    }
}

fn clip_channel_percentiles(channel: &mut ArrayViewMut2<f32>, p_lo: f64, p_hi: f64) {
    let lo = percentile_of(channel.iter().copied(), p_lo);
    let hi = percentile_of(channel.iter().copied(), p_hi);
    channel.mapv_inplace(|v| v.clamp(lo, hi));
}

/// Linear-interpolation percentile (rank = p/100 · (n−1)), computed via
/// partial selection rather than a full sort.
fn percentile_of(values: impl Iterator<Item = f32>, p: f64) -> f32 {
    let mut vals: Vec<f32> = values.collect();
    debug_assert!(!vals.is_empty());
    let p = p.clamp(0.0, 100.0);
    let rank = p / 100.0 * (vals.len() - 1) as f64;
    let lo_idx = rank.floor() as usize;
    let frac = rank - rank.floor();
    let (_, lo_val, rest) = vals.select_nth_unstable_by(lo_idx, f32::total_cmp);
    let lo_val = *lo_val;
    if frac == 0.0 {
        return lo_val;
    }
    let hi_val = rest
        .iter()
        .copied()
        .min_by(f32::total_cmp)
        .unwrap_or(lo_val);
    lo_val + (hi_val - lo_val) * frac as f32
}

/// Convenience for raw 2-D arrays (used after spectral reduction).
pub(crate) fn minmax_2d(mut data: ndarray::Array2<f32>) -> ndarray::Array2<f32> {
    let mut view = data.view_mut();
    normalize_channel_minmax(&mut view);
    data
}
