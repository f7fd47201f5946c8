//! Training losses: Dice, soft centerline Dice, global and per-class
//! adversarial cross-entropies, cycle L1, plus pseudo-label and ensembling
//! helpers.
//!
//! Loss builders append to a [`Tape`] and return a scalar node, so they are
//! differentiable end to end. They are generic over the float type: training
//! uses `f32`, the finite-difference gradient checks in the test suite use
//! `f64`.

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};

use crate::autodiff::{area_downsample, Real, Tape, ValueId};
use crate::data::{Domain, Mask};
use crate::error::{Error, Result};

/// Dice loss `1 − (2·Σ(p·g) + s) / (Σp + Σg + s)` over the whole batch.
pub fn dice_loss<F: Real>(
    tape: &Tape<F>,
    pred: ValueId,
    gt: &ArrayD<F>,
    smooth: F,
) -> Result<ValueId> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", gt.shape()),
            actual: format!("{:?}", tape.shape(pred)),
        });
    }
    if !(smooth > F::zero()) {
        return Err(Error::invalid("dice smooth term must be positive"));
    }
    let gt_leaf = tape.leaf(gt.clone());
    let inter = tape.sum_all(tape.mul(pred, gt_leaf));
    let pred_sum = tape.sum_all(pred);
    let gt_sum = tape.sum_all(gt_leaf);
    let num = tape.add_const(tape.scale(inter, F::from_f64(2.0).unwrap()), smooth);
    let den = tape.add_const(tape.add(pred_sum, gt_sum), smooth);
    let ratio = tape.div(num, den);
    Ok(tape.add_const(tape.neg(ratio), F::one()))
}

/// Soft morphological erosion: the smaller of two stride-1 min pools with
/// 3×1 and 1×3 windows.
fn soft_erode<F: Real>(tape: &Tape<F>, x: ValueId) -> ValueId {
    let vertical = tape.min_pool_s1(x, 3, 1);
    let horizontal = tape.min_pool_s1(x, 1, 3);
    tape.min_elem(vertical, horizontal)
}

fn soft_dilate<F: Real>(tape: &Tape<F>, x: ValueId) -> ValueId {
    tape.max_pool_s1(x, 3, 3)
}

fn soft_open<F: Real>(tape: &Tape<F>, x: ValueId) -> ValueId {
    let eroded = soft_erode(tape, x);
    soft_dilate(tape, eroded)
}

/// Differentiable skeleton by iterated open-residual accumulation. The
/// input is a (B, 1, H, W) soft mask in [0, 1]; the output stays pointwise
/// at or below the input. `iterations` should be at least half the widest
/// structure; the default used across the crate is 10.
pub fn soft_skeleton<F: Real>(tape: &Tape<F>, mask: ValueId, iterations: usize) -> ValueId {
    let mut img = mask;
    let opened = soft_open(tape, img);
    let mut skel = tape.relu(tape.sub(img, opened));
    for _ in 0..iterations {
        img = soft_erode(tape, img);
        let opened = soft_open(tape, img);
        let delta = tape.relu(tape.sub(img, opened));
        // skel ← skel + relu(delta − skel·delta) accumulates new ridge
        // pixels without pushing existing ones above 1.
        let overlap = tape.mul(skel, delta);
        let update = tape.relu(tape.sub(delta, overlap));
        skel = tape.add(skel, update);
    }
    skel
}

/// Soft centerline-Dice score (not loss) of a soft prediction against a
/// hard mask, with smoothing 1 on both ratios.
fn soft_cldice_score<F: Real>(
    tape: &Tape<F>,
    pred: ValueId,
    gt_leaf: ValueId,
    iterations: usize,
) -> ValueId {
    let one = F::one();
    let skel_p = soft_skeleton(tape, pred, iterations);
    let skel_g = soft_skeleton(tape, gt_leaf, iterations);
    let tprec_num = tape.add_const(tape.sum_all(tape.mul(skel_p, gt_leaf)), one);
    let tprec_den = tape.add_const(tape.sum_all(skel_p), one);
    let tprec = tape.div(tprec_num, tprec_den);
    let tsens_num = tape.add_const(tape.sum_all(tape.mul(skel_g, pred)), one);
    let tsens_den = tape.add_const(tape.sum_all(skel_g), one);
    let tsens = tape.div(tsens_num, tsens_den);
    let num = tape.scale(tape.mul(tprec, tsens), F::from_f64(2.0).unwrap());
    let den = tape.add(tprec, tsens);
    tape.div(num, den)
}

/// Mixed topology loss: `alpha·dice + (1−alpha)·(1 − soft-clDice)`.
pub fn cldice_loss<F: Real>(
    tape: &Tape<F>,
    pred: ValueId,
    gt: &ArrayD<F>,
    iterations: usize,
    alpha: F,
) -> Result<ValueId> {
    if !(alpha >= F::zero() && alpha <= F::one()) {
        return Err(Error::invalid("clDice alpha must lie in [0, 1]"));
    }
    let dice = dice_loss(tape, pred, gt, F::one())?;
    let gt_leaf = tape.leaf(gt.clone());
    let cl = soft_cldice_score(tape, pred, gt_leaf, iterations);
    let topo = tape.add_const(tape.neg(cl), F::one());
    Ok(tape.add(tape.scale(dice, alpha), tape.scale(topo, F::one() - alpha)))
}

/// Binary cross-entropy of per-sample domain logits against the domain
/// label (source = 0, target = 1), averaged over the batch.
pub fn global_domain_loss<F: Real>(tape: &Tape<F>, logits: ValueId, domain: Domain) -> ValueId {
    let label = match domain {
        Domain::Source => F::zero(),
        Domain::Target => F::one(),
    };
    let shape = tape.shape(logits);
    let target = ArrayD::from_elem(ndarray::IxDyn(&shape), label);
    tape.bce_with_logits(logits, target)
}

fn check_class_probs<F: Real>(class_probs: &Array4<F>) -> Result<()> {
    let tol = F::from_f64(1e-3).unwrap();
    for lane in class_probs.lanes(Axis(1)) {
        let sum = lane.iter().fold(F::zero(), |a, &b| a + b);
        if (sum - F::one()).abs() > tol {
            return Err(Error::invalid(format!(
                "class probabilities must sum to 1 per pixel (got {sum:?})"
            )));
        }
    }
    Ok(())
}

/// Lays `class_probs` (B, K, h, w) into the requested half of a 2K-channel
/// label volume, zeros elsewhere.
fn half_space_target<F: Real>(class_probs: &Array4<F>, domain: Domain) -> Array4<F> {
    let (b, k, h, w) = class_probs.dim();
    let mut target = Array4::<F>::zeros((b, 2 * k, h, w));
    let offset = match domain {
        Domain::Source => 0,
        Domain::Target => k,
    };
    target
        .slice_mut(ndarray::s![.., offset..offset + k, .., ..])
        .assign(class_probs);
    target
}

fn check_disc_shapes<F: Real>(tape: &Tape<F>, disc_out: ValueId, class_probs: &Array4<F>) -> Result<()> {
    let shape = tape.shape(disc_out);
    let (b, k, h, w) = class_probs.dim();
    if shape != vec![b, 2 * k, h, w] {
        return Err(Error::ShapeMismatch {
            expected: format!("({b}, {}, {h}, {w})", 2 * k),
            actual: format!("{shape:?}"),
        });
    }
    Ok(())
}

/// Discriminator training objective: soft-label cross-entropy that places
/// each pixel's class distribution in the half of the 2K label space that
/// matches the batch's true domain.
pub fn fada_discriminator_loss<F: Real>(
    tape: &Tape<F>,
    disc_out: ValueId,
    class_probs: &Array4<F>,
    domain: Domain,
) -> Result<ValueId> {
    check_disc_shapes(tape, disc_out, class_probs)?;
    check_class_probs(class_probs)?;
    Ok(tape.soft_ce_ch(disc_out, half_space_target(class_probs, domain)))
}

/// Adversarial objective for the encoder on target batches: cross-entropy
/// against the *source* half, so target features are pushed to look
/// source-like class by class.
pub fn fada_adversarial_loss<F: Real>(
    tape: &Tape<F>,
    disc_out: ValueId,
    class_probs: &Array4<F>,
) -> Result<ValueId> {
    check_disc_shapes(tape, disc_out, class_probs)?;
    check_class_probs(class_probs)?;
    Ok(tape.soft_ce_ch(disc_out, half_space_target(class_probs, Domain::Source)))
}

/// Mean absolute reconstruction error.
pub fn cycle_l1<F: Real>(tape: &Tape<F>, recon: ValueId, original: ValueId) -> Result<ValueId> {
    if tape.shape(recon) != tape.shape(original) {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", tape.shape(original)),
            actual: format!("{:?}", tape.shape(recon)),
        });
    }
    Ok(tape.mean_all(tape.abs(tape.sub(recon, original))))
}

/// Soft pseudo-labels: the softmax map itself, optionally area-averaged down
/// to discriminator resolution and renormalized per pixel.
pub fn pseudo_labels<F: Real>(probs: &Array4<F>, down_to: Option<(usize, usize)>) -> Array4<F> {
    let (_, _, h, w) = probs.dim();
    let mut out = match down_to {
        None => probs.clone(),
        Some((oh, ow)) => area_downsample(&probs.view(), h / oh, w / ow),
    };
    for mut lane in out.lanes_mut(Axis(1)) {
        let sum = lane.iter().fold(F::zero(), |a, &b| a + b);
        if sum > F::zero() {
            lane.mapv_inplace(|v| v / sum);
        }
    }
    out
}

/// Two-class one-hot volume (background channel 0, vessel channel 1) from
/// hard masks, used as the source side of the per-class label space.
pub fn one_hot_masks<F: Real>(masks: &[&Array2<F>]) -> Array4<F> {
    assert!(!masks.is_empty());
    let (h, w) = masks[0].dim();
    let mut out = Array4::<F>::zeros((masks.len(), 2, h, w));
    for (bi, m) in masks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = m[[y, x]];
                out[[bi, 1, y, x]] = v;
                out[[bi, 0, y, x]] = F::one() - v;
            }
        }
    }
    out
}

/// Averages foreground probabilities across models and thresholds; a mean
/// exactly at the threshold counts as foreground.
pub fn ensemble_average(prob_maps: &[Array3<f32>], threshold: f32) -> Result<Mask> {
    if prob_maps.len() < 2 {
        return Err(Error::invalid("ensemble needs at least two probability maps"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("ensemble threshold must lie in (0, 1)"));
    }
    let dim = prob_maps[0].dim();
    if prob_maps.iter().any(|m| m.dim() != dim) {
        return Err(Error::ShapeMismatch {
            expected: format!("{dim:?}"),
            actual: "mixed prob-map shapes".into(),
        });
    }
    let (_k, h, w) = dim;
    let n = prob_maps.len() as f32;
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mean: f32 = prob_maps.iter().map(|m| m[[1, y, x]]).sum::<f32>() / n;
            out[[y, x]] = u8::from(mean >= threshold);
        }
    }
    Mask::new(out)
}

/// Hard threshold of a single (K, H, W) probability map.
pub fn threshold_probs(probs: &Array3<f32>, threshold: f32) -> Mask {
    let (_k, h, w) = probs.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = u8::from(probs[[1, y, x]] >= threshold);
        }
    }
    Mask::new(out).expect("binary by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn leaf4<F: Real>(tape: &Tape<F>, arr: Array4<F>) -> ValueId {
        tape.leaf(arr.into_dyn())
    }

    #[test]
    fn dice_perfect_prediction_is_zero() {
        let tape = Tape::<f64>::new();
        let mut gt = Array4::<f64>::zeros((1, 1, 4, 4));
        gt[[0, 0, 1, 1]] = 1.0;
        gt[[0, 0, 2, 2]] = 1.0;
        let pred = leaf4(&tape, gt.clone());
        for smooth in [1e-6, 1.0, 10.0] {
            let l = dice_loss(&tape, pred, &gt.clone().into_dyn(), smooth).unwrap();
            assert_eq!(tape.scalar(l), 0.0, "smooth {smooth}");
        }
    }

    #[test]
    fn dice_all_zero_prediction_closed_form() {
        let tape = Tape::<f64>::new();
        let mut gt = Array4::<f64>::zeros((1, 1, 4, 4));
        for i in 0..3 {
            gt[[0, 0, 0, i]] = 1.0;
        }
        let pred = leaf4(&tape, Array4::<f64>::zeros((1, 1, 4, 4)));
        let smooth = 1.0;
        let l = dice_loss(&tape, pred, &gt.into_dyn(), smooth).unwrap();
        // 1 − smooth/(N + smooth) with N = 3.
        assert!((tape.scalar(l) - (1.0 - smooth / (3.0 + smooth))).abs() < 1e-12);
    }

    #[test]
    fn dice_matches_direct_summation_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..5 {
            let pred = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.random::<f64>());
            let gt = Array4::from_shape_fn((1, 1, 8, 8), |_| f64::from(rng.random::<bool>()));
            let smooth = 1.0;
            let inter: f64 = (&pred * &gt).sum();
            let expected = 1.0 - (2.0 * inter + smooth) / (pred.sum() + gt.sum() + smooth);

            let tape = Tape::<f64>::new();
            let p = leaf4(&tape, pred);
            let l = dice_loss(&tape, p, &gt.into_dyn(), smooth).unwrap();
            assert!((tape.scalar(l) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let tape = Tape::<f64>::new();
        let pred = leaf4(&tape, Array4::<f64>::zeros((1, 1, 4, 4)));
        let gt = Array4::<f64>::zeros((1, 1, 4, 5)).into_dyn();
        assert!(dice_loss(&tape, pred, &gt, 1.0).is_err());
    }

    /// Direct sliding-window oracle for one erode/open/skeleton pipeline,
    /// independent of the tape ops.
    mod skeleton_oracle {
        use ndarray::Array2;

        fn window_min(x: &Array2<f64>, kh: usize, kw: usize) -> Array2<f64> {
            let (h, w) = x.dim();
            let (ph, pw) = (kh / 2, kw / 2);
            Array2::from_shape_fn((h, w), |(y, xx)| {
                let mut best = f64::INFINITY;
                for iy in y.saturating_sub(ph)..(y + kh - ph).min(h) {
                    for ix in xx.saturating_sub(pw)..(xx + kw - pw).min(w) {
                        best = best.min(x[[iy, ix]]);
                    }
                }
                best
            })
        }

        fn window_max(x: &Array2<f64>, kh: usize, kw: usize) -> Array2<f64> {
            let (h, w) = x.dim();
            let (ph, pw) = (kh / 2, kw / 2);
            Array2::from_shape_fn((h, w), |(y, xx)| {
                let mut best = f64::NEG_INFINITY;
                for iy in y.saturating_sub(ph)..(y + kh - ph).min(h) {
                    for ix in xx.saturating_sub(pw)..(xx + kw - pw).min(w) {
                        best = best.max(x[[iy, ix]]);
                    }
                }
                best
            })
        }

        fn erode(x: &Array2<f64>) -> Array2<f64> {
            let a = window_min(x, 3, 1);
            let b = window_min(x, 1, 3);
            ndarray::Zip::from(&a).and(&b).map_collect(|&p, &q| p.min(q))
        }

        fn open(x: &Array2<f64>) -> Array2<f64> {
            window_max(&erode(x), 3, 3)
        }

        pub fn skeleton(x: &Array2<f64>, iterations: usize) -> Array2<f64> {
            let mut img = x.clone();
            let mut skel = ndarray::Zip::from(&img)
                .and(&open(&img))
                .map_collect(|&a, &b| (a - b).max(0.0));
            for _ in 0..iterations {
                img = erode(&img);
                let delta = ndarray::Zip::from(&img)
                    .and(&open(&img))
                    .map_collect(|&a, &b| (a - b).max(0.0));
                skel = ndarray::Zip::from(&skel)
                    .and(&delta)
                    .map_collect(|&s, &d| s + (d - s * d).max(0.0));
            }
            skel
        }
    }

    fn run_soft_skeleton(mask: &Array2<f64>, iterations: usize) -> Array2<f64> {
        let (h, w) = mask.dim();
        let tape = Tape::<f64>::new();
        let m4 = mask
            .clone()
            .into_shape_with_order((1, 1, h, w))
            .unwrap();
        let id = soft_skeleton(&tape, leaf4(&tape, m4), iterations);
        tape.value(id)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .to_owned()
    }

    #[test]
    fn one_pixel_line_is_its_own_skeleton() {
        let mut mask = Array2::<f64>::zeros((7, 9));
        for x in 1..8 {
            mask[[3, x]] = 1.0;
        }
        let skel = run_soft_skeleton(&mask, 3);
        assert_eq!(skel, mask);
    }

    #[test]
    fn empty_mask_has_empty_skeleton() {
        let skel = run_soft_skeleton(&Array2::<f64>::zeros((6, 6)), 4);
        assert!(skel.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_wide_bar_reduces_to_center_row() {
        let mut mask = Array2::<f64>::zeros((9, 12));
        for y in 3..6 {
            for x in 1..11 {
                mask[[y, x]] = 1.0;
            }
        }
        let skel = run_soft_skeleton(&mask, 2);
        let oracle = skeleton_oracle::skeleton(&mask, 2);
        assert_eq!(skel, oracle);
        for y in 0..9 {
            for x in 0..12 {
                if skel[[y, x]] > 0.0 {
                    assert_eq!(y, 4, "skeleton pixel off the center row at ({y}, {x})");
                }
            }
        }
        assert!(skel.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn skeleton_matches_sliding_window_oracle_on_soft_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mask = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let skel = run_soft_skeleton(&mask, 3);
        let oracle = skeleton_oracle::skeleton(&mask, 3);
        for (a, b) in skel.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skeleton_stays_below_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mask = Array2::from_shape_fn((10, 10), |_| rng.random::<f64>());
        let skel = run_soft_skeleton(&mask, 10);
        for (s, m) in skel.iter().zip(mask.iter()) {
            assert!(*s <= *m + 1e-12);
            assert!(*s >= 0.0);
        }
    }

    #[test]
    fn cldice_loss_zero_on_perfect_hard_prediction() {
        let tape = Tape::<f64>::new();
        let mut gt = Array4::<f64>::zeros((1, 1, 8, 8));
        for x in 1..7 {
            gt[[0, 0, 4, x]] = 1.0;
        }
        let pred = leaf4(&tape, gt.clone());
        let l = cldice_loss(&tape, pred, &gt.into_dyn(), 5, 0.5).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn cldice_alpha_one_equals_dice() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let pred = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.random::<f64>());
        let gt = Array4::from_shape_fn((1, 1, 8, 8), |_| f64::from(rng.random::<bool>()));

        let tape = Tape::<f64>::new();
        let p = leaf4(&tape, pred.clone());
        let full = cldice_loss(&tape, p, &gt.clone().into_dyn(), 5, 1.0).unwrap();
        let dice = dice_loss(&tape, p, &gt.into_dyn(), 1.0).unwrap();
        assert!((tape.scalar(full) - tape.scalar(dice)).abs() < 1e-12);
    }

    #[test]
    fn global_domain_loss_values() {
        // Zero logit: ln 2 for either label.
        let tape = Tape::<f64>::new();
        let z = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1])));
        for domain in [Domain::Source, Domain::Target] {
            let l = global_domain_loss(&tape, z, domain);
            assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        // Large positive logit with target label saturates to ~0.
        let big = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1]), 30.0));
        let l = global_domain_loss(&tape, big, Domain::Target);
        assert!(tape.scalar(l) < 1e-8);
    }

    #[test]
    fn global_domain_loss_matches_per_sample_bce_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let logits: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let label = 1.0; // target
        let oracle: f64 = logits
            .iter()
            .map(|&x| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / logits.len() as f64;

        let tape = Tape::<f64>::new();
        let id = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[6, 1]), logits).unwrap());
        let l = global_domain_loss(&tape, id, Domain::Target);
        assert!((tape.scalar(l) - oracle).abs() < 1e-6);
    }

    #[test]
    fn fada_disc_loss_hand_example() {
        // One pixel, K=2, source sample with class_probs [1, 0]; the
        // discriminator softmax is [0.7, 0.1, 0.1, 0.1] → −ln 0.7.
        let tape = Tape::<f64>::new();
        let probs = [0.7, 0.1, 0.1, 0.1];
        let logits = Array4::from_shape_vec((1, 4, 1, 1), probs.iter().map(|p: &f64| p.ln()).collect())
            .unwrap();
        let id = leaf4(&tape, logits);
        let mut class_probs = Array4::<f64>::zeros((1, 2, 1, 1));
        class_probs[[0, 0, 0, 0]] = 1.0;
        let l = fada_discriminator_loss(&tape, id, &class_probs, Domain::Source).unwrap();
        assert!((tape.scalar(l) - (-0.7f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn fada_adversarial_uniform_example() {
        // Uniform discriminator output, class_probs [1, 0] → −ln 0.25.
        let tape = Tape::<f64>::new();
        let id = leaf4(&tape, Array4::<f64>::zeros((1, 4, 1, 1)));
        let mut class_probs = Array4::<f64>::zeros((1, 2, 1, 1));
        class_probs[[0, 0, 0, 0]] = 1.0;
        let l = fada_adversarial_loss(&tape, id, &class_probs).unwrap();
        assert!((tape.scalar(l) - (-0.25f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn fada_adversarial_decreases_with_source_mass() {
        // Moving softmax mass from the target half into the matching source
        // channel lowers the adversarial loss.
        let mut class_probs = Array4::<f64>::zeros((1, 2, 1, 1));
        class_probs[[0, 0, 0, 0]] = 1.0;
        let losses: Vec<f64> = [0.0f64, 1.0, 2.0]
            .iter()
            .map(|&boost| {
                let tape = Tape::<f64>::new();
                let mut logits = Array4::<f64>::zeros((1, 4, 1, 1));
                logits[[0, 0, 0, 0]] = boost;
                let id = leaf4(&tape, logits);
                let l = fada_adversarial_loss(&tape, id, &class_probs).unwrap();
                tape.scalar(l)
            })
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
    }

    #[test]
    fn fada_disc_loss_k1_reduces_to_weighted_bce() {
        // With K = 1 the 2K channels are [source, target]; soft-label CE on
        // a target sample equals BCE of the two-way softmax.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let logits = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let class_probs = Array4::<f64>::ones((2, 1, 3, 3));

        let mut oracle = 0.0;
        for b in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let (s, t) = (logits[[b, 0, y, x]], logits[[b, 1, y, x]]);
                    let z = s.exp() + t.exp();
                    oracle -= (t.exp() / z).ln();
                }
            }
        }
        oracle /= 18.0;

        let tape = Tape::<f64>::new();
        let id = leaf4(&tape, logits);
        let l = fada_discriminator_loss(&tape, id, &class_probs, Domain::Target).unwrap();
        assert!((tape.scalar(l) - oracle).abs() < 1e-9);
    }

    #[test]
    fn fada_loss_invariant_to_joint_spatial_permutation() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let logits = Array4::from_shape_fn((1, 4, 2, 2), |_| rng.random::<f64>());
        let mut class_probs = Array4::from_shape_fn((1, 2, 2, 2), |_| rng.random::<f64>() + 0.1);
        for mut lane in class_probs.lanes_mut(Axis(1)) {
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }

        let eval = |lg: &Array4<f64>, cp: &Array4<f64>| {
            let tape = Tape::<f64>::new();
            let id = leaf4(&tape, lg.clone());
            tape.scalar(fada_discriminator_loss(&tape, id, cp, Domain::Source).unwrap())
        };
        let base = eval(&logits, &class_probs);

        // Swap two pixel positions jointly in both volumes.
        let mut lg = logits.clone();
        let mut cp = class_probs.clone();
        for c in 0..4 {
            lg.swap([0, c, 0, 0], [0, c, 1, 1]);
        }
        for c in 0..2 {
            cp.swap([0, c, 0, 0], [0, c, 1, 1]);
        }
        assert!((eval(&lg, &cp) - base).abs() < 1e-12);
    }

    #[test]
    fn fada_rejects_unnormalized_class_probs() {
        let tape = Tape::<f64>::new();
        let id = leaf4(&tape, Array4::<f64>::zeros((1, 4, 1, 1)));
        let mut class_probs = Array4::<f64>::zeros((1, 2, 1, 1));
        class_probs[[0, 0, 0, 0]] = 0.6;
        class_probs[[0, 1, 0, 0]] = 0.2; // sums to 0.8
        assert!(fada_discriminator_loss(&tape, id, &class_probs, Domain::Source).is_err());
    }

    #[test]
    fn cycle_l1_basics() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let a = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random::<f64>());

        let tape = Tape::<f64>::new();
        let ida = leaf4(&tape, a.clone());
        let same = cycle_l1(&tape, ida, ida).unwrap();
        assert_eq!(tape.scalar(same), 0.0);

        let idb = leaf4(&tape, a.mapv(|v| v + 0.37));
        let offset = cycle_l1(&tape, idb, ida).unwrap();
        assert!((tape.scalar(offset) - 0.37).abs() < 1e-9);

        let b = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random::<f64>());
        let oracle = (&a - &b).mapv(f64::abs).sum() / 96.0;
        let idc = leaf4(&tape, b);
        let l = cycle_l1(&tape, idc, ida).unwrap();
        assert!((tape.scalar(l) - oracle).abs() < 1e-7);
    }

    #[test]
    fn pseudo_labels_identity_and_downsample() {
        let mut probs = Array4::<f64>::zeros((1, 2, 2, 2));
        // Diagonal foreground.
        probs[[0, 1, 0, 0]] = 1.0;
        probs[[0, 1, 1, 1]] = 1.0;
        probs[[0, 0, 0, 1]] = 1.0;
        probs[[0, 0, 1, 0]] = 1.0;

        let same = pseudo_labels(&probs, None);
        assert_eq!(same, probs);

        let down = pseudo_labels(&probs, Some((1, 1)));
        assert_eq!(down.dim(), (1, 2, 1, 1));
        assert!((down[[0, 1, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((down[[0, 0, 0, 0]] + down[[0, 1, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labels_downsample_stays_normalized() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut probs = Array4::from_shape_fn((2, 2, 8, 8), |_| rng.random::<f64>() + 0.05);
        for mut lane in probs.lanes_mut(Axis(1)) {
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let down = pseudo_labels(&probs, Some((2, 2)));
        for lane in down.lanes(Axis(1)) {
            assert!((lane.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn ensemble_average_rules() {
        let mk = |fg: f32| {
            let mut m = Array3::<f32>::zeros((2, 1, 1));
            m[[1, 0, 0]] = fg;
            m[[0, 0, 0]] = 1.0 - fg;
            m
        };
        // {0.2, 0.6, 0.7} → mean 0.5 → foreground at the default threshold.
        let mask = ensemble_average(&[mk(0.2), mk(0.6), mk(0.7)], 0.5).unwrap();
        assert_eq!(mask.data()[[0, 0]], 1);
        // Order must not matter.
        let mask2 = ensemble_average(&[mk(0.7), mk(0.2), mk(0.6)], 0.5).unwrap();
        assert_eq!(mask, mask2);
        // Identical maps = thresholding one map.
        let mask3 = ensemble_average(&[mk(0.4), mk(0.4)], 0.5).unwrap();
        assert_eq!(mask3.data()[[0, 0]], 0);
        // Fewer than two maps is an error.
        assert!(ensemble_average(&[mk(0.9)], 0.5).is_err());
    }
}
