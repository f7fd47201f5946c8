//! Training procedures: source pretraining, gradient-reversal domain
//! adaptation, per-class adversarial adaptation (alternating discriminator
//! and encoder steps), and the cycle-consistent learned-reduction variant.
//!
//! Every procedure is a pure function of (initial weights, data, config,
//! seed): batches are drawn from a seeded stream and all arithmetic is
//! single-threaded f32, so repeated runs produce bitwise-identical
//! [`StepRecord`] logs.
//!
//! Target-domain samples enter training as bare image arrays produced from
//! [`UnlabeledSample`]s; masks of target samples are simply not reachable
//! from here.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::data::{Domain, SampleImage, SamplePair, UnlabeledSample};
use crate::error::{Error, Result};
use crate::losses::{
    cldice_loss, cycle_l1, dice_loss, fada_adversarial_loss, fada_discriminator_loss,
    global_domain_loss, one_hot_masks, pseudo_labels,
};
use crate::metrics::SKELETON_ITERATIONS;
use crate::models::{
    batch_images, grl, DomainClassifier, FadaDiscriminator, GeneratorF, GeneratorG, GrlLambda,
    SegNet,
};
use crate::nn::Adam;
use crate::reduce::{rgb_windowing, window_median, WavelengthWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    GrlDa,
    Fada,
    FadaCycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    Dice,
    CLDice { alpha: f64 },
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReductionCfg {
    /// Median windowing with one window (grayscale) or three (RGB).
    StaticWindow(Vec<WavelengthWindow>),
    LearnedCnn,
    Learned1x1,
}

impl ReductionCfg {
    pub fn out_channels(&self) -> usize {
        match self {
            ReductionCfg::StaticWindow(ws) => ws.len(),
            ReductionCfg::LearnedCnn | ReductionCfg::Learned1x1 => 1,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, ReductionCfg::LearnedCnn | ReductionCfg::Learned1x1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaSchedule {
    Constant(f64),
    /// Smooth ramp from 0 to `v_max` over the run:
    /// `v_max · (2 / (1 + e^{−10·s/S}) − 1)`.
    Ramp(f64),
}

/// One training-run configuration; presets for the published approaches live
/// in the experiment harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub lr_gen: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub grl_lambda_schedule: LambdaSchedule,
    pub loss: LossKind,
    pub reduction: ReductionCfg,
    pub cycle_weight: f64,
    pub adv_weight: f64,
    pub seed: u64,
    pub pretrained_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            lr_seg: 1e-3,
            lr_disc: 1e-3,
            lr_gen: 1e-3,
            batch_size: 4,
            steps: 300,
            grl_lambda_schedule: LambdaSchedule::Ramp(1.0),
            loss: LossKind::Dice,
            reduction: ReductionCfg::StaticWindow(vec![crate::reduce::window_500_600()]),
            cycle_weight: 1.0,
            adv_weight: 0.1,
            seed: 0,
            pretrained_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_seg <= 0.0 || self.lr_disc <= 0.0 || self.lr_gen <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.adv_weight < 0.0 || self.cycle_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let LossKind::CLDice { alpha } = self.loss {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config("clDice alpha must lie in [0, 1]".into()));
            }
        }
        if self.stage == Stage::FadaCycle && !self.reduction.is_learned() {
            return Err(Error::Config(
                "cycle training requires a learned reduction".into(),
            ));
        }
        if let ReductionCfg::StaticWindow(ws) = &self.reduction {
            if ws.len() != 1 && ws.len() != 3 {
                return Err(Error::Config(
                    "static reduction takes one window or three".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-step loss trace; absent terms are recorded as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub seg_loss: f32,
    pub disc_loss: f32,
    pub adv_loss: f32,
    pub cycle_loss: f32,
    /// Target-cube reconstruction term of `cycle_loss`.
    #[serde(default)]
    pub cycle_target_loss: f32,
    /// Source-image reconstruction term of `cycle_loss`.
    #[serde(default)]
    pub cycle_source_loss: f32,
    pub grl_lambda: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_ndjson(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for record in &self.records {
            let line = serde_json::to_string(record)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_ndjson(path: impl AsRef<Path>) -> Result<TrainLog> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(TrainLog { records })
    }

    pub fn all_finite(&self) -> bool {
        self.records.iter().all(|r| {
            r.seg_loss.is_finite()
                && r.disc_loss.is_finite()
                && r.adv_loss.is_finite()
                && r.cycle_loss.is_finite()
        })
    }
}

/// GRL schedule evaluation.
pub fn lambda_at(schedule: &LambdaSchedule, step: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} outside schedule range 0..={total_steps}"
        )));
    }
    Ok(match schedule {
        LambdaSchedule::Constant(v) => *v,
        LambdaSchedule::Ramp(v_max) => {
            let progress = if total_steps == 0 { 1.0 } else { step as f64 / total_steps as f64 };
            v_max * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
        }
    })
}

/// A source sample prepared for training: normalized image plus float mask.
#[derive(Debug, Clone)]
pub struct SourceSample {
    pub image: Array3<f32>,
    pub mask: Array2<f32>,
    pub id: String,
}

pub fn prepare_source(pairs: &[SamplePair]) -> Result<Vec<SourceSample>> {
    pairs
        .iter()
        .map(|p| {
            let mask = p
                .mask()
                .ok_or_else(|| Error::UnmaskedSource(p.id().to_string()))?
                .to_f32();
            let image = match p.image() {
                SampleImage::Reduced(im) => im.data().clone(),
                SampleImage::Cube(_) => {
                    return Err(Error::invalid(format!(
                        "source sample '{}' must be a reduced image",
                        p.id()
                    )))
                }
            };
            Ok(SourceSample { image, mask, id: p.id().to_string() })
        })
        .collect()
}

/// Applies a static window reduction to unlabeled target cubes.
pub fn prepare_target_static(
    samples: &[UnlabeledSample],
    windows: &[WavelengthWindow],
) -> Result<Vec<Array3<f32>>> {
    samples
        .iter()
        .map(|s| match &s.image {
            SampleImage::Cube(cube) => {
                let reduced = match windows {
                    [w] => window_median(cube, w)?,
                    [r, g, b] => rgb_windowing(cube, &[*r, *g, *b])?,
                    _ => return Err(Error::invalid("expected one window or three")),
                };
                Ok(reduced.into_data())
            }
            SampleImage::Reduced(im) => Ok(im.data().clone()),
        })
        .collect()
}

/// Extracts raw (H, W, C) cube arrays for learned reduction.
pub fn prepare_target_cubes(samples: &[UnlabeledSample]) -> Result<Vec<Array3<f32>>> {
    samples
        .iter()
        .map(|s| match &s.image {
            SampleImage::Cube(cube) => Ok(cube.data().clone()),
            SampleImage::Reduced(_) => Err(Error::invalid(
                "learned reduction needs hyperspectral target samples",
            )),
        })
        .collect()
}

struct BatchSampler {
    rng: ChaCha12Rng,
    n: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(seed: u64, n: usize, batch: usize) -> Self {
        Self { rng: ChaCha12Rng::seed_from_u64(seed), n, batch }
    }

    fn next(&mut self) -> Vec<usize> {
        (0..self.batch).map(|_| self.rng.random_range(0..self.n)).collect()
    }
}

fn stack_source(samples: &[SourceSample], idx: &[usize]) -> (Array4<f32>, Array4<f32>) {
    let images: Vec<&Array3<f32>> = idx.iter().map(|&i| &samples[i].image).collect();
    let input = batch_images(&images);
    let (h, w) = samples[idx[0]].mask.dim();
    let mut masks = Array4::<f32>::zeros((idx.len(), 1, h, w));
    for (bi, &i) in idx.iter().enumerate() {
        masks
            .index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&samples[i].mask);
    }
    (input, masks)
}

fn stack_targets(images: &[Array3<f32>], idx: &[usize]) -> Array4<f32> {
    let refs: Vec<&Array3<f32>> = idx.iter().map(|&i| &images[i]).collect();
    batch_images(&refs)
}

/// Supervised segmentation loss on the tape per the configured kind.
fn seg_loss_on(
    tape: &Tape<f32>,
    probs: ValueId,
    logits: ValueId,
    masks: &Array4<f32>,
    kind: &LossKind,
) -> Result<ValueId> {
    let gt = masks.clone().into_dyn();
    match kind {
        LossKind::Dice => {
            let fg = tape.select_ch(probs, 1);
            dice_loss(tape, fg, &gt, 1.0)
        }
        LossKind::CLDice { alpha } => {
            let fg = tape.select_ch(probs, 1);
            cldice_loss(tape, fg, &gt, SKELETON_ITERATIONS, *alpha as f32)
        }
        LossKind::Bce => {
            let fg_logit = tape.select_ch(logits, 1);
            let bg_logit = tape.select_ch(logits, 0);
            let margin = tape.sub(fg_logit, bg_logit);
            Ok(tape.bce_with_logits(margin, gt))
        }
    }
}

/// Inference pass over a batch: class probabilities and deepest features as
/// plain arrays, no gradient bookkeeping.
fn forward_no_grad(net: &SegNet, input: &Array4<f32>) -> Result<(Array4<f32>, Array4<f32>)> {
    let tape = Tape::<f32>::inference();
    let id = tape.leaf(input.clone().into_dyn());
    let out = net.forward(&tape, id)?;
    let probs = tape.value(out.probs).into_dimensionality::<ndarray::Ix4>().expect("BCHW");
    let feat = tape.value(out.feature).into_dimensionality::<ndarray::Ix4>().expect("BCHW");
    Ok((probs, feat))
}

fn salt(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

/// Supervised pretraining on the source domain.
pub fn pretrain(net: &mut SegNet, source: &[SourceSample], cfg: &TrainConfig) -> Result<TrainLog> {
    if source.is_empty() {
        return Err(Error::invalid("pretraining needs source samples"));
    }
    let mut sampler = BatchSampler::new(salt(cfg.seed, 1), source.len(), cfg.batch_size);
    let mut opt = Adam::new(cfg.lr_seg as f32);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let idx = sampler.next();
        let (input, masks) = stack_source(source, &idx);

        let tape = Tape::<f32>::new();
        let x = tape.leaf(input.into_dyn());
        let out = net.forward(&tape, x)?;
        let loss = seg_loss_on(&tape, out.probs, out.logits, &masks, &cfg.loss)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        opt.step(net, &tape.param_grads(&grads));

        log.records.push(StepRecord {
            step,
            seg_loss: value,
            disc_loss: 0.0,
            adv_loss: 0.0,
            cycle_loss: 0.0,
            cycle_target_loss: 0.0,
            cycle_source_loss: 0.0,
            grl_lambda: 0.0,
        });
    }
    Ok(log)
}

/// Gradient-reversal domain adaptation: one joint step per iteration
/// minimizes the source segmentation loss plus the weighted domain loss;
/// the reversal layer hands the encoder the negated domain gradient.
pub fn train_grl_da(
    net: &mut SegNet,
    domain_clf: &mut DomainClassifier,
    source: &[SourceSample],
    target: &[Array3<f32>],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("domain adaptation needs both domains"));
    }
    let mut src_sampler = BatchSampler::new(salt(cfg.seed, 2), source.len(), cfg.batch_size);
    let mut tgt_sampler = BatchSampler::new(salt(cfg.seed, 3), target.len(), cfg.batch_size);
    let mut opt_seg = Adam::new(cfg.lr_seg as f32);
    let mut opt_clf = Adam::new(cfg.lr_disc as f32);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let lambda = lambda_at(&cfg.grl_lambda_schedule, step, cfg.steps)? as f32;
        let lam = GrlLambda::new(lambda)?;
        let (src_input, masks) = stack_source(source, &src_sampler.next());
        let tgt_input = stack_targets(target, &tgt_sampler.next());

        let tape = Tape::<f32>::new();
        let xs = tape.leaf(src_input.into_dyn());
        let out_s = net.forward(&tape, xs)?;
        let seg = seg_loss_on(&tape, out_s.probs, out_s.logits, &masks, &cfg.loss)?;

        let logit_s = domain_clf.forward(&tape, grl(&tape, out_s.feature, lam));
        let dom_s = global_domain_loss(&tape, logit_s, Domain::Source);

        let xt = tape.leaf(tgt_input.into_dyn());
        let out_t = net.forward(&tape, xt)?;
        let logit_t = domain_clf.forward(&tape, grl(&tape, out_t.feature, lam));
        let dom_t = global_domain_loss(&tape, logit_t, Domain::Target);

        let dom = tape.scale(tape.add(dom_s, dom_t), 0.5);
        let total = tape.add(seg, tape.scale(dom, cfg.adv_weight as f32));

        let (seg_v, dom_v) = (tape.scalar(seg), tape.scalar(dom));
        let grads = tape.backward(total);
        let by_name = tape.param_grads(&grads);
        opt_seg.step(net, &by_name);
        opt_clf.step(domain_clf, &by_name);

        log.records.push(StepRecord {
            step,
            seg_loss: seg_v,
            disc_loss: dom_v,
            adv_loss: 0.0,
            cycle_loss: 0.0,
            cycle_target_loss: 0.0,
            cycle_source_loss: 0.0,
            grl_lambda: lambda,
        });
    }
    Ok(log)
}

/// Downsampled per-class label volumes for the discriminator resolution.
fn disc_labels(
    masks: &Array4<f32>,
    probs_t: &Array4<f32>,
    feat_dims: (usize, usize),
) -> (Array4<f32>, Array4<f32>) {
    let mask_views: Vec<Array2<f32>> = (0..masks.dim().0)
        .map(|b| masks.index_axis(Axis(0), b).index_axis(Axis(0), 0).to_owned())
        .collect();
    let mask_refs: Vec<&Array2<f32>> = mask_views.iter().collect();
    let onehot = one_hot_masks(&mask_refs);
    let labels_src = pseudo_labels(&onehot, Some(feat_dims));
    let labels_tgt = pseudo_labels(probs_t, Some(feat_dims));
    (labels_src, labels_tgt)
}

/// Per-class adversarial adaptation with alternating updates: (a) the
/// discriminator learns to place detached source/target features in the
/// correct half of the 2K label space; (b) the encoder and segmentation head
/// minimize the source loss plus the weighted adversarial term that pushes
/// target features towards the source half, class-weighted by soft
/// pseudo-labels.
pub fn train_fada(
    net: &mut SegNet,
    disc: &mut FadaDiscriminator,
    source: &[SourceSample],
    target: &[Array3<f32>],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("domain adaptation needs both domains"));
    }
    let mut src_sampler = BatchSampler::new(salt(cfg.seed, 4), source.len(), cfg.batch_size);
    let mut tgt_sampler = BatchSampler::new(salt(cfg.seed, 5), target.len(), cfg.batch_size);
    let mut opt_seg = Adam::new(cfg.lr_seg as f32);
    let mut opt_disc = Adam::new(cfg.lr_disc as f32);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let (src_input, masks) = stack_source(source, &src_sampler.next());
        let tgt_input = stack_targets(target, &tgt_sampler.next());

        // (a) Discriminator step on detached features.
        let (_, feat_s) = forward_no_grad(net, &src_input)?;
        let (probs_t, feat_t) = forward_no_grad(net, &tgt_input)?;
        let feat_dims = (feat_s.dim().2, feat_s.dim().3);
        let (labels_src, labels_tgt) = disc_labels(&masks, &probs_t, feat_dims);

        let tape_d = Tape::<f32>::new();
        let fs = tape_d.leaf(feat_s.into_dyn());
        let ft = tape_d.leaf(feat_t.into_dyn());
        let d_s = fada_discriminator_loss(&tape_d, disc.forward(&tape_d, fs), &labels_src, Domain::Source)?;
        let d_t = fada_discriminator_loss(&tape_d, disc.forward(&tape_d, ft), &labels_tgt, Domain::Target)?;
        let d_loss = tape_d.scale(tape_d.add(d_s, d_t), 0.5);
        let d_value = tape_d.scalar(d_loss);
        let d_grads = tape_d.backward(d_loss);
        let d_by_name = tape_d.param_grads(&d_grads);
        debug_assert!(
            d_by_name.keys().all(|k| !k.starts_with("seg.")),
            "encoder must receive no gradient in the discriminator step"
        );
        opt_disc.step(disc, &d_by_name);

        // (b) Encoder/segmenter step.
        let tape = Tape::<f32>::new();
        let xs = tape.leaf(src_input.into_dyn());
        let out_s = net.forward(&tape, xs)?;
        let seg = seg_loss_on(&tape, out_s.probs, out_s.logits, &masks, &cfg.loss)?;

        let xt = tape.leaf(tgt_input.into_dyn());
        let out_t = net.forward(&tape, xt)?;
        let disc_out_t = disc.forward(&tape, out_t.feature);
        let adv = fada_adversarial_loss(&tape, disc_out_t, &labels_tgt)?;

        let total = tape.add(seg, tape.scale(adv, cfg.adv_weight as f32));
        let (seg_v, adv_v) = (tape.scalar(seg), tape.scalar(adv));
        let grads = tape.backward(total);
        opt_seg.step(net, &tape.param_grads(&grads));

        log.records.push(StepRecord {
            step,
            seg_loss: seg_v,
            disc_loss: d_value,
            adv_loss: adv_v,
            cycle_loss: 0.0,
            cycle_target_loss: 0.0,
            cycle_source_loss: 0.0,
            grl_lambda: 0.0,
        });
    }
    Ok(log)
}

/// Per-class adversarial adaptation with learnable dimensionality reduction.
/// Target cubes flow through generator G before segmentation; both cycle
/// reconstructions (cube → G → F → cube and image → F → G → image) are
/// penalized with L1 and weighted by `cycle_weight`.
pub fn train_fada_cycle(
    net: &mut SegNet,
    disc: &mut FadaDiscriminator,
    gen_g: &mut GeneratorG,
    gen_f: &mut GeneratorF,
    source: &[SourceSample],
    target_cubes: &[Array3<f32>],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if source.is_empty() || target_cubes.is_empty() {
        return Err(Error::invalid("domain adaptation needs both domains"));
    }
    if !cfg.reduction.is_learned() {
        return Err(Error::Config("cycle training requires a learned reduction".into()));
    }
    let mut src_sampler = BatchSampler::new(salt(cfg.seed, 6), source.len(), cfg.batch_size);
    let mut tgt_sampler = BatchSampler::new(salt(cfg.seed, 7), target_cubes.len(), cfg.batch_size);
    let mut opt_seg = Adam::new(cfg.lr_seg as f32);
    let mut opt_disc = Adam::new(cfg.lr_disc as f32);
    let mut opt_g = Adam::new(cfg.lr_gen as f32);
    let mut opt_f = Adam::new(cfg.lr_gen as f32);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let (src_input, masks) = stack_source(source, &src_sampler.next());
        let tgt_input = stack_targets(target_cubes, &tgt_sampler.next());

        // (a) Discriminator step on detached features.
        let reduced_t = {
            let tape = Tape::<f32>::inference();
            let x = tape.leaf(tgt_input.clone().into_dyn());
            let r = gen_g.forward(&tape, x)?;
            tape.value(r).into_dimensionality::<ndarray::Ix4>().expect("BCHW")
        };
        let (_, feat_s) = forward_no_grad(net, &src_input)?;
        let (probs_t, feat_t) = forward_no_grad(net, &reduced_t)?;
        let feat_dims = (feat_s.dim().2, feat_s.dim().3);
        let (labels_src, labels_tgt) = disc_labels(&masks, &probs_t, feat_dims);

        let tape_d = Tape::<f32>::new();
        let fs = tape_d.leaf(feat_s.into_dyn());
        let ft = tape_d.leaf(feat_t.into_dyn());
        let d_s = fada_discriminator_loss(&tape_d, disc.forward(&tape_d, fs), &labels_src, Domain::Source)?;
        let d_t = fada_discriminator_loss(&tape_d, disc.forward(&tape_d, ft), &labels_tgt, Domain::Target)?;
        let d_loss = tape_d.scale(tape_d.add(d_s, d_t), 0.5);
        let d_value = tape_d.scalar(d_loss);
        let d_grads = tape_d.backward(d_loss);
        opt_disc.step(disc, &tape_d.param_grads(&d_grads));

        // (b) Encoder, segmenter, and generator step.
        let tape = Tape::<f32>::new();

        let xt = tape.leaf(tgt_input.into_dyn());
        let r_t = gen_g.forward(&tape, xt)?;
        let out_t = net.forward(&tape, r_t)?;
        let disc_out_t = disc.forward(&tape, out_t.feature);
        let adv = fada_adversarial_loss(&tape, disc_out_t, &labels_tgt)?;
        let recon_t = gen_f.forward(&tape, r_t)?;
        let cyc_t = cycle_l1(&tape, recon_t, xt)?;

        let xs = tape.leaf(src_input.into_dyn());
        let out_s = net.forward(&tape, xs)?;
        let seg = seg_loss_on(&tape, out_s.probs, out_s.logits, &masks, &cfg.loss)?;
        let lifted_s = gen_f.forward(&tape, xs)?;
        let recon_s = gen_g.forward(&tape, lifted_s)?;
        let cyc_s = cycle_l1(&tape, recon_s, xs)?;

        let cyc = tape.add(cyc_t, cyc_s);
        let total = tape.add(
            tape.add(seg, tape.scale(adv, cfg.adv_weight as f32)),
            tape.scale(cyc, cfg.cycle_weight as f32),
        );
        let (seg_v, adv_v) = (tape.scalar(seg), tape.scalar(adv));
        let (cyc_t_v, cyc_s_v) = (tape.scalar(cyc_t), tape.scalar(cyc_s));
        let grads = tape.backward(total);
        let by_name = tape.param_grads(&grads);
        opt_seg.step(net, &by_name);
        opt_g.step(gen_g, &by_name);
        opt_f.step(gen_f, &by_name);

        log.records.push(StepRecord {
            step,
            seg_loss: seg_v,
            disc_loss: d_value,
            adv_loss: adv_v,
            cycle_loss: cyc_t_v + cyc_s_v,
            cycle_target_loss: cyc_t_v,
            cycle_source_loss: cyc_s_v,
            grl_lambda: 0.0,
        });
    }
    Ok(log)
}
