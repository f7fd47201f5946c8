//! Network architectures: encoder-decoder segmentation net with additive
//! skip connections, global domain classifier, per-pixel per-class domain
//! discriminator, and the generator pair for learned spectral reduction.

use ndarray::{Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Param, ParamSet};

/// Nonnegative scale applied to the reversed gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlLambda(f32);

impl GrlLambda {
    pub fn new(value: f32) -> Result<Self> {
        if !(value >= 0.0) {
            return Err(Error::invalid("GRL lambda must be nonnegative"));
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f32 {
        self.0
    }
}

/// Gradient reversal: identity forward, gradient scaled by −λ backward.
pub fn grl(tape: &Tape<f32>, x: ValueId, lambda: GrlLambda) -> ValueId {
    tape.grl(x, lambda.value())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub n_stages: usize,
    pub num_classes: usize,
}

impl SegNetConfig {
    pub fn new(in_channels: usize, encoder_widths: Vec<usize>) -> Self {
        let n_stages = encoder_widths.len();
        Self { in_channels, encoder_widths, n_stages, num_classes: 2 }
    }

    /// Small default: three stages, under two million parameters.
    pub fn desk_default(in_channels: usize) -> Self {
        Self::new(in_channels, vec![16, 32, 48])
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config("in_channels must be 1 or 3".into()));
        }
        if self.n_stages < 3 {
            return Err(Error::Config("segmentation net needs at least 3 stages".into()));
        }
        if self.n_stages != self.encoder_widths.len() {
            return Err(Error::Config("n_stages must match encoder_widths".into()));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.n_stages
    }
}

/// Output handles of one segmentation forward pass.
pub struct SegForward {
    /// (B, K, H, W) class probabilities.
    pub probs: ValueId,
    /// (B, K, H, W) pre-softmax logits.
    pub logits: ValueId,
    /// Deepest encoder feature map, (B, C_f, H/2^n, W/2^n).
    pub feature: ValueId,
}

/// Encoder-decoder segmentation network with additive skip connections.
pub struct SegNet {
    pub config: SegNetConfig,
    stem: Conv2d,
    enc: Vec<(Conv2d, Conv2d)>,
    dec: Vec<(Conv2d, Conv2d)>,
    head: Conv2d,
}

impl SegNet {
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let widths = &config.encoder_widths;
        let stem = Conv2d::new("seg.stem", config.in_channels, widths[0], 3, 1, 1, &mut rng);

        let mut enc = Vec::new();
        let mut prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let down = Conv2d::new(&format!("seg.enc{i}.down"), prev, w, 3, 2, 1, &mut rng);
            let mix = Conv2d::new(&format!("seg.enc{i}.mix"), w, w, 3, 1, 1, &mut rng);
            enc.push((down, mix));
            prev = w;
        }

        let mut dec = Vec::new();
        for i in (0..widths.len()).rev() {
            let target = if i == 0 { widths[0] } else { widths[i - 1] };
            let up = Conv2d::new(&format!("seg.dec{i}.up"), widths[i], target, 3, 1, 1, &mut rng);
            let mix = Conv2d::new(&format!("seg.dec{i}.mix"), target, target, 3, 1, 1, &mut rng);
            dec.push((up, mix));
        }

        let head = Conv2d::new("seg.head", widths[0], config.num_classes, 1, 1, 0, &mut rng);
        Ok(Self { config, stem, enc, dec, head })
    }

    /// Deepest encoder feature width.
    pub fn feature_channels(&self) -> usize {
        *self.config.encoder_widths.last().unwrap()
    }

    /// Forward pass over a (B, in_channels, H, W) batch; H and W must be
    /// divisible by 2^n_stages.
    pub fn forward(&self, tape: &Tape<f32>, input: ValueId) -> Result<SegForward> {
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, {}, H, W)", self.config.in_channels),
                actual: format!("{shape:?}"),
            });
        }
        let factor = self.config.downsample_factor();
        if shape[2] % factor != 0 || shape[3] % factor != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("spatial dims divisible by {factor}"),
                actual: format!("{}x{}", shape[2], shape[3]),
            });
        }

        let mut skips = Vec::with_capacity(self.enc.len());
        let mut x = tape.relu(self.stem.forward(tape, input));
        for (down, mix) in &self.enc {
            skips.push(x);
            x = tape.relu(down.forward(tape, x));
            x = tape.relu(mix.forward(tape, x));
        }
        let feature = x;

        for (i, (up, mix)) in self.dec.iter().enumerate() {
            let upsampled = tape.upsample2x(x);
            x = tape.relu(up.forward(tape, upsampled));
            let skip = skips[skips.len() - 1 - i];
            x = tape.add(x, skip);
            x = tape.relu(mix.forward(tape, x));
        }

        let logits = self.head.forward(tape, x);
        let probs = tape.softmax_ch(logits);
        Ok(SegForward { probs, logits, feature })
    }
}

impl ParamSet for SegNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit(f);
        for (a, b) in &self.enc {
            a.visit(f);
            b.visit(f);
        }
        for (a, b) in &self.dec {
            a.visit(f);
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        for (a, b) in &mut self.enc {
            a.visit_mut(f);
            b.visit_mut(f);
        }
        for (a, b) in &mut self.dec {
            a.visit_mut(f);
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Predicts, per batch element, whether its feature map came from the source
/// (label 0) or target (label 1) domain. One logit per sample.
pub struct DomainClassifier {
    conv: Conv2d,
    head: Linear,
}

impl DomainClassifier {
    pub fn new(feature_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let conv = Conv2d::new("domclf.conv", feature_channels, feature_channels, 3, 2, 1, &mut rng);
        let head = Linear::new("domclf.head", feature_channels, 1, &mut rng);
        Self { conv, head }
    }

    /// (B, C_f, h, w) → (B, 1) domain logits.
    pub fn forward(&self, tape: &Tape<f32>, feature: ValueId) -> ValueId {
        let x = tape.leaky_relu(self.conv.forward(tape, feature), 0.1);
        let pooled = tape.global_avg_pool(x);
        self.head.forward(tape, pooled)
    }
}

impl ParamSet for DomainClassifier {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Per-pixel domain discriminator over 2K channels: channels [0, K) mean
/// "source ∧ class k", channels [K, 2K) mean "target ∧ class k".
pub struct FadaDiscriminator {
    pub num_classes: usize,
    c1: Conv2d,
    c2: Conv2d,
}

impl FadaDiscriminator {
    pub fn new(feature_channels: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let hidden = feature_channels.max(64);
        let c1 = Conv2d::new("fada.c1", feature_channels, hidden, 1, 1, 0, &mut rng);
        let c2 = Conv2d::new("fada.c2", hidden, 2 * num_classes, 1, 1, 0, &mut rng);
        Self { num_classes, c1, c2 }
    }

    /// (B, C_f, h, w) → (B, 2K, h, w) logits at feature resolution.
    ///
    /// Each pixel's feature vector is scaled to unit L2 norm before the 1×1
    /// stack; the norm is treated as a constant, so the game is played on
    /// feature direction rather than magnitude.
    pub fn forward(&self, tape: &Tape<f32>, feature: ValueId) -> ValueId {
        let normed = pixel_l2_normalize(tape, feature);
        let x = tape.leaky_relu(self.c1.forward(tape, normed), 0.1);
        self.c2.forward(tape, x)
    }
}

/// Scales each (b, ·, h, w) feature vector by the reciprocal of its L2 norm,
/// with the norm taken as a stop-gradient constant.
fn pixel_l2_normalize(tape: &Tape<f32>, feature: ValueId) -> ValueId {
    let value = tape
        .value(feature)
        .into_dimensionality::<ndarray::Ix4>()
        .expect("BCHW feature");
    let (b, c, h, w) = value.dim();
    let mut recip = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut sq = 0.0f32;
                for ci in 0..c {
                    sq += value[[bi, ci, y, x]] * value[[bi, ci, y, x]];
                }
                let inv = 1.0 / sq.sqrt().max(1e-6);
                for ci in 0..c {
                    recip[[bi, ci, y, x]] = inv;
                }
            }
        }
    }
    let scale = tape.leaf(recip.into_dyn());
    tape.mul(feature, scale)
}

impl ParamSet for FadaDiscriminator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.c1.visit(f);
        self.c2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
    }
}

/// Architecture of the cube→image generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Three 3×3 convolution layers.
    Cnn,
    /// A single 1×1 convolution: each output pixel depends only on the
    /// spectrum at that pixel.
    OneByOne,
}

/// Generator G: maps a (B, C_bands, H, W) cube batch to a (B, k, H, W)
/// reduced batch in [0, 1] (sigmoid output).
pub struct GeneratorG {
    pub kind: GeneratorKind,
    pub in_bands: usize,
    pub out_channels: usize,
    convs: Vec<Conv2d>,
}

impl GeneratorG {
    pub fn new(kind: GeneratorKind, in_bands: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let convs = match kind {
            GeneratorKind::Cnn => vec![
                Conv2d::new("gen_g.c1", in_bands, 32, 3, 1, 1, &mut rng),
                Conv2d::new("gen_g.c2", 32, 16, 3, 1, 1, &mut rng),
                Conv2d::new("gen_g.c3", 16, out_channels, 3, 1, 1, &mut rng),
            ],
            GeneratorKind::OneByOne => {
                vec![Conv2d::new("gen_g.c1", in_bands, out_channels, 1, 1, 0, &mut rng)]
            }
        };
        Self { kind, in_bands, out_channels, convs }
    }

    pub fn forward(&self, tape: &Tape<f32>, cube: ValueId) -> Result<ValueId> {
        let shape = tape.shape(cube);
        if shape.len() != 4 || shape[1] != self.in_bands {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, {}, H, W)", self.in_bands),
                actual: format!("{shape:?}"),
            });
        }
        let mut x = cube;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, x);
            if i + 1 < self.convs.len() {
                x = tape.relu(x);
            }
        }
        Ok(tape.sigmoid(x))
    }
}

impl ParamSet for GeneratorG {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for c in &self.convs {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in &mut self.convs {
            c.visit_mut(f);
        }
    }
}

/// Generator F: reconstructs a (B, C_bands, H, W) cube batch from a
/// (B, k, H, W) reduced batch. Linear output, reflectance is unbounded.
pub struct GeneratorF {
    pub in_channels: usize,
    pub out_bands: usize,
    c1: Conv2d,
    c2: Conv2d,
}

impl GeneratorF {
    pub fn new(in_channels: usize, out_bands: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let c1 = Conv2d::new("gen_f.c1", in_channels, 32, 3, 1, 1, &mut rng);
        let c2 = Conv2d::new("gen_f.c2", 32, out_bands, 3, 1, 1, &mut rng);
        Self { in_channels, out_bands, c1, c2 }
    }

    pub fn forward(&self, tape: &Tape<f32>, image: ValueId) -> Result<ValueId> {
        let shape = tape.shape(image);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, {}, H, W)", self.in_channels),
                actual: format!("{shape:?}"),
            });
        }
        let x = tape.relu(self.c1.forward(tape, image));
        Ok(self.c2.forward(tape, x))
    }
}

impl ParamSet for GeneratorF {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.c1.visit(f);
        self.c2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
    }
}

/// Stacks (H, W, k) images into a (B, k, H, W) batch array.
pub fn batch_images(images: &[&Array3<f32>]) -> Array4<f32> {
    assert!(!images.is_empty());
    let (h, w, k) = images[0].dim();
    let mut out = Array4::<f32>::zeros((images.len(), k, h, w));
    for (bi, img) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..k {
                    out[[bi, c, y, x]] = img[[y, x, c]];
                }
            }
        }
    }
    out
}

/// Splits a (B, K, H, W) probability batch into per-sample (K, H, W) maps.
pub fn unbatch_probs(batch: &Array4<f32>) -> Vec<Array3<f32>> {
    batch
        .axis_iter(Axis(0))
        .map(|view| view.to_owned())
        .collect()
}

/// Runs the segmentation net on one (H, W, k) image without building
/// gradients, returning (K, H, W) probabilities.
pub fn predict_probs(net: &SegNet, image: &Array3<f32>) -> Result<Array3<f32>> {
    let tape = Tape::<f32>::inference();
    let input = tape.leaf(batch_images(&[image]).into_dyn());
    let out = net.forward(&tape, input)?;
    let probs: ArrayD<f32> = tape.value(out.probs);
    let probs = probs.into_dimensionality::<ndarray::Ix4>().expect("BCHW");
    Ok(probs.index_axis(Axis(0), 0).to_owned())
}
