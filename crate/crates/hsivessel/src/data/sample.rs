//! Low-channel images, binary masks, and domain-tagged samples.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::HsiCube;
use crate::error::{Error, Result};

/// Interpretation of a reduced image's channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelMeaning {
    Grayscale,
    Rgb,
}

/// H×W×k image with k ∈ {1, 3}; the input format of the segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedImage {
    data: Array3<f32>,
    meaning: ChannelMeaning,
}

impl ReducedImage {
    pub fn new(data: Array3<f32>, meaning: ChannelMeaning) -> Result<Self> {
        let k = data.shape()[2];
        let expected = match meaning {
            ChannelMeaning::Grayscale => 1,
            ChannelMeaning::Rgb => 3,
        };
        if k != expected {
            return Err(Error::invalid(format!(
                "channel meaning {meaning:?} requires {expected} channels, got {k}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("reduced image".into()));
        }
        Ok(Self { data, meaning })
    }

    pub fn grayscale(data: Array2<f32>) -> Result<Self> {
        let (h, w) = data.dim();
        let data = data.into_shape_with_order((h, w, 1)).expect("reshape");
        Self::new(data, ChannelMeaning::Grayscale)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn meaning(&self) -> ChannelMeaning {
        self.meaning
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub(crate) fn crop(&self, y: usize, x: usize, size: usize) -> ReducedImage {
        let view = self.data.slice(ndarray::s![y..y + size, x..x + size, ..]);
        ReducedImage { data: view.to_owned(), meaning: self.meaning }
    }
}

/// H×W binary mask; values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    data: Array2<u8>,
}

impl Mask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { data: Array2::zeros((height, width)) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Foreground fraction over the whole image.
    pub fn coverage(&self) -> f64 {
        self.count_ones() as f64 / (self.height() * self.width()) as f64
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.data.mapv(|v| v as f32)
    }

    pub(crate) fn crop(&self, y: usize, x: usize, size: usize) -> Mask {
        let view = self.data.slice(ndarray::s![y..y + size, x..x + size]);
        Mask { data: view.to_owned() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// Either representation a sample can carry.
#[derive(Debug, Clone)]
pub enum SampleImage {
    Reduced(ReducedImage),
    Cube(HsiCube),
}

impl SampleImage {
    pub fn height(&self) -> usize {
        match self {
            SampleImage::Reduced(im) => im.height(),
            SampleImage::Cube(c) => c.height(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            SampleImage::Reduced(im) => im.width(),
            SampleImage::Cube(c) => c.width(),
        }
    }
}

/// An image (reduced or hyperspectral) with its domain tag and optional mask.
///
/// Source samples always carry a mask. Target masks exist only for held-out
/// evaluation; the training API never sees them (see [`UnlabeledSample`]).
#[derive(Debug, Clone)]
pub struct SamplePair {
    image: SampleImage,
    mask: Option<Mask>,
    domain: Domain,
    id: String,
}

impl SamplePair {
    pub fn new(image: SampleImage, mask: Option<Mask>, domain: Domain, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if domain == Domain::Source && mask.is_none() {
            return Err(Error::UnmaskedSource(id));
        }
        if let Some(m) = &mask {
            if m.height() != image.height() || m.width() != image.width() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", image.height(), image.width()),
                    actual: format!("{}x{}", m.height(), m.width()),
                });
            }
        }
        Ok(Self { image, mask, domain, id })
    }

    pub fn image(&self) -> &SampleImage {
        &self.image
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Strips the mask, producing the only target-sample form the training
    /// procedures accept.
    pub fn into_unlabeled(self) -> UnlabeledSample {
        UnlabeledSample { image: self.image, id: self.id }
    }
}

/// A target-domain sample as seen by training: image and id, no mask.
#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub image: SampleImage,
    pub id: String,
}
