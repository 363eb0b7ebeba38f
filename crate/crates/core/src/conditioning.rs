//! Atlas-based conditioning input and the class sampler used in training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ops::FeatureMap;
use crate::model::COND_CHANNELS;
use crate::volume::{
    binarize, downsample_mean, normalize_intensity, pad_to_multiple, BinaryMask, ClassSet, Grid,
    ImageVolume, LabelMap, Padding,
};

/// The image/label pair every conditioning tensor is cut from. The image is
/// stored intensity-normalized, the same way network inputs are.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub image: ImageVolume,
    pub labels: LabelMap,
}

impl Atlas {
    pub fn new(image: &ImageVolume, labels: LabelMap) -> Result<Self> {
        if image.dims() != labels.dims() {
            return Err(Error::grid(&image.dims(), &labels.dims()));
        }
        Ok(Atlas {
            image: normalize_intensity(image).volume,
            labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.image.id
    }

    /// Zero-pads both grids to a multiple of `multiple`.
    pub fn padded(&self, multiple: usize) -> (Atlas, Padding) {
        let (img, pad) = pad_to_multiple(&self.image.grid, multiple);
        let (lab, _) = pad_to_multiple(&self.labels.grid, multiple);
        let atlas = Atlas {
            image: ImageVolume {
                id: self.image.id.clone(),
                spacing: self.image.spacing,
                grid: img,
            },
            labels: self.labels.with_grid(lab),
        };
        (atlas, pad)
    }
}

/// Two-channel tensor on the bottleneck grid: downsampled atlas image and
/// downsampled atlas mask for `class_set`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningInput {
    pub data: FeatureMap<f32>,
    pub class_set: ClassSet,
}

/// Conditioning tensor for a set of atlas classes.
pub fn make_conditioning(
    atlas: &Atlas,
    class_set: &ClassSet,
    factor: usize,
) -> Result<ConditioningInput> {
    let mask = binarize(&atlas.labels, class_set)?;
    conditioning_from_mask(atlas, &mask, factor)
}

/// Conditioning tensor for an arbitrary mask on the atlas grid, e.g. a
/// novel label drawn on the atlas after training.
pub fn conditioning_from_mask(
    atlas: &Atlas,
    mask: &BinaryMask,
    factor: usize,
) -> Result<ConditioningInput> {
    if mask.dims() != atlas.image.dims() {
        return Err(Error::grid(&atlas.image.dims(), &mask.dims()));
    }
    let img = downsample_mean(&atlas.image.grid, factor)?;
    let msk = mask.downsample(factor)?;
    Ok(ConditioningInput {
        data: stack(&img, &msk),
        class_set: mask.source_classes.clone(),
    })
}

fn stack(a: &Grid<f32>, b: &Grid<f32>) -> FeatureMap<f32> {
    let mut data = Vec::with_capacity(a.len() * COND_CHANNELS);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    FeatureMap::from_vec(COND_CHANNELS, a.dims(), data)
}

/// Classes a training sample is conditioned on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSample {
    pub class_set: ClassSet,
    /// The first, always-present draw.
    pub first: u32,
    /// A second class was drawn. It may have repeated the first, in which
    /// case `class_set` is still a singleton.
    pub merge_attempted: bool,
}

impl ConditionSample {
    /// Two distinct classes are merged into one target.
    pub fn is_merged(&self) -> bool {
        self.class_set.len() == 2
    }
}

/// Probability of drawing a second class to merge with the first.
pub const MERGE_PROBABILITY: f64 = 0.5;

/// First class uniform over `vocabulary`; with probability one half a
/// second uniform draw is unioned in.
pub fn sample_condition<R: Rng + ?Sized>(
    vocabulary: &[u32],
    rng: &mut R,
) -> Result<ConditionSample> {
    if vocabulary.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let first = vocabulary[rng.random_range(0..vocabulary.len())];
    let mut class_set = ClassSet::from([first]);
    let merge_attempted = rng.random_bool(MERGE_PROBABILITY);
    if merge_attempted {
        class_set.insert(vocabulary[rng.random_range(0..vocabulary.len())]);
    }
    Ok(ConditionSample {
        class_set,
        first,
        merge_attempted,
    })
}
