//! Soft-dice training for the baseline and LCS heads.

mod adam;
mod loss;

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use loss::{
    multi_channel_loss, multi_channel_loss_grad, soft_dice_loss, soft_dice_loss_grad,
    DEFAULT_SMOOTH_EPS,
};

use crate::checkpoint::{Checkpoint, ResumeState, TrainingMetadata, ValPoint};
use crate::conditioning::{make_conditioning, sample_condition, Atlas};
use crate::dataset::{Case, Dataset};
use crate::error::{Error, Result};
use crate::eval::dice_bits;
use crate::model::memory::ActivationMeter;
use crate::model::ops::{FeatureMap, FlushDenormals, Scalar};
use crate::model::{Head, ModelConfig, UNet};
use crate::rng::{self, tags};
use crate::volume::{
    binarize, crop, normalize_intensity, pad_to_multiple, ClassInfo, ClassSet, Grid, LabelMap,
    Padding,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Baseline,
    Lcs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smooth_eps: f64,
    pub head: HeadKind,
    pub base_channels: usize,
    /// See [`ModelConfig::mask_gain`].
    pub mask_gain: f64,
    /// Classes to train on. Defaults to the coarsest level of the vocabulary.
    pub classes: Option<Vec<u32>>,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    /// Atlas case; defaults to the atlas role of the chosen split.
    pub atlas_case_id: Option<String>,
    /// Which repeat of the dataset's split table to use.
    pub split: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            epochs: 2000,
            batch_size: 2,
            seed: 0,
            smooth_eps: DEFAULT_SMOOTH_EPS,
            head: HeadKind::Lcs,
            base_channels: 8,
            mask_gain: 1.0,
            classes: None,
            val_every: 10,
            atlas_case_id: None,
            split: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return bad("epochs, batch_size and val_every must be >= 1");
        }
        if !(self.smooth_eps > 0.0) {
            return bad("smooth_eps must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// One training example as seen by the network.
pub struct Sample<'a, T> {
    pub id: &'a str,
    pub input: &'a FeatureMap<T>,
    pub cond: Option<&'a FeatureMap<T>>,
    /// {0,1} target with one channel per output channel.
    pub target: &'a FeatureMap<T>,
}

/// Mean soft-dice loss over the batch; adds its gradient to `grads`.
pub fn batch_gradient<T: Scalar>(
    model: &UNet<T>,
    batch: &[Sample<T>],
    eps: T,
    grads: &mut [T],
) -> Result<T> {
    let scale = T::one() / T::from(batch.len()).unwrap();
    let mut total = T::zero();
    for s in batch {
        let cache = model.forward_train(s.input, s.cond)?;
        let mut g = FeatureMap::zeros(cache.probs.channels, cache.probs.dims);
        let loss = multi_channel_loss_grad(&cache.probs, s.target, eps, &mut g)?;
        for v in &mut g.data {
            *v = *v * scale;
        }
        model.backward(&cache, &g, grads);
        total = total + loss;
    }
    Ok(total * scale)
}

/// One optimizer step on a batch. Returns the mean batch loss.
pub fn train_step<T: Scalar>(
    model: &mut UNet<T>,
    adam: &mut Adam<T>,
    batch: &[Sample<T>],
    eps: T,
) -> Result<T> {
    let mut grads = vec![T::zero(); model.num_parameters()];
    let loss = batch_gradient(model, batch, eps, &mut grads)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: adam.step as usize + 1,
            lr: adam.config.lr,
            cases: batch.iter().map(|s| s.id.to_string()).collect(),
        });
    }
    adam.update(model.params_mut().values_mut(), &grads);
    Ok(loss)
}

/// A case normalized and padded for the network.
pub struct Prepared {
    pub id: String,
    pub input: FeatureMap<f32>,
    /// Labels on the padded grid.
    pub labels: LabelMap,
    pub padding: Padding,
}

impl Prepared {
    pub fn new(case: &Case, multiple: usize) -> Self {
        let norm = normalize_intensity(&case.image).volume;
        let (grid, padding) = pad_to_multiple(&norm.grid, multiple);
        let (labels, _) = pad_to_multiple(&case.labels.grid, multiple);
        Prepared {
            id: case.id.clone(),
            input: FeatureMap::from_vec(1, grid.dims(), grid.into_data()),
            labels: case.labels.with_grid(labels),
            padding,
        }
    }

    /// One {0,1} channel per entry of `sets`.
    pub fn targets(&self, sets: &[ClassSet]) -> Result<FeatureMap<f32>> {
        let dims = self.labels.dims();
        let mut data = Vec::with_capacity(sets.len() * self.labels.grid.len());
        for set in sets {
            let m = binarize(&self.labels, set)?;
            data.extend(m.grid.data().iter().map(|&v| v as f32));
        }
        Ok(FeatureMap::from_vec(sets.len(), dims, data))
    }
}

/// Conditioning tensors by class set, computed once.
pub struct CondCache {
    atlas: Atlas,
    factor: usize,
    map: BTreeMap<ClassSet, FeatureMap<f32>>,
}

impl CondCache {
    pub fn new(atlas: &Atlas, factor: usize) -> Self {
        CondCache {
            atlas: atlas.padded(factor).0,
            factor,
            map: BTreeMap::new(),
        }
    }

    pub fn ensure(&mut self, set: &ClassSet) -> Result<()> {
        if !self.map.contains_key(set) {
            let c = make_conditioning(&self.atlas, set, self.factor)?;
            self.map.insert(set.clone(), c.data);
        }
        Ok(())
    }

    pub fn get(&self, set: &ClassSet) -> &FeatureMap<f32> {
        &self.map[set]
    }
}

/// Cases, classes and atlas for one training run.
pub struct TrainInputs<'a> {
    pub train: Vec<&'a Case>,
    pub val: Vec<&'a Case>,
    pub atlas: Option<Atlas>,
    pub classes: Vec<u32>,
    pub vocabulary: Vec<ClassInfo>,
    pub hierarchy: BTreeMap<u32, Vec<u32>>,
}

impl<'a> TrainInputs<'a> {
    /// Resolves split, classes and atlas from a dataset.
    pub fn from_dataset(config: &TrainConfig, ds: &'a Dataset) -> Result<Self> {
        let split = ds.splits.splits.get(config.split).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "split {} requested, dataset has {}",
                config.split,
                ds.splits.splits.len()
            ))
        })?;
        let mut train_idx = split.train.clone();
        let atlas_idx = match &config.atlas_case_id {
            Some(id) => {
                let i = ds
                    .index_of(id)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown atlas case {id}")))?;
                train_idx.retain(|&t| t != i);
                Some(i)
            }
            None => split.atlas.first().copied(),
        };
        let atlas_idx = match (atlas_idx, config.head) {
            (Some(i), _) => Some(i),
            (None, HeadKind::Lcs) => {
                let mut r = rng::stream(config.seed, tags::ATLAS);
                let pick = *train_idx.choose(&mut r).ok_or(Error::EmptySplit("train"))?;
                train_idx.retain(|&t| t != pick);
                info!("atlas chosen from the training split: {}", ds.case(pick).id);
                Some(pick)
            }
            (None, HeadKind::Baseline) => None,
        };
        let classes = match &config.classes {
            Some(c) => c.clone(),
            None => {
                let fine = ds
                    .hierarchy
                    .values()
                    .flatten()
                    .copied()
                    .collect::<ClassSet>();
                ds.vocabulary
                    .iter()
                    .map(|c| c.id)
                    .filter(|id| !fine.contains(id))
                    .collect()
            }
        };
        let atlas = match (config.head, atlas_idx) {
            (HeadKind::Lcs, Some(i)) => {
                let c = ds.case(i);
                Some(Atlas::new(&c.image, c.labels.clone())?)
            }
            _ => None,
        };
        Ok(TrainInputs {
            train: ds.select(&train_idx),
            val: ds.select(&split.val),
            atlas,
            classes,
            vocabulary: ds.vocabulary.clone(),
            hierarchy: ds.hierarchy.clone(),
        })
    }
}

pub fn model_config(config: &TrainConfig, grid: [usize; 3], n_classes: usize) -> ModelConfig {
    let head = match config.head {
        HeadKind::Baseline => Head::Baseline { classes: n_classes },
        HeadKind::Lcs => Head::Lcs,
    };
    let probe = ModelConfig::new(head, grid);
    let f = probe.downsample_factor();
    ModelConfig::new(head, grid.map(|d| d.div_ceil(f) * f))
        .with_base_channels(config.base_channels)
        .with_mask_gain(config.mask_gain)
        .with_seed(config.seed)
}

/// Trains from scratch, or continues the run stored in `resume`.
pub fn train(
    config: &TrainConfig,
    inputs: &TrainInputs,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    config.validate()?;
    let _ftz = FlushDenormals::new();
    if inputs.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if inputs.val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    if inputs.classes.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let lcs = config.head == HeadKind::Lcs;
    if lcs && inputs.atlas.is_none() {
        return Err(Error::InvalidConfig(
            "LCS training requires an atlas".into(),
        ));
    }
    let grid = inputs.train[0].image.dims();
    let mcfg = model_config(config, grid, inputs.classes.len());
    let factor = mcfg.downsample_factor();
    let train: Vec<Prepared> = inputs
        .train
        .iter()
        .map(|c| Prepared::new(c, factor))
        .collect();
    let val: Vec<Prepared> = inputs
        .val
        .iter()
        .map(|c| Prepared::new(c, factor))
        .collect();
    if let Some(p) = train
        .iter()
        .chain(&val)
        .find(|p| p.input.dims != mcfg.input_grid)
    {
        return Err(Error::grid(&mcfg.input_grid, &p.input.dims));
    }
    let singles: Vec<ClassSet> = inputs
        .classes
        .iter()
        .map(|&c| ClassSet::from([c]))
        .collect();
    let baseline_targets: Vec<FeatureMap<f32>> = if lcs {
        Vec::new()
    } else {
        train
            .iter()
            .map(|p| p.targets(&singles))
            .collect::<Result<_>>()?
    };
    let mut conds = inputs
        .atlas
        .as_ref()
        .filter(|_| lcs)
        .map(|a| CondCache::new(a, factor));

    let mut model = UNet::<f32>::new(mcfg.clone())?;
    let mut adam = Adam::new(config.adam(), model.num_parameters());
    let mut meta = TrainingMetadata {
        seed: config.seed,
        best_val_dice: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best: Option<Vec<f32>> = None;
    let mut start = 0;
    if let Some(ck) = resume {
        let r = ck
            .resume
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no resume state".into()))?;
        if ck.config != mcfg || ck.classes != inputs.classes {
            return Err(Error::Checkpoint(
                "resume checkpoint was trained with a different model or class list".into(),
            ));
        }
        model.params_mut().values_mut().copy_from_slice(&r.params);
        adam = r.adam.clone();
        meta = ck.metadata.clone();
        best = Some(ck.params.values().to_vec());
        start = r.epochs_done;
    }
    meta.train_config = Some(config.clone());
    meta.train_cases = train.iter().map(|p| p.id.clone()).collect();
    meta.val_cases = val.iter().map(|p| p.id.clone()).collect();
    let eps = config.smooth_eps as f32;

    for epoch in start..config.epochs {
        let mut rng = rng::stream(rng::derive_seed(config.seed, tags::SHUFFLE), epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut targets = Vec::with_capacity(chunk.len());
            let mut sets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if let Some(cache) = conds.as_mut() {
                    let s = sample_condition(&inputs.classes, &mut rng)?;
                    cache.ensure(&s.class_set)?;
                    targets.push(train[i].targets(std::slice::from_ref(&s.class_set))?);
                    sets.push(s.class_set);
                }
            }
            let batch: Vec<Sample<f32>> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| Sample {
                    id: &train[i].id,
                    input: &train[i].input,
                    cond: conds.as_ref().map(|c| c.get(&sets[k])),
                    target: if lcs {
                        &targets[k]
                    } else {
                        &baseline_targets[i]
                    },
                })
                .collect();
            let loss = train_step(&mut model, &mut adam, &batch, eps)?;
            meta.loss_curve.push(loss as f64);
        }
        let done = epoch + 1;
        meta.epochs_run = done;
        if done % config.val_every == 0 || done == config.epochs {
            let dice = validate(&model, &val, &inputs.classes, conds.as_mut())?;
            debug!(
                "epoch {done}: loss {:.4}, val dice {dice:.4}",
                meta.loss_curve.last().unwrap()
            );
            meta.val_curve.push(ValPoint { epoch: done, dice });
            if best.is_none() || dice > meta.best_val_dice {
                best = Some(model.params().values().to_vec());
                meta.best_val_dice = dice;
                meta.best_epoch = done;
            }
        }
    }

    let mut params = model.params().clone();
    params
        .values_mut()
        .copy_from_slice(best.as_deref().expect("validated at least once"));
    Ok(Checkpoint {
        config: mcfg,
        params,
        classes: inputs.classes.clone(),
        vocabulary: inputs.vocabulary.clone(),
        hierarchy: inputs.hierarchy.clone(),
        atlas: inputs.atlas.clone(),
        metadata: meta,
        resume: Some(ResumeState {
            epochs_done: config.epochs.max(start),
            params: model.params().values().to_vec(),
            adam,
        }),
    })
}

/// Mean Dice over (case, class) at threshold 0.5.
fn validate(
    model: &UNet<f32>,
    val: &[Prepared],
    classes: &[u32],
    mut conds: Option<&mut CondCache>,
) -> Result<f64> {
    let meter = ActivationMeter::new();
    let mut total = 0.0;
    let mut n = 0usize;
    for p in val {
        let dims = p.labels.dims();
        let score = |probs: &[f32], class: u32| -> Result<f64> {
            let pred = crop(&Grid::new(dims, probs.to_vec())?, &p.padding)?;
            let gt = crop(
                &binarize(&p.labels, &ClassSet::from([class]))?.grid,
                &p.padding,
            )?;
            Ok(dice_bits(
                pred.data().iter().map(|&v| v >= 0.5),
                gt.data().iter().map(|&v| v == 1),
            ))
        };
        match conds.as_deref_mut() {
            Some(cache) => {
                for &c in classes {
                    let set = ClassSet::from([c]);
                    cache.ensure(&set)?;
                    let probs = model.forward_infer(&p.input, Some(cache.get(&set)), &meter)?;
                    total += score(probs.channel(0), c)?;
                    n += 1;
                }
            }
            None => {
                let probs = model.forward_infer(&p.input, None, &meter)?;
                for (k, &c) in classes.iter().enumerate() {
                    total += score(probs.channel(k), c)?;
                    n += 1;
                }
            }
        }
    }
    Ok(total / n as f64)
}

pub fn train_dataset(config: &TrainConfig, ds: &Dataset) -> Result<Checkpoint> {
    let inputs = TrainInputs::from_dataset(config, ds)?;
    train(config, &inputs, None)
}
