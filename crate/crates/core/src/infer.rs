//! Multi-class segmentation from a trained checkpoint.
//!
//! An LCS model produces one single-channel map per conditioning target; a
//! baseline model produces all of its channels in one pass. Both routes end
//! in [`assemble`].

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::checkpoint::Checkpoint;
use crate::conditioning::{conditioning_from_mask, make_conditioning, Atlas};
use crate::error::{Error, Result};
use crate::model::memory::ActivationMeter;
use crate::model::ops::{FeatureMap, FlushDenormals};
use crate::model::UNet;
use crate::volume::{
    crop, normalize_intensity, pad_to_multiple, BinaryMask, ClassInfo, ClassSet, Grid, ImageVolume,
    LabelMap, Padding, ProbMap,
};

/// What an LCS pass is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    /// Union of atlas classes.
    Classes(ClassSet),
    /// Arbitrary mask on the atlas grid, e.g. a label drawn after training.
    Mask(BinaryMask),
}

/// One output class of [`Engine::segment_all`].
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub id: u32,
    pub name: String,
    pub condition: Condition,
}

impl Target {
    /// A vocabulary class conditioned on its own atlas mask.
    pub fn class(id: u32, vocabulary: &[ClassInfo]) -> Self {
        let name = vocabulary
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.clone())
            .unwrap_or_else(|| format!("class_{id}"));
        Target {
            id,
            name,
            condition: Condition::Classes(ClassSet::from([id])),
        }
    }

    pub fn novel(id: u32, name: impl Into<String>, mask: BinaryMask) -> Self {
        Target {
            id,
            name: name.into(),
            condition: Condition::Mask(mask),
        }
    }
}

/// Normalized class stack and its discrete labelling.
#[derive(Clone, Debug, PartialEq)]
pub struct Assembled {
    /// Channel 0 is background, then one channel per input map in ascending
    /// id order.
    pub probs: ProbMap,
    pub ids: Vec<u32>,
    pub labels: Grid<u32>,
}

/// Stacks per-class maps, prepends the background score
/// `max(0, 1 - max_c p_c)`, divides every voxel by its channel sum and takes
/// the per-voxel argmax. Ties go to the lowest id, background (0) first.
pub fn assemble(maps: &[(u32, Grid<f32>)]) -> Result<Assembled> {
    let first = maps.first().ok_or(Error::EmptyVocabulary)?;
    let dims = first.1.dims();
    if let Some((_, g)) = maps.iter().find(|(_, g)| g.dims() != dims) {
        return Err(Error::grid(&dims, &g.dims()));
    }
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.sort_by_key(|&i| maps[i].0);
    let ids: Vec<u32> = order.iter().map(|&i| maps[i].0).collect();
    if ids.contains(&0) || ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(
            "assembled ids must be distinct and nonzero".into(),
        ));
    }
    let n = first.1.len();
    let c = ids.len() + 1;
    let mut data = vec![0f32; c * n];
    let mut labels = vec![0u32; n];
    let mut scores = vec![0f32; c];
    for v in 0..n {
        let mut best = 0usize;
        let mut max_p = 0f32;
        for (k, &i) in order.iter().enumerate() {
            let p = maps[i].1.data()[v].clamp(0.0, 1.0);
            scores[k + 1] = p;
            max_p = max_p.max(p);
        }
        scores[0] = (1.0 - max_p).max(0.0);
        let total: f64 = scores.iter().map(|&s| s as f64).sum();
        for k in 0..c {
            if scores[k] > scores[best] {
                best = k;
            }
            data[k * n + v] = (scores[k] as f64 / total) as f32;
        }
        labels[v] = if best == 0 { 0 } else { ids[best - 1] };
    }
    let mut channel_labels = vec![ClassSet::new()];
    channel_labels.extend(ids.iter().map(|&id| ClassSet::from([id])));
    Ok(Assembled {
        probs: ProbMap::new(dims, data, channel_labels, true)?,
        ids,
        labels: Grid::new(dims, labels)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// Discrete labels over the targets' ids.
    pub labels: LabelMap,
    /// Normalized stack with background in channel 0.
    pub probs: ProbMap,
    /// Unnormalized per-target maps in ascending id order.
    pub raw: ProbMap,
    pub forward_passes: usize,
    /// Largest peak of live activation bytes over the forward passes,
    /// each measured on its own. Independent of the worker count.
    pub peak_activation_bytes: usize,
}

/// A loaded model ready for inference.
pub struct Engine {
    model: UNet<f32>,
    classes: Vec<u32>,
    vocabulary: Vec<ClassInfo>,
    /// Padded to the model grid.
    atlas: Option<Atlas>,
    atlas_dims: Option<[usize; 3]>,
}

impl Engine {
    pub fn new(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let factor = model.config().downsample_factor();
        let atlas = ck.atlas.as_ref().map(|a| a.padded(factor).0);
        if let Some(a) = &atlas {
            if a.image.dims() != model.config().input_grid {
                return Err(Error::grid(&model.config().input_grid, &a.image.dims()));
            }
        }
        Ok(Engine {
            classes: ck.classes.clone(),
            vocabulary: ck.vocabulary.clone(),
            atlas_dims: ck.atlas.as_ref().map(|a| a.image.dims()),
            atlas,
            model,
        })
    }

    pub fn is_lcs(&self) -> bool {
        self.model.config().head.is_lcs()
    }

    pub fn model(&self) -> &UNet<f32> {
        &self.model
    }

    /// Classes the model was trained on.
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn vocabulary(&self) -> &[ClassInfo] {
        &self.vocabulary
    }

    /// Default targets: every trained class.
    pub fn default_targets(&self) -> Vec<Target> {
        self.classes
            .iter()
            .map(|&id| Target::class(id, &self.vocabulary))
            .collect()
    }

    fn factor(&self) -> usize {
        self.model.config().downsample_factor()
    }

    /// Normalized, padded network input.
    fn prepare(&self, image: &ImageVolume) -> Result<(FeatureMap<f32>, Padding)> {
        let norm = normalize_intensity(image).volume;
        let (grid, pad) = pad_to_multiple(&norm.grid, self.factor());
        if grid.dims() != self.model.config().input_grid {
            return Err(Error::grid(&self.model.config().input_grid, &image.dims()));
        }
        Ok((FeatureMap::from_vec(1, grid.dims(), grid.into_data()), pad))
    }

    /// Bottleneck conditioning tensor for `condition`.
    pub fn conditioning(&self, condition: &Condition) -> Result<FeatureMap<f32>> {
        let atlas = self
            .atlas
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("baseline models take no conditioning".into()))?;
        let c = match condition {
            Condition::Classes(set) => {
                if set.is_empty() {
                    return Err(Error::EmptyClassSet);
                }
                make_conditioning(atlas, set, self.factor())?
            }
            Condition::Mask(mask) => {
                let expected = self.atlas_dims.expect("atlas present");
                if mask.dims() != expected {
                    return Err(Error::grid(&expected, &mask.dims()));
                }
                let (grid, _) = pad_to_multiple(&mask.grid, self.factor());
                let padded = BinaryMask::new(grid, mask.source_classes.clone())?;
                conditioning_from_mask(atlas, &padded, self.factor())?
            }
        };
        Ok(c.data)
    }

    fn pass(
        &self,
        input: &FeatureMap<f32>,
        pad: &Padding,
        cond: &FeatureMap<f32>,
        meter: &ActivationMeter,
    ) -> Result<Grid<f32>> {
        let out = self.model.forward_infer(input, Some(cond), meter)?;
        crop(&Grid::new(out.dims, out.data)?, pad)
    }

    /// One conditioned pass, cropped to the image grid.
    pub fn segment_one(
        &self,
        image: &ImageVolume,
        condition: &Condition,
        meter: &ActivationMeter,
    ) -> Result<ProbMap> {
        if !self.is_lcs() {
            return Err(Error::InvalidConfig(
                "segment_one needs an LCS checkpoint".into(),
            ));
        }
        let (input, pad) = self.prepare(image)?;
        let cond = self.conditioning(condition)?;
        let grid = self.pass(&input, &pad, &cond, meter)?;
        ProbMap::new(
            grid.dims(),
            grid.into_data(),
            vec![label_of(condition)],
            false,
        )
    }

    /// Segments `image` into `targets`. LCS passes are spread over
    /// `workers` threads; the result does not depend on the worker count.
    pub fn segment_all(
        &self,
        image: &ImageVolume,
        targets: &[Target],
        workers: usize,
    ) -> Result<Segmentation> {
        if targets.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let ids: BTreeSet<u32> = targets.iter().map(|t| t.id).collect();
        if ids.len() != targets.len() {
            return Err(Error::InvalidConfig("duplicate target id".into()));
        }
        let (input, pad) = self.prepare(image)?;
        let (maps, passes, peak) = if self.is_lcs() {
            let (maps, peak) = self.lcs_maps(&input, &pad, targets, workers.max(1))?;
            (maps, targets.len(), peak)
        } else {
            let meter = ActivationMeter::new();
            (
                self.baseline_maps(&input, &pad, targets, &meter)?,
                1,
                meter.peak(),
            )
        };
        let assembled = assemble(&maps)?;
        let mut sorted = maps;
        sorted.sort_by_key(|(id, _)| *id);
        let dims = assembled.labels.dims();
        let raw = ProbMap::new(
            dims,
            sorted
                .iter()
                .flat_map(|(_, g)| g.data().iter().copied())
                .collect(),
            sorted.iter().map(|(id, _)| ClassSet::from([*id])).collect(),
            false,
        )?;
        let mut vocabulary: Vec<ClassInfo> = targets
            .iter()
            .map(|t| ClassInfo {
                id: t.id,
                name: t.name.clone(),
            })
            .collect();
        vocabulary.sort();
        Ok(Segmentation {
            labels: LabelMap::new(assembled.labels, vocabulary, Default::default())?,
            probs: assembled.probs,
            raw,
            forward_passes: passes,
            peak_activation_bytes: peak,
        })
    }

    fn lcs_maps(
        &self,
        input: &FeatureMap<f32>,
        pad: &Padding,
        targets: &[Target],
        workers: usize,
    ) -> Result<(Vec<(u32, Grid<f32>)>, usize)> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<(Grid<f32>, usize)>>>> =
            Mutex::new((0..targets.len()).map(|_| None).collect());
        let work = || {
            let _ftz = FlushDenormals::new();
            loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(t) = targets.get(i) else { break };
                let meter = ActivationMeter::new();
                let r = self
                    .conditioning(&t.condition)
                    .and_then(|c| self.pass(input, pad, &c, &meter))
                    .map(|g| (g, meter.peak()));
                slots.lock().expect("worker panicked")[i] = Some(r);
            }
        };
        if workers == 1 {
            work();
        } else {
            thread::scope(|s| {
                for _ in 0..workers.min(targets.len()) {
                    s.spawn(work);
                }
            });
        }
        let slots = slots.into_inner().expect("worker panicked");
        let mut peak = 0;
        let mut maps = Vec::with_capacity(targets.len());
        for (t, r) in targets.iter().zip(slots) {
            let (grid, p) = r.expect("every target is processed")?;
            peak = peak.max(p);
            maps.push((t.id, grid));
        }
        Ok((maps, peak))
    }

    fn baseline_maps(
        &self,
        input: &FeatureMap<f32>,
        pad: &Padding,
        targets: &[Target],
        meter: &ActivationMeter,
    ) -> Result<Vec<(u32, Grid<f32>)>> {
        let channel = |t: &Target| -> Result<usize> {
            match &t.condition {
                Condition::Classes(set) if set.len() == 1 => {
                    let id = *set.first().unwrap();
                    self.classes
                        .iter()
                        .position(|&c| c == id)
                        .ok_or(Error::UnknownClass(id))
                }
                _ => Err(Error::InvalidConfig(
                    "a baseline model only predicts its trained classes".into(),
                )),
            }
        };
        let channels = targets.iter().map(channel).collect::<Result<Vec<_>>>()?;
        let _ftz = FlushDenormals::new();
        let out = self.model.forward_infer(input, None, meter)?;
        targets
            .iter()
            .zip(channels)
            .map(|(t, k)| {
                let g = Grid::new(out.dims, out.channel(k).to_vec())?;
                Ok((t.id, crop(&g, pad)?))
            })
            .collect()
    }
}

fn label_of(condition: &Condition) -> ClassSet {
    match condition {
        Condition::Classes(set) => set.clone(),
        Condition::Mask(m) => m.source_classes.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g(values: &[f32]) -> Grid<f32> {
        Grid::new([1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn single_map_example() {
        let a = assemble(&[(3, g(&[0.8]))]).unwrap();
        assert_abs_diff_eq!(a.probs.channel(0)[0], 0.2, epsilon = 1e-7);
        assert_abs_diff_eq!(a.probs.channel(1)[0], 0.8, epsilon = 1e-7);
        assert_eq!(a.labels.data(), &[3]);
    }

    #[test]
    fn all_zero_voxel_is_background() {
        let a = assemble(&[(1, g(&[0.0])), (2, g(&[0.0]))]).unwrap();
        assert_eq!(a.probs.channel(0)[0], 1.0);
        assert_eq!(a.labels.data(), &[0]);
    }

    #[test]
    fn ties_go_to_the_lowest_id() {
        // p = 0.5 ties background as well.
        let a = assemble(&[(7, g(&[0.6, 0.5])), (4, g(&[0.6, 0.2]))]).unwrap();
        assert_eq!(a.labels.data(), &[4, 0]);
        assert_eq!(a.ids, vec![4, 7]);
    }

    #[test]
    fn rejects_mismatched_grids_and_bad_ids() {
        assert!(assemble(&[]).is_err());
        assert!(assemble(&[(1, g(&[0.1])), (2, g(&[0.1, 0.2]))]).is_err());
        assert!(assemble(&[(1, g(&[0.1])), (1, g(&[0.2]))]).is_err());
        assert!(assemble(&[(0, g(&[0.1]))]).is_err());
    }
}
