//! Volumes, label maps, masks and probability maps on a `(D, H, W)` grid.

mod grid;
pub mod io;
pub mod nifti;
mod ops;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use grid::{voxel_count, Dims, Grid};
pub use ops::{
    binarize, crop, downsample_mean, normalize_intensity, normalize_intensity_in, pad_to_multiple,
    Normalized, Padding,
};

pub type ClassSet = BTreeSet<u32>;

/// Scalar intensity grid with voxel spacing in millimetres per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    pub id: String,
    pub spacing: [f64; 3],
    pub grid: Grid<f32>,
}

impl ImageVolume {
    pub fn new(id: impl Into<String>, grid: Grid<f32>, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidSpacing(spacing));
        }
        Ok(ImageVolume {
            id: id.into(),
            spacing,
            grid,
        })
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    /// Block-mean downsampling; spacing grows by `factor`.
    pub fn downsample(&self, factor: usize) -> Result<ImageVolume> {
        let grid = downsample_mean(&self.grid, factor)?;
        let f = factor as f64;
        ImageVolume::new(
            self.id.clone(),
            grid,
            [
                self.spacing[0] * f,
                self.spacing[1] * f,
                self.spacing[2] * f,
            ],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
}

/// Integer class-id grid. Voxels hold the finest available id; a coarse id
/// listed in `hierarchy` owns exactly the voxels of its descendants.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub grid: Grid<u32>,
    pub vocabulary: Vec<ClassInfo>,
    pub hierarchy: BTreeMap<u32, Vec<u32>>,
}

impl LabelMap {
    /// Validates the vocabulary and hierarchy against the voxel data.
    pub fn new(
        grid: Grid<u32>,
        vocabulary: Vec<ClassInfo>,
        hierarchy: BTreeMap<u32, Vec<u32>>,
    ) -> Result<Self> {
        let map = LabelMap {
            grid,
            vocabulary,
            hierarchy,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u32> = self.vocabulary.iter().map(|c| c.id).collect();
        if ids.len() != self.vocabulary.len() {
            return Err(Error::InconsistentLabels("duplicate vocabulary id".into()));
        }
        if ids.contains(&0) {
            return Err(Error::InconsistentLabels(
                "id 0 is reserved for background".into(),
            ));
        }
        for (parent, children) in &self.hierarchy {
            if !ids.contains(parent) {
                return Err(Error::UnknownClass(*parent));
            }
            if let Some(c) = children.iter().find(|c| !ids.contains(c)) {
                return Err(Error::UnknownClass(*c));
            }
            if children.contains(parent) {
                return Err(Error::InconsistentLabels(format!(
                    "class {parent} lists itself as a child"
                )));
            }
        }
        let refined: BTreeSet<u32> = self
            .hierarchy
            .iter()
            .filter(|(_, ch)| !ch.is_empty())
            .map(|(p, _)| *p)
            .collect();
        for &v in self.grid.data() {
            if v == 0 {
                continue;
            }
            if !ids.contains(&v) {
                return Err(Error::UnknownClass(v));
            }
            // A refined class must be covered exactly by its children.
            if refined.contains(&v) {
                return Err(Error::InconsistentLabels(format!(
                    "voxels labelled with coarse class {v} are not covered by its children"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.vocabulary.iter().map(|c| c.id).collect()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.vocabulary.iter().any(|c| c.id == id)
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        self.vocabulary
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
    }

    /// The ids themselves plus all their descendants.
    pub fn expand(&self, classes: &ClassSet) -> ClassSet {
        let mut out = ClassSet::new();
        let mut stack: Vec<u32> = classes.iter().copied().collect();
        while let Some(id) = stack.pop() {
            if out.insert(id) {
                if let Some(children) = self.hierarchy.get(&id) {
                    stack.extend(children.iter().copied());
                }
            }
        }
        out
    }

    /// Ids that appear as a child of some other id.
    pub fn fine_ids(&self) -> ClassSet {
        self.hierarchy.values().flatten().copied().collect()
    }

    /// Ids that are nobody's child: the coarsest level of the vocabulary.
    pub fn coarse_ids(&self) -> Vec<u32> {
        let fine = self.fine_ids();
        self.class_ids()
            .into_iter()
            .filter(|id| !fine.contains(id))
            .collect()
    }

    /// Same vocabulary and hierarchy on a different grid.
    pub fn with_grid(&self, grid: Grid<u32>) -> LabelMap {
        LabelMap {
            grid,
            vocabulary: self.vocabulary.clone(),
            hierarchy: self.hierarchy.clone(),
        }
    }
}

/// {0,1} grid built from a set of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid<u8>,
    pub source_classes: ClassSet,
}

impl BinaryMask {
    pub fn new(grid: Grid<u8>, source_classes: ClassSet) -> Result<Self> {
        if grid.data().iter().any(|&v| v > 1) {
            return Err(Error::InconsistentLabels(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(BinaryMask {
            grid,
            source_classes,
        })
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    pub fn count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v == 1).count()
    }

    /// Voxelwise OR; source classes are unioned.
    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::grid(&self.dims(), &other.dims()));
        }
        let data = self
            .grid
            .data()
            .iter()
            .zip(other.grid.data())
            .map(|(a, b)| a | b)
            .collect();
        Ok(BinaryMask {
            grid: Grid::new(self.dims(), data)?,
            source_classes: self
                .source_classes
                .union(&other.source_classes)
                .copied()
                .collect(),
        })
    }

    pub fn to_f32(&self) -> Grid<f32> {
        self.grid.map(|v| v as f32)
    }

    /// Fractional occupancy of each `factor^3` block.
    pub fn downsample(&self, factor: usize) -> Result<Grid<f32>> {
        downsample_mean(&self.to_f32(), factor)
    }
}

/// Per-voxel probabilities, `C` channels over one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    dims: Dims,
    data: Vec<f32>,
    channel_labels: Vec<ClassSet>,
    normalized: bool,
}

/// Tolerance on the per-voxel channel sum of a normalized map.
pub const NORMALIZED_SUM_TOL: f32 = 1e-5;

impl ProbMap {
    pub fn new(
        dims: Dims,
        data: Vec<f32>,
        channel_labels: Vec<ClassSet>,
        normalized: bool,
    ) -> Result<Self> {
        let c = channel_labels.len();
        let n = voxel_count(dims);
        if c == 0 || data.len() != c * n {
            return Err(Error::grid(&[c, dims[0], dims[1], dims[2]], &[data.len()]));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        let map = ProbMap {
            dims,
            data,
            channel_labels,
            normalized,
        };
        if normalized {
            if let Some(worst) = (0..n)
                .map(|i| (map.voxel_sum(i) - 1.0).abs())
                .find(|e| *e > NORMALIZED_SUM_TOL)
            {
                return Err(Error::InvalidConfig(format!(
                    "normalized map has channel sum off by {worst}"
                )));
            }
        }
        Ok(map)
    }

    fn voxel_sum(&self, i: usize) -> f32 {
        let n = voxel_count(self.dims);
        (0..self.channels()).map(|c| self.data[c * n + i]).sum()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channel_labels.len()
    }

    pub fn channel_labels(&self) -> &[ClassSet] {
        &self.channel_labels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_grid(&self, c: usize) -> Grid<f32> {
        Grid::new(self.dims, self.channel(c).to_vec()).expect("channel grid")
    }

    /// Channel `c` thresholded at `level` (`p >= level` is foreground).
    pub fn threshold(&self, c: usize, level: f32) -> BinaryMask {
        let data = self
            .channel(c)
            .iter()
            .map(|&p| u8::from(p >= level))
            .collect();
        BinaryMask {
            grid: Grid::new(self.dims, data).expect("threshold grid"),
            source_classes: self.channel_labels[c].clone(),
        }
    }
}
