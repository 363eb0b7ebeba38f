//! Synthetic phantoms with a coarse-to-fine label hierarchy.
//!
//! A phantom config fixes an "anatomy": for every coarse class a shape, a
//! canonical position and size, and an intensity. Each case jitters position
//! and size, splits refined classes into children along a plane through the
//! structure centre, and adds Gaussian noise.
//!
//! The default [`Layout::Octant`] gives every structure its own octant of the
//! grid (a refined one gets two adjacent octants, one per child). At the
//! 1/16 conditioning resolution of a 32^3 grid every octant is one voxel, so
//! each class leaves a distinct footprint in the downsampled atlas mask.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::volume::{ClassInfo, Dims, Grid, ImageVolume, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipsoid,
    Box,
    Shell,
}

/// Inner radius of a shell relative to its outer radius.
const SHELL_INNER: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One octant per unrefined structure, two adjacent octants per refined
    /// one. Needs `n_coarse + refined <= 8`.
    #[default]
    Octant,
    /// Rejection sampling anywhere in the grid; refined structures straddle
    /// the mid-plane of their long axis. For many small structures.
    Scattered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub grid: Dims,
    pub n_coarse: usize,
    /// Coarse id to number of fine children.
    pub fine_split: BTreeMap<u32, usize>,
    pub layout: Layout,
    /// Shape families, assigned to coarse classes cyclically.
    pub shapes: Vec<ShapeKind>,
    /// Base intensity levels, assigned cyclically; class `k` adds
    /// `k * intensity_step` so every class is distinct.
    pub intensity_levels: Vec<f64>,
    pub intensity_step: f64,
    /// Intensity difference between neighbouring siblings.
    pub sibling_contrast: f64,
    pub noise_sigma: f64,
    /// Semi-axis ranges in voxels for the two short axes and the long axis.
    /// Refined structures in the octant layout double the long axis, so each
    /// child is about as large as an unrefined structure.
    pub radius_short: [f64; 2],
    pub radius_long: [f64; 2],
    /// Maximum per-case shift of a structure centre, in voxels per axis.
    pub position_jitter: f64,
    /// Maximum relative per-case change of each semi-axis.
    pub scale_jitter: f64,
    /// Maximum tilt of a split plane away from the long-axis normal.
    pub split_tilt: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            grid: [32, 32, 32],
            n_coarse: 4,
            fine_split: (1..=4).map(|id| (id, 2)).collect(),
            layout: Layout::Octant,
            shapes: vec![ShapeKind::Ellipsoid, ShapeKind::Box, ShapeKind::Shell],
            intensity_levels: vec![1.0, 1.5, 2.0],
            intensity_step: 0.03,
            sibling_contrast: 0.15,
            noise_sigma: 0.25,
            radius_short: [4.0, 5.0],
            radius_long: [5.0, 5.8],
            position_jitter: 1.0,
            scale_jitter: 0.1,
            split_tilt: 0.25,
            max_attempts: 2000,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_coarse == 0 {
            return bad("n_coarse must be >= 1".into());
        }
        if self.grid.contains(&0) {
            return bad("grid dimensions must be >= 1".into());
        }
        if self.shapes.is_empty() || self.intensity_levels.is_empty() {
            return bad("shapes and intensity_levels must be nonempty".into());
        }
        for (&parent, &n) in &self.fine_split {
            if parent == 0 || parent as usize > self.n_coarse {
                return bad(format!("fine_split refers to unknown coarse id {parent}"));
            }
            if n == 1 {
                return bad(format!("class {parent} must split into 0 or >= 2 children"));
            }
        }
        let ranges = [self.radius_short, self.radius_long];
        if ranges.iter().any(|r| !(r[0] > 0.0 && r[1] >= r[0])) {
            return bad("radius ranges must be positive and ordered".into());
        }
        if self.noise_sigma < 0.0
            || self.position_jitter < 0.0
            || !(0.0..1.0).contains(&self.scale_jitter)
        {
            return bad("noise and jitter must be non-negative, scale_jitter < 1".into());
        }
        let min_level = self
            .intensity_levels
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let max_children = self.fine_split.values().copied().max().unwrap_or(0) as f64;
        if min_level - self.sibling_contrast * max_children / 2.0 <= 0.0 {
            return bad("class intensities must stay above the background level 0".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be >= 1".into());
        }
        if self.layout == Layout::Octant {
            let cells = self.n_coarse + self.refined().count();
            if cells > 8 {
                return bad(format!(
                    "octant layout holds 8 cells, {} coarse classes with {} refined need {cells}",
                    self.n_coarse,
                    self.refined().count()
                ));
            }
            if self.grid.iter().any(|&d| d < 2) {
                return bad("octant layout needs every grid dimension >= 2".into());
            }
        }
        Ok(())
    }

    fn refined(&self) -> impl Iterator<Item = u32> + '_ {
        self.fine_split
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&id, _)| id)
    }

    /// Upper bound of a semi-axis after per-case jitter, including the shift.
    fn inflate(&self, r: f64) -> f64 {
        r * (1.0 + self.scale_jitter) + self.position_jitter
    }

    /// Coarse ids first (`1..=n_coarse`), then the children of each refined
    /// class in parent order.
    pub fn vocabulary(&self) -> (Vec<ClassInfo>, BTreeMap<u32, Vec<u32>>) {
        let mut vocab: Vec<ClassInfo> = (1..=self.n_coarse as u32)
            .map(|id| ClassInfo {
                id,
                name: format!("structure_{id:02}"),
            })
            .collect();
        let mut hierarchy = BTreeMap::new();
        let mut next = self.n_coarse as u32 + 1;
        for (&parent, &n) in self.fine_split.iter().filter(|(_, &n)| n > 0) {
            let children: Vec<u32> = (0..n as u32).map(|j| next + j).collect();
            for (j, &id) in children.iter().enumerate() {
                vocab.push(ClassInfo {
                    id,
                    name: format!("structure_{parent:02}_{}", (b'a' + j as u8) as char),
                });
            }
            next += n as u32;
            hierarchy.insert(parent, children);
        }
        (vocab, hierarchy)
    }
}

/// Canonical placement of one coarse structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub class: u32,
    pub shape: ShapeKind,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub long_axis: usize,
    pub intensity: f64,
    /// Fine child ids and their intensities, in split order.
    pub children: Vec<(u32, f64)>,
}

impl Structure {
    fn contains(&self, center: [f64; 3], radii: [f64; 3], p: [f64; 3], filled: bool) -> bool {
        let u = [0, 1, 2].map(|a| (p[a] - center[a]) / radii[a]);
        let r2 = u.iter().map(|v| v * v).sum::<f64>();
        match self.shape {
            ShapeKind::Box => u.iter().all(|v| v.abs() <= 1.0),
            ShapeKind::Ellipsoid => r2 <= 1.0,
            ShapeKind::Shell => r2 <= 1.0 && (filled || r2 >= SHELL_INNER * SHELL_INNER),
        }
    }
}

fn bounds(center: [f64; 3], radii: [f64; 3], dims: Dims) -> [(usize, usize); 3] {
    [0, 1, 2].map(|a| {
        let lo = (center[a] - radii[a]).floor().max(0.0) as usize;
        let hi = ((center[a] + radii[a]).ceil() as usize).min(dims[a] - 1);
        (lo, hi)
    })
}

/// The fixed layout shared by every case of a phantom config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub structures: Vec<Structure>,
}

impl Anatomy {
    pub fn new(cfg: &PhantomConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, tags::ANATOMY);
        let (_, hierarchy) = cfg.vocabulary();
        let mut structures: Vec<Structure> = (0..cfg.n_coarse)
            .map(|k| {
                let class = k as u32 + 1;
                let base = cfg.intensity_levels[k % cfg.intensity_levels.len()];
                let intensity = base + cfg.intensity_step * k as f64;
                let children = hierarchy
                    .get(&class)
                    .map(|ids| {
                        let mid = (ids.len() as f64 - 1.0) / 2.0;
                        ids.iter()
                            .enumerate()
                            .map(|(j, &id)| {
                                (id, intensity + (j as f64 - mid) * cfg.sibling_contrast)
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                Structure {
                    class,
                    shape: cfg.shapes[k % cfg.shapes.len()],
                    center: [0.0; 3],
                    radii: [0.0; 3],
                    long_axis: 0,
                    intensity,
                    children,
                }
            })
            .collect();
        match cfg.layout {
            Layout::Octant => place_in_octants(cfg, &mut structures, &mut rng)?,
            Layout::Scattered => place_scattered(cfg, &mut structures, &mut rng)?,
        }
        Ok(Anatomy { structures })
    }
}

fn draw_radii(
    cfg: &PhantomConfig,
    long_axis: usize,
    long_scale: f64,
    rng: &mut ChaCha8Rng,
) -> [f64; 3] {
    [0, 1, 2].map(|a| {
        if a == long_axis {
            long_scale * rng.random_range(cfg.radius_long[0]..=cfg.radius_long[1])
        } else {
            rng.random_range(cfg.radius_short[0]..=cfg.radius_short[1])
        }
    })
}

/// Octant `o` has bit 2 for z, bit 1 for y, bit 0 for x.
fn octant_bit(o: usize, axis: usize) -> usize {
    (o >> (2 - axis)) & 1
}

/// Assigns an adjacent octant pair to each refined structure and a single
/// octant to every other one, then sizes each structure to fit its cells
/// under any per-case jitter.
fn place_in_octants(
    cfg: &PhantomConfig,
    structures: &mut [Structure],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let refined: Vec<usize> = (0..structures.len())
        .filter(|&i| !structures[i].children.is_empty())
        .collect();
    // All 12 face-adjacent pairs as (low octant, axis).
    let mut pairs: Vec<(usize, usize)> = (0..8)
        .flat_map(|o| (0..3).map(move |a| (o, a)))
        .filter(|&(o, a)| octant_bit(o, a) == 0)
        .collect();
    pairs.shuffle(rng);
    let mut free = [true; 8];
    let mut chosen = Vec::with_capacity(refined.len());
    if !match_pairs(&pairs, refined.len(), &mut free, &mut chosen) {
        return Err(Error::InvalidConfig(
            "refined structures cannot be given disjoint octant pairs".into(),
        ));
    }
    let mut singles: Vec<usize> = (0..8).filter(|&o| free[o]).collect();
    singles.shuffle(rng);
    let mut singles = singles.into_iter();
    let dims = cfg.grid;

    for (i, s) in structures.iter_mut().enumerate() {
        let (octant, span) = match refined.iter().position(|&r| r == i) {
            Some(j) => (chosen[j].0, Some(chosen[j].1)),
            None => (singles.next().expect("cell count validated"), None),
        };
        let extent = |a: usize| -> (f64, f64) {
            let half = dims[a] / 2;
            if span == Some(a) {
                (0.0, dims[a] as f64 - 1.0)
            } else if octant_bit(octant, a) == 0 {
                (0.0, half as f64 - 1.0)
            } else {
                (half as f64, dims[a] as f64 - 1.0)
            }
        };
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let long_axis = span.unwrap_or_else(|| rng.random_range(0..3));
            let radii = draw_radii(cfg, long_axis, if span.is_some() { 2.0 } else { 1.0 }, rng);
            let outer = radii.map(|r| cfg.inflate(r));
            let ranges = [0, 1, 2].map(|a| {
                let (lo, hi) = extent(a);
                (lo + outer[a], hi - outer[a])
            });
            if ranges.iter().any(|(lo, hi)| lo > hi) {
                continue;
            }
            let mut center = ranges.map(|(lo, hi)| rng.random_range(lo..=hi));
            if let Some(a) = span {
                let mid = dims[a] as f64 / 2.0 - 0.5;
                center[a] = (mid + rng.random_range(-1.0..=1.0)).clamp(ranges[a].0, ranges[a].1);
            }
            s.center = center;
            s.radii = radii;
            s.long_axis = long_axis;
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement {
                class: s.class,
                attempts: cfg.max_attempts,
            });
        }
    }
    Ok(())
}

fn match_pairs(
    pairs: &[(usize, usize)],
    needed: usize,
    free: &mut [bool; 8],
    chosen: &mut Vec<(usize, usize)>,
) -> bool {
    if chosen.len() == needed {
        return true;
    }
    for &(o, a) in pairs {
        let other = o | (1 << (2 - a));
        if free[o] && free[other] {
            free[o] = false;
            free[other] = false;
            chosen.push((o, a));
            if match_pairs(pairs, needed, free, chosen) {
                return true;
            }
            chosen.pop();
            free[o] = true;
            free[other] = true;
        }
    }
    false
}

fn place_scattered(
    cfg: &PhantomConfig,
    structures: &mut [Structure],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dims = cfg.grid;
    let mut occupied = vec![false; dims.iter().product()];
    // Per-axis growth under jitter. Diagonal shifts can still collide;
    // generate_from redraws the jitter when they do.
    // Refined structures have the tightest constraint, so they go first.
    let mut order: Vec<usize> = (0..structures.len()).collect();
    order.sort_by_key(|&k| structures[k].children.is_empty());
    for k in order {
        let s = &mut structures[k];
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let long_axis = rng.random_range(0..3);
            let radii = draw_radii(cfg, long_axis, 1.0, rng);
            let outer = radii.map(|r| cfg.inflate(r));
            if (0..3).any(|a| 2.0 * outer[a] + 1.0 > dims[a] as f64) {
                continue;
            }
            let mut center =
                [0, 1, 2].map(|a| rng.random_range(outer[a]..=(dims[a] as f64 - 1.0 - outer[a])));
            if !s.children.is_empty() {
                // Children then fall in different halves of the grid.
                let mid = dims[long_axis] as f64 / 2.0 - 0.5;
                center[long_axis] = (mid + rng.random_range(-1.0..=1.0)).clamp(
                    outer[long_axis],
                    dims[long_axis] as f64 - 1.0 - outer[long_axis],
                );
            }
            s.center = center;
            s.radii = radii;
            s.long_axis = long_axis;
            let voxels = rasterize(s, center, outer, dims, true);
            if voxels.iter().all(|&i| !occupied[i]) {
                for i in voxels {
                    occupied[i] = true;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                class: s.class,
                attempts: cfg.max_attempts,
            });
        }
    }
    Ok(())
}

fn rasterize(
    s: &Structure,
    center: [f64; 3],
    radii: [f64; 3],
    dims: Dims,
    filled: bool,
) -> Vec<usize> {
    let b = bounds(center, radii, dims);
    let mut out = Vec::new();
    for z in b[0].0..=b[0].1 {
        for y in b[1].0..=b[1].1 {
            for x in b[2].0..=b[2].1 {
                if s.contains(center, radii, [z as f64, y as f64, x as f64], filled) {
                    out.push((z * dims[1] + y) * dims[2] + x);
                }
            }
        }
    }
    out
}

/// Generates one case. Deterministic in `(cfg, case_seed)`.
pub fn generate_case(cfg: &PhantomConfig, case_seed: u64) -> Result<(ImageVolume, LabelMap)> {
    let anatomy = Anatomy::new(cfg)?;
    generate_from(cfg, &anatomy, case_seed)
}

/// As [`generate_case`] with a precomputed anatomy.
pub fn generate_from(
    cfg: &PhantomConfig,
    anatomy: &Anatomy,
    case_seed: u64,
) -> Result<(ImageVolume, LabelMap)> {
    let dims = cfg.grid;
    let n: usize = dims.iter().product();
    let mut rng = rng::stream(rng::derive_seed(cfg.seed, tags::CASE), case_seed);
    let mut labels = vec![0u32; n];
    let mut mean = vec![0f64; n];

    for s in &anatomy.structures {
        let mut done = false;
        for _ in 0..cfg.max_attempts {
            let center = s
                .center
                .map(|c| c + rng.random_range(-1.0..=1.0) * cfg.position_jitter);
            let radii = s
                .radii
                .map(|r| r * (1.0 + rng.random_range(-1.0..=1.0) * cfg.scale_jitter));
            let normal = split_normal(s.long_axis, cfg.split_tilt, &mut rng);
            let voxels = rasterize(s, center, radii, dims, false);
            if voxels.iter().any(|&i| labels[i] != 0) {
                continue;
            }
            let extent = radii[s.long_axis];
            for i in voxels {
                let (id, level) = if s.children.is_empty() {
                    (s.class, s.intensity)
                } else {
                    let p = [
                        i / (dims[1] * dims[2]),
                        (i / dims[2]) % dims[1],
                        i % dims[2],
                    ];
                    let t: f64 = (0..3).map(|a| (p[a] as f64 - center[a]) * normal[a]).sum();
                    let k = s.children.len();
                    let slab = (((t / extent + 1.0) / 2.0) * k as f64).floor();
                    s.children[(slab.max(0.0) as usize).min(k - 1)]
                };
                labels[i] = id;
                mean[i] = level;
            }
            done = true;
            break;
        }
        if !done {
            return Err(Error::Placement {
                class: s.class,
                attempts: cfg.max_attempts,
            });
        }
    }

    let image: Vec<f32> = if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        mean.iter()
            .map(|&m| (m + noise.sample(&mut rng)) as f32)
            .collect()
    } else {
        mean.iter().map(|&m| m as f32).collect()
    };
    let id = format!("case_{case_seed:03}");
    let image = ImageVolume::new(id, Grid::new(dims, image)?, [1.0; 3])?;
    let (vocab, hierarchy) = cfg.vocabulary();
    let labels = LabelMap::new(Grid::new(dims, labels)?, vocab, hierarchy)?;
    Ok((image, labels))
}

fn split_normal(long_axis: usize, tilt: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut n = [0.0; 3];
    for (a, v) in n.iter_mut().enumerate() {
        *v = if a == long_axis {
            1.0
        } else {
            rng.random_range(-1.0..=1.0) * tilt
        };
    }
    let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    n.map(|v| v / len)
}

/// Number of cases in each role of one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: usize,
    pub atlas: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitRatios {
    pub const PAPER: SplitRatios = SplitRatios {
        train: 15,
        atlas: 1,
        val: 5,
        test: 9,
    };
    pub const DESK: SplitRatios = SplitRatios {
        train: 8,
        atlas: 1,
        val: 2,
        test: 4,
    };

    pub fn total(&self) -> usize {
        self.train + self.atlas + self.val + self.test
    }
}

/// Case indices per role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub atlas: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitTable {
    pub splits: Vec<Split>,
    /// Test sets of different repeats may overlap.
    pub test_overlap: bool,
}

/// `repeats` random splits whose test sets are pairwise disjoint. Fails
/// when `repeats * test > n_cases`.
pub fn make_splits(
    n_cases: usize,
    ratios: SplitRatios,
    repeats: usize,
    seed: u64,
) -> Result<SplitTable> {
    check_ratios(n_cases, ratios, repeats)?;
    if repeats * ratios.test > n_cases {
        return Err(Error::InfeasibleSplit(format!(
            "{repeats} disjoint test sets of {} need {} cases, have {n_cases}",
            ratios.test,
            repeats * ratios.test
        )));
    }
    let mut rng = rng::stream(seed, tags::SPLITS);
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut rng);
    let splits = (0..repeats)
        .map(|r| {
            let test: Vec<usize> = order[r * ratios.test..(r + 1) * ratios.test].to_vec();
            let mut rest: Vec<usize> = order
                .iter()
                .copied()
                .filter(|i| !test.contains(i))
                .collect();
            rest.shuffle(&mut rng);
            assign(rest, test, ratios)
        })
        .collect();
    Ok(SplitTable {
        splits,
        test_overlap: false,
    })
}

/// As [`make_splits`], but falls back to independent splits (test sets may
/// overlap) with a warning when disjoint test sets are infeasible.
pub fn make_splits_or_overlap(
    n_cases: usize,
    ratios: SplitRatios,
    repeats: usize,
    seed: u64,
) -> Result<SplitTable> {
    match make_splits(n_cases, ratios, repeats, seed) {
        Err(Error::InfeasibleSplit(msg)) => {
            warn!("{msg}; test sets of different repeats may overlap");
            let mut rng = rng::stream(seed, tags::SPLITS);
            let splits = (0..repeats)
                .map(|_| {
                    let mut order: Vec<usize> = (0..n_cases).collect();
                    order.shuffle(&mut rng);
                    let test = order.split_off(n_cases - ratios.test);
                    assign(order, test, ratios)
                })
                .collect();
            Ok(SplitTable {
                splits,
                test_overlap: true,
            })
        }
        other => other,
    }
}

fn check_ratios(n_cases: usize, ratios: SplitRatios, repeats: usize) -> Result<()> {
    if ratios.total() != n_cases {
        return Err(Error::InvalidConfig(format!(
            "split sizes sum to {}, expected {n_cases}",
            ratios.total()
        )));
    }
    if repeats == 0 {
        return Err(Error::InvalidConfig(
            "at least one split repeat is required".into(),
        ));
    }
    if ratios.train == 0 {
        return Err(Error::EmptySplit("train"));
    }
    Ok(())
}

fn assign(rest: Vec<usize>, mut test: Vec<usize>, r: SplitRatios) -> Split {
    let mut it = rest.into_iter();
    let mut take = |n: usize| {
        let mut v: Vec<usize> = it.by_ref().take(n).collect();
        v.sort_unstable();
        v
    };
    let train = take(r.train);
    let atlas = take(r.atlas);
    let val = take(r.val);
    test.sort_unstable();
    Split {
        train,
        atlas,
        val,
        test,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::volume::{binarize, ClassSet};

    #[test]
    fn three_coarse_with_one_split() {
        let cfg = PhantomConfig {
            n_coarse: 3,
            fine_split: BTreeMap::from([(1, 2)]),
            ..Default::default()
        };
        let (img, lab) = generate_case(&cfg, 0).unwrap();
        assert_eq!(lab.class_ids(), vec![1, 2, 3, 4, 5]);
        assert_eq!(lab.hierarchy, BTreeMap::from([(1, vec![4, 5])]));
        assert_eq!(img.dims(), [32, 32, 32]);
        let parent = binarize(&lab, &ClassSet::from([1])).unwrap();
        let a = binarize(&lab, &ClassSet::from([4])).unwrap();
        let b = binarize(&lab, &ClassSet::from([5])).unwrap();
        assert_eq!(parent.grid, a.or(&b).unwrap().grid);
        assert!(a.count() > 0 && b.count() > 0);
    }

    #[test]
    fn deterministic_and_noise_free_levels() {
        let cfg = PhantomConfig::default();
        let x = generate_case(&cfg, 3).unwrap();
        let y = generate_case(&cfg, 3).unwrap();
        assert_eq!(x, y);
        assert_ne!(x.0.grid, generate_case(&cfg, 4).unwrap().0.grid);

        let clean = PhantomConfig {
            noise_sigma: 0.0,
            ..cfg
        };
        let (img, lab) = generate_case(&clean, 1).unwrap();
        let distinct: BTreeSet<u32> = img.grid.data().iter().map(|v| v.to_bits()).collect();
        let leaves = lab.class_ids().len() - lab.hierarchy.len();
        assert_eq!(distinct.len(), leaves + 1);
    }

    #[test]
    fn children_straddle_the_mid_plane() {
        let cfg = PhantomConfig::default();
        let anatomy = Anatomy::new(&cfg).unwrap();
        for s in anatomy.structures.iter().filter(|s| !s.children.is_empty()) {
            assert!((s.center[s.long_axis] - 15.5).abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let cfg = PhantomConfig {
            n_coarse: 60,
            layout: Layout::Scattered,
            max_attempts: 20,
            ..Default::default()
        };
        assert!(matches!(Anatomy::new(&cfg), Err(Error::Placement { .. })));
        // 5 refined + 1 unrefined need 11 octants.
        let cfg = PhantomConfig {
            n_coarse: 6,
            fine_split: (1..=5).map(|id| (id, 2)).collect(),
            ..Default::default()
        };
        assert!(matches!(Anatomy::new(&cfg), Err(Error::InvalidConfig(_))));
    }

    fn octant_of(i: usize, dims: Dims) -> usize {
        let p = [
            i / (dims[1] * dims[2]),
            (i / dims[2]) % dims[1],
            i % dims[2],
        ];
        (0..3).fold(0, |o, a| (o << 1) | (p[a] >= dims[a] / 2) as usize)
    }

    #[test]
    fn octant_layout_keeps_classes_in_their_cells() {
        for cfg in [
            PhantomConfig::default(),
            PhantomConfig {
                n_coarse: 8,
                fine_split: BTreeMap::new(),
                seed: 5,
                ..Default::default()
            },
        ] {
            let (vocab, hierarchy) = cfg.vocabulary();
            let mut owner: BTreeMap<usize, u32> = BTreeMap::new();
            for case in 0..6 {
                let (_, lab) = generate_case(&cfg, case).unwrap();
                let mut cells: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
                for (i, &v) in lab.grid.data().iter().enumerate() {
                    if v != 0 {
                        let coarse = hierarchy
                            .iter()
                            .find(|(_, c)| c.contains(&v))
                            .map_or(v, |(&p, _)| p);
                        cells
                            .entry(coarse)
                            .or_default()
                            .insert(octant_of(i, cfg.grid));
                    }
                }
                for (&class, set) in &cells {
                    let expected = if hierarchy.contains_key(&class) { 2 } else { 1 };
                    assert_eq!(set.len(), expected, "class {class} case {case}");
                    for &o in set {
                        assert_eq!(*owner.entry(o).or_insert(class), class);
                    }
                }
                assert_eq!(cells.len(), cfg.n_coarse);
            }
            assert!(vocab.len() >= cfg.n_coarse);
        }
    }

    #[test]
    fn paper_protocol_splits() {
        let t = make_splits(30, SplitRatios::PAPER, 3, 7).unwrap();
        assert_eq!(t.splits.len(), 3);
        for (i, a) in t.splits.iter().enumerate() {
            let mut all: Vec<usize> = [&a.train, &a.atlas, &a.val, &a.test]
                .into_iter()
                .flatten()
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..30).collect::<Vec<_>>());
            for b in &t.splits[i + 1..] {
                assert!(a.test.iter().all(|x| !b.test.contains(x)));
            }
        }
    }

    #[test]
    fn overlap_fallback_when_infeasible() {
        // 3 * 4 = 12 <= 15, so the desk-scale split is feasible as is.
        assert!(
            !make_splits_or_overlap(15, SplitRatios::DESK, 3, 1)
                .unwrap()
                .test_overlap
        );
        // 4 * 4 = 16 > 15 is not.
        assert!(matches!(
            make_splits(15, SplitRatios::DESK, 4, 1),
            Err(Error::InfeasibleSplit(_))
        ));
        let t = make_splits_or_overlap(15, SplitRatios::DESK, 4, 1).unwrap();
        assert!(t.test_overlap);
        assert_eq!(t.splits.len(), 4);
        assert!(make_splits(14, SplitRatios::DESK, 1, 1).is_err());
    }
}
