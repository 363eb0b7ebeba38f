use log::warn;

use super::grid::{Dims, Grid};
use super::{BinaryMask, ClassSet, ImageVolume, LabelMap};
use crate::error::{Error, Result};

/// Result of intensity normalization. `degenerate` is set when the
/// foreground had zero variance (or was empty) and the output is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub volume: ImageVolume,
    pub degenerate: bool,
}

/// Z-scores intensities over the nonzero voxels. Zero voxels stay zero.
pub fn normalize_intensity(v: &ImageVolume) -> Normalized {
    let fg: Vec<bool> = v.grid.data().iter().map(|&x| x != 0.0).collect();
    normalize_over(v, &fg)
}

/// Z-scores intensities over an explicit foreground mask. Voxels outside
/// the mask are set to zero.
pub fn normalize_intensity_in(v: &ImageVolume, foreground: &BinaryMask) -> Result<Normalized> {
    if foreground.dims() != v.dims() {
        return Err(Error::grid(&v.dims(), &foreground.dims()));
    }
    let fg: Vec<bool> = foreground.grid.data().iter().map(|&m| m == 1).collect();
    Ok(normalize_over(v, &fg))
}

fn normalize_over(v: &ImageVolume, fg: &[bool]) -> Normalized {
    let data = v.grid.data();
    let (mut n, mut s) = (0usize, 0f64);
    for (&x, &m) in data.iter().zip(fg) {
        if m {
            n += 1;
            s += x as f64;
        }
    }
    let mean = if n > 0 { s / n as f64 } else { 0.0 };
    let var = data
        .iter()
        .zip(fg)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n.max(1) as f64;
    let std = var.sqrt();
    let degenerate = n == 0 || !(std > 0.0) || !std.is_finite();
    if degenerate {
        warn!(
            "volume {} has zero foreground variance; normalized to zeros",
            v.id
        );
    }
    let out: Vec<f32> = data
        .iter()
        .zip(fg)
        .map(|(&x, &m)| {
            if m && !degenerate {
                ((x as f64 - mean) / std) as f32
            } else {
                0.0
            }
        })
        .collect();
    Normalized {
        volume: ImageVolume {
            id: v.id.clone(),
            spacing: v.spacing,
            grid: Grid::new(v.dims(), out).expect("same dims"),
        },
        degenerate,
    }
}

/// Mask of voxels whose label lies in `class_set`, after expanding coarse
/// ids to their descendants.
pub fn binarize(labels: &LabelMap, class_set: &ClassSet) -> Result<BinaryMask> {
    if class_set.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    if let Some(&id) = class_set.iter().find(|&&id| !labels.contains(id)) {
        return Err(Error::UnknownClass(id));
    }
    let expanded = labels.expand(class_set);
    let max = expanded.iter().copied().max().unwrap_or(0) as usize;
    let mut lut = vec![0u8; max + 1];
    for &id in &expanded {
        lut[id as usize] = 1;
    }
    let grid = labels
        .grid
        .map(|v| lut.get(v as usize).copied().unwrap_or(0));
    Ok(BinaryMask {
        grid,
        source_classes: class_set.clone(),
    })
}

/// Block-mean downsampling by `factor` along every axis.
pub fn downsample_mean(grid: &Grid<f32>, factor: usize) -> Result<Grid<f32>> {
    let dims = grid.dims();
    if factor == 0 || dims.iter().any(|d| d % factor != 0) {
        return Err(Error::NotDivisible { dims, factor });
    }
    let od = [dims[0] / factor, dims[1] / factor, dims[2] / factor];
    let mut acc = vec![0f64; od[0] * od[1] * od[2]];
    let data = grid.data();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let row = &data[(z * dims[1] + y) * dims[2]..][..dims[2]];
            let base = ((z / factor) * od[1] + y / factor) * od[2];
            for (ox, chunk) in row.chunks_exact(factor).enumerate() {
                acc[base + ox] += chunk.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
    }
    let inv = 1.0 / (factor * factor * factor) as f64;
    Grid::new(od, acc.into_iter().map(|s| (s * inv) as f32).collect())
}

/// Symmetric zero padding applied to reach a multiple of some factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub before: [usize; 3],
    pub original: Dims,
}

impl Padding {
    pub fn is_identity(&self) -> bool {
        self.before == [0; 3]
    }
}

/// Pads every axis up to the next multiple of `multiple`, splitting the
/// extra voxels evenly (the odd one goes after).
pub fn pad_to_multiple<T: Copy + Default>(grid: &Grid<T>, multiple: usize) -> (Grid<T>, Padding) {
    let dims = grid.dims();
    let target = dims.map(|d| d.div_ceil(multiple) * multiple);
    let before = [0, 1, 2].map(|a| (target[a] - dims[a]) / 2);
    let pad = Padding {
        before,
        original: dims,
    };
    if target == dims {
        return (grid.clone(), pad);
    }
    let mut out = Grid::filled(target, T::default()).expect("nonzero dims");
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src = &grid.data()[grid.index(z, y, 0)..][..dims[2]];
            let o = out.index(z + before[0], y + before[1], before[2]);
            out.data_mut()[o..o + dims[2]].copy_from_slice(src);
        }
    }
    (out, pad)
}

/// Inverse of [`pad_to_multiple`].
pub fn crop<T: Copy>(grid: &Grid<T>, pad: &Padding) -> Result<Grid<T>> {
    let d = pad.original;
    let g = grid.dims();
    if (0..3).any(|a| pad.before[a] + d[a] > g[a]) {
        return Err(Error::grid(&d, &g));
    }
    let mut out = Vec::with_capacity(d.iter().product());
    for z in 0..d[0] {
        for y in 0..d[1] {
            let i = grid.index(z + pad.before[0], y + pad.before[1], pad.before[2]);
            out.extend_from_slice(&grid.data()[i..i + d[2]]);
        }
    }
    Grid::new(d, out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::volume::ClassInfo;

    fn vol(dims: Dims, data: Vec<f32>) -> ImageVolume {
        ImageVolume::new("t", Grid::new(dims, data).unwrap(), [1.0; 3]).unwrap()
    }

    fn labels(dims: Dims, data: Vec<u32>, k: u32, hierarchy: BTreeMap<u32, Vec<u32>>) -> LabelMap {
        let vocab = (1..=k)
            .map(|id| ClassInfo {
                id,
                name: format!("c{id}"),
            })
            .collect();
        LabelMap::new(Grid::new(dims, data).unwrap(), vocab, hierarchy).unwrap()
    }

    #[test]
    fn constant_volume_normalizes_to_zeros() {
        let n = normalize_intensity(&vol([2, 2, 2], vec![3.5; 8]));
        assert!(n.degenerate);
        assert!(n.volume.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_foreground_maps_to_unit_values() {
        // Two-point distribution {0, 10} with equal weight: mean 5, std 5.
        let data: Vec<f32> = (0..8)
            .map(|i| if i % 2 == 0 { 0.0 } else { 10.0 })
            .collect();
        let v = vol([2, 2, 2], data.clone());
        let fg = BinaryMask::new(Grid::filled([2, 2, 2], 1u8).unwrap(), ClassSet::new()).unwrap();
        let n = normalize_intensity_in(&v, &fg).unwrap();
        for (o, i) in n.volume.grid.data().iter().zip(&data) {
            assert_eq!(*o, if *i == 0.0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn binarize_counts_and_errors() {
        let l = labels([1, 2, 3], vec![0, 1, 1, 2, 3, 1], 3, BTreeMap::new());
        let m = binarize(&l, &ClassSet::from([1])).unwrap();
        assert_eq!(m.count(), 3);
        assert!(matches!(
            binarize(&l, &ClassSet::new()),
            Err(Error::EmptyClassSet)
        ));
        assert!(matches!(
            binarize(&l, &ClassSet::from([9])),
            Err(Error::UnknownClass(9))
        ));
    }

    #[test]
    fn binarize_expands_coarse_ids() {
        let h = BTreeMap::from([(1, vec![2, 3])]);
        let l = labels([1, 1, 4], vec![0, 2, 3, 0], 3, h);
        assert_eq!(binarize(&l, &ClassSet::from([1])).unwrap().count(), 2);
        assert_eq!(binarize(&l, &ClassSet::from([2])).unwrap().count(), 1);
    }

    #[test]
    fn coarse_voxels_without_children_are_rejected() {
        let h = BTreeMap::from([(1, vec![2])]);
        let vocab = vec![
            ClassInfo {
                id: 1,
                name: "a".into(),
            },
            ClassInfo {
                id: 2,
                name: "b".into(),
            },
        ];
        let err = LabelMap::new(Grid::new([1, 1, 2], vec![1, 2]).unwrap(), vocab, h);
        assert!(matches!(err, Err(Error::InconsistentLabels(_))));
    }

    #[test]
    fn downsample_shapes_and_values() {
        let g = Grid::filled([160, 208, 160], 1f32).unwrap();
        let d = downsample_mean(&g, 16).unwrap();
        assert_eq!(d.dims(), [10, 13, 10]);
        assert!(d.data().iter().all(|&v| v == 1.0));

        let mut one = Grid::filled([2, 2, 2], 0f32).unwrap();
        one.set(1, 0, 1, 1.0);
        assert_eq!(downsample_mean(&one, 2).unwrap().data(), &[0.125]);

        let bad = Grid::filled([4, 4, 6], 0f32).unwrap();
        assert!(matches!(
            downsample_mean(&bad, 4),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let g = Grid::new([3, 5, 2], (0..30).map(|v| v as f32).collect()).unwrap();
        let (p, pad) = pad_to_multiple(&g, 4);
        assert_eq!(p.dims(), [4, 8, 4]);
        assert_eq!(pad.before, [0, 1, 1]);
        assert_eq!(p.data().iter().sum::<f32>(), g.data().iter().sum::<f32>());
        assert_eq!(crop(&p, &pad).unwrap(), g);
    }
}
