//! Project-native volume format: `<case>.f32raw` holds C-order little-endian
//! `f32` voxels and `<case>.json` the metadata sidecar. NIfTI-1 files are
//! accepted for reading.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{Dims, Grid};
use super::{nifti, BinaryMask, ClassInfo, ClassSet, ImageVolume, LabelMap};
use crate::error::{Error, Result};

pub const RAW_EXT: &str = "f32raw";
pub const DTYPE: &str = "float32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Image,
    Labels,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub kind: VolumeKind,
    pub shape: Dims,
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    #[serde(default)]
    pub vocabulary: Vec<ClassInfo>,
    #[serde(default)]
    pub hierarchy: BTreeMap<u32, Vec<u32>>,
    /// Class ids a mask was built from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_classes: Vec<u32>,
}

/// Strips a known extension so `case`, `case.json` and `case.f32raw` all
/// name the same pair.
pub fn stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_EXT) | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn write_pair(path: &Path, meta: &Sidecar, data: &[f32]) -> Result<()> {
    let s = stem(path);
    let raw = s.with_extension(RAW_EXT);
    let json = s.with_extension("json");
    if let Some(parent) = raw.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

fn read_pair(path: &Path) -> Result<(Sidecar, Vec<f32>)> {
    let s = stem(path);
    let json = s.with_extension("json");
    let raw = s.with_extension(RAW_EXT);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&json, e.to_string()))?;
    if meta.dtype != DTYPE {
        return Err(Error::UnsupportedDtype(meta.dtype));
    }
    if meta.shape.contains(&0) {
        return Err(Error::malformed(&json, "zero-length dimension"));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::malformed(
            &raw,
            format!(
                "expected {} bytes for shape {:?}, found {}",
                4 * n,
                meta.shape,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, data))
}

fn expect_kind(path: &Path, meta: &Sidecar, kind: VolumeKind) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::malformed(
            stem(path).with_extension("json"),
            format!("expected a {kind:?} volume, found {:?}", meta.kind),
        ));
    }
    Ok(())
}

pub fn save_volume(path: &Path, v: &ImageVolume) -> Result<()> {
    let meta = Sidecar {
        id: v.id.clone(),
        kind: VolumeKind::Image,
        shape: v.dims(),
        spacing_mm: v.spacing,
        dtype: DTYPE.into(),
        vocabulary: Vec::new(),
        hierarchy: BTreeMap::new(),
        source_classes: Vec::new(),
    };
    write_pair(path, &meta, v.grid.data())
}

/// Loads an image from a raw+JSON pair or a NIfTI-1 file. Intensities are
/// returned unmodified (NIfTI scaling aside).
pub fn load_volume(path: &Path) -> Result<ImageVolume> {
    if is_nifti(path) {
        let d = nifti::read(path)?;
        let id = case_id_from_path(path);
        let data = d.values.iter().map(|&v| v as f32).collect();
        return ImageVolume::new(id, Grid::new(d.dims, data)?, d.spacing);
    }
    let (meta, data) = read_pair(path)?;
    expect_kind(path, &meta, VolumeKind::Image)?;
    ImageVolume::new(meta.id, Grid::new(meta.shape, data)?, meta.spacing_mm)
}

pub fn save_labels(path: &Path, id: &str, labels: &LabelMap, spacing: [f64; 3]) -> Result<()> {
    let meta = Sidecar {
        id: id.to_string(),
        kind: VolumeKind::Labels,
        shape: labels.dims(),
        spacing_mm: spacing,
        dtype: DTYPE.into(),
        vocabulary: labels.vocabulary.clone(),
        hierarchy: labels.hierarchy.clone(),
        source_classes: Vec::new(),
    };
    let data: Vec<f32> = labels.grid.data().iter().map(|&v| v as f32).collect();
    write_pair(path, &meta, &data)
}

fn to_ids(path: &Path, values: impl Iterator<Item = f64>) -> Result<Vec<u32>> {
    values
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= (1u32 << 24) as f64 {
                Ok(v as u32)
            } else {
                Err(Error::malformed(
                    path,
                    format!("label value {v} is not a class id"),
                ))
            }
        })
        .collect()
}

/// Loads a label map. NIfTI label files carry no vocabulary, so one is
/// synthesized from the ids present.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    if is_nifti(path) {
        let d = nifti::read(path)?;
        let ids = to_ids(path, d.values.iter().copied())?;
        let present: ClassSet = ids.iter().copied().filter(|&v| v != 0).collect();
        let vocabulary = present
            .into_iter()
            .map(|id| ClassInfo {
                id,
                name: format!("label_{id}"),
            })
            .collect();
        return LabelMap::new(Grid::new(d.dims, ids)?, vocabulary, BTreeMap::new());
    }
    let (meta, data) = read_pair(path)?;
    expect_kind(path, &meta, VolumeKind::Labels)?;
    let ids = to_ids(path, data.iter().map(|&v| v as f64))?;
    LabelMap::new(Grid::new(meta.shape, ids)?, meta.vocabulary, meta.hierarchy)
}

pub fn save_mask(path: &Path, id: &str, mask: &BinaryMask, spacing: [f64; 3]) -> Result<()> {
    let meta = Sidecar {
        id: id.to_string(),
        kind: VolumeKind::Mask,
        shape: mask.dims(),
        spacing_mm: spacing,
        dtype: DTYPE.into(),
        vocabulary: Vec::new(),
        hierarchy: BTreeMap::new(),
        source_classes: mask.source_classes.iter().copied().collect(),
    };
    let data: Vec<f32> = mask.grid.data().iter().map(|&v| v as f32).collect();
    write_pair(path, &meta, &data)
}

/// Loads a binary mask; any value other than 0 or 1 is an error.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let (meta, data) = read_pair(path)?;
    expect_kind(path, &meta, VolumeKind::Mask)?;
    let bits = data
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0u8),
            1.0 => Ok(1u8),
            _ => Err(Error::malformed(
                path,
                format!("mask value {v} is not 0 or 1"),
            )),
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryMask::new(
        Grid::new(meta.shape, bits)?,
        meta.source_classes.into_iter().collect(),
    )
}

fn case_id_from_path(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("case");
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}
