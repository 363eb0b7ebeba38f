//! Single-file model archive.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then the raw little-endian tensors listed in the header index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::Atlas;
use crate::error::{Error, Result};
use crate::model::params::{ParamSpec, ParamStore};
use crate::model::{ModelConfig, UNet};
use crate::train::{Adam, AdamConfig, TrainConfig};
use crate::volume::{ClassInfo, Dims, Grid, ImageVolume, LabelMap};

pub const MAGIC: &[u8; 8] = b"LCSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub epoch: usize,
    pub dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    /// Epochs completed.
    pub epochs_run: usize,
    /// Epoch (1-based) whose weights the checkpoint holds.
    pub best_epoch: usize,
    pub best_val_dice: f64,
    /// Mean batch loss of every optimizer step.
    pub loss_curve: Vec<f64>,
    pub val_curve: Vec<ValPoint>,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
}

/// Optimizer state and latest weights, enough to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub epochs_done: usize,
    pub params: Vec<f32>,
    pub adam: Adam<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Best-validation weights.
    pub params: ParamStore<f32>,
    /// Class ids the model was trained on; output channel order for the
    /// baseline head.
    pub classes: Vec<u32>,
    pub vocabulary: Vec<ClassInfo>,
    pub hierarchy: BTreeMap<u32, Vec<u32>>,
    /// Conditioning atlas, stored in full (LCS only).
    pub atlas: Option<Atlas>,
    pub metadata: TrainingMetadata,
    pub resume: Option<ResumeState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AtlasHeader {
    id: String,
    spacing_mm: [f64; 3],
    dims: Dims,
    vocabulary: Vec<ClassInfo>,
    hierarchy: BTreeMap<u32, Vec<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeHeader {
    epochs_done: usize,
    adam: AdamConfig,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    classes: Vec<u32>,
    vocabulary: Vec<ClassInfo>,
    hierarchy: BTreeMap<u32, Vec<u32>>,
    atlas_ref: Option<String>,
    atlas: Option<AtlasHeader>,
    metadata: TrainingMetadata,
    resume: Option<ResumeHeader>,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";

#[derive(Default)]
struct Body {
    index: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl Body {
    fn push_f32(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        let start = self.bytes.len();
        self.bytes.extend(data.iter().flat_map(|v| v.to_le_bytes()));
        self.entry(name, "f32", shape, start);
    }

    fn push_u32(&mut self, name: String, shape: Vec<usize>, data: &[u32]) {
        let start = self.bytes.len();
        self.bytes.extend(data.iter().flat_map(|v| v.to_le_bytes()));
        self.entry(name, "u32", shape, start);
    }

    fn entry(&mut self, name: String, dtype: &str, shape: Vec<usize>, start: usize) {
        self.index.push(TensorEntry {
            name,
            dtype: dtype.into(),
            shape,
            offset: start as u64,
            bytes: (self.bytes.len() - start) as u64,
        });
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

impl Checkpoint {
    pub fn atlas_ref(&self) -> Option<&str> {
        self.atlas.as_ref().map(|a| a.id())
    }

    pub fn model(&self) -> Result<UNet<f32>> {
        UNet::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.config.head.is_lcs() && self.atlas.is_none() {
            return Err(bad("LCS checkpoints must carry their atlas"));
        }
        let mut body = Body::default();
        for spec in self.params.specs() {
            body.push_f32(
                format!("{PARAM}{}", spec.name),
                spec.shape.clone(),
                &self.params.values()[spec.range()],
            );
        }
        let atlas = self.atlas.as_ref().map(|a| {
            let dims = a.image.dims();
            body.push_f32("atlas/image".into(), dims.to_vec(), a.image.grid.data());
            body.push_u32("atlas/labels".into(), dims.to_vec(), a.labels.grid.data());
            AtlasHeader {
                id: a.id().to_string(),
                spacing_mm: a.image.spacing,
                dims,
                vocabulary: a.labels.vocabulary.clone(),
                hierarchy: a.labels.hierarchy.clone(),
            }
        });
        let resume = self.resume.as_ref().map(|r| {
            let n = vec![r.params.len()];
            body.push_f32("resume/params".into(), n.clone(), &r.params);
            body.push_f32("resume/adam_m".into(), n.clone(), &r.adam.m);
            body.push_f32("resume/adam_v".into(), n, &r.adam.v);
            ResumeHeader {
                epochs_done: r.epochs_done,
                adam: r.adam.config,
                adam_step: r.adam.step,
            }
        });
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            classes: self.classes.clone(),
            vocabulary: self.vocabulary.clone(),
            hierarchy: self.hierarchy.clone(),
            atlas_ref: self.atlas_ref().map(str::to_string),
            atlas,
            metadata: self.metadata.clone(),
            resume,
            tensors: body.index,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + body.bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body.bytes);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let body = &bytes[16 + hlen..];
        let tensors: BTreeMap<&str, &TensorEntry> = header
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect();
        let raw = |name: &str, dtype: &str| -> Result<&[u8]> {
            let t = tensors
                .get(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.dtype != dtype {
                return Err(bad(format!("tensor {name} has dtype {}", t.dtype)));
            }
            let n: usize = t.shape.iter().product();
            let (o, b) = (t.offset as usize, t.bytes as usize);
            if b != 4 * n {
                return Err(bad(format!("tensor {name} size does not match its shape")));
            }
            body.get(o..o + b)
                .ok_or_else(|| bad(format!("tensor {name} is truncated")))
        };
        let f32s = |name: &str| -> Result<Vec<f32>> {
            Ok(raw(name, "f32")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let u32s = |name: &str| -> Result<Vec<u32>> {
            Ok(raw(name, "u32")?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };

        let mut specs = Vec::new();
        let mut values = Vec::new();
        for t in header.tensors.iter().filter(|t| t.name.starts_with(PARAM)) {
            specs.push(ParamSpec {
                name: t.name[PARAM.len()..].to_string(),
                shape: t.shape.clone(),
                offset: values.len(),
            });
            values.extend(f32s(&t.name)?);
        }
        let params = ParamStore::from_parts(specs, values)
            .ok_or_else(|| bad("inconsistent parameter index"))?;
        // Validates the layout against the config.
        UNet::from_params(header.config.clone(), params.clone())?;

        let atlas = match header.atlas {
            Some(a) => {
                let image =
                    ImageVolume::new(a.id, Grid::new(a.dims, f32s("atlas/image")?)?, a.spacing_mm)?;
                let labels = LabelMap::new(
                    Grid::new(a.dims, u32s("atlas/labels")?)?,
                    a.vocabulary,
                    a.hierarchy,
                )?;
                Some(Atlas { image, labels })
            }
            None => None,
        };
        if header.config.head.is_lcs() && atlas.is_none() {
            return Err(bad("LCS checkpoint without an atlas"));
        }
        if header.atlas_ref.as_deref() != atlas.as_ref().map(|a| a.id()) {
            return Err(bad("atlas_ref does not match the embedded atlas"));
        }
        let resume = match header.resume {
            Some(r) => Some(ResumeState {
                epochs_done: r.epochs_done,
                params: f32s("resume/params")?,
                adam: Adam {
                    config: r.adam,
                    step: r.adam_step,
                    m: f32s("resume/adam_m")?,
                    v: f32s("resume/adam_v")?,
                },
            }),
            None => None,
        };
        Ok(Checkpoint {
            config: header.config,
            params,
            classes: header.classes,
            vocabulary: header.vocabulary,
            hierarchy: header.hierarchy,
            atlas,
            metadata: header.metadata,
            resume,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
