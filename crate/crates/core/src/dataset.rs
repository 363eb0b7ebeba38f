//! A set of image/label cases plus vocabulary, hierarchy and splits, stored
//! as a directory of raw+JSON volumes with a `dataset.json` manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{self, Anatomy, PhantomConfig, SplitRatios, SplitTable};
use crate::volume::{io, ClassInfo, ImageVolume, LabelMap};

pub const MANIFEST: &str = "dataset.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: ImageVolume,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cases: Vec<Case>,
    pub vocabulary: Vec<ClassInfo>,
    pub hierarchy: BTreeMap<u32, Vec<u32>>,
    pub splits: SplitTable,
    pub phantom: Option<PhantomConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCase {
    id: String,
    image: String,
    labels: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phantom: Option<PhantomConfig>,
    cases: Vec<ManifestCase>,
    vocabulary: Vec<ClassInfo>,
    hierarchy: BTreeMap<u32, Vec<u32>>,
    splits: SplitTable,
}

impl Dataset {
    /// Generates `ratios.total()` phantom cases (case seeds `0..n`) and
    /// `repeats` splits.
    pub fn synthesize(
        cfg: &PhantomConfig,
        ratios: SplitRatios,
        repeats: usize,
        split_seed: u64,
    ) -> Result<Self> {
        let anatomy = Anatomy::new(cfg)?;
        let n = ratios.total();
        let cases = (0..n as u64)
            .map(|seed| {
                let (image, labels) = synth::generate_from(cfg, &anatomy, seed)?;
                Ok(Case {
                    id: image.id.clone(),
                    image,
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = synth::make_splits_or_overlap(n, ratios, repeats, split_seed)?;
        let (vocabulary, hierarchy) = cfg.vocabulary();
        Ok(Dataset {
            cases,
            vocabulary,
            hierarchy,
            splits,
            phantom: Some(cfg.clone()),
        })
    }

    pub fn case(&self, index: usize) -> &Case {
        &self.cases[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.cases.iter().position(|c| c.id == id)
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&Case> {
        indices.iter().map(|&i| &self.cases[i]).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut cases = Vec::with_capacity(self.cases.len());
        for c in &self.cases {
            let image = c.id.clone();
            let labels = format!("{}_seg", c.id);
            io::save_volume(&dir.join(&image), &c.image)?;
            io::save_labels(&dir.join(&labels), &c.id, &c.labels, c.image.spacing)?;
            cases.push(ManifestCase {
                id: c.id.clone(),
                image,
                labels,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            phantom: self.phantom.clone(),
            cases,
            vocabulary: self.vocabulary.clone(),
            hierarchy: self.hierarchy.clone(),
            splits: self.splits.clone(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::malformed(
                &path,
                format!("unsupported version {}", m.version),
            ));
        }
        let cases = m
            .cases
            .iter()
            .map(|c| {
                let image = io::load_volume(&dir.join(&c.image))?;
                let labels = io::load_labels(&dir.join(&c.labels))?;
                if image.dims() != labels.dims() {
                    return Err(Error::grid(&image.dims(), &labels.dims()));
                }
                if labels.vocabulary != m.vocabulary || labels.hierarchy != m.hierarchy {
                    return Err(Error::malformed(
                        dir.join(&c.labels),
                        "vocabulary or hierarchy differs from the manifest",
                    ));
                }
                Ok(Case {
                    id: c.id.clone(),
                    image,
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = cases.len();
        for s in &m.splits.splits {
            if [&s.train, &s.atlas, &s.val, &s.test]
                .iter()
                .any(|v| v.iter().any(|&i| i >= n))
            {
                return Err(Error::malformed(&path, "split refers to a missing case"));
            }
        }
        Ok(Dataset {
            cases,
            vocabulary: m.vocabulary,
            hierarchy: m.hierarchy,
            splits: m.splits,
            phantom: m.phantom,
        })
    }
}
