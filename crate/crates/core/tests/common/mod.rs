#![allow(dead_code)]

use std::collections::BTreeMap;

use lcs_core::checkpoint::{Checkpoint, TrainingMetadata};
use lcs_core::conditioning::Atlas;
use lcs_core::dataset::Dataset;
use lcs_core::eval::{CoarseToFineConfig, ManyClassConfig, SweepConfig};
use lcs_core::model::{Head, ModelConfig, UNet};
use lcs_core::synth::{PhantomConfig, SplitRatios};
use lcs_core::train::{HeadKind, TrainConfig};

/// 16^3 phantom: classes 1..=3, class 2 split into 4 and 5.
pub fn small_phantom() -> PhantomConfig {
    PhantomConfig {
        n_coarse: 3,
        fine_split: BTreeMap::from([(2, 2)]),
        grid: [16, 16, 16],
        radius_short: [1.5, 2.0],
        radius_long: [2.0, 2.5],
        position_jitter: 0.5,
        ..Default::default()
    }
}

pub fn small_ratios() -> SplitRatios {
    SplitRatios {
        train: 3,
        atlas: 1,
        val: 1,
        test: 2,
    }
}

pub fn small_dataset(repeats: usize) -> Dataset {
    Dataset::synthesize(&small_phantom(), small_ratios(), repeats, 3).unwrap()
}

/// A few epochs of a 2-channel-wide model; seconds to run.
pub fn quick_train(head: HeadKind) -> TrainConfig {
    TrainConfig {
        lr: 3e-4,
        epochs: 3,
        batch_size: 2,
        base_channels: 2,
        mask_gain: 1000.0,
        val_every: 1,
        head,
        ..Default::default()
    }
}

/// Randomly initialised checkpoint over the small dataset.
pub fn untrained(head: Head, seed: u64) -> (Checkpoint, Dataset) {
    let ds = small_dataset(1);
    let atlas_case = ds.case(ds.splits.splits[0].atlas[0]);
    let config = ModelConfig::new(head, [16, 16, 16])
        .with_base_channels(4)
        .with_seed(seed)
        .with_mask_gain(100.0);
    let model = UNet::<f32>::new(config.clone()).unwrap();
    let classes = match head {
        Head::Baseline { classes } => (1..=classes as u32).collect(),
        Head::Lcs => vec![1, 2, 3],
    };
    let ck = Checkpoint {
        config,
        params: model.params().clone(),
        classes,
        vocabulary: ds.vocabulary.clone(),
        hierarchy: ds.hierarchy.clone(),
        atlas: head
            .is_lcs()
            .then(|| Atlas::new(&atlas_case.image, atlas_case.labels.clone()).unwrap()),
        metadata: TrainingMetadata::default(),
        resume: None,
    };
    (ck, ds)
}

pub fn tiny_sweep() -> SweepConfig {
    SweepConfig {
        seed: 5,
        phantom: PhantomConfig {
            fine_split: BTreeMap::new(),
            ..small_phantom()
        },
        ratios: small_ratios(),
        repeats: 2,
        counts: vec![1, 3],
        train: TrainConfig {
            epochs: 2,
            ..quick_train(HeadKind::Baseline)
        },
        workers: 2,
    }
}

pub fn tiny_many_class() -> ManyClassConfig {
    ManyClassConfig {
        seed: 6,
        phantom: PhantomConfig {
            n_coarse: 4,
            fine_split: BTreeMap::new(),
            ..small_phantom()
        },
        ratios: small_ratios(),
        k: 4,
        c_max: 3,
        train: TrainConfig {
            epochs: 2,
            ..quick_train(HeadKind::Baseline)
        },
        workers: 1,
    }
}

pub fn tiny_coarse_to_fine() -> CoarseToFineConfig {
    CoarseToFineConfig {
        seed: 7,
        phantom: small_phantom(),
        ratios: small_ratios(),
        train: TrainConfig {
            epochs: 2,
            ..quick_train(HeadKind::Lcs)
        },
    }
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub mod oracle;
