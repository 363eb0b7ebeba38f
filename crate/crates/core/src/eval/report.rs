use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::eval::{dice, paired_t_test, PairedTTest};
use crate::infer::{Condition, Engine, Segmentation, Target};
use crate::volume::{binarize, BinaryMask, ClassSet};

/// Probability level at or above which a voxel counts as foreground.
pub const THRESHOLD: f32 = 0.5;

/// Stated in every report header.
pub const EMPTY_DICE_NOTE: &str = "dice of two empty masks is 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRecord {
    pub case: String,
    pub class: u32,
    pub dice: f64,
}

/// Per (case, class) Dice scores, sorted by key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    records: Vec<DiceRecord>,
}

impl DiceReport {
    pub fn new(mut records: Vec<DiceRecord>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.dice)) {
            return Err(Error::InvalidConfig(format!(
                "dice {} for ({}, {}) is outside [0, 1]",
                r.dice, r.case, r.class
            )));
        }
        records.sort_by(|a, b| (&a.case, a.class).cmp(&(&b.case, b.class)));
        if records
            .windows(2)
            .any(|w| (&w[0].case, w[0].class) == (&w[1].case, w[1].class))
        {
            return Err(Error::InvalidConfig(
                "duplicate (case, class) record".into(),
            ));
        }
        Ok(DiceReport { records })
    }

    pub fn records(&self) -> &[DiceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, case: &str, class: u32) -> Option<f64> {
        self.records
            .binary_search_by(|r| (r.case.as_str(), r.class).cmp(&(case, class)))
            .ok()
            .map(|i| self.records[i].dice)
    }

    pub fn merge(self, other: DiceReport) -> Result<Self> {
        let mut all = self.records;
        all.extend(other.records);
        DiceReport::new(all)
    }

    pub fn global_mean(&self) -> f64 {
        mean(self.records.iter().map(|r| r.dice))
    }

    pub fn per_class_mean(&self) -> BTreeMap<u32, f64> {
        group_mean(self.records.iter().map(|r| (r.class, r.dice)))
    }

    pub fn per_case_mean(&self) -> BTreeMap<String, f64> {
        group_mean(self.records.iter().map(|r| (r.case.clone(), r.dice)))
    }

    /// Scores of both reports aligned on their common keys, which must be
    /// all of the keys of either.
    pub fn paired(&self, other: &DiceReport) -> Result<(Vec<f64>, Vec<f64>)> {
        let keys = |r: &DiceReport| {
            r.records
                .iter()
                .map(|x| (x.case.clone(), x.class))
                .collect::<Vec<_>>()
        };
        if keys(self) != keys(other) {
            return Err(Error::InvalidConfig(
                "paired reports cover different (case, class) keys".into(),
            ));
        }
        Ok((
            self.records.iter().map(|r| r.dice).collect(),
            other.records.iter().map(|r| r.dice).collect(),
        ))
    }

    /// Paired t-test of `self - other` over (case, class).
    pub fn t_test(&self, other: &DiceReport) -> Result<PairedTTest> {
        let (a, b) = self.paired(other)?;
        paired_t_test(&a, &b)
    }

    /// Paired t-test of `self - other` over per-case means.
    pub fn t_test_case_means(&self, other: &DiceReport) -> Result<PairedTTest> {
        self.paired(other)?;
        let a: Vec<f64> = self.per_case_mean().into_values().collect();
        let b: Vec<f64> = other.per_case_mean().into_values().collect();
        paired_t_test(&a, &b)
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn group_mean<K: Ord>(items: impl Iterator<Item = (K, f64)>) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in items {
        let e = acc.entry(k).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

/// Thresholded and argmax Dice of one model over a set of cases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub threshold: DiceReport,
    pub argmax: DiceReport,
    /// Largest inference activation peak over the cases.
    pub peak_activation_bytes: usize,
}

/// Ground truth a target is scored against.
fn target_classes(t: &Target) -> ClassSet {
    match &t.condition {
        Condition::Classes(s) => s.clone(),
        Condition::Mask(m) => m.source_classes.clone(),
    }
}

/// Dice of every target in `seg` against `case`. Targets whose ground truth
/// is unknown (a mask without source classes) are skipped.
pub fn score_segmentation(
    seg: &Segmentation,
    case: &Case,
    targets: &[Target],
) -> Result<(Vec<DiceRecord>, Vec<DiceRecord>)> {
    let mut thr = Vec::new();
    let mut arg = Vec::new();
    for t in targets {
        let classes = target_classes(t);
        if classes.is_empty() {
            continue;
        }
        let gt = binarize(&case.labels, &classes)?;
        let k = seg
            .raw
            .channel_labels()
            .iter()
            .position(|s| s == &ClassSet::from([t.id]))
            .ok_or(Error::UnknownClass(t.id))?;
        let pred = seg.raw.threshold(k, THRESHOLD);
        thr.push(DiceRecord {
            case: case.id.clone(),
            class: t.id,
            dice: dice(&pred, &gt)?,
        });
        let am = BinaryMask::new(
            seg.labels.grid.map(|v| u8::from(v == t.id)),
            ClassSet::from([t.id]),
        )?;
        arg.push(DiceRecord {
            case: case.id.clone(),
            class: t.id,
            dice: dice(&am, &gt)?,
        });
    }
    Ok((thr, arg))
}

pub fn evaluate(
    engine: &Engine,
    cases: &[&Case],
    targets: &[Target],
    workers: usize,
) -> Result<Evaluation> {
    let mut thr = Vec::new();
    let mut arg = Vec::new();
    let mut peak = 0;
    for case in cases {
        let seg = engine.segment_all(&case.image, targets, workers)?;
        peak = peak.max(seg.peak_activation_bytes);
        let (t, a) = score_segmentation(&seg, case, targets)?;
        thr.extend(t);
        arg.extend(a);
    }
    Ok(Evaluation {
        threshold: DiceReport::new(thr)?,
        argmax: DiceReport::new(arg)?,
        peak_activation_bytes: peak,
    })
}
