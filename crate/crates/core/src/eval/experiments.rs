//! Desk-scale experiment drivers: class-count sweep, many-class comparison
//! and coarse-to-fine refinement.

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Case, Dataset};
use crate::error::{Error, Result};
use crate::eval::report::{evaluate, mean, DiceReport, Evaluation, EMPTY_DICE_NOTE, THRESHOLD};
use crate::eval::{dice, PairedTTest};
use crate::infer::{Condition, Engine, Target};
use crate::model::memory::{estimate_activation_memory, ActivationMeter};
use crate::rng::{derive_seed, tags};
use crate::synth::{Layout, PhantomConfig, SplitRatios};
use crate::train::{model_config, train_dataset, HeadKind, TrainConfig};
use crate::volume::{binarize, ClassSet};

pub const SCHEMA_VERSION: u32 = 1;

/// Training recipe used by every driver unless overridden.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-4,
        epochs: 150,
        batch_size: 2,
        mask_gain: 1000.0,
        val_every: 10,
        ..Default::default()
    }
}

fn desk_ratios() -> SplitRatios {
    SplitRatios::DESK
}

fn one() -> usize {
    1
}

/// Report header shared by all drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    pub threshold: f32,
    pub empty_dice: String,
}

impl Header {
    fn new(kind: &str) -> Self {
        Header {
            schema: kind.to_string(),
            version: SCHEMA_VERSION,
            threshold: THRESHOLD,
            empty_dice: EMPTY_DICE_NOTE.to_string(),
        }
    }
}

/// Best-checkpoint statistics of one trained arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mean_dice: f64,
    pub mean_dice_argmax: f64,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

impl ArmSummary {
    fn new(ck: &Checkpoint, ev: &Evaluation) -> Self {
        ArmSummary {
            mean_dice: ev.threshold.global_mean(),
            mean_dice_argmax: ev.argmax.global_mean(),
            best_epoch: ck.metadata.best_epoch,
            best_val_dice: ck.metadata.best_val_dice,
        }
    }
}

/// Trains one arm on `classes` and scores it on the test split.
fn run_arm(
    base: &TrainConfig,
    ds: &Dataset,
    head: HeadKind,
    split: usize,
    seed: u64,
    classes: &[u32],
    workers: usize,
) -> Result<(Checkpoint, Evaluation)> {
    let config = TrainConfig {
        head,
        split,
        seed,
        classes: Some(classes.to_vec()),
        ..base.clone()
    };
    info!(
        "training {head:?} on {} classes, split {split}",
        classes.len()
    );
    let ck = train_dataset(&config, ds)?;
    let engine = Engine::new(&ck)?;
    let targets: Vec<Target> = classes
        .iter()
        .map(|&c| Target::class(c, &ds.vocabulary))
        .collect();
    let test = ds.select(&ds.splits.splits[split].test);
    let ev = evaluate(&engine, &test, &targets, workers)?;
    Ok((ck, ev))
}

fn model_name(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Baseline => "baseline",
        HeadKind::Lcs => "lcs",
    }
}

fn rows_of(
    ev: &Evaluation,
    model: HeadKind,
) -> impl Iterator<Item = (String, u32, &'static str, f64, f64)> + '_ {
    ev.threshold
        .records()
        .iter()
        .zip(ev.argmax.records())
        .map(move |(t, a)| (t.case.clone(), t.class, model_name(model), t.dice, a.dice))
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    #[serde(default = "desk_ratios")]
    pub ratios: SplitRatios,
    /// Repeat `r` uses split `r` and training seed `derive_seed(seed, r)`.
    pub repeats: usize,
    /// Count `c` trains on the first `c` vocabulary classes.
    pub counts: Vec<usize>,
    pub train: TrainConfig,
    #[serde(default = "one")]
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed: 0,
            phantom: PhantomConfig {
                n_coarse: 8,
                fine_split: BTreeMap::new(),
                ..Default::default()
            },
            ratios: SplitRatios::DESK,
            repeats: 3,
            counts: vec![2, 4, 8],
            train: desk_train_config(),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub repeat: usize,
    pub case: String,
    pub class: u32,
    pub model: String,
    pub dice: f64,
    pub dice_argmax: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub count: usize,
    pub repeat: usize,
    pub train_seed: u64,
    pub baseline: ArmSummary,
    pub lcs: ArmSummary,
    /// LCS minus baseline over (case, class).
    pub t_test: PairedTTest,
    /// LCS minus baseline over per-case means.
    pub t_test_case_means: PairedTTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCount {
    pub count: usize,
    pub baseline_mean: f64,
    pub lcs_mean: f64,
    /// Repeats where the LCS mean is strictly above the baseline mean.
    pub lcs_wins: usize,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub header: Header,
    pub config: SweepConfig,
    pub runs: Vec<SweepRun>,
    pub counts: Vec<SweepCount>,
    #[serde(skip)]
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn runs_for(&self, count: usize) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(move |r| r.count == count)
    }
}

pub fn run_class_sweep(config: &SweepConfig) -> Result<SweepReport> {
    let max = config
        .counts
        .iter()
        .copied()
        .max()
        .ok_or(Error::EmptyVocabulary)?;
    let ds = Dataset::synthesize(
        &config.phantom,
        config.ratios,
        config.repeats,
        derive_seed(config.seed, tags::SPLITS),
    )?;
    let vocab: Vec<u32> = ds.vocabulary.iter().map(|c| c.id).collect();
    if vocab.len() < max {
        return Err(Error::InvalidConfig(format!(
            "sweep needs {max} classes, vocabulary has {}",
            vocab.len()
        )));
    }
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &count in &config.counts {
        let classes = &vocab[..count];
        for repeat in 0..config.repeats {
            let seed = derive_seed(config.seed, repeat as u64);
            let arm = |head| {
                run_arm(
                    &config.train,
                    &ds,
                    head,
                    repeat,
                    seed,
                    classes,
                    config.workers,
                )
            };
            let (bck, bev) = arm(HeadKind::Baseline)?;
            let (lck, lev) = arm(HeadKind::Lcs)?;
            for (model, ev) in [(HeadKind::Baseline, &bev), (HeadKind::Lcs, &lev)] {
                rows.extend(
                    rows_of(ev, model).map(|(case, class, model, dice, dice_argmax)| SweepRow {
                        count,
                        repeat,
                        case,
                        class,
                        model: model.into(),
                        dice,
                        dice_argmax,
                    }),
                );
            }
            let run = SweepRun {
                count,
                repeat,
                train_seed: seed,
                baseline: ArmSummary::new(&bck, &bev),
                lcs: ArmSummary::new(&lck, &lev),
                t_test: lev.threshold.t_test(&bev.threshold)?,
                t_test_case_means: lev.threshold.t_test_case_means(&bev.threshold)?,
            };
            info!(
                "count {count} repeat {repeat}: baseline {:.4}, lcs {:.4}",
                run.baseline.mean_dice, run.lcs.mean_dice
            );
            runs.push(run);
        }
    }
    let counts = config
        .counts
        .iter()
        .map(|&count| {
            let rs: Vec<&SweepRun> = runs.iter().filter(|r| r.count == count).collect();
            SweepCount {
                count,
                baseline_mean: mean(rs.iter().map(|r| r.baseline.mean_dice)),
                lcs_mean: mean(rs.iter().map(|r| r.lcs.mean_dice)),
                lcs_wins: rs
                    .iter()
                    .filter(|r| r.lcs.mean_dice > r.baseline.mean_dice)
                    .count(),
                repeats: rs.len(),
            }
        })
        .collect();
    Ok(SweepReport {
        header: Header::new("sweep"),
        config: config.clone(),
        runs,
        counts,
        rows,
    })
}

// ----------------------------------------------------------- many-class

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManyClassConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    #[serde(default = "desk_ratios")]
    pub ratios: SplitRatios,
    /// Number of classes, taken from the start of the vocabulary.
    pub k: usize,
    /// Most classes a single baseline model may carry.
    pub c_max: usize,
    pub train: TrainConfig,
    #[serde(default = "one")]
    pub workers: usize,
}

impl Default for ManyClassConfig {
    fn default() -> Self {
        ManyClassConfig {
            seed: 0,
            phantom: PhantomConfig {
                n_coarse: 24,
                fine_split: BTreeMap::new(),
                layout: Layout::Scattered,
                radius_short: [2.0, 2.5],
                radius_long: [2.5, 3.5],
                ..Default::default()
            },
            ratios: SplitRatios::DESK,
            k: 24,
            c_max: 8,
            train: desk_train_config(),
            workers: 1,
        }
    }
}

/// Splits `classes` into `ceil(len / c_max)` consecutive groups whose sizes
/// differ by at most one.
pub fn class_groups(classes: &[u32], c_max: usize) -> Vec<Vec<u32>> {
    if classes.is_empty() || c_max == 0 {
        return Vec::new();
    }
    let g = classes.len().div_ceil(c_max);
    let (q, r) = (classes.len() / g, classes.len() % g);
    let mut out = Vec::with_capacity(g);
    let mut start = 0;
    for i in 0..g {
        let n = q + usize::from(i < r);
        out.push(classes[start..start + n].to_vec());
        start += n;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBar {
    pub class: u32,
    pub name: String,
    pub baseline: f64,
    pub lcs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMemory {
    pub classes: Vec<u32>,
    pub bytes: u64,
}

/// Training activation estimates (one sample, f32) and measured inference
/// peaks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySidecar {
    pub bytes_per_scalar: usize,
    pub lcs_train_bytes: u64,
    pub baseline_at_k_train_bytes: u64,
    pub baseline_groups: Vec<GroupMemory>,
    pub lcs_infer_peak_bytes: usize,
    pub baseline_infer_peak_bytes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManyClassRow {
    pub case: String,
    pub class: u32,
    pub model: String,
    pub dice: f64,
    pub dice_argmax: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManyClassReport {
    pub header: Header,
    pub config: ManyClassConfig,
    pub baseline_groups: Vec<Vec<u32>>,
    pub baseline_mean: f64,
    pub lcs_mean: f64,
    /// LCS minus baseline over (case, class).
    pub t_test: PairedTTest,
    /// Ascending by baseline score, ties by class id.
    pub bars: Vec<ClassBar>,
    pub memory: MemorySidecar,
    #[serde(skip)]
    pub rows: Vec<ManyClassRow>,
}

pub fn run_many_class(config: &ManyClassConfig) -> Result<ManyClassReport> {
    let ds = Dataset::synthesize(
        &config.phantom,
        config.ratios,
        1,
        derive_seed(config.seed, tags::SPLITS),
    )?;
    let vocab: Vec<u32> = ds.vocabulary.iter().map(|c| c.id).collect();
    if vocab.len() < config.k || config.k == 0 {
        return Err(Error::InvalidConfig(format!(
            "many-class run needs {} classes, vocabulary has {}",
            config.k,
            vocab.len()
        )));
    }
    if config.c_max == 0 {
        return Err(Error::InvalidConfig("c_max must be >= 1".into()));
    }
    let classes = &vocab[..config.k];
    let seed = derive_seed(config.seed, 0);
    let groups = class_groups(classes, config.c_max);

    let mut baseline = Evaluation::default();
    let mut groups_mem = Vec::new();
    let mut base_peaks = Vec::new();
    let grid = config.phantom.grid;
    for g in &groups {
        let (_, ev) = run_arm(
            &config.train,
            &ds,
            HeadKind::Baseline,
            0,
            seed,
            g,
            config.workers,
        )?;
        baseline.threshold = std::mem::take(&mut baseline.threshold).merge(ev.threshold)?;
        baseline.argmax = std::mem::take(&mut baseline.argmax).merge(ev.argmax)?;
        base_peaks.push(ev.peak_activation_bytes);
        let head = TrainConfig {
            head: HeadKind::Baseline,
            ..config.train.clone()
        };
        groups_mem.push(GroupMemory {
            classes: g.clone(),
            bytes: estimate_activation_memory(&model_config(&head, grid, g.len()), 4),
        });
    }
    let (_, lcs) = run_arm(
        &config.train,
        &ds,
        HeadKind::Lcs,
        0,
        seed,
        classes,
        config.workers,
    )?;

    let lcs_cfg = TrainConfig {
        head: HeadKind::Lcs,
        ..config.train.clone()
    };
    let base_cfg = TrainConfig {
        head: HeadKind::Baseline,
        ..config.train.clone()
    };
    let memory = MemorySidecar {
        bytes_per_scalar: 4,
        lcs_train_bytes: estimate_activation_memory(&model_config(&lcs_cfg, grid, 1), 4),
        baseline_at_k_train_bytes: estimate_activation_memory(
            &model_config(&base_cfg, grid, config.k),
            4,
        ),
        baseline_groups: groups_mem,
        lcs_infer_peak_bytes: lcs.peak_activation_bytes,
        baseline_infer_peak_bytes: base_peaks,
    };

    let names: BTreeMap<u32, String> = ds
        .vocabulary
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect();
    let bm = baseline.threshold.per_class_mean();
    let lm = lcs.threshold.per_class_mean();
    let mut bars: Vec<ClassBar> = classes
        .iter()
        .map(|c| ClassBar {
            class: *c,
            name: names[c].clone(),
            baseline: bm[c],
            lcs: lm[c],
        })
        .collect();
    bars.sort_by(|a, b| {
        a.baseline
            .total_cmp(&b.baseline)
            .then(a.class.cmp(&b.class))
    });

    let mut rows = Vec::new();
    for (model, ev) in [(HeadKind::Baseline, &baseline), (HeadKind::Lcs, &lcs)] {
        rows.extend(
            rows_of(ev, model).map(|(case, class, model, dice, dice_argmax)| ManyClassRow {
                case,
                class,
                model: model.into(),
                dice,
                dice_argmax,
            }),
        );
    }
    Ok(ManyClassReport {
        header: Header::new("manyclass"),
        config: config.clone(),
        baseline_groups: groups,
        baseline_mean: baseline.threshold.global_mean(),
        lcs_mean: lcs.threshold.global_mean(),
        t_test: lcs.threshold.t_test(&baseline.threshold)?,
        bars,
        memory,
        rows,
    })
}

// -------------------------------------------------------- coarse to fine

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseToFineConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    #[serde(default = "desk_ratios")]
    pub ratios: SplitRatios,
    /// LCS training; `classes` defaults to the coarse vocabulary.
    pub train: TrainConfig,
}

impl Default for CoarseToFineConfig {
    fn default() -> Self {
        CoarseToFineConfig {
            seed: 0,
            phantom: PhantomConfig::default(),
            ratios: SplitRatios::DESK,
            train: TrainConfig {
                head: HeadKind::Lcs,
                ..desk_train_config()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseToFineRow {
    pub case: String,
    pub parent: u32,
    pub child: u32,
    /// Parent-conditioned prediction against the parent.
    pub coarse: f64,
    /// Parent-conditioned prediction against the child.
    pub naive: f64,
    /// Child-mask-conditioned prediction against the child.
    pub fine: f64,
    /// Largest voxel difference between the parent-conditioned prediction
    /// and the prediction conditioned on the union of the parent's children.
    pub union_max_abs_diff: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChildSummary {
    pub parent: u32,
    pub child: u32,
    pub name: String,
    pub coarse: f64,
    pub naive: f64,
    pub fine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseToFineReport {
    pub header: Header,
    pub config: CoarseToFineConfig,
    pub trained_classes: Vec<u32>,
    pub best_epoch: usize,
    pub children: Vec<ChildSummary>,
    /// Children whose fine Dice is strictly above their naive Dice.
    pub fine_better: usize,
    pub fine_better_fraction: f64,
    pub union_max_abs_diff: f32,
    #[serde(skip)]
    pub rows: Vec<CoarseToFineRow>,
}

pub fn run_coarse_to_fine(config: &CoarseToFineConfig) -> Result<CoarseToFineReport> {
    let ds = Dataset::synthesize(
        &config.phantom,
        config.ratios,
        1,
        derive_seed(config.seed, tags::SPLITS),
    )?;
    if ds.hierarchy.values().all(|c| c.is_empty()) {
        return Err(Error::InvalidConfig(
            "coarse-to-fine needs a label hierarchy".into(),
        ));
    }
    let train = TrainConfig {
        head: HeadKind::Lcs,
        seed: derive_seed(config.seed, 0),
        split: 0,
        ..config.train.clone()
    };
    let ck = train_dataset(&train, &ds)?;
    if let Some(c) = ck
        .classes
        .iter()
        .find(|c| ds.hierarchy.values().flatten().any(|f| f == *c))
    {
        return Err(Error::InvalidConfig(format!(
            "coarse-to-fine training must not see fine class {c}"
        )));
    }
    let engine = Engine::new(&ck)?;
    let atlas = ck.atlas.as_ref().expect("LCS checkpoint carries an atlas");
    let test: Vec<&Case> = ds.select(&ds.splits.splits[0].test);
    let meter = ActivationMeter::new();
    let names: BTreeMap<u32, String> = ds
        .vocabulary
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect();

    let mut rows = Vec::new();
    for (&parent, children) in ds.hierarchy.iter().filter(|(p, _)| ck.classes.contains(p)) {
        let union: ClassSet = children.iter().copied().collect();
        for case in &test {
            let by_parent = engine.segment_one(
                &case.image,
                &Condition::Classes(ClassSet::from([parent])),
                &meter,
            )?;
            let by_union =
                engine.segment_one(&case.image, &Condition::Classes(union.clone()), &meter)?;
            let diff = by_parent
                .data()
                .iter()
                .zip(by_union.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            let pred_parent = by_parent.threshold(0, THRESHOLD);
            let coarse = dice(
                &pred_parent,
                &binarize(&case.labels, &ClassSet::from([parent]))?,
            )?;
            for &child in children {
                let set = ClassSet::from([child]);
                let gt = binarize(&case.labels, &set)?;
                let novel = binarize(&atlas.labels, &set)?;
                let by_child = engine.segment_one(&case.image, &Condition::Mask(novel), &meter)?;
                rows.push(CoarseToFineRow {
                    case: case.id.clone(),
                    parent,
                    child,
                    coarse,
                    naive: dice(&pred_parent, &gt)?,
                    fine: dice(&by_child.threshold(0, THRESHOLD), &gt)?,
                    union_max_abs_diff: diff,
                });
            }
        }
    }
    rows.sort_by(|a, b| (a.parent, a.child, &a.case).cmp(&(b.parent, b.child, &b.case)));
    let mut children: Vec<ChildSummary> = Vec::new();
    for r in &rows {
        if children.last().map(|c| c.child) != Some(r.child) {
            let of = |f: fn(&CoarseToFineRow) -> f64| {
                mean(rows.iter().filter(|x| x.child == r.child).map(f))
            };
            children.push(ChildSummary {
                parent: r.parent,
                child: r.child,
                name: names[&r.child].clone(),
                coarse: of(|x| x.coarse),
                naive: of(|x| x.naive),
                fine: of(|x| x.fine),
            });
        }
    }
    let fine_better = children.iter().filter(|c| c.fine > c.naive).count();
    Ok(CoarseToFineReport {
        header: Header::new("coarse2fine"),
        config: config.clone(),
        trained_classes: ck.classes.clone(),
        best_epoch: ck.metadata.best_epoch,
        fine_better,
        fine_better_fraction: fine_better as f64 / children.len().max(1) as f64,
        union_max_abs_diff: rows
            .iter()
            .map(|r| r.union_max_abs_diff)
            .fold(0f32, f32::max),
        children,
        rows,
    })
}

/// Evaluates a checkpoint on the test split of `split` (the `eval`
/// subcommand).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: Header,
    pub model: String,
    pub split: usize,
    pub classes: Vec<u32>,
    pub mean_dice: f64,
    pub mean_dice_argmax: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub peak_activation_bytes: usize,
    pub threshold_scores: DiceReport,
    pub argmax_scores: DiceReport,
}

pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    ds: &Dataset,
    split: usize,
    workers: usize,
) -> Result<EvalReport> {
    let s = ds
        .splits
        .splits
        .get(split)
        .ok_or_else(|| Error::InvalidConfig(format!("dataset has no split {split}")))?;
    let engine = Engine::new(ck)?;
    let targets = engine.default_targets();
    let ev = evaluate(&engine, &ds.select(&s.test), &targets, workers)?;
    Ok(EvalReport {
        header: Header::new("eval"),
        model: if engine.is_lcs() { "lcs" } else { "baseline" }.into(),
        split,
        classes: ck.classes.clone(),
        mean_dice: ev.threshold.global_mean(),
        mean_dice_argmax: ev.argmax.global_mean(),
        per_class: ev.threshold.per_class_mean(),
        peak_activation_bytes: ev.peak_activation_bytes,
        threshold_scores: ev.threshold,
        argmax_scores: ev.argmax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_are_balanced() {
        let k: Vec<u32> = (1..=24).collect();
        let g = class_groups(&k, 8);
        assert_eq!(g.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 8]);
        let k: Vec<u32> = (1..=95).collect();
        let g = class_groups(&k, 10);
        assert_eq!(g.len(), 10);
        assert!(g.iter().all(|x| x.len() == 9 || x.len() == 10));
        assert_eq!(g.concat(), k);
    }

    #[test]
    fn default_phantoms_generate() {
        for cfg in [
            SweepConfig::default().phantom,
            ManyClassConfig::default().phantom,
            CoarseToFineConfig::default().phantom,
        ] {
            crate::synth::Anatomy::new(&cfg).unwrap();
        }
    }
}
