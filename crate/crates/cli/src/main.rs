use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha1::{Digest, Sha1};

use lcs_core::checkpoint::{Checkpoint, TrainingMetadata};
use lcs_core::dataset::Dataset;
use lcs_core::eval::experiments::evaluate_checkpoint;
use lcs_core::eval::output::{rerender, write_json};
use lcs_core::eval::{
    run_class_sweep, run_coarse_to_fine, run_many_class, CoarseToFineConfig, ManyClassConfig,
    SweepConfig,
};
use lcs_core::infer::{Engine, Target};
use lcs_core::model::memory::estimate_activation_memory;
use lcs_core::model::ModelConfig;
use lcs_core::rng::{derive_seed, tags};
use lcs_core::synth::{PhantomConfig, SplitRatios};
use lcs_core::train::{train, TrainConfig, TrainInputs};
use lcs_core::volume::io::{load_mask, load_volume, save_labels, save_volume};
use lcs_core::volume::{Grid, ImageVolume};

/// Label conditioned segmentation experiments.
#[derive(Parser)]
#[command(name = "lcs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a baseline or LCS model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Continue the run stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment one image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `all`, a comma-separated id list, or `@mask` for a novel label
        /// drawn on the atlas grid.
        #[arg(long, default_value = "all")]
        labels: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Also write one probability volume per channel.
        #[arg(long)]
        probs: bool,
    },
    /// Score a checkpoint on the test cases of a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        split: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Baseline vs LCS over several class counts.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Baseline groups vs one LCS model on a large vocabulary.
    Manyclass {
        #[command(flatten)]
        common: Common,
    },
    /// Naive vs fine-grained Dice on a label hierarchy.
    Coarse2fine {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render the plots of the reports in `--out`.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Reads a JSON config and lays it over `T::default()`. Sections such as
/// `train` or `phantom` only need the keys that change; values below that
/// (e.g. `fine_split`) replace the default whole.
fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let user: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    let mut merged = serde_json::to_value(T::default())?;
    merge(&mut merged, user, 2);
    serde_json::from_value(merged).with_context(|| format!("invalid config {}", p.display()))
}

fn merge(base: &mut Value, over: Value, depth: usize) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if depth > 0 => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, depth - 1),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct GenerateConfig {
    /// `seed` in here is the phantom seed; splits use a stream derived
    /// from it.
    phantom: PhantomConfig,
    ratios: SplitRatios,
    repeats: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            phantom: PhantomConfig::default(),
            ratios: SplitRatios::DESK,
            repeats: 3,
        }
    }
}

/// Everything about a training run except the weights.
#[derive(Serialize)]
struct RunRecord<'a> {
    code_version: &'static str,
    code_hash: String,
    data: String,
    model: &'a ModelConfig,
    parameters: usize,
    activation_bytes_per_sample: u64,
    classes: &'a [u32],
    atlas: Option<&'a str>,
    metadata: &'a TrainingMetadata,
}

const CODE_VERSION: &str = concat!("lcs ", env!("CARGO_PKG_VERSION"));

/// SHA-1 of `content` as git hashes a blob object.
fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn generate(common: &Common) -> Result<()> {
    let mut cfg: GenerateConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.phantom.seed = s;
    }
    let ds = Dataset::synthesize(
        &cfg.phantom,
        cfg.ratios,
        cfg.repeats,
        derive_seed(cfg.phantom.seed, tags::SPLITS),
    )?;
    ds.save(&common.out)?;
    info!("wrote {} cases to {}", ds.cases.len(), common.out.display());
    Ok(())
}

fn train_cmd(common: &Common, data: &Path, resume: Option<&Path>) -> Result<()> {
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let ds = Dataset::load(data)?;
    let inputs = TrainInputs::from_dataset(&cfg, &ds)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let start = Instant::now();
    let ck = train(&cfg, &inputs, resume.as_ref())?;
    info!("trained in {:.1?}", start.elapsed());
    fs::create_dir_all(&common.out)?;
    ck.save(&common.out.join("model.lcs"))?;
    let record = RunRecord {
        code_version: CODE_VERSION,
        code_hash: git_blob_hash(CODE_VERSION.as_bytes()),
        data: data.display().to_string(),
        model: &ck.config,
        parameters: ck.params.len(),
        activation_bytes_per_sample: estimate_activation_memory(&ck.config, 4),
        classes: &ck.classes,
        atlas: ck.atlas_ref(),
        metadata: &ck.metadata,
    };
    write_json(&common.out.join("run.json"), &record)?;
    println!(
        "best epoch {} with validation Dice {:.4}",
        ck.metadata.best_epoch, ck.metadata.best_val_dice
    );
    Ok(())
}

fn parse_targets(engine: &Engine, spec: &str) -> Result<Vec<Target>> {
    let vocab = engine.vocabulary();
    if spec == "all" {
        return Ok(engine.default_targets());
    }
    if let Some(path) = spec.strip_prefix('@') {
        let mask = load_mask(Path::new(path))?;
        let name = Path::new(path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("novel")
            .to_string();
        // A mask built from one known class keeps that id.
        let id = match mask.source_classes.iter().collect::<Vec<_>>()[..] {
            [&id] if id != 0 => id,
            _ => vocab.iter().map(|c| c.id).max().unwrap_or(0) + 1,
        };
        return Ok(vec![Target::novel(id, name, mask)]);
    }
    let ids: BTreeSet<u32> = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|e| anyhow!("bad class id {s:?}: {e}"))
        })
        .collect::<Result<_>>()?;
    Ok(ids.into_iter().map(|id| Target::class(id, vocab)).collect())
}

#[derive(Serialize)]
struct InferRecord {
    image: String,
    ids: Vec<u32>,
    forward_passes: usize,
    peak_activation_bytes: usize,
}

fn infer_cmd(
    common: &Common,
    checkpoint: &Path,
    image: &Path,
    labels: &str,
    workers: usize,
    probs: bool,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let engine = Engine::new(&ck)?;
    let img = load_volume(image)?;
    let targets = parse_targets(&engine, labels)?;
    let seg = engine.segment_all(&img, &targets, workers)?;
    fs::create_dir_all(&common.out)?;
    save_labels(
        &common.out.join("segmentation"),
        &img.id,
        &seg.labels,
        img.spacing,
    )?;
    if probs {
        for (c, set) in seg.probs.channel_labels().iter().enumerate() {
            let name = match set.first() {
                Some(id) => format!("prob_{id}"),
                None => "prob_background".to_string(),
            };
            let v = ImageVolume::new(name.clone(), seg.probs.channel_grid(c), img.spacing)?;
            save_volume(&common.out.join(&name), &v)?;
        }
    }
    let record = InferRecord {
        image: img.id.clone(),
        ids: seg.labels.vocabulary.iter().map(|c| c.id).collect(),
        forward_passes: seg.forward_passes,
        peak_activation_bytes: seg.peak_activation_bytes,
    };
    write_json(&common.out.join("infer.json"), &record)?;
    let counts = count_labels(&seg.labels.grid);
    println!(
        "{} forward passes; voxels per label: {counts:?}",
        seg.forward_passes
    );
    Ok(())
}

fn count_labels(grid: &Grid<u32>) -> std::collections::BTreeMap<u32, usize> {
    let mut m = std::collections::BTreeMap::new();
    for &v in grid.data() {
        *m.entry(v).or_insert(0) += 1;
    }
    m
}

fn eval_cmd(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    split: usize,
    workers: usize,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    let report = evaluate_checkpoint(&ck, &ds, split, workers)?;
    report.write(&common.out)?;
    println!(
        "{}: mean Dice {:.4} (argmax {:.4}) over {} scores",
        report.model,
        report.mean_dice,
        report.mean_dice_argmax,
        report.threshold_scores.len()
    );
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let mut cfg: SweepConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let report = run_class_sweep(&cfg)?;
    report.write(&common.out)?;
    for c in &report.counts {
        println!(
            "count {:>2}: baseline {:.4}, lcs {:.4}, lcs ahead in {}/{} repeats",
            c.count, c.baseline_mean, c.lcs_mean, c.lcs_wins, c.repeats
        );
    }
    for r in &report.runs {
        println!(
            "count {:>2} repeat {}: paired t-test p = {}",
            r.count,
            r.repeat,
            r.t_test.p_display()
        );
    }
    Ok(())
}

fn manyclass(common: &Common) -> Result<()> {
    let mut cfg: ManyClassConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let report = run_many_class(&cfg)?;
    report.write(&common.out)?;
    println!(
        "baseline ({} models) {:.4}, lcs {:.4}, p = {}",
        report.baseline_groups.len(),
        report.baseline_mean,
        report.lcs_mean,
        report.t_test.p_display()
    );
    println!(
        "training activations per sample: lcs {} B, baseline at K {} B",
        report.memory.lcs_train_bytes, report.memory.baseline_at_k_train_bytes
    );
    Ok(())
}

fn coarse2fine(common: &Common) -> Result<()> {
    let mut cfg: CoarseToFineConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let report = run_coarse_to_fine(&cfg)?;
    report.write(&common.out)?;
    for c in &report.children {
        println!(
            "{:<16} coarse {:.3}  naive {:.3}  fine {:.3}",
            c.name, c.coarse, c.naive, c.fine
        );
    }
    println!(
        "fine above naive for {}/{} children",
        report.fine_better,
        report.children.len()
    );
    Ok(())
}

fn report(common: &Common) -> Result<()> {
    let found = rerender(&common.out)?;
    if found.is_empty() {
        bail!("no reports found in {}", common.out.display());
    }
    for k in found {
        println!("re-rendered {} plot", k.name());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate { common } => generate(common),
        Command::Train {
            common,
            data,
            resume,
        } => train_cmd(common, data, resume.as_deref()),
        Command::Infer {
            common,
            checkpoint,
            image,
            labels,
            workers,
            probs,
        } => infer_cmd(common, checkpoint, image, labels, *workers, *probs),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            workers,
        } => eval_cmd(common, checkpoint, data, *split, *workers),
        Command::Sweep { common } => sweep(common),
        Command::Manyclass { common } => manyclass(common),
        Command::Coarse2fine { common } => coarse2fine(common),
        Command::Report { common } => report(common),
    }
}
