//! Metrics, statistics and the experiment drivers.

pub mod experiments;
mod metrics;
pub mod output;
mod report;
mod stats;

pub use experiments::{
    run_class_sweep, run_coarse_to_fine, run_many_class, CoarseToFineConfig, CoarseToFineReport,
    EvalReport, ManyClassConfig, ManyClassReport, SweepConfig, SweepReport,
};
pub use metrics::{dice, dice_bits};
pub use report::{
    evaluate, score_segmentation, DiceRecord, DiceReport, Evaluation, EMPTY_DICE_NOTE, THRESHOLD,
};
pub use stats::{paired_t_test, PairedTTest, TTestStatus};
