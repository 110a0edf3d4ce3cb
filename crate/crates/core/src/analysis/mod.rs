//! Explaining discovered attacks and summarizing per-user results.

mod explain;
mod report;

pub use explain::{
    attribute_accuracy, classify_difference_like, classify_generalized_difference_like,
    subset_counts, Attribution, SubsetCounts,
};
pub use report::{
    histogram, vulnerability_scan, wilson_interval, Aggregate, AttackReport, Explainability,
    ScanEntry, ScanReport, Timing, UserReport, HISTOGRAM_BIN_WIDTH,
};
