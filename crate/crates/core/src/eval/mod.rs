//! Translate-then-segment scoring, summary statistics and reports.

pub mod pipeline;
pub mod plots;
pub mod report;
pub mod scores;
pub mod stats;

pub use pipeline::{mds1_evaluate, noise_probe, segment, EvalSet, IdentityTranslation, PatchRow, ProbeResult, TargetToSource};
pub use report::{correlate_dsm_f1, report, CellRow, Correlation, EvaluationReport, ProbeRow};
pub use scores::{connected_components, object_f1, pixel_f1};
pub use stats::spearman;
