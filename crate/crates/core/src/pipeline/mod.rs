//! File formats, evaluation, accounting and the CLI stages.

mod config;
mod eval;
mod file;
mod quantize;
mod report;
pub mod stages;

pub use config::{RunConfig, Seeds, Stage};
pub use eval::{evaluate, evaluate_per_position, mean_nll, EvalMetrics, EvalSet};
pub use file::{FileHeader, PackedModelFile, SectionEntry, SectionKind, FILE_VERSION};
pub use quantize::{quantize_model, QuantizedModel, Quantizer, BACKBONE_BITS};
pub use report::{accounting, Report};
pub use stages::write_atomic;
