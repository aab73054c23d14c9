//! Feature files, splitting, synthetic data, trace export and config files.

mod config;
mod dataset;
mod split;
mod synth;
mod trace;

pub use config::{parse_config, render_config, RunConfig};
pub use dataset::{load_features, Dataset, FeatureRecord};
pub use split::split;
pub use synth::{synth_generate, Modality, SyntheticSpec, Task};
pub use trace::{
    collect_traces, export_trace, parse_trace_csv, parse_trace_jsonl, write_trace_csv,
    write_trace_jsonl, TraceFormat, TraceKind, TraceRow,
};

/// Shortest decimal form that still carries 17 significant digits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
