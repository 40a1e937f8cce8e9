//! Checkpoint input, packed artifacts, reports and convergence traces.

pub mod packed;
pub mod report;
pub mod safetensors;

pub use packed::{decode_packed, encode_packed, read_packed, write_packed};
pub use report::{read_report, trace_to_csv, write_report, write_trace, Report, ReportRecord};
pub use safetensors::{encode_checkpoint, load_checkpoint, parse_checkpoint, write_checkpoint, Checkpoint, Dtype, TensorRecord};
