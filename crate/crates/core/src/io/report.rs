//! Per-tensor JSON report and CSV convergence trace.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::{Format, Method};
use crate::error::{Error, Result};
use crate::soar::{ConvergenceTrace, MethodResult, Outcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub method: Method,
    pub format: Format,
    pub mse: f64,
    pub sse: f64,
    pub iterations: usize,
    /// Payload bytes; the three fields below add up to it.
    pub bytes: usize,
    pub code_bytes: usize,
    pub scale_bytes: usize,
    pub global_scale_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub records: Vec<ReportRecord>,
}

impl Report {
    pub fn from_results(results: &[MethodResult]) -> Self {
        let records = results
            .iter()
            .map(|r| ReportRecord {
                name: r.tensor.name.clone(),
                shape: r.tensor.shape.clone(),
                method: r.method,
                format: r.tensor.format,
                mse: r.mse,
                sse: r.sse,
                iterations: r.iterations,
                bytes: r.tensor.payload_bytes(),
                code_bytes: r.tensor.code_bytes(),
                scale_bytes: r.tensor.scale_bytes(),
                global_scale_bytes: r.tensor.global_scale_bytes(),
            })
            .collect();
        Self { records }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn write_report(path: impl AsRef<Path>, results: &[MethodResult]) -> Result<()> {
    let path = path.as_ref();
    let json = Report::from_results(results).to_json()?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Report> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Serialize)]
struct TraceRow<'a> {
    tensor: &'a str,
    iteration: usize,
    loss_after_cjso: Option<f64>,
    loss_after_dss: Option<f64>,
    loss: f64,
    rel_improvement: f64,
    outcome: Outcome,
}

/// Iteration rows of every trace, in the order given. Wall time is left out
/// so the table only depends on the inputs.
pub fn trace_to_csv<'a>(traces: impl IntoIterator<Item = &'a ConvergenceTrace>, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([
        "tensor",
        "iteration",
        "loss_after_cjso",
        "loss_after_dss",
        "loss",
        "rel_improvement",
        "outcome",
    ])?;
    for t in traces {
        for r in &t.records {
            w.serialize(TraceRow {
                tensor: &t.tensor,
                iteration: r.iteration,
                loss_after_cjso: r.loss_after_cjso,
                loss_after_dss: r.loss_after_dss,
                loss: r.loss,
                rel_improvement: r.rel_improvement,
                outcome: r.outcome,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

pub fn write_trace<'a>(path: impl AsRef<Path>, traces: impl IntoIterator<Item = &'a ConvergenceTrace>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    trace_to_csv(traces, std::io::BufWriter::new(file))
}
