//! Iterative scale optimization: closed-form update, then decoupled search,
//! repeated until the relative improvement drops below the tolerance.
//!
//! The same loop drives the ablations: `cjso` skips the search phase and
//! `dss` skips the closed-form phase. When both phases run, a search pass
//! from the incoming state is also evaluated and the lower of the two end
//! losses is kept. An iteration whose end loss is higher than the incoming
//! loss is rolled back, so the retained loss is non-increasing for every
//! method.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::block::{quantize_tensor_baseline, reconstruction_error, Layout, Method, QuantConfig, QuantizedTensor};
use crate::cjso::{cjso_step, ScaleState};
use crate::dss::dss_refine_tensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which candidate state an iteration kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    /// The full pass of the method's phases.
    Accepted,
    /// Closed-form plus search lost to a search pass from the incoming state.
    Fallback,
    /// Both candidates were worse; the incoming state is kept.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub loss_after_cjso: Option<f64>,
    pub loss_after_dss: Option<f64>,
    /// Loss of the state carried into the next iteration.
    pub loss: f64,
    pub rel_improvement: f64,
    pub outcome: Outcome,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    pub tensor: String,
    pub initial_loss: f64,
    pub records: Vec<IterationRecord>,
}

impl ConvergenceTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub tensor: QuantizedTensor,
    /// Sum of squared reconstruction errors of `tensor` against the source.
    pub sse: f64,
    pub mse: f64,
    pub trace: ConvergenceTrace,
    pub iterations: usize,
}

/// True when the loop should stop: `prev` is zero or the relative
/// improvement is strictly below `tol`.
pub fn early_stop(prev_loss: f64, cur_loss: f64, tol: f64) -> Result<bool> {
    if cur_loss > prev_loss {
        return Err(Error::LossIncreased {
            prev: prev_loss,
            cur: cur_loss,
        });
    }
    if prev_loss == 0.0 {
        return Ok(true);
    }
    Ok((prev_loss - cur_loss) / prev_loss < tol)
}

#[derive(Clone, Copy)]
struct Phases {
    closed_form: bool,
    search: bool,
}

fn run_loop(padded: &[f64], mut state: ScaleState, config: &QuantConfig, phases: Phases, name: &str) -> Result<(ScaleState, ConvergenceTrace)> {
    let mut trace = ConvergenceTrace {
        tensor: name.to_string(),
        initial_loss: state.loss,
        records: Vec::new(),
    };
    for t in 0..config.max_iters {
        let started = Instant::now();
        let prev = state.loss;
        let mut next = state.clone();
        let mut loss_after_cjso = None;
        let mut loss_after_dss = None;
        if phases.closed_form {
            next = cjso_step(padded, &next)?;
            loss_after_cjso = Some(next.loss);
        }
        if phases.search {
            next = dss_refine_tensor(padded, &next, config)?;
            loss_after_dss = Some(next.loss);
        }
        let mut outcome = Outcome::Accepted;
        if phases.closed_form && phases.search {
            let fallback = dss_refine_tensor(padded, &state, config)?;
            if fallback.loss < next.loss {
                next = fallback;
                outcome = Outcome::Fallback;
            }
        }
        if next.loss <= prev {
            state = next;
        } else {
            outcome = Outcome::Rejected;
        }
        let rel_improvement = if prev > 0.0 { (prev - state.loss) / prev } else { 0.0 };
        trace.records.push(IterationRecord {
            iteration: t + 1,
            loss_after_cjso,
            loss_after_dss,
            loss: state.loss,
            rel_improvement,
            outcome,
            wall_time: started.elapsed(),
        });
        if early_stop(prev, state.loss, config.early_stop_tol)? {
            break;
        }
    }
    Ok((state, trace))
}

fn finish(tensor: &Tensor, method: Method, qt: QuantizedTensor, trace: ConvergenceTrace) -> Result<MethodResult> {
    let stats = reconstruction_error(tensor, &qt)?;
    let iterations = trace.records.len();
    Ok(MethodResult {
        method,
        tensor: qt,
        sse: stats.sse,
        mse: stats.mse,
        trace,
        iterations,
    })
}

fn optimize(tensor: &Tensor, config: &QuantConfig, method: Method, phases: Phases) -> Result<MethodResult> {
    let config = QuantConfig {
        method,
        ..config.clone()
    };
    config.validate()?;
    tensor.check_quantizable()?;
    let layout = Layout::new(&tensor.shape, config.block_size);
    let padded = layout.pad(&tensor.values);
    let init = ScaleState::max_based(&padded, config.format, config.block_size)?;
    let (state, trace) = run_loop(&padded, init, &config, phases, &tensor.name)?;
    finish(tensor, method, state.to_quantized(&tensor.name, &tensor.shape), trace)
}

/// Closed-form update followed by decoupled search, every iteration.
pub fn soar_quantize(tensor: &Tensor, config: &QuantConfig) -> Result<MethodResult> {
    let phases = Phases {
        closed_form: true,
        search: true,
    };
    optimize(tensor, config, Method::Soar, phases)
}

/// The loop with the search phase skipped.
pub fn cjso_only_quantize(tensor: &Tensor, config: &QuantConfig) -> Result<MethodResult> {
    let phases = Phases {
        closed_form: true,
        search: false,
    };
    optimize(tensor, config, Method::Cjso, phases)
}

/// Max-based init followed by search passes only; the global scale never moves.
pub fn dss_only_quantize(tensor: &Tensor, config: &QuantConfig) -> Result<MethodResult> {
    let phases = Phases {
        closed_form: false,
        search: true,
    };
    optimize(tensor, config, Method::Dss, phases)
}

pub fn baseline_quantize(tensor: &Tensor, config: &QuantConfig) -> Result<MethodResult> {
    let config = QuantConfig {
        method: Method::Baseline,
        ..config.clone()
    };
    let qt = quantize_tensor_baseline(tensor, &config)?;
    finish(tensor, Method::Baseline, qt, ConvergenceTrace {
        tensor: tensor.name.clone(),
        ..Default::default()
    })
}

/// Dispatches on `config.method`.
pub fn quantize(tensor: &Tensor, config: &QuantConfig) -> Result<MethodResult> {
    match config.method {
        Method::Baseline => baseline_quantize(tensor, config),
        Method::Cjso => cjso_only_quantize(tensor, config),
        Method::Dss => dss_only_quantize(tensor, config),
        Method::Soar => soar_quantize(tensor, config),
    }
}
