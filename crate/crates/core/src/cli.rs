//! The `soarq` command line.
//!
//! Exit codes:
//!
//! | code | meaning                                         |
//! |------|-------------------------------------------------|
//! | 0    | success                                         |
//! | 2    | invalid flags or configuration                  |
//! | 3    | input checkpoint missing or malformed           |
//! | 4    | quantization failed                             |
//! | 5    | output could not be written                     |
//! | 6    | packed artifact missing, corrupt or mismatched  |

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::block::{reconstruction_error, Format, Method, QuantConfig};
use crate::error::Error;
use crate::io::{load_checkpoint, read_packed, write_packed, write_report, write_trace};
use crate::soar::{quantize, MethodResult};
use crate::synthetic::SyntheticSpec;
use crate::tensor::Tensor;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_QUANTIZE: u8 = 4;
pub const EXIT_OUTPUT: u8 = 5;
pub const EXIT_ARTIFACT: u8 = 6;

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  2  invalid flags or configuration
  3  input checkpoint missing or malformed
  4  quantization failed
  5  output could not be written
  6  packed artifact missing, corrupt or mismatched";

#[derive(Debug, Parser)]
#[command(name = "soarq", version, about = "NVFP4/MXFP4 weight quantization with optimized block scales", after_help = EXIT_CODES_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize every selected tensor and write a packed artifact.
    #[command(after_help = EXIT_CODES_HELP)]
    Quantize(QuantizeArgs),
    /// Run baseline, cjso, dss and soar on the same tensors and print their MSE.
    #[command(after_help = EXIT_CODES_HELP)]
    Compare(CompareArgs),
    /// Write the per-iteration loss table of cjso or soar.
    #[command(after_help = EXIT_CODES_HELP)]
    Trace(TraceArgs),
    /// Describe a packed artifact, optionally recomputing MSE against its source.
    #[command(after_help = EXIT_CODES_HELP)]
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    /// safetensors checkpoint to read.
    pub input: Option<PathBuf>,
    /// Generate a random tensor instead, e.g. `gaussian:4096` or `laplace:64x64`. Repeatable.
    #[arg(long, value_name = "KIND:N")]
    pub synthetic: Vec<String>,
    /// Seed for synthetic tensors; tensor i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only process tensors whose name matches this glob.
    #[arg(long, value_name = "GLOB")]
    pub filter: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    #[arg(long, value_enum, default_value_t = Format::Nvfp4)]
    pub format: Format,
    /// Maximum optimization iterations.
    #[arg(long, default_value_t = 15)]
    pub iters: usize,
    /// Stop once the relative loss improvement of an iteration is below this.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Lower multiplier of the quantization-scale grid.
    #[arg(long, default_value_t = 0.5)]
    pub grid_lo: f64,
    /// Upper multiplier of the quantization-scale grid.
    #[arg(long, default_value_t = 1.5)]
    pub grid_hi: f64,
    /// Step of the quantization-scale grid.
    #[arg(long, default_value_t = 0.01)]
    pub grid_step: f64,
    /// Representable dequantization scales searched around the analytic value.
    #[arg(long, default_value_t = 2)]
    pub neighbors: usize,
    /// Elements per block [default: 16 for nvfp4, 32 for mxfp4].
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "SOARQ_JOBS", default_value_t = default_jobs())]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl ConfigArgs {
    pub fn config(&self, method: Method) -> QuantConfig {
        QuantConfig {
            format: self.format,
            method,
            block_size: self.block_size.unwrap_or(self.format.default_block_size()),
            max_iters: self.iters,
            early_stop_tol: self.tol,
            grid_lo: self.grid_lo,
            grid_hi: self.grid_hi,
            grid_step: self.grid_step,
            dequant_neighbor_count: self.neighbors,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = Method::Soar)]
    pub method: Method,
    /// Packed artifact to write.
    #[arg(short = 'o', long = "output", value_name = "PATH")]
    pub output: PathBuf,
    /// JSON report, one record per tensor [default: the output path with a .json extension].
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// CSV convergence trace.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// JSON report with every method's record.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// cjso or soar.
    #[arg(long, value_enum, default_value_t = Method::Soar)]
    pub method: Method,
    /// CSV trace to write.
    #[arg(short = 'o', long = "trace", value_name = "PATH")]
    pub trace: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Packed artifact to read.
    pub artifact: PathBuf,
    /// Source checkpoint; enables MSE recomputation.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Synthetic source, as for `quantize`.
    #[arg(long, value_name = "KIND:N")]
    pub synthetic: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: Error,
}

impl Failure {
    fn new(code: u8) -> impl FnOnce(Error) -> Failure {
        move |error| Failure { code, error }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: Error::Config(msg),
    }
}

fn synthetic_tensors(specs: &[String], seed: u64) -> CliResult<Vec<Tensor>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spec: SyntheticSpec = s.parse().map_err(Failure::new(EXIT_USAGE))?;
            Ok(spec.generate(format!("synthetic.{i}"), seed.wrapping_add(i as u64)))
        })
        .collect()
}

/// Tensors named by the source flags, in checkpoint order.
pub fn load_tensors(source: &SourceArgs) -> CliResult<Vec<Tensor>> {
    let mut tensors = match (&source.input, source.synthetic.is_empty()) {
        (Some(_), false) => return Err(usage("give either an input checkpoint or --synthetic, not both".into())),
        (None, true) => return Err(usage("no input: give a checkpoint path or --synthetic KIND:N".into())),
        (Some(path), true) => {
            let ckpt = load_checkpoint(path).map_err(Failure::new(EXIT_INPUT))?;
            for s in &ckpt.skipped {
                eprintln!("warning: skipping `{}` ({}: {})", s.name, s.dtype, s.reason);
            }
            ckpt.tensors.into_iter().map(|r| r.tensor).collect()
        }
        (None, false) => synthetic_tensors(&source.synthetic, source.seed)?,
    };
    if let Some(filter) = &source.filter {
        let pattern = glob::Pattern::new(filter).map_err(|e| usage(format!("bad --filter `{filter}`: {e}")))?;
        tensors.retain(|t| pattern.matches(&t.name));
    }
    Ok(tensors)
}

fn thread_pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| usage(format!("cannot start {jobs} workers: {e}")))
}

/// Quantizes `tensors` on `jobs` workers; results keep the input order.
pub fn run_method(tensors: &[Tensor], config: &QuantConfig, jobs: usize) -> CliResult<Vec<MethodResult>> {
    config.validate().map_err(Failure::new(EXIT_USAGE))?;
    let pool = thread_pool(jobs)?;
    pool.install(|| tensors.par_iter().map(|t| quantize(t, config)).collect::<Result<Vec<_>, _>>())
        .map_err(Failure::new(EXIT_QUANTIZE))
}

fn print_results(out: &mut impl Write, results: &[MethodResult]) {
    let _ = writeln!(out, "{:<32} {:<8} {:<6} {:>24} {:>5} {:>10}", "tensor", "method", "format", "mse", "iters", "bytes");
    for r in results {
        let _ = writeln!(
            out,
            "{:<32} {:<8} {:<6} {:>24?} {:>5} {:>10}",
            r.tensor.name,
            r.method.name(),
            r.tensor.format.name(),
            r.mse,
            r.iterations,
            r.tensor.payload_bytes()
        );
    }
}

pub fn cmd_quantize(args: &QuantizeArgs, out: &mut impl Write) -> CliResult<()> {
    let config = args.config.config(args.method);
    config.validate().map_err(Failure::new(EXIT_USAGE))?;
    let tensors = load_tensors(&args.source)?;
    let results = run_method(&tensors, &config, args.config.jobs)?;
    let artifacts: Vec<_> = results.iter().map(|r| r.tensor.clone()).collect();
    write_packed(&args.output, &artifacts).map_err(Failure::new(EXIT_OUTPUT))?;
    let report = args.report.clone().unwrap_or_else(|| args.output.with_extension("json"));
    write_report(&report, &results).map_err(Failure::new(EXIT_OUTPUT))?;
    if let Some(path) = &args.trace {
        write_trace(path, results.iter().map(|r| &r.trace)).map_err(Failure::new(EXIT_OUTPUT))?;
    }
    print_results(out, &results);
    Ok(())
}

/// Per-method results of a comparison run, in `Method::ALL` order.
pub fn compare(tensors: &[Tensor], args: &ConfigArgs, diag: &mut impl Write) -> CliResult<Vec<(Method, Vec<MethodResult>)>> {
    let mut all = Vec::new();
    for method in Method::ALL {
        if !method.supports(args.format) {
            let _ = writeln!(diag, "skipping {method}: not available for {}", args.format);
            continue;
        }
        let results = run_method(tensors, &args.config(method), args.jobs)?;
        all.push((method, results));
    }
    Ok(all)
}

pub fn mean_mse(results: &[MethodResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| r.mse).sum::<f64>() / results.len() as f64
}

pub fn cmd_compare(args: &CompareArgs, out: &mut impl Write, diag: &mut impl Write) -> CliResult<()> {
    args.config.config(Method::Baseline).validate().map_err(Failure::new(EXIT_USAGE))?;
    let tensors = load_tensors(&args.source)?;
    let all = compare(&tensors, &args.config, diag)?;
    let _ = writeln!(out, "{:<10} {:>8} {:>24}", "method", "tensors", "mean_mse");
    for (method, results) in &all {
        let _ = writeln!(out, "{:<10} {:>8} {:>24?}", method.name(), results.len(), mean_mse(results));
    }
    let _ = writeln!(out);
    let flat: Vec<MethodResult> = all.into_iter().flat_map(|(_, r)| r).collect();
    print_results(out, &flat);
    if let Some(path) = &args.report {
        write_report(path, &flat).map_err(Failure::new(EXIT_OUTPUT))?;
    }
    Ok(())
}

pub fn cmd_trace(args: &TraceArgs, out: &mut impl Write) -> CliResult<()> {
    if !matches!(args.method, Method::Cjso | Method::Soar) {
        return Err(usage(format!("trace needs --method cjso or soar, got {}", args.method)));
    }
    let config = args.config.config(args.method);
    config.validate().map_err(Failure::new(EXIT_USAGE))?;
    let tensors = load_tensors(&args.source)?;
    let results = run_method(&tensors, &config, args.config.jobs)?;
    write_trace(&args.trace, results.iter().map(|r| &r.trace)).map_err(Failure::new(EXIT_OUTPUT))?;
    print_results(out, &results);
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut impl Write) -> CliResult<()> {
    let artifacts = read_packed(&args.artifact).map_err(Failure::new(EXIT_ARTIFACT))?;
    let source = if args.checkpoint.is_some() || !args.synthetic.is_empty() {
        Some(load_tensors(&SourceArgs {
            input: args.checkpoint.clone(),
            synthetic: args.synthetic.clone(),
            seed: args.seed,
            filter: None,
        })?)
    } else {
        None
    };
    let _ = writeln!(out, "{}: {} tensor(s)", args.artifact.display(), artifacts.len());
    for qt in &artifacts {
        let _ = writeln!(
            out,
            "{}  format={} shape={:?} block={} blocks={}",
            qt.name,
            qt.format,
            qt.shape,
            qt.block_size,
            qt.block_scales.len()
        );
        let _ = writeln!(
            out,
            "  bytes={} codes={} scales={} global={}",
            qt.payload_bytes(),
            qt.code_bytes(),
            qt.scale_bytes(),
            qt.global_scale_bytes()
        );
        if let Some(alpha) = qt.global_scale {
            let _ = writeln!(out, "  global_scale={alpha:?}");
        }
        if let Some(tensors) = &source {
            let Some(t) = tensors.iter().find(|t| t.name == qt.name) else {
                let _ = writeln!(out, "  mse=<source tensor not found>");
                continue;
            };
            let stats = reconstruction_error(t, qt).map_err(Failure::new(EXIT_ARTIFACT))?;
            let _ = writeln!(out, "  mse={:?}", stats.mse);
        }
    }
    Ok(())
}

/// Runs a parsed command, writing results to `out` and diagnostics to `diag`.
pub fn execute(cli: &Cli, out: &mut impl Write, diag: &mut impl Write) -> CliResult<()> {
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::Compare(a) => cmd_compare(a, out, diag),
        Command::Trace(a) => cmd_trace(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

/// Parses `args` (including the program name) and runs it.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    match execute(&cli, &mut stdout.lock(), &mut stderr.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
