//! Per-iteration loss of SOAR against the closed-form-only loop.
//!
//! cargo run --release --example soar_convergence -- [seed]

use soarq::synthetic::gaussian;
use soarq::{quantize, Format, Method, QuantConfig};

fn main() -> soarq::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let tensor = gaussian("w", 4096, seed);
    let config = QuantConfig {
        early_stop_tol: 0.0,
        ..QuantConfig::new(Format::Nvfp4, Method::Soar)
    };
    let soar = quantize(&tensor, &config)?;
    let cjso = quantize(&tensor, &config.clone().with_method(Method::Cjso))?;
    let n = tensor.numel() as f64;

    println!("iter  cjso mse      soar mse      soar step");
    println!("init  {:.6e}  {:.6e}", cjso.trace.initial_loss / n, soar.trace.initial_loss / n);
    for (c, s) in cjso.trace.records.iter().zip(&soar.trace.records) {
        println!("{:<5} {:.6e}  {:.6e}  {:?}", s.iteration, c.loss / n, s.loss / n, s.outcome);
    }
    Ok(())
}
