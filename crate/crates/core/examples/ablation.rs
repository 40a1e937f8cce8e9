//! Mean MSE of every method over seeded Gaussian tensors.
//!
//! cargo run --release --example ablation -- [seeds] [elements]

use std::time::Instant;

use soarq::synthetic::gaussian;
use soarq::{quantize, Format, Method, QuantConfig};

fn main() -> soarq::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(20, |s| s.parse().expect("seeds"));
    let n: usize = args.next().map_or(4096, |s| s.parse().expect("elements"));
    let tensors: Vec<_> = (0..seeds).map(|s| gaussian(format!("g{s}"), n, s)).collect();

    for format in [Format::Nvfp4, Format::Mxfp4] {
        println!("{format}, {seeds} tensors of {n}");
        for method in Method::ALL {
            if !method.supports(format) {
                continue;
            }
            let config = QuantConfig::new(format, method);
            let started = Instant::now();
            let mut total = 0.0;
            let mut iters = 0;
            for t in &tensors {
                let r = quantize(t, &config)?;
                total += r.mse;
                iters += r.iterations;
            }
            println!(
                "  {:<8} mean_mse={:.6e} mean_iters={:.1} time={:.2?}",
                method.name(),
                total / seeds as f64,
                iters as f64 / seeds as f64,
                started.elapsed()
            );
        }
    }
    Ok(())
}
