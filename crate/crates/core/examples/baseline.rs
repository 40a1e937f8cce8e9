//! Max-based NVFP4 quantization of one tensor, then reconstruction.

use soarq::block::{quantize_tensor_baseline, reconstruction_error};
use soarq::synthetic::gaussian;
use soarq::{Format, Method, QuantConfig};

fn main() -> soarq::Result<()> {
    let tensor = gaussian("w", 1000, 42);
    let qt = quantize_tensor_baseline(&tensor, &QuantConfig::new(Format::Nvfp4, Method::Baseline))?;
    let err = reconstruction_error(&tensor, &qt)?;

    println!("{} elements -> {} blocks of {}", tensor.numel(), qt.block_scales.len(), qt.block_size);
    println!("global scale  {:?}", qt.alpha());
    let first: Vec<f64> = qt.block_scales.iter().take(4).map(|s| s.to_f64()).collect();
    println!("block scales  {first:?} ...");
    let codes: Vec<f64> = qt.codes.iter().take(8).map(|c| c.to_f64()).collect();
    println!("first codes   {codes:?}");
    println!("mse           {:.6e}", err.mse);
    println!(
        "bytes         {} = {} codes + {} scales + {} global",
        qt.payload_bytes(),
        qt.code_bytes(),
        qt.scale_bytes(),
        qt.global_scale_bytes()
    );
    Ok(())
}
