//! The three element and scale codecs: E2M1, E4M3 and E8M0.

use soarq::codec::{e2m1_codebook, e4m3_neighbors, quantize_e2m1, quantize_e4m3, quantize_e8m0};

fn main() -> soarq::Result<()> {
    println!("E2M1 codebook:");
    for (code, v) in e2m1_codebook() {
        println!("  {:04b} -> {v:>4}", code.to_bits());
    }

    println!("\nE2M1 rounding (ties to even):");
    for x in [0.25, 0.75, 1.25, 2.5, 3.5, 5.0, 7.3, -1.75] {
        println!("  {x:>6} -> {}", quantize_e2m1(x)?.to_f64());
    }

    println!("\nE4M3 rounding:");
    for x in [0.0013, 0.3, 1.0625, 17.0, 250.0, 1e4] {
        let q = quantize_e4m3(x)?;
        println!("  {x:>8} -> {:<10} bits {:#04x}", q.to_f64(), q.to_bits());
    }
    let near: Vec<f64> = e4m3_neighbors(1.05, 3)?.iter().map(|e| e.to_f64()).collect();
    println!("  three nearest to 1.05: {near:?}");

    println!("\nE8M0 (power of two, floor):");
    for x in [0.3, 1.0, 5.0, 1000.0] {
        let s = quantize_e8m0(x)?;
        println!("  {x:>6} -> 2^{} = {}", s.exponent(), s.to_f64());
    }
    Ok(())
}
