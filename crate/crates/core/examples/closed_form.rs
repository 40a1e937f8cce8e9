//! One closed-form pass at a time: the global scale and every block scale
//! are refit by least squares, block scales are projected back to E4M3, and
//! the FP4 assignments are recomputed.

use soarq::block::Layout;
use soarq::cjso::{cjso_step, ScaleState};
use soarq::synthetic::gaussian;
use soarq::Format;

fn main() -> soarq::Result<()> {
    let tensor = gaussian("w", 2048, 3);
    let padded = Layout::new(&tensor.shape, 16).pad(&tensor.values);
    let mut state = ScaleState::max_based(&padded, Format::Nvfp4, 16)?;
    println!("step  alpha          loss");
    println!("init  {:<14.8} {:.6}", state.alpha, state.loss);
    for step in 1..=6 {
        state = cjso_step(&padded, &state)?;
        println!("{step:<5} {:<14.8} {:.6}", state.alpha, state.loss);
    }
    Ok(())
}
