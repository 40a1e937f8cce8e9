//! Decoupled search on single blocks: the rounding scale and the stored
//! E4M3 scale are chosen independently.

use soarq::block::block_loss;
use soarq::codec::quantize_e4m3;
use soarq::dss::{build_dequant_candidates, dss_refine_block, ScalePairCandidate};
use soarq::synthetic::gaussian;
use soarq::{BlockScale, Format, Method, QuantConfig};

fn main() -> soarq::Result<()> {
    let alpha = 0.37;
    let config = QuantConfig::new(Format::Nvfp4, Method::Dss);
    let w = gaussian("w", 16 * 6, 5).values;
    println!("block  max-based scale  loss      stored candidates        -> delta_q    delta_d   loss");
    for (i, block) in w.chunks_exact(16).enumerate() {
        let amax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = quantize_e4m3(amax / (6.0 * alpha))?;
        let d = scale.to_f64();
        let incumbent = ScalePairCandidate {
            delta_q: d,
            delta_d: BlockScale::E4m3(scale),
            loss: block_loss(block, alpha, d, d),
        };
        let stored: Vec<f64> = build_dequant_candidates(Format::Nvfp4, incumbent.delta_d, d, 2)?
            .iter()
            .map(|c| c.to_f64())
            .collect();
        let best = dss_refine_block(block, alpha, incumbent, d, &config)?;
        println!(
            "{i:<6} {d:<16} {:<9.5} {:<24} -> {:<10.6} {:<9} {:.5}",
            incumbent.loss,
            format!("{stored:?}"),
            best.delta_q,
            best.delta_d.to_f64(),
            best.loss
        );
    }
    Ok(())
}
