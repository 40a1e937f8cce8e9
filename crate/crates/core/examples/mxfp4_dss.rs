//! Decoupled search applied to MXFP4, where block scales are powers of two
//! and there is no global scale.

use soarq::synthetic::SyntheticSpec;
use soarq::{quantize, Format, Method, QuantConfig};

fn main() -> soarq::Result<()> {
    for spec in ["gaussian:64x128", "laplace:64x128", "uniform:64x128"] {
        let tensor = spec.parse::<SyntheticSpec>()?.generate(spec, 11);
        let base = quantize(&tensor, &QuantConfig::new(Format::Mxfp4, Method::Baseline))?;
        let dss = quantize(&tensor, &QuantConfig::new(Format::Mxfp4, Method::Dss))?;
        println!(
            "{spec:<16} baseline {:.5e}  dss {:.5e}  ({:+.1}%)  {} bytes each",
            base.mse,
            dss.mse,
            100.0 * (dss.mse / base.mse - 1.0),
            dss.tensor.payload_bytes()
        );
    }
    Ok(())
}
