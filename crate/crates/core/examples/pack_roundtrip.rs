//! Checkpoint in, packed artifact out, and back: the reloaded artifact
//! reproduces the in-memory error exactly.

use soarq::block::reconstruction_error;
use soarq::io::{load_checkpoint, read_packed, write_checkpoint, write_packed, write_report, Dtype, TensorRecord};
use soarq::synthetic::SyntheticSpec;
use soarq::{quantize, Format, Method, QuantConfig};

fn main() -> soarq::Result<()> {
    let dir = std::env::temp_dir().join("soarq-pack-roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| soarq::Error::Config(e.to_string()))?;

    let mut records = Vec::new();
    for (i, spec) in ["gaussian:32x64", "laplace:16x48"].into_iter().enumerate() {
        let mut tensor = spec.parse::<SyntheticSpec>()?.generate(format!("layer{i}.weight"), i as u64);
        tensor.values.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        records.push(TensorRecord { dtype: Dtype::F32, tensor });
    }
    let ckpt = dir.join("model.safetensors");
    write_checkpoint(&ckpt, &records)?;

    let config = QuantConfig::new(Format::Nvfp4, Method::Soar);
    let tensors: Vec<_> = load_checkpoint(&ckpt)?.tensors.into_iter().map(|r| r.tensor).collect();
    let results = tensors.iter().map(|t| quantize(t, &config)).collect::<soarq::Result<Vec<_>>>()?;

    let artifact = dir.join("model.soq");
    write_packed(&artifact, &results.iter().map(|r| r.tensor.clone()).collect::<Vec<_>>())?;
    write_report(dir.join("report.json"), &results)?;

    let back = read_packed(&artifact)?;
    for ((t, r), qt) in tensors.iter().zip(&results).zip(&back) {
        let mse = reconstruction_error(t, qt)?.mse;
        println!("{:<14} mse {:.6e}  reloaded {:.6e}  identical: {}", t.name, r.mse, mse, mse == r.mse);
    }
    let size = std::fs::metadata(&artifact).map(|m| m.len()).unwrap_or(0);
    println!("artifact {} ({size} bytes)", artifact.display());
    Ok(())
}
