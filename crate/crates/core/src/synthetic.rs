//! Seeded random tensors for experiments without a checkpoint.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::block::Format;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Gaussian,
    Uniform,
    Laplace,
}

/// `KIND:N` or `KIND:AxBx...`, e.g. `gaussian:4096` or `laplace:64x128`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub kind: Distribution,
    pub shape: Vec<usize>,
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("synthetic spec `{s}` must look like gaussian:4096 or uniform:64x64"));
        let (kind, dims) = s.split_once(':').ok_or_else(bad)?;
        let kind = match kind.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Distribution::Gaussian,
            "uniform" => Distribution::Uniform,
            "laplace" => Distribution::Laplace,
            _ => return Err(bad()),
        };
        let shape = dims
            .split('x')
            .map(|d| d.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(bad());
        }
        Ok(Self { kind, shape })
    }
}

impl SyntheticSpec {
    /// Deterministic in `(self, seed)`.
    pub fn generate(&self, name: impl Into<String>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = self.shape.iter().product();
        let values = (0..n)
            .map(|_| match self.kind {
                Distribution::Gaussian => rng.sample::<f64, _>(StandardNormal),
                Distribution::Uniform => rng.gen_range(-1.0..1.0),
                Distribution::Laplace => {
                    let u: f64 = rng.gen_range(-0.5..0.5);
                    -u.signum() * (1.0 - 2.0 * u.abs()).ln()
                }
            })
            .collect();
        Tensor {
            name: name.into(),
            shape: self.shape.clone(),
            values,
        }
    }
}

/// A 1-D standard-normal tensor.
pub fn gaussian(name: impl Into<String>, n: usize, seed: u64) -> Tensor {
    SyntheticSpec {
        kind: Distribution::Gaussian,
        shape: vec![n],
    }
    .generate(name, seed)
}

const GRID_ROW: [f64; 16] = [
    6.0, -3.0, 1.5, 0.5, 0.0, -4.0, 2.0, 1.0, -0.5, 3.0, -1.5, 4.0, -6.0, 1.0, -2.0, 0.0,
];

/// A `rows x 16` tensor that max-based quantization in `format` reproduces
/// exactly: every row holds E2M1 values times a representable block scale,
/// with ±6 present so the max-based scale lands on it.
pub fn exact_grid(format: Format, rows: usize) -> Tensor {
    let scales: &[f64] = match format {
        // the 448 row pins alpha to exactly 1
        Format::Nvfp4 => &[448.0, 1.0, 2.0, 0.5, 0.125, 24.0, 0.375, 96.0],
        Format::Mxfp4 => &[1.0, 2.0, 0.5, 0.125, 1024.0, 0.0078125],
    };
    let values = (0..rows)
        .flat_map(|r| {
            let s = scales[r % scales.len()];
            GRID_ROW.iter().map(move |q| q * s)
        })
        .collect();
    Tensor {
        name: format!("exact_{format}"),
        shape: vec![rows, GRID_ROW.len()],
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        let s: SyntheticSpec = "gaussian:4096".parse().unwrap();
        assert_eq!((s.kind, s.shape), (Distribution::Gaussian, vec![4096]));
        let s: SyntheticSpec = "laplace:8x32".parse().unwrap();
        assert_eq!(s.shape, vec![8, 32]);
        for bad in ["gaussian", "cauchy:10", "uniform:0", "uniform:4xq"] {
            assert!(bad.parse::<SyntheticSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn exact_grid_round_trips() {
        use crate::block::{quantize_tensor_baseline, reconstruct_tensor, Method, QuantConfig};
        for format in [Format::Nvfp4, Format::Mxfp4] {
            let t = exact_grid(format, 9);
            let qt = quantize_tensor_baseline(&t, &QuantConfig::new(format, Method::Baseline)).unwrap();
            assert_eq!(reconstruct_tensor(&qt).unwrap(), t.values, "{format}");
        }
    }

    #[test]
    fn generation_is_seeded() {
        let s: SyntheticSpec = "uniform:100".parse().unwrap();
        assert_eq!(s.generate("a", 7), s.generate("a", 7));
        assert_ne!(s.generate("a", 7).values, s.generate("a", 8).values);
        assert!(s.generate("a", 1).values.iter().all(|v| (-1.0..1.0).contains(v)));
        let l: SyntheticSpec = "laplace:1000".parse().unwrap();
        assert!(l.generate("l", 3).values.iter().all(|v| v.is_finite()));
    }
}
