//! Max-based microscaling quantization for NVFP4 and MXFP4.
//!
//! NVFP4 uses 16-element blocks, an E4M3 scale per block and a tensor-wide
//! FP32 scale `alpha`. MXFP4 uses 32-element blocks with an E8M0 scale and no
//! global scale (`alpha` is fixed to 1). Blocks run along the last dimension;
//! every row is zero-padded to a whole number of blocks.

use serde::{Deserialize, Serialize};

use crate::codec::{
    e4m3_neighbors, e8m0_neighbors, quantize_e2m1, quantize_e2m1_saturating, quantize_e4m3,
    quantize_e8m0_ceil, E4m3, E8m0Scale, Fp4Code, FP4_MAX, FP4_TIMES_E4M3_MAX,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NVFP4_BLOCK: usize = 16;
pub const MXFP4_BLOCK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Nvfp4,
    Mxfp4,
}

impl Format {
    pub fn default_block_size(self) -> usize {
        match self {
            Format::Nvfp4 => NVFP4_BLOCK,
            Format::Mxfp4 => MXFP4_BLOCK,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Format::Nvfp4 => "nvfp4",
            Format::Mxfp4 => "mxfp4",
        }
    }

    pub fn has_global_scale(self) -> bool {
        matches!(self, Format::Nvfp4)
    }

    pub fn scale_from_bits(self, bits: u8) -> Result<BlockScale> {
        match self {
            Format::Nvfp4 => E4m3::from_bits(bits).map(BlockScale::E4m3),
            Format::Mxfp4 => E8m0Scale::from_bits(bits).map(BlockScale::E8m0),
        }
    }

    /// The `count` representable block scales nearest to `x`.
    pub fn scale_neighbors(self, x: f64, count: usize) -> Result<Vec<BlockScale>> {
        Ok(match self {
            Format::Nvfp4 => e4m3_neighbors(x, count)?
                .into_iter()
                .map(BlockScale::E4m3)
                .collect(),
            Format::Mxfp4 => e8m0_neighbors(x, count)?
                .into_iter()
                .map(BlockScale::E8m0)
                .collect(),
        })
    }

    /// Block scale value used for an all-zero block.
    pub fn zero_block_scale(self) -> BlockScale {
        match self {
            Format::Nvfp4 => BlockScale::E4m3(E4m3::MIN_NORMAL),
            Format::Mxfp4 => BlockScale::E8m0(E8m0Scale::from_exponent(0).expect("in range")),
        }
    }
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Cjso,
    Dss,
    Soar,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Cjso, Method::Dss, Method::Soar];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Cjso => "cjso",
            Method::Dss => "dss",
            Method::Soar => "soar",
        }
    }

    /// Methods that update the global scale need NVFP4.
    pub fn supports(self, format: Format) -> bool {
        match format {
            Format::Nvfp4 => true,
            Format::Mxfp4 => matches!(self, Method::Baseline | Method::Dss),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A stored per-block dequantization scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockScale {
    E4m3(E4m3),
    E8m0(E8m0Scale),
}

impl BlockScale {
    pub fn to_f64(self) -> f64 {
        match self {
            BlockScale::E4m3(v) => v.to_f64(),
            BlockScale::E8m0(v) => v.to_f64(),
        }
    }

    pub fn to_bits(self) -> u8 {
        match self {
            BlockScale::E4m3(v) => v.to_bits(),
            BlockScale::E8m0(v) => v.to_bits(),
        }
    }

    pub fn format(self) -> Format {
        match self {
            BlockScale::E4m3(_) => Format::Nvfp4,
            BlockScale::E8m0(_) => Format::Mxfp4,
        }
    }
}

/// Run configuration. Defaults: 15 iterations, early stop below `1e-3`
/// relative improvement, quantization-scale grid `[0.5, 1.5]` step `0.01`,
/// two dequantization-scale neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub format: Format,
    pub method: Method,
    pub block_size: usize,
    pub max_iters: usize,
    pub early_stop_tol: f64,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
    pub dequant_neighbor_count: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::new(Format::Nvfp4, Method::Soar)
    }
}

impl QuantConfig {
    pub fn new(format: Format, method: Method) -> Self {
        Self {
            format,
            method,
            block_size: format.default_block_size(),
            max_iters: 15,
            early_stop_tol: 1e-3,
            grid_lo: 0.5,
            grid_hi: 1.5,
            grid_step: 0.01,
            dequant_neighbor_count: 2,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !self.method.supports(self.format) {
            return fail(format!(
                "method `{}` is not available for {}; use baseline or dss",
                self.method, self.format
            ));
        }
        if self.block_size < 2 || !self.block_size.is_multiple_of(2) {
            return fail(format!("block size must be even and >= 2, got {}", self.block_size));
        }
        if self.max_iters == 0 {
            return fail("iteration count must be at least 1".into());
        }
        if !(self.early_stop_tol >= 0.0 && self.early_stop_tol.is_finite()) {
            return fail(format!("tolerance must be finite and >= 0, got {}", self.early_stop_tol));
        }
        if !(self.grid_lo > 0.0 && self.grid_lo < 1.0 && self.grid_hi > 1.0 && self.grid_hi.is_finite()) {
            return fail(format!(
                "grid bounds must satisfy 0 < lo < 1 < hi, got [{}, {}]",
                self.grid_lo, self.grid_hi
            ));
        }
        if !(self.grid_step > 0.0 && self.grid_step.is_finite()) {
            return fail(format!("grid step must be positive, got {}", self.grid_step));
        }
        if self.dequant_neighbor_count == 0 {
            return fail("neighbor count must be at least 1".into());
        }
        Ok(())
    }
}

/// How a tensor shape maps onto padded blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub shape: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    pub blocks_per_row: usize,
}

impl Layout {
    pub fn new(shape: &[usize], block_size: usize) -> Self {
        let (rows, cols) = match shape.split_last() {
            Some((&last, rest)) => (rest.iter().product(), last),
            None => (1, 1),
        };
        Self {
            shape: shape.to_vec(),
            rows,
            cols,
            block_size,
            blocks_per_row: cols.div_ceil(block_size),
        }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_blocks(&self) -> usize {
        self.rows * self.blocks_per_row
    }

    pub fn padded_len(&self) -> usize {
        self.num_blocks() * self.block_size
    }

    fn padded_row(&self) -> usize {
        self.blocks_per_row * self.block_size
    }

    pub fn pad(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.numel());
        let mut out = vec![0.0; self.padded_len()];
        if self.cols == 0 {
            return out;
        }
        for (src, dst) in values
            .chunks_exact(self.cols)
            .zip(out.chunks_exact_mut(self.padded_row()))
        {
            dst[..self.cols].copy_from_slice(src);
        }
        out
    }

    pub fn unpad(&self, padded: &[f64]) -> Vec<f64> {
        debug_assert_eq!(padded.len(), self.padded_len());
        let mut out = Vec::with_capacity(self.numel());
        if self.cols == 0 {
            return out;
        }
        for row in padded.chunks_exact(self.padded_row()) {
            out.extend_from_slice(&row[..self.cols]);
        }
        out
    }
}

/// Stored NVFP4/MXFP4 artifact: codes, block scales and (NVFP4) the global scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub format: Format,
    pub block_size: usize,
    pub global_scale: Option<f32>,
    pub block_scales: Vec<BlockScale>,
    pub codes: Vec<Fp4Code>,
}

impl QuantizedTensor {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.shape, self.block_size)
    }

    /// Scale multiplying every block: the global scale for NVFP4, 1 for MXFP4.
    pub fn alpha(&self) -> f64 {
        self.global_scale.map_or(1.0, f64::from)
    }

    pub fn code_bytes(&self) -> usize {
        self.codes.len().div_ceil(2)
    }

    pub fn scale_bytes(&self) -> usize {
        self.block_scales.len()
    }

    pub fn global_scale_bytes(&self) -> usize {
        if self.global_scale.is_some() {
            4
        } else {
            0
        }
    }

    /// Serialized payload size: packed codes, one byte per block scale, and the FP32 global scale.
    pub fn payload_bytes(&self) -> usize {
        self.code_bytes() + self.scale_bytes() + self.global_scale_bytes()
    }

    pub fn validate(&self) -> Result<()> {
        let corrupt = |msg: String| Err(Error::Corrupt { offset: 0, msg });
        let layout = self.layout();
        if self.block_size < 2 || !self.block_size.is_multiple_of(2) {
            return corrupt(format!("invalid block size {}", self.block_size));
        }
        if self.codes.len() != layout.padded_len() {
            return corrupt(format!(
                "{} codes for padded length {}",
                self.codes.len(),
                layout.padded_len()
            ));
        }
        if self.block_scales.len() != layout.num_blocks() {
            return corrupt(format!(
                "{} block scales for {} blocks",
                self.block_scales.len(),
                layout.num_blocks()
            ));
        }
        if self.format.has_global_scale() != self.global_scale.is_some() {
            return corrupt(format!("global scale presence does not match {}", self.format));
        }
        if let Some(a) = self.global_scale {
            if !(a > 0.0 && a.is_finite()) {
                return corrupt(format!("global scale {a} is not positive"));
            }
        }
        for s in &self.block_scales {
            if s.format() != self.format || s.to_f64() <= 0.0 {
                return corrupt(format!("invalid block scale {:#04x}", s.to_bits()));
            }
        }
        Ok(())
    }
}

#[inline]
fn abs_max(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Smallest `f32` not below `x`.
fn f32_round_up(x: f64) -> Result<f32> {
    let mut a = x as f32;
    if f64::from(a) < x {
        a = a.next_up();
    }
    if a.is_finite() {
        Ok(a)
    } else {
        Err(Error::NonFinite(x))
    }
}

/// Max-based NVFP4 scales for a padded, blocked tensor.
///
/// `alpha = max|X| / (6 * 448)` rounded up to `f32`; each block scale is the
/// E4M3 rounding of `max|X_i| / (6 * alpha)`. A scale that rounds down far
/// enough to push the block maximum past 6 is bumped to the next E4M3 value.
/// All-zero blocks get `2^-6`; an all-zero tensor gets `alpha = 1`.
pub fn init_scales_nvfp4(padded: &[f64], block_size: usize) -> Result<(f64, Vec<E4m3>)> {
    if let Some(&v) = padded.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(v));
    }
    let global_max = abs_max(padded);
    let alpha = if global_max == 0.0 {
        1.0
    } else {
        f64::from(f32_round_up(global_max / FP4_TIMES_E4M3_MAX)?)
    };
    let deltas = padded
        .chunks_exact(block_size)
        .map(|block| {
            let block_max = abs_max(block);
            if block_max == 0.0 {
                return Ok(E4m3::MIN_NORMAL);
            }
            let mut delta = quantize_e4m3(block_max / (alpha * FP4_MAX))?;
            if delta.to_f64() == 0.0 {
                delta = E4m3::MIN_SUBNORMAL;
            }
            if block_max / (alpha * delta.to_f64()) > FP4_MAX {
                delta = delta.next_up().unwrap_or(delta);
            }
            Ok(delta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((alpha, deltas))
}

/// Max-based MXFP4 scales: the smallest power of two with `max|X_i| / scale <= 6`.
pub fn init_scales_mxfp4(padded: &[f64], block_size: usize) -> Result<Vec<E8m0Scale>> {
    padded
        .chunks_exact(block_size)
        .map(|block| {
            if let Some(&v) = block.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(v));
            }
            let block_max = abs_max(block);
            if block_max == 0.0 {
                match Format::Mxfp4.zero_block_scale() {
                    BlockScale::E8m0(s) => Ok(s),
                    BlockScale::E4m3(_) => unreachable!(),
                }
            } else {
                quantize_e8m0_ceil(block_max / FP4_MAX)
            }
        })
        .collect()
}

fn check_scale(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidScale(x))
    }
}

/// FP4 codes of `block / (alpha * delta_q)`.
pub fn quantize_block(block: &[f64], alpha: f64, delta_q: f64) -> Result<Vec<Fp4Code>> {
    check_scale(alpha)?;
    check_scale(delta_q)?;
    let step = alpha * delta_q;
    block.iter().map(|&w| quantize_e2m1(w / step)).collect()
}

/// `code * (alpha * delta_d)` element-wise.
pub fn dequantize_block(codes: &[Fp4Code], alpha: f64, delta_d: f64) -> Result<Vec<f64>> {
    check_scale(alpha)?;
    check_scale(delta_d)?;
    let step = alpha * delta_d;
    Ok(codes.iter().map(|c| c.to_f64() * step).collect())
}

/// Squared reconstruction error of one block when codes are assigned with
/// `delta_q` and reconstructed with `delta_d`. Scales must be positive.
#[inline]
pub fn block_loss(block: &[f64], alpha: f64, delta_q: f64, delta_d: f64) -> f64 {
    debug_assert!(alpha > 0.0 && delta_q > 0.0 && delta_d > 0.0);
    let quant_step = alpha * delta_q;
    let dequant_step = alpha * delta_d;
    let mut acc = 0.0;
    for &w in block {
        let q = quantize_e2m1_saturating(w / quant_step).to_f64();
        let e = w - q * dequant_step;
        acc += e * e;
    }
    acc
}

/// Max-based quantization with a shared quantization/dequantization scale per block.
pub fn quantize_tensor_baseline(tensor: &Tensor, config: &QuantConfig) -> Result<QuantizedTensor> {
    config.validate()?;
    tensor.check_quantizable()?;
    let layout = Layout::new(&tensor.shape, config.block_size);
    let padded = layout.pad(&tensor.values);
    let (alpha, scales): (f64, Vec<BlockScale>) = match config.format {
        Format::Nvfp4 => {
            let (alpha, deltas) = init_scales_nvfp4(&padded, config.block_size)?;
            (alpha, deltas.into_iter().map(BlockScale::E4m3).collect())
        }
        Format::Mxfp4 => (
            1.0,
            init_scales_mxfp4(&padded, config.block_size)?
                .into_iter()
                .map(BlockScale::E8m0)
                .collect(),
        ),
    };
    let mut codes = Vec::with_capacity(padded.len());
    for (block, scale) in padded.chunks_exact(config.block_size).zip(&scales) {
        codes.extend(quantize_block(block, alpha, scale.to_f64())?);
    }
    Ok(QuantizedTensor {
        name: tensor.name.clone(),
        shape: tensor.shape.clone(),
        format: config.format,
        block_size: config.block_size,
        global_scale: config.format.has_global_scale().then_some(alpha as f32),
        block_scales: scales,
        codes,
    })
}

/// Dequantized values in block order, padding included.
pub fn reconstruct_padded(qt: &QuantizedTensor) -> Result<Vec<f64>> {
    qt.validate()?;
    let alpha = qt.alpha();
    let mut out = Vec::with_capacity(qt.codes.len());
    for (codes, scale) in qt.codes.chunks_exact(qt.block_size).zip(&qt.block_scales) {
        out.extend(dequantize_block(codes, alpha, scale.to_f64())?);
    }
    Ok(out)
}

/// Dequantize every block, drop padding and return values in the original row-major order.
pub fn reconstruct_tensor(qt: &QuantizedTensor) -> Result<Vec<f64>> {
    let padded = reconstruct_padded(qt)?;
    Ok(qt.layout().unpad(&padded))
}

/// Reconstruction error of `qt` against the source tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    /// Sum of squared errors, accumulated per block and then across blocks in order.
    pub sse: f64,
    pub mse: f64,
}

pub fn reconstruction_error(tensor: &Tensor, qt: &QuantizedTensor) -> Result<ErrorStats> {
    if tensor.shape != qt.shape {
        return Err(Error::Config(format!(
            "shape {:?} of `{}` does not match artifact shape {:?}",
            tensor.shape, tensor.name, qt.shape
        )));
    }
    let layout = qt.layout();
    let original = layout.pad(&tensor.values);
    let recon = reconstruct_padded(qt)?;
    let sse = original
        .chunks_exact(qt.block_size)
        .zip(recon.chunks_exact(qt.block_size))
        .map(|(w, r)| {
            let mut acc = 0.0;
            for (a, b) in w.iter().zip(r) {
                let e = a - b;
                acc += e * e;
            }
            acc
        })
        .fold(0.0, |acc, s| acc + s);
    Ok(ErrorStats {
        sse,
        mse: sse / tensor.values.len() as f64,
    })
}
