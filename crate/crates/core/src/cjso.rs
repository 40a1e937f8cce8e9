//! Closed-form joint scale optimization.
//!
//! With the FP4 assignments `Q` held fixed, the reconstruction error
//! `sum_i ||W_i - Q_i * alpha * delta_i||^2` is quadratic in `alpha` and in
//! each `delta_i`, so both have least-squares minimizers:
//!
//! ```text
//! alpha*   = sum_ij W_ij Q_ij delta_i / sum_ij Q_ij^2 delta_i^2
//! delta_i* = sum_j  W_ij Q_ij alpha   / sum_j  Q_ij^2 alpha^2
//! ```
//!
//! One step recomputes `Q` from `(alpha, delta_q)`, refits `alpha` against the
//! stored scales `delta_d`, refits every block scale against the new `alpha`,
//! projects it to E4M3 for storage and keeps the raw value as `delta_q`.

use crate::block::{block_loss, init_scales_mxfp4, init_scales_nvfp4, BlockScale, Format, QuantizedTensor};
use crate::codec::{quantize_e2m1_saturating, quantize_e4m3, E4m3, Fp4Code};
use crate::error::{Error, Result};

/// Working state of the scale optimization over a padded, blocked tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleState {
    pub format: Format,
    pub block_size: usize,
    pub alpha: f64,
    /// Quantization-side scales; only steer FP4 assignment, never stored.
    pub delta_q: Vec<f64>,
    /// Stored dequantization-side scales.
    pub delta_d: Vec<BlockScale>,
    /// `Q_FP4(W_i / (alpha * delta_q[i]))`.
    pub codes: Vec<Fp4Code>,
    pub loss: f64,
}

impl ScaleState {
    /// Builds a state and computes its assignments and loss.
    pub fn new(
        padded: &[f64],
        format: Format,
        block_size: usize,
        alpha: f64,
        delta_q: Vec<f64>,
        delta_d: Vec<BlockScale>,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidScale(alpha));
        }
        if let Some(&d) = delta_q.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidScale(d));
        }
        let blocks = padded.len() / block_size;
        if !padded.len().is_multiple_of(block_size) || delta_q.len() != blocks || delta_d.len() != blocks {
            return Err(Error::ShapeMismatch {
                expected: blocks,
                found: delta_q.len().min(delta_d.len()),
            });
        }
        let mut state = Self {
            format,
            block_size,
            alpha,
            delta_q,
            delta_d,
            codes: Vec::new(),
            loss: 0.0,
        };
        state.refresh(padded);
        Ok(state)
    }

    /// Max-based initialization with `delta_q = delta_d`.
    pub fn max_based(padded: &[f64], format: Format, block_size: usize) -> Result<Self> {
        let (alpha, delta_d): (f64, Vec<BlockScale>) = match format {
            Format::Nvfp4 => {
                let (alpha, d) = init_scales_nvfp4(padded, block_size)?;
                (alpha, d.into_iter().map(BlockScale::E4m3).collect())
            }
            Format::Mxfp4 => (
                1.0,
                init_scales_mxfp4(padded, block_size)?
                    .into_iter()
                    .map(BlockScale::E8m0)
                    .collect(),
            ),
        };
        let delta_q = delta_d.iter().map(|d| d.to_f64()).collect();
        Self::new(padded, format, block_size, alpha, delta_q, delta_d)
    }

    pub fn num_blocks(&self) -> usize {
        self.delta_q.len()
    }

    /// Recomputes `codes` and `loss` from the current scales.
    pub fn refresh(&mut self, padded: &[f64]) {
        let quant_steps: Vec<f64> = self.delta_q.iter().map(|d| self.alpha * d).collect();
        self.codes = padded
            .chunks_exact(self.block_size)
            .zip(&quant_steps)
            .flat_map(|(block, &step)| block.iter().map(move |&w| quantize_e2m1_saturating(w / step)))
            .collect();
        self.loss = self.recompute_loss(padded);
    }

    /// Sum of per-block losses, accumulated in block order.
    pub fn recompute_loss(&self, padded: &[f64]) -> f64 {
        padded
            .chunks_exact(self.block_size)
            .enumerate()
            .map(|(i, block)| block_loss(block, self.alpha, self.delta_q[i], self.delta_d[i].to_f64()))
            .fold(0.0, |acc, l| acc + l)
    }

    pub fn block_losses(&self, padded: &[f64]) -> Vec<f64> {
        padded
            .chunks_exact(self.block_size)
            .enumerate()
            .map(|(i, block)| block_loss(block, self.alpha, self.delta_q[i], self.delta_d[i].to_f64()))
            .collect()
    }

    /// Decoded assignments `Q`.
    pub fn assignments(&self) -> Vec<f64> {
        self.codes.iter().map(|c| c.to_f64()).collect()
    }

    /// The storable artifact. `delta_q` is dropped.
    pub fn to_quantized(&self, name: &str, shape: &[usize]) -> QuantizedTensor {
        QuantizedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            format: self.format,
            block_size: self.block_size,
            global_scale: self.format.has_global_scale().then_some(self.alpha as f32),
            block_scales: self.delta_d.clone(),
            codes: self.codes.clone(),
        }
    }
}

/// Decoded FP4 assignments of `W_i / (alpha * delta_q[i])` for every block.
pub fn recompute_assignments(padded: &[f64], block_size: usize, alpha: f64, delta_q: &[f64]) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidScale(alpha));
    }
    let mut out = Vec::with_capacity(padded.len());
    for (block, &d) in padded.chunks_exact(block_size).zip(delta_q) {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::InvalidScale(d));
        }
        let step = alpha * d;
        out.extend(block.iter().map(|&w| quantize_e2m1_saturating(w / step).to_f64()));
    }
    Ok(out)
}

/// Least-squares global scale for fixed assignments and block scales.
///
/// Returns `None` when every assignment is zero. Partial sums are formed per
/// block and then added in block order.
pub fn update_global_scale(padded: &[f64], assignments: &[f64], block_size: usize, deltas: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((w, q), &d) in padded
        .chunks_exact(block_size)
        .zip(assignments.chunks_exact(block_size))
        .zip(deltas)
    {
        let (mut bn, mut bd) = (0.0, 0.0);
        for (&wj, &qj) in w.iter().zip(q) {
            bn += wj * qj;
            bd += qj * qj;
        }
        num += bn * d;
        den += bd * (d * d);
    }
    (den > 0.0).then(|| num / den)
}

/// Least-squares scale of one block for fixed assignments and global scale.
///
/// Returns the raw value, or `None` when the block's assignments are all zero.
pub fn update_block_scale(block: &[f64], assignments: &[f64], alpha: f64) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (&w, &q) in block.iter().zip(assignments) {
        num += w * q;
        den += q * q;
    }
    let den = den * (alpha * alpha);
    (den > 0.0).then(|| num * alpha / den)
}

/// Nearest E4M3 value, clipped to `[2^-9, 448]`.
pub fn project_scale_e4m3(delta_star: f64) -> Result<E4m3> {
    if !(delta_star > 0.0 && delta_star.is_finite()) {
        return Err(Error::InvalidScale(delta_star));
    }
    let d = quantize_e4m3(delta_star)?;
    Ok(if d.to_f64() == 0.0 { E4m3::MIN_SUBNORMAL } else { d })
}

fn usable(x: Option<f64>) -> Option<f64> {
    x.filter(|v| *v > 0.0 && v.is_finite())
}

/// Result of the two least-squares updates, before any projection.
struct ClosedForm {
    alpha: f64,
    /// `None` where the block was degenerate.
    deltas: Vec<Option<f64>>,
}

fn closed_form_update(
    padded: &[f64],
    block_size: usize,
    alpha: f64,
    delta_q: &[f64],
    delta_d: &[f64],
    round_alpha: impl Fn(f64) -> f64,
) -> Result<ClosedForm> {
    let q = recompute_assignments(padded, block_size, alpha, delta_q)?;
    let alpha = usable(update_global_scale(padded, &q, block_size, delta_d))
        .map(&round_alpha)
        .filter(|a| *a > 0.0 && a.is_finite())
        .unwrap_or(alpha);
    let deltas = padded
        .chunks_exact(block_size)
        .zip(q.chunks_exact(block_size))
        .map(|(w, qb)| usable(update_block_scale(w, qb, alpha)))
        .collect();
    Ok(ClosedForm { alpha, deltas })
}

/// One closed-form pass: `Q -> alpha -> delta`, then E4M3 projection.
///
/// The global scale is kept in `f32`. Degenerate blocks and a degenerate
/// global update keep their previous values.
pub fn cjso_step(padded: &[f64], state: &ScaleState) -> Result<ScaleState> {
    if state.format != Format::Nvfp4 {
        return Err(Error::Config(format!(
            "closed-form scale updates need a global scale; {} has none",
            state.format
        )));
    }
    let stored: Vec<f64> = state.delta_d.iter().map(|d| d.to_f64()).collect();
    let update = closed_form_update(padded, state.block_size, state.alpha, &state.delta_q, &stored, |a| {
        f64::from(a as f32)
    })?;
    let mut delta_q = state.delta_q.clone();
    let mut delta_d = state.delta_d.clone();
    for (i, d) in update.deltas.iter().enumerate() {
        if let Some(d) = *d {
            delta_q[i] = d;
            delta_d[i] = BlockScale::E4m3(project_scale_e4m3(d)?);
        }
    }
    ScaleState::new(padded, state.format, state.block_size, update.alpha, delta_q, delta_d)
}

/// Scales with no hardware constraint: real `alpha` and real block scales
/// shared by quantization and dequantization.
#[derive(Debug, Clone, PartialEq)]
pub struct RealScales {
    pub block_size: usize,
    pub alpha: f64,
    pub deltas: Vec<f64>,
    pub loss: f64,
}

impl RealScales {
    pub fn new(padded: &[f64], block_size: usize, alpha: f64, deltas: Vec<f64>) -> Self {
        let loss = padded
            .chunks_exact(block_size)
            .zip(&deltas)
            .map(|(b, &d)| block_loss(b, alpha, d, d))
            .fold(0.0, |acc, l| acc + l);
        Self {
            block_size,
            alpha,
            deltas,
            loss,
        }
    }

    pub fn from_state(padded: &[f64], state: &ScaleState) -> Self {
        let deltas = state.delta_d.iter().map(|d| d.to_f64()).collect();
        Self::new(padded, state.block_size, state.alpha, deltas)
    }
}

/// The closed-form pass with projection disabled. In exact arithmetic the
/// loss cannot increase; in floating point it may rise by rounding error.
pub fn cjso_step_unprojected(padded: &[f64], scales: &RealScales) -> Result<RealScales> {
    let update = closed_form_update(
        padded,
        scales.block_size,
        scales.alpha,
        &scales.deltas,
        &scales.deltas,
        |a| a,
    )?;
    let deltas = update
        .deltas
        .iter()
        .zip(&scales.deltas)
        .map(|(new, old)| new.unwrap_or(*old))
        .collect();
    Ok(RealScales::new(padded, scales.block_size, update.alpha, deltas))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn padded_pair(a: f64, b: f64) -> Vec<f64> {
        let mut w = vec![0.0; 16];
        w[0] = a;
        w[1] = b;
        w
    }

    #[test]
    fn assignments_examples() {
        let w = [0.5, -1.0, 3.0, 6.0];
        assert_eq!(recompute_assignments(&w, 4, 1.0, &[1.0]).unwrap(), w.to_vec());
        let mut w = vec![0.0; 4];
        w[0] = 1.3;
        assert_eq!(recompute_assignments(&w, 4, 1.0, &[1.0]).unwrap()[0], 1.5);
        assert!(recompute_assignments(&w, 4, 1.0, &[0.0]).is_err());
    }

    #[test]
    fn global_scale_examples() {
        assert_eq!(update_global_scale(&[1.0, 2.0], &[1.0, 2.0], 2, &[1.0]), Some(1.0));
        let a = update_global_scale(&[1.2, 2.1], &[1.0, 2.0], 2, &[1.0]).unwrap();
        assert!((a - 1.08).abs() < 1e-15, "{a}");
        assert_eq!(update_global_scale(&[1.0, 2.0], &[0.0, 0.0], 2, &[1.0]), None);
    }

    #[test]
    fn block_scale_examples() {
        let mut w = vec![0.0; 16];
        let mut q = vec![0.0; 16];
        w[0] = 2.0;
        w[1] = 6.0;
        q[0] = 1.0;
        q[1] = 3.0;
        assert_eq!(update_block_scale(&w, &q, 2.0), Some(1.0));
        let q = [1.0, -1.5, 6.0];
        let w: Vec<f64> = q.iter().map(|v| v * 0.75 * 0.125).collect();
        assert_eq!(update_block_scale(&w, &q, 0.75), Some(0.125));
        assert_eq!(update_block_scale(&w, &[0.0; 3], 0.75), None);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_scale_e4m3(2.0).unwrap().to_f64(), 2.0);
        assert_eq!(project_scale_e4m3(1.08).unwrap().to_f64(), 1.125);
        assert_eq!(project_scale_e4m3(1e6).unwrap().to_f64(), 448.0);
        assert_eq!(project_scale_e4m3(1e-12).unwrap(), E4m3::MIN_SUBNORMAL);
        assert!(project_scale_e4m3(0.0).is_err());
        assert!(project_scale_e4m3(-1.0).is_err());
    }

    #[test]
    fn exact_fixed_point_is_stable() {
        let w: Vec<f64> = [0.5, 1.0, -1.5, 2.0, 3.0, -4.0, 6.0, 0.0]
            .iter()
            .cycle()
            .take(32)
            .copied()
            .collect();
        let one = BlockScale::E4m3(quantize_e4m3(1.0).unwrap());
        let state = ScaleState::new(&w, Format::Nvfp4, 16, 1.0, vec![1.0; 2], vec![one; 2]).unwrap();
        assert_eq!(state.loss, 0.0);
        let next = cjso_step(&w, &state).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn step_updates_alpha_before_blocks() {
        let w = padded_pair(1.2, 2.1);
        let one = BlockScale::E4m3(quantize_e4m3(1.0).unwrap());
        let state = ScaleState::new(&w, Format::Nvfp4, 16, 1.0, vec![1.0], vec![one]).unwrap();
        assert_eq!(state.assignments()[..2], [1.0, 2.0]);
        let next = cjso_step(&w, &state).unwrap();
        assert_eq!(next.alpha, f64::from(1.08f64 as f32));
        // with alpha absorbing the fit, the block scale lands back near 1
        let raw = update_block_scale(&w, &state.assignments(), next.alpha).unwrap();
        assert_eq!(next.delta_q[0], raw);
        assert_eq!(next.delta_d[0], BlockScale::E4m3(project_scale_e4m3(raw).unwrap()));
        assert_eq!(next.loss, next.recompute_loss(&w));
    }

    #[test]
    fn degenerate_blocks_keep_previous_scales() {
        let mut w = vec![0.0; 32];
        w[16] = 3.0;
        let state = ScaleState::max_based(&w, Format::Nvfp4, 16).unwrap();
        let next = cjso_step(&w, &state).unwrap();
        assert_eq!(next.delta_d[0], state.delta_d[0]);
        assert_eq!(next.delta_q[0], state.delta_q[0]);

        let zeros = vec![0.0; 16];
        let state = ScaleState::max_based(&zeros, Format::Nvfp4, 16).unwrap();
        let next = cjso_step(&zeros, &state).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn mxfp4_has_no_closed_form_step() {
        let w = vec![1.0; 32];
        let state = ScaleState::max_based(&w, Format::Mxfp4, 32).unwrap();
        assert!(matches!(cjso_step(&w, &state), Err(Error::Config(_))));
    }
}
