//! Decoupled scale search.
//!
//! The stored block scale `delta_d` must be representable in the block-scale
//! format, but the scale that decides FP4 rounding, `delta_q`, can be any
//! positive real. For every block we search the product of a few
//! representable `delta_d` values around the analytic scale and a
//! multiplicative `delta_q` grid, and keep the pair with the lowest block loss.
//! The incoming pair is always a candidate, so a pass never increases the loss.

use rayon::prelude::*;

use crate::block::{BlockScale, Format, QuantConfig};
use crate::cjso::ScaleState;
use crate::codec::quantize_e2m1_saturating;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalePairCandidate {
    pub delta_q: f64,
    pub delta_d: BlockScale,
    pub loss: f64,
}

/// `{incumbent} ∪ neighbors(analytic, count)`, incumbent first, duplicates removed.
pub fn build_dequant_candidates(
    format: Format,
    incumbent: BlockScale,
    analytic: f64,
    count: usize,
) -> Result<Vec<BlockScale>> {
    let mut out = vec![incumbent];
    for s in format.scale_neighbors(analytic, count)? {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

/// `{base * (lo + k * step)}` for `k = 0..=K`, with `hi` itself as the last
/// multiplier when the range divides evenly.
pub fn build_quant_grid(base: f64, lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(base > 0.0 && base.is_finite()) {
        return Err(Error::InvalidScale(base));
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite() && step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("invalid grid [{lo}, {hi}] with step {step}")));
    }
    let span = (hi - lo) / step;
    let last = (span + 1e-9).floor() as usize;
    let hits_hi = (span - last as f64).abs() < 1e-6;
    Ok((0..=last)
        .map(|k| {
            let beta = if k == last && hits_hi { hi } else { lo + k as f64 * step };
            base * beta
        })
        .collect())
}

/// `(loss, |delta_d - analytic|, delta_q)`, compared lexicographically.
fn challenger_key(c: &ScalePairCandidate, analytic: f64) -> (f64, f64, f64) {
    (c.loss, (c.delta_d.to_f64() - analytic).abs(), c.delta_q)
}

fn beats(challenger: &ScalePairCandidate, best: &ScalePairCandidate, best_is_incumbent: bool, analytic: f64) -> bool {
    if best_is_incumbent {
        return challenger.loss < best.loss;
    }
    let (a, b) = (challenger_key(challenger, analytic), challenger_key(best, analytic));
    a.0 < b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)))
}

/// Exhaustive search over `dequant candidates x quant grid` plus the incumbent.
///
/// The incumbent wins every tie in loss. Among other pairs, ties go to the
/// `delta_d` closest to `analytic`, then to the smaller `delta_q`.
pub fn dss_refine_block(
    block: &[f64],
    alpha: f64,
    incumbent: ScalePairCandidate,
    analytic: f64,
    config: &QuantConfig,
) -> Result<ScalePairCandidate> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidScale(alpha));
    }
    let dequant = build_dequant_candidates(
        config.format,
        incumbent.delta_d,
        analytic,
        config.dequant_neighbor_count,
    )?;
    let grid = build_quant_grid(analytic, config.grid_lo, config.grid_hi, config.grid_step)?;
    let dequant_steps: Vec<f64> = dequant.iter().map(|d| alpha * d.to_f64()).collect();

    let mut best = incumbent;
    let mut best_is_incumbent = true;
    let mut assigned = vec![0.0; block.len()];
    for &delta_q in &grid {
        let quant_step = alpha * delta_q;
        for (q, &w) in assigned.iter_mut().zip(block) {
            *q = quantize_e2m1_saturating(w / quant_step).to_f64();
        }
        for (&delta_d, &dequant_step) in dequant.iter().zip(&dequant_steps) {
            let mut loss = 0.0;
            for (&w, &q) in block.iter().zip(&assigned) {
                let e = w - q * dequant_step;
                loss += e * e;
            }
            let cand = ScalePairCandidate { delta_q, delta_d, loss };
            if beats(&cand, &best, best_is_incumbent, analytic) {
                best = cand;
                best_is_incumbent = false;
            }
        }
    }
    Ok(best)
}

/// Runs [`dss_refine_block`] on every block, anchored at each block's current
/// `delta_q`. Blocks are searched in parallel and written back in order.
pub fn dss_refine_tensor(padded: &[f64], state: &ScaleState, config: &QuantConfig) -> Result<ScaleState> {
    if state.format != config.format || state.block_size != config.block_size {
        return Err(Error::Config(format!(
            "state is {} with block {}, config is {} with block {}",
            state.format, state.block_size, config.format, config.block_size
        )));
    }
    let losses = state.block_losses(padded);
    let picked: Vec<ScalePairCandidate> = padded
        .par_chunks_exact(state.block_size)
        .enumerate()
        .map(|(i, block)| {
            let incumbent = ScalePairCandidate {
                delta_q: state.delta_q[i],
                delta_d: state.delta_d[i],
                loss: losses[i],
            };
            dss_refine_block(block, state.alpha, incumbent, state.delta_q[i], config)
        })
        .collect::<Result<_>>()?;
    let delta_q = picked.iter().map(|c| c.delta_q).collect();
    let delta_d = picked.iter().map(|c| c.delta_d).collect();
    ScaleState::new(padded, state.format, state.block_size, state.alpha, delta_q, delta_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{block_loss, Method};
    use crate::codec::quantize_e4m3;

    fn e4m3(x: f64) -> BlockScale {
        BlockScale::E4m3(quantize_e4m3(x).unwrap())
    }

    fn config() -> QuantConfig {
        QuantConfig::new(Format::Nvfp4, Method::Dss)
    }

    #[test]
    fn dequant_candidate_examples() {
        let c = build_dequant_candidates(Format::Nvfp4, e4m3(2.0), 2.0, 2).unwrap();
        assert!(c.contains(&e4m3(2.0)));
        let c = build_dequant_candidates(Format::Nvfp4, e4m3(1.0), 1.05, 2).unwrap();
        assert_eq!(c, vec![e4m3(1.0), e4m3(1.125)]);
        let c = build_dequant_candidates(Format::Nvfp4, e4m3(8.0), 1.05, 2).unwrap();
        assert_eq!(c.len(), 3);
        assert!(build_dequant_candidates(Format::Nvfp4, e4m3(1.0), 0.0, 2).is_err());
    }

    #[test]
    fn quant_grid_examples() {
        let g = build_quant_grid(1.0, 0.5, 1.5, 0.01).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!((g[0], g[100]), (0.5, 1.5));
        assert_eq!(build_quant_grid(0.7, 1.0, 1.0, 0.01).unwrap(), vec![0.7]);
        let g = build_quant_grid(2.0, 0.5, 1.5, 0.01).unwrap();
        assert_eq!((g[0], g[100]), (1.0, 3.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(build_quant_grid(1.0, 1.5, 0.5, 0.01).is_err());
        assert!(build_quant_grid(1.0, 0.5, 1.5, 0.0).is_err());
    }

    #[test]
    fn exact_block_keeps_incumbent() {
        let block = vec![3.0; 16];
        let incumbent = ScalePairCandidate {
            delta_q: 0.5,
            delta_d: e4m3(0.5),
            loss: block_loss(&block, 1.0, 0.5, 0.5),
        };
        assert_eq!(incumbent.loss, 0.0);
        let got = dss_refine_block(&block, 1.0, incumbent, 0.5, &config()).unwrap();
        assert_eq!(got, incumbent);
    }

    #[test]
    fn refine_improves_a_lossy_block() {
        let block: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() * 2.9).collect();
        let d = 0.5;
        let incumbent = ScalePairCandidate {
            delta_q: d,
            delta_d: e4m3(d),
            loss: block_loss(&block, 1.0, d, d),
        };
        let got = dss_refine_block(&block, 1.0, incumbent, d, &config()).unwrap();
        assert!(got.loss < incumbent.loss);
        assert_eq!(got.loss, block_loss(&block, 1.0, got.delta_q, got.delta_d.to_f64()));
    }

    #[test]
    fn zero_loss_state_is_unchanged() {
        let w = crate::synthetic::exact_grid(Format::Nvfp4, 3).values;
        let state = ScaleState::max_based(&w, Format::Nvfp4, 16).unwrap();
        assert_eq!(state.loss, 0.0);
        let next = dss_refine_tensor(&w, &state, &config()).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn mxfp4_search_uses_power_of_two_scales() {
        let w: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.31).collect();
        let cfg = QuantConfig::new(Format::Mxfp4, Method::Dss);
        let state = ScaleState::max_based(&w, Format::Mxfp4, 32).unwrap();
        let next = dss_refine_tensor(&w, &state, &cfg).unwrap();
        assert!(next.loss <= state.loss);
        assert!(next.delta_d.iter().all(|d| matches!(d, BlockScale::E8m0(_))));
        assert_eq!(next.alpha, 1.0);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let w = vec![1.0; 32];
        let state = ScaleState::max_based(&w, Format::Nvfp4, 16).unwrap();
        let cfg = QuantConfig::new(Format::Mxfp4, Method::Dss);
        assert!(dss_refine_tensor(&w, &state, &cfg).is_err());
    }
}
