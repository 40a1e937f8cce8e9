//! Software codecs for the element and scale formats used by NVFP4 and MXFP4.
//!
//! * [`Fp4Code`]: 4-bit E2M1 elements, magnitudes `{0, 0.5, 1, 1.5, 2, 3, 4, 6}`.
//! * [`E4m3`]: 8-bit OCP FP8 (bias 7, no infinities, max 448), used for NVFP4 block scales.
//! * [`E8m0Scale`]: power-of-two scales, used for MXFP4 block scales.
//!
//! Every rounding site uses round-half-to-even. Decoding is exact in `f64`.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Largest E2M1 magnitude.
pub const FP4_MAX: f64 = 6.0;
/// Largest finite E4M3 magnitude.
pub const E4M3_MAX: f64 = 448.0;
/// Smallest positive normal E4M3 value, `2^-6`.
pub const E4M3_MIN_NORMAL: f64 = 0.015625;
/// Smallest positive subnormal E4M3 value, `2^-9`.
pub const E4M3_MIN_SUBNORMAL: f64 = 0.001953125;
/// `M_FP4 * M_FP8`, the denominator of the max-based global scale.
pub const FP4_TIMES_E4M3_MAX: f64 = FP4_MAX * E4M3_MAX;

const FP4_MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// `2^exp` for exponents inside the normal `f64` range.
#[inline]
pub(crate) fn pow2(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + 1023) as u64) << 52)
}

/// `floor(log2(x))` for positive, finite `x`. Subnormal `f64` inputs report -1023.
#[inline]
fn floor_log2(x: f64) -> i32 {
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(x))
    }
}

/// A 4-bit E2M1 code: bit 3 sign, bits 2..1 exponent, bit 0 mantissa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
#[repr(transparent)]
pub struct Fp4Code(u8);

impl Fp4Code {
    pub const ZERO: Self = Self(0);

    /// Wraps the low nibble of `bits`.
    pub const fn from_bits(bits: u8) -> Self {
        Self(bits & 0x0f)
    }

    pub const fn to_bits(self) -> u8 {
        self.0
    }

    pub fn is_negative(self) -> bool {
        self.0 & 0x8 != 0
    }

    pub fn to_f64(self) -> f64 {
        let mag = FP4_MAGNITUDES[(self.0 & 0x7) as usize];
        if self.is_negative() {
            -mag
        } else {
            mag
        }
    }

    /// Decode through the sign/exponent/mantissa fields rather than the lookup table.
    pub fn decode_fields(self) -> f64 {
        let sign = if self.is_negative() { -1.0 } else { 1.0 };
        let exp = (self.0 >> 1) & 0x3;
        let mant = f64::from(self.0 & 0x1);
        let mag = if exp == 0 {
            mant * 0.5
        } else {
            pow2(i32::from(exp) - 1) * (1.0 + mant / 2.0)
        };
        sign * mag
    }
}

/// The 15 distinct E2M1 values (negative zero excluded), sorted ascending.
pub fn e2m1_codebook() -> &'static [(Fp4Code, f64)] {
    static BOOK: OnceLock<Vec<(Fp4Code, f64)>> = OnceLock::new();
    BOOK.get_or_init(|| {
        let mut book: Vec<(Fp4Code, f64)> = (0u8..16)
            .filter(|&b| b != 0x8)
            .map(|b| (Fp4Code(b), Fp4Code(b).to_f64()))
            .collect();
        book.sort_by(|a, b| a.1.total_cmp(&b.1));
        book
    })
}

/// Magnitude index into `{0, 0.5, 1, 1.5, 2, 3, 4, 6}` for `a >= 0`.
///
/// Midpoints resolve to the even mantissa: 0.25→0, 0.75→1, 1.25→1, 1.75→2,
/// 2.5→2, 3.5→4, 5→4. Anything above 5 (including +inf) saturates to 6.
#[inline]
fn e2m1_magnitude_index(a: f64) -> u8 {
    if a <= 0.25 {
        0
    } else if a < 0.75 {
        1
    } else if a <= 1.25 {
        2
    } else if a < 1.75 {
        3
    } else if a <= 2.5 {
        4
    } else if a < 3.5 {
        5
    } else if a <= 5.0 {
        6
    } else {
        7
    }
}

/// Nearest E2M1 code without the finiteness check. NaN maps to +0.
#[inline]
pub(crate) fn quantize_e2m1_saturating(x: f64) -> Fp4Code {
    let idx = e2m1_magnitude_index(x.abs());
    if idx != 0 && x < 0.0 {
        Fp4Code(idx | 0x8)
    } else {
        Fp4Code(idx)
    }
}

/// Round `x` to the nearest E2M1 value, ties to even, saturating at ±6.
pub fn quantize_e2m1(x: f64) -> Result<Fp4Code> {
    check_finite(x)?;
    Ok(quantize_e2m1_saturating(x))
}

/// The three-branch rounding rule written out on the half-unit, unit and
/// two-unit grids of E2M1, saturating beyond 6.
pub fn piecewise_round(t: f64) -> Result<f64> {
    check_finite(t)?;
    let a = t.abs();
    let r = if a < 2.0 {
        0.5 * (2.0 * a).round_ties_even()
    } else if a < 4.0 {
        a.round_ties_even()
    } else if a <= FP4_MAX {
        2.0 * (a / 2.0).round_ties_even()
    } else {
        FP4_MAX
    };
    Ok(if r == 0.0 { 0.0 } else { r.copysign(t) })
}

/// An OCP E4M3 FP8 value: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct E4m3(u8);

impl E4m3 {
    pub const MAX: Self = Self(0x7e);
    pub const MIN_NORMAL: Self = Self(0x08);
    pub const MIN_SUBNORMAL: Self = Self(0x01);

    /// Accepts any bit pattern except the two NaN encodings (`0x7f`, `0xff`).
    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & 0x7f == 0x7f {
            Err(Error::InvalidEncoding {
                format: "E4M3",
                bits,
            })
        } else {
            Ok(Self(bits))
        }
    }

    pub const fn to_bits(self) -> u8 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        let exp = i32::from((self.0 >> 3) & 0xf);
        let mant = f64::from(self.0 & 0x7);
        let mag = if exp == 0 {
            mant * E4M3_MIN_SUBNORMAL
        } else {
            (8.0 + mant) * pow2(exp - 10)
        };
        if self.0 & 0x80 != 0 {
            -mag
        } else {
            mag
        }
    }

    /// Encodes a non-negative magnitude that already lies on the E4M3 grid.
    fn from_grid_magnitude(q: f64) -> Self {
        if q < E4M3_MIN_NORMAL {
            Self((q / E4M3_MIN_SUBNORMAL) as u8)
        } else {
            let exp = floor_log2(q);
            let mant = ((q / pow2(exp) - 1.0) * 8.0) as u8;
            Self((((exp + 7) as u8) << 3) | mant)
        }
    }

    /// Next larger positive value, or `None` at the top of the range.
    pub fn next_up(self) -> Option<Self> {
        match self.0 {
            b if b >= 0x7e => None,
            b => Some(Self(b + 1)),
        }
    }
}

/// All 126 positive finite E4M3 values, ascending.
pub fn e4m3_positive_values() -> &'static [E4m3] {
    static VALUES: OnceLock<Vec<E4m3>> = OnceLock::new();
    VALUES.get_or_init(|| (0x01u8..=0x7e).map(E4m3).collect())
}

/// Round `x` to the nearest E4M3 value, ties to even, saturating at ±448.
///
/// Zero results are returned as +0.
pub fn quantize_e4m3(x: f64) -> Result<E4m3> {
    check_finite(x)?;
    let a = x.abs();
    let q = if a >= E4M3_MAX {
        E4M3_MAX
    } else {
        let exp = if a < E4M3_MIN_NORMAL { -6 } else { floor_log2(a) };
        let quantum = pow2(exp - 3);
        (a / quantum).round_ties_even() * quantum
    };
    let code = E4m3::from_grid_magnitude(q);
    if x < 0.0 && q != 0.0 {
        Ok(E4m3(code.0 | 0x80))
    } else {
        Ok(code)
    }
}

/// Indices of the `count` entries of an ascending slice closest to `x`,
/// ordered by distance and then by value.
fn nearest_sorted(values: &[f64], x: f64, count: usize) -> Vec<usize> {
    let split = values.partition_point(|&v| v < x);
    let (mut lo, mut hi) = (split, split);
    let mut out = Vec::with_capacity(count.min(values.len()));
    while out.len() < count && (lo > 0 || hi < values.len()) {
        let take_low = match (lo > 0, hi < values.len()) {
            (true, true) => x - values[lo - 1] <= values[hi] - x,
            (true, false) => true,
            _ => false,
        };
        if take_low {
            lo -= 1;
            out.push(lo);
        } else {
            out.push(hi);
            hi += 1;
        }
    }
    out
}

fn check_neighbor_args(x: f64, count: usize) -> Result<()> {
    check_finite(x)?;
    if x <= 0.0 {
        return Err(Error::InvalidScale(x));
    }
    if count == 0 {
        return Err(Error::Config("neighbor count must be at least 1".into()));
    }
    Ok(())
}

/// The `count` positive E4M3 values closest to `x`, sorted by distance then value.
pub fn e4m3_neighbors(x: f64, count: usize) -> Result<Vec<E4m3>> {
    check_neighbor_args(x, count)?;
    static DECODED: OnceLock<Vec<f64>> = OnceLock::new();
    let decoded = DECODED.get_or_init(|| e4m3_positive_values().iter().map(|v| v.to_f64()).collect());
    let positives = e4m3_positive_values();
    Ok(nearest_sorted(decoded, x, count)
        .into_iter()
        .map(|i| positives[i])
        .collect())
}

/// A power-of-two scale `2^exponent`, `exponent` in `[-127, 127]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct E8m0Scale {
    exponent: i8,
}

impl E8m0Scale {
    pub const MIN_EXPONENT: i32 = -127;
    pub const MAX_EXPONENT: i32 = 127;

    pub fn from_exponent(exponent: i32) -> Result<Self> {
        if (Self::MIN_EXPONENT..=Self::MAX_EXPONENT).contains(&exponent) {
            Ok(Self {
                exponent: exponent as i8,
            })
        } else {
            Err(Error::Config(format!("E8M0 exponent {exponent} out of range")))
        }
    }

    /// Biased storage byte; `0xff` is the NaN pattern and is rejected.
    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0xff {
            return Err(Error::InvalidEncoding {
                format: "E8M0",
                bits,
            });
        }
        Self::from_exponent(i32::from(bits) - 127)
    }

    pub fn to_bits(self) -> u8 {
        (i32::from(self.exponent) + 127) as u8
    }

    pub fn exponent(self) -> i32 {
        i32::from(self.exponent)
    }

    pub fn to_f64(self) -> f64 {
        2f64.powi(self.exponent())
    }

    pub fn next_up(self) -> Option<Self> {
        Self::from_exponent(self.exponent() + 1).ok()
    }
}

/// Largest power of two not exceeding `x`, clamped to the E8M0 range.
pub fn quantize_e8m0(x: f64) -> Result<E8m0Scale> {
    check_finite(x)?;
    if x <= 0.0 {
        return Err(Error::InvalidScale(x));
    }
    let exp = floor_log2(x).clamp(E8m0Scale::MIN_EXPONENT, E8m0Scale::MAX_EXPONENT);
    E8m0Scale::from_exponent(exp)
}

/// Smallest power of two not below `x`, clamped to the E8M0 range.
pub fn quantize_e8m0_ceil(x: f64) -> Result<E8m0Scale> {
    let floor = quantize_e8m0(x)?;
    if floor.to_f64() < x {
        Ok(floor.next_up().unwrap_or(floor))
    } else {
        Ok(floor)
    }
}

/// The `count` E8M0 scales closest to `x`, sorted by distance then value.
pub fn e8m0_neighbors(x: f64, count: usize) -> Result<Vec<E8m0Scale>> {
    check_neighbor_args(x, count)?;
    static DECODED: OnceLock<Vec<f64>> = OnceLock::new();
    let decoded = DECODED.get_or_init(|| {
        (E8m0Scale::MIN_EXPONENT..=E8m0Scale::MAX_EXPONENT)
            .map(|e| 2f64.powi(e))
            .collect()
    });
    nearest_sorted(decoded, x, count)
        .into_iter()
        .map(|i| E8m0Scale::from_exponent(i as i32 + E8m0Scale::MIN_EXPONENT))
        .collect()
}
