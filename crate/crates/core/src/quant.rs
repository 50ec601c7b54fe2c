//! Uniform affine quantization.
//!
//! A value `x` maps to the integer code `clamp(rint(x / s) + z, l, u)` and
//! back to `s * (code - z)`. Rounding is half-to-even (`rint`). Activations
//! use the unsigned asymmetric convention `l = 0, u = 2^b - 1`; weights use
//! the signed symmetric convention `z = 0, l = -2^(b-1), u = 2^(b-1) - 1`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Shrink factor applied to the last candidate of [`scale_grid`].
pub const GRID_MIN_SHRINK: f64 = 0.3;

/// Round half to even.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    libm::rint(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    scale: f64,
    zero_point: i32,
    bits: u8,
    code_low: i32,
    code_high: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u8, code_low: i32, code_high: i32) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidQuantParams("scale must be positive and finite"));
        }
        if i64::from(code_high) - i64::from(code_low) + 1 != 1i64 << bits {
            return Err(Error::InvalidQuantParams("code range must hold exactly 2^b codes"));
        }
        if !(code_low..=code_high).contains(&zero_point) {
            return Err(Error::InvalidQuantParams("zero-point outside the code range"));
        }
        Ok(Self {
            scale,
            zero_point,
            bits,
            code_low,
            code_high,
        })
    }

    /// Unsigned asymmetric parameters (`l = 0`, `u = 2^b - 1`).
    pub fn unsigned(scale: f64, zero_point: i32, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        Self::new(scale, zero_point, bits, 0, (1 << bits) - 1)
    }

    /// Signed symmetric parameters (`z = 0`, `l = -2^(b-1)`, `u = 2^(b-1) - 1`).
    pub fn signed_symmetric(scale: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let half = 1 << (bits - 1);
        Self::new(scale, 0, bits, -half, half - 1)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn code_low(&self) -> i32 {
        self.code_low
    }

    pub fn code_high(&self) -> i32 {
        self.code_high
    }

    /// Number of codes, `2^b`.
    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    /// Smallest and largest representable values.
    pub fn range(&self) -> (f64, f64) {
        (
            self.dequantize_code(self.code_low),
            self.dequantize_code(self.code_high),
        )
    }

    /// Width of the representable range, `s * (u - l)`.
    pub fn range_width(&self) -> f64 {
        self.scale * f64::from(self.code_high - self.code_low)
    }

    pub fn quantize_value(&self, x: f64) -> i32 {
        let code = round_half_even(x / self.scale) + f64::from(self.zero_point);
        code.clamp(f64::from(self.code_low), f64::from(self.code_high)) as i32
    }

    pub fn dequantize_code(&self, code: i32) -> f64 {
        self.scale * f64::from(code - self.zero_point)
    }

    /// `dequantize(quantize(x))` for one value.
    pub fn fake_quantize_value(&self, x: f64) -> f64 {
        self.dequantize_code(self.quantize_value(x))
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidBits(bits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

pub fn quantize(x: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    if let Some(index) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes: x.data().iter().map(|&v| params.quantize_value(v)).collect(),
        params: *params,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    Tensor::from_parts(
        q.shape.clone(),
        q.codes.iter().map(|&c| q.params.dequantize_code(c)).collect(),
    )
}

/// Quantize-then-dequantize.
pub fn fake_quantize(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, params)?))
}

/// Min-max calibration of unsigned asymmetric parameters over the elements
/// selected by `mask` (all elements when `None`).
///
/// The observed range is widened to contain zero so that zero stays exactly
/// representable; then `s = (max - min) / (2^b - 1)` and
/// `z = clamp(rint(-min / s), 0, 2^b - 1)`. A constant input `c` yields
/// `s = |c|` (or 1 when `c = 0`) with `z` chosen so `c` is an exact code.
pub fn calibrate_minmax(x: &Tensor, bits: u8, mask: Option<&[bool]>) -> Result<QuantParams> {
    check_bits(bits)?;
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::ShapeMismatch {
                expected: x.shape().to_vec(),
                actual: alloc::vec![m.len()],
            });
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, &v) in x.data().iter().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Err(Error::EmptyMask);
    }
    minmax_params(lo, hi, bits)
}

/// Unsigned parameters covering `[lo, hi]` (see [`calibrate_minmax`]).
pub fn minmax_params(lo: f64, hi: f64, bits: u8) -> Result<QuantParams> {
    check_bits(bits)?;
    let top = (1i32 << bits) - 1;
    if lo == hi {
        return match lo {
            c if c > 0.0 => QuantParams::unsigned(c, 0, bits),
            c if c < 0.0 => QuantParams::unsigned(-c, 1, bits),
            _ => QuantParams::unsigned(1.0, 0, bits),
        };
    }
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    let scale = (hi - lo) / f64::from(top);
    let zero_point = round_half_even(-lo / scale).clamp(0.0, f64::from(top)) as i32;
    QuantParams::unsigned(scale, zero_point, bits)
}

/// Symmetric min-max calibration for weights: `s = max|w| / (2^(b-1) - 1)`.
pub fn calibrate_symmetric(x: &Tensor, bits: u8) -> Result<QuantParams> {
    check_bits(bits)?;
    let peak = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let top = f64::from((1i32 << (bits - 1)) - 1);
    let scale = if peak > 0.0 { peak / top } else { 1.0 };
    QuantParams::signed_symmetric(scale, bits)
}

/// Shrink factor of candidate `i` out of `steps`: evenly spaced from 1.0 down
/// to [`GRID_MIN_SHRINK`].
pub fn grid_shrink(i: usize, steps: usize) -> f64 {
    if steps <= 1 {
        1.0
    } else {
        1.0 - (1.0 - GRID_MIN_SHRINK) * i as f64 / (steps - 1) as f64
    }
}

/// Candidate parameters with the representable range shrunk around the
/// centre of `base`'s range. The zero-point is recomputed and clamped into
/// the code range, so a range anchored at zero stays anchored there.
/// The first candidate is always `base`.
pub fn scale_grid(base: &QuantParams, steps: usize) -> Result<Vec<QuantParams>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("scale grid needs at least one step"));
    }
    let (lo, hi) = base.range();
    let centre = 0.5 * (lo + hi);
    let width = hi - lo;
    let l = f64::from(base.code_low);
    let u = f64::from(base.code_high);
    (0..steps)
        .map(|i| {
            if i == 0 {
                return Ok(*base);
            }
            let shrink = grid_shrink(i, steps);
            let scale = base.scale * shrink;
            let new_lo = centre - 0.5 * shrink * width;
            let zero_point = round_half_even(l - new_lo / scale).clamp(l, u) as i32;
            QuantParams::new(scale, zero_point, base.bits, base.code_low, base.code_high)
        })
        .collect()
}
