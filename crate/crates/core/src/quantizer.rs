//! Symmetric uniform quantization.
//!
//! Codes live in the restricted range `[-qmax, qmax]` with
//! `qmax = 2^(bits-1) - 1`, so the zero point is always 0 and the
//! most-negative two's-complement code is never produced. Scales are
//! static min/max: `s = max|x| / qmax`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// A supported quantization bit-width (2, 4, 8 or 16).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bits(u8);

impl Bits {
    pub const INT2: Bits = Bits(2);
    pub const INT4: Bits = Bits(4);
    pub const INT8: Bits = Bits(8);
    pub const INT16: Bits = Bits(16);

    pub fn new(bits: u32) -> Result<Self> {
        match bits {
            2 | 4 | 8 | 16 => Ok(Bits(bits as u8)),
            other => Err(Error::UnsupportedBits(other)),
        }
    }

    /// Parses a configured width where 32 means "no quantization".
    pub fn from_config(bits: u32) -> Result<Option<Self>> {
        if bits == 32 {
            Ok(None)
        } else {
            Bits::new(bits).map(Some)
        }
    }

    pub fn get(self) -> u32 {
        u32::from(self.0)
    }

    pub fn qmax(self) -> i32 {
        (1i32 << (self.0 - 1)) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    /// One scale per embedding table.
    PerTable,
    /// One scale per output row of a weight matrix.
    PerChannel,
    /// One scale per tensor ("matrix-wise" for MLP weights).
    PerTensor,
}

/// How a group of weights is quantized and how often its scale is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: Bits,
    pub granularity: Granularity,
    pub update_period: u32,
}

impl QuantSpec {
    pub fn new(bits: u32, granularity: Granularity, update_period: u32) -> Result<Self> {
        if update_period == 0 {
            return Err(Error::Config("update period must be >= 1".into()));
        }
        Ok(QuantSpec {
            bits: Bits::new(bits)?,
            granularity,
            update_period,
        })
    }

    pub fn qmax(&self) -> i32 {
        self.bits.qmax()
    }
}

/// Real value represented by one quantization step. Always positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Scale<T>(T);

impl<T: Real> Scale<T> {
    pub fn new(value: T) -> Result<Self> {
        if value.is_finite() && value > T::zero() {
            Ok(Scale(value))
        } else {
            Err(Error::NonFinite)
        }
    }

    pub fn get(self) -> T {
        self.0
    }

    /// Scale used when a tensor is entirely zero.
    pub fn degenerate(bits: Bits) -> Self {
        Scale(T::one() / T::from_i32(bits.qmax()).unwrap())
    }

    /// Scale covering a known max-abs value.
    pub fn from_max_abs(max_abs: T, bits: Bits) -> Self {
        if max_abs > T::zero() {
            Scale(max_abs / T::from_i32(bits.qmax()).unwrap())
        } else {
            Scale::degenerate(bits)
        }
    }
}

/// Largest absolute value, rejecting empty and non-finite input.
pub fn max_abs<T: Real>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(lo.abs().max(hi.abs()))
}

pub fn compute_scale<T: Real>(values: &[T], bits: Bits) -> Result<Scale<T>> {
    Ok(Scale::from_max_abs(max_abs(values)?, bits))
}

#[inline]
pub fn quantize_one<T: Real>(value: T, scale: Scale<T>, bits: Bits) -> i32 {
    let qmax = bits.qmax();
    let q = ratio(value, scale);
    if q.is_nan() {
        return 0;
    }
    // saturating cast
    (q as i64).clamp(-i64::from(qmax), i64::from(qmax)) as i32
}

/// `value / scale` rounded half away from zero. The quotient is taken in
/// f64 so an f32 quotient just below `k + 0.5` cannot round up to the tie.
#[inline]
fn ratio<T: Real>(value: T, scale: Scale<T>) -> f64 {
    let v = value.to_f64().unwrap_or(f64::NAN);
    let s = scale.0.to_f64().unwrap_or(f64::NAN);
    num_traits::Float::round(v / s)
}

/// True when `value` would be clamped rather than rounded.
#[inline]
pub fn clips<T: Real>(value: T, scale: Scale<T>, bits: Bits) -> bool {
    num_traits::Float::abs(ratio(value, scale)) > f64::from(bits.qmax())
}

pub fn quantize<T: Real>(values: &[T], scale: Scale<T>, bits: Bits) -> Vec<i32> {
    values.iter().map(|&v| quantize_one(v, scale, bits)).collect()
}

#[inline]
pub fn dequantize_one<T: Real>(code: i32, scale: Scale<T>) -> T {
    T::from_i32(code).unwrap() * scale.0
}

pub fn dequantize<T: Real>(codes: &[i32], scale: Scale<T>) -> Vec<T> {
    codes.iter().map(|&q| dequantize_one(q, scale)).collect()
}

#[inline]
pub fn fake_quantize_one<T: Real>(value: T, scale: Scale<T>, bits: Bits) -> T {
    dequantize_one(quantize_one(value, scale, bits), scale)
}

pub fn fake_quantize<T: Real>(values: &[T], scale: Scale<T>, bits: Bits) -> Vec<T> {
    values.iter().map(|&v| fake_quantize_one(v, scale, bits)).collect()
}

pub fn fake_quantize_in_place<T: Real>(values: &mut [T], scale: Scale<T>, bits: Bits) {
    for v in values {
        *v = fake_quantize_one(*v, scale, bits);
    }
}

/// Straight-through estimator: the gradient of fake quantization is taken
/// to be the identity, including outside the frozen clip range.
pub fn ste_backward<T: Real>(upstream: &[T]) -> Vec<T> {
    upstream.to_vec()
}

/// One scale per output row of a row-major `rows x cols` matrix.
pub fn per_channel_scales<T: Real>(weights: &[T], rows: usize, cols: usize, bits: Bits) -> Result<Vec<Scale<T>>> {
    if weights.len() != rows * cols {
        return Err(Error::shape(rows * cols, weights.len()));
    }
    if cols == 0 {
        return Err(Error::EmptyTensor);
    }
    weights.chunks_exact(cols).map(|row| compute_scale(row, bits)).collect()
}

/// Packs INT4 codes two per byte: element `2i` in the low nibble of byte
/// `i`, element `2i+1` in the high nibble, each stored as `q + 8`. An odd
/// trailing element leaves the final high nibble zero.
pub fn pack_int4(codes: &[i32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(codes.len().div_ceil(2));
    for pair in codes.chunks(2) {
        let lo = nibble(pair[0])?;
        let hi = match pair.get(1) {
            Some(&q) => nibble(q)?,
            None => 0,
        };
        out.push(lo | (hi << 4));
    }
    Ok(out)
}

fn nibble(q: i32) -> Result<u8> {
    if (-7..=7).contains(&q) {
        Ok((q + 8) as u8)
    } else {
        Err(Error::CodeOutOfRange(q))
    }
}

pub fn unpack_int4(bytes: &[u8], count: usize) -> Result<Vec<i32>> {
    if bytes.len() < count.div_ceil(2) {
        return Err(Error::shape(count.div_ceil(2), bytes.len()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let byte = bytes[i / 2];
        let n = if i % 2 == 0 { byte & 0x0f } else { byte >> 4 };
        let q = i32::from(n) - 8;
        if !(-7..=7).contains(&q) {
            return Err(Error::CodeOutOfRange(q));
        }
        out.push(q);
    }
    Ok(out)
}
