//! Fixed-point Q(1, i, f) numerics: quantize/dequantize, bit-level
//! manipulation, and per-bit statistics.
//!
//! Values are two's-complement integer codes; the sign bit carries weight
//! `-2^int_bits` and the value of a code is `code * 2^(-frac_bits)`. All
//! operations here are pure functions on immutable inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FxpError {
    #[error("invalid format: total bits must be 8, 16 or 32, got {0}")]
    BadWidth(u32),
    #[error("cannot quantize non-finite value")]
    NonFinite,
    #[error("code {code} out of range for {fmt}")]
    CodeOutOfRange { code: i64, fmt: QFormat },
    #[error("bit index {bit} out of range for {fmt}")]
    BitOutOfRange { bit: u32, fmt: QFormat },
    #[error("empty tensor")]
    EmptyTensor,
    #[error("malformed format string {0:?}, expected \"Q(1,i,f)\"")]
    BadFormatString(String),
}

/// Fixed-point format: one sign bit, `int_bits` integer bits and `frac_bits`
/// fraction bits. Total width must be 8, 16 or 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QFormat {
    int_bits: u32,
    frac_bits: u32,
}

impl QFormat {
    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self, FxpError> {
        let total = 1 + int_bits + frac_bits;
        if !matches!(total, 8 | 16 | 32) {
            return Err(FxpError::BadWidth(total));
        }
        Ok(Self { int_bits, frac_bits })
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn total_bits(&self) -> u32 {
        1 + self.int_bits + self.frac_bits
    }

    /// Most negative representable code, `-2^(total_bits-1)`.
    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.total_bits() - 1))
    }

    /// Most positive representable code, `2^(total_bits-1) - 1`.
    pub fn max_code(&self) -> i64 {
        (1i64 << (self.total_bits() - 1)) - 1
    }

    pub fn contains(&self, code: i64) -> bool {
        code >= self.min_code() && code <= self.max_code()
    }

    /// The value of one least-significant bit, `2^(-frac_bits)`.
    pub fn lsb<R: Real>(&self) -> R {
        R::from_f64((-(self.frac_bits as f64)).exp2()).unwrap()
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q(1,{},{})", self.int_bits, self.frac_bits)
    }
}

impl FromStr for QFormat {
    type Err = FxpError;

    fn from_str(s: &str) -> Result<Self, FxpError> {
        let bad = || FxpError::BadFormatString(s.to_string());
        let inner = s
            .trim()
            .strip_prefix("Q(")
            .and_then(|t| t.strip_suffix(')'))
            .ok_or_else(bad)?;
        let mut parts = inner.split(',').map(str::trim);
        let sign: u32 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let int_bits: u32 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let frac_bits: u32 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if sign != 1 || parts.next().is_some() {
            return Err(bad());
        }
        QFormat::new(int_bits, frac_bits)
    }
}

impl Serialize for QFormat {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for QFormat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Quantize a real value: round-to-nearest (ties to even) of
/// `x * 2^frac_bits`, saturated to the format's code range.
pub fn quantize<R: Real>(x: R, fmt: QFormat) -> Result<i64, FxpError> {
    if !x.is_finite() {
        return Err(FxpError::NonFinite);
    }
    let scaled = x.to_f64().ok_or(FxpError::NonFinite)? * (fmt.frac_bits as f64).exp2();
    // round half to even; f64 is exact for every in-range code of a <=32-bit format
    let rounded = round_ties_even(scaled);
    let code = if rounded <= fmt.min_code() as f64 {
        fmt.min_code()
    } else if rounded >= fmt.max_code() as f64 {
        fmt.max_code()
    } else {
        rounded as i64
    };
    Ok(code)
}

fn round_ties_even(x: f64) -> f64 {
    let floor = x.floor();
    let diff = x - floor;
    if diff > 0.5 {
        floor + 1.0
    } else if diff < 0.5 {
        floor
    } else if (floor as i64) % 2 == 0 {
        floor
    } else {
        floor + 1.0
    }
}

/// Dequantize a code to its real value `code * 2^(-frac_bits)`.
pub fn dequantize<R: Real>(code: i64, fmt: QFormat) -> Result<R, FxpError> {
    if !fmt.contains(code) {
        return Err(FxpError::CodeOutOfRange { code, fmt });
    }
    Ok(R::from_f64(code as f64 * (-(fmt.frac_bits as f64)).exp2()).unwrap())
}

/// Invert exactly one bit of a code, interpreting it as a `total_bits`-wide
/// two's-complement word.
pub fn flip_bit(code: i64, bit: u32, fmt: QFormat) -> Result<i64, FxpError> {
    if bit >= fmt.total_bits() {
        return Err(FxpError::BitOutOfRange { bit, fmt });
    }
    if !fmt.contains(code) {
        return Err(FxpError::CodeOutOfRange { code, fmt });
    }
    let width = fmt.total_bits();
    let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    let word = (code as u64 & mask) ^ (1u64 << bit);
    Ok(sign_extend(word, width))
}

fn sign_extend(word: u64, width: u32) -> i64 {
    let shift = 64 - width;
    ((word << shift) as i64) >> shift
}

/// Read a single bit of a code as seen in its `total_bits`-wide word.
pub fn get_bit(code: i64, bit: u32, fmt: QFormat) -> bool {
    debug_assert!(bit < fmt.total_bits());
    (code as u64 >> bit) & 1 == 1
}

/// A flat tensor of two's-complement codes in a common format.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTensor {
    codes: Vec<i64>,
    fmt: QFormat,
    shape: Vec<usize>,
}

impl CodeTensor {
    pub fn new(codes: Vec<i64>, fmt: QFormat, shape: Vec<usize>) -> Result<Self, FxpError> {
        for &c in &codes {
            if !fmt.contains(c) {
                return Err(FxpError::CodeOutOfRange { code: c, fmt });
            }
        }
        debug_assert_eq!(shape.iter().product::<usize>(), codes.len());
        Ok(Self { codes, fmt, shape })
    }

    pub fn from_reals<R: Real>(xs: &[R], fmt: QFormat, shape: Vec<usize>) -> Result<Self, FxpError> {
        let codes = xs.iter().map(|&x| quantize(x, fmt)).collect::<Result<_, _>>()?;
        Ok(Self { codes, fmt, shape })
    }

    pub fn codes(&self) -> &[i64] {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut [i64] {
        &mut self.codes
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn to_reals<R: Real>(&self) -> Vec<R> {
        self.codes
            .iter()
            .map(|&c| dequantize(c, self.fmt).expect("stored code in range"))
            .collect()
    }
}

/// Fraction of 1-bits at each bit position across a tensor. Entry `b` of the
/// result covers bit `b`, LSB first.
pub fn bit_histogram(t: &CodeTensor) -> Result<Vec<f64>, FxpError> {
    if t.is_empty() {
        return Err(FxpError::EmptyTensor);
    }
    let width = t.fmt.total_bits();
    let mut ones = vec![0usize; width as usize];
    for &c in &t.codes {
        for (b, slot) in ones.iter_mut().enumerate() {
            if get_bit(c, b as u32, t.fmt) {
                *slot += 1;
            }
        }
    }
    Ok(ones.iter().map(|&n| n as f64 / t.codes.len() as f64).collect())
}
