//! Parametric number formats and max-scaled round-to-nearest quantization.
//!
//! Floating-point formats `E{e}M{m}` follow IEEE layout with subnormals
//! (exponent field 0) and no infinities. Eight-bit formats reserve the
//! all-ones magnitude code for NaN (the OCP `E4M3` convention, max 448);
//! narrower formats use every code for a finite value. Integer formats are
//! symmetric, dropping `-2^(n-1)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FpFormat {
    pub exp_bits: u32,
    pub man_bits: u32,
}

impl FpFormat {
    pub const E2M1: FpFormat = FpFormat::new_unchecked(2, 1);
    pub const E1M2: FpFormat = FpFormat::new_unchecked(1, 2);
    pub const E3M0: FpFormat = FpFormat::new_unchecked(3, 0);
    pub const E4M3: FpFormat = FpFormat::new_unchecked(4, 3);

    const fn new_unchecked(exp_bits: u32, man_bits: u32) -> Self {
        Self { exp_bits, man_bits }
    }

    pub fn new(exp_bits: u32, man_bits: u32) -> Result<Self> {
        if exp_bits == 0 || exp_bits + man_bits > 8 {
            return Err(Error::InvalidConfig(format!(
                "E{exp_bits}M{man_bits}: need 1 <= exponent bits and exponent + mantissa <= 8"
            )));
        }
        Ok(Self { exp_bits, man_bits })
    }

    pub fn bits(&self) -> u32 {
        1 + self.exp_bits + self.man_bits
    }

    pub fn bias(&self) -> i32 {
        (1 << (self.exp_bits - 1)) - 1
    }

    fn reserves_nan(&self) -> bool {
        self.bits() == 8
    }

    /// Value of the magnitude code `code = exp << man_bits | mant`.
    pub fn decode_magnitude(&self, code: u32) -> f64 {
        let mant = code & ((1 << self.man_bits) - 1);
        let exp = code >> self.man_bits;
        let frac = mant as f64 / (1u64 << self.man_bits) as f64;
        if exp == 0 {
            frac * 2f64.powi(1 - self.bias())
        } else {
            (1.0 + frac) * 2f64.powi(exp as i32 - self.bias())
        }
    }

    /// Finite non-negative magnitudes in code order (strictly increasing).
    pub fn magnitudes(&self) -> Vec<f64> {
        let mut codes = 1u32 << (self.exp_bits + self.man_bits);
        if self.reserves_nan() {
            codes -= 1;
        }
        (0..codes).map(|c| self.decode_magnitude(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IntFormat {
    pub bits: u32,
}

impl IntFormat {
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidConfig(format!("INT{bits}: bits must lie in 2..=16")));
        }
        Ok(Self { bits })
    }

    pub fn max_int(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }
}

/// Any scalar or scale format understood by the quantizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NumberFormat {
    Int(IntFormat),
    Fp(FpFormat),
    /// Unsigned power-of-two scale format, exponents in `[-127, 127]`.
    E8M0,
}

impl NumberFormat {
    pub const INT4: NumberFormat = NumberFormat::Int(IntFormat { bits: 4 });
    pub const E2M1: NumberFormat = NumberFormat::Fp(FpFormat::E2M1);
    pub const E1M2: NumberFormat = NumberFormat::Fp(FpFormat::E1M2);
    pub const E4M3: NumberFormat = NumberFormat::Fp(FpFormat::E4M3);

    pub fn bits(&self) -> u32 {
        match self {
            NumberFormat::Int(f) => f.bits,
            NumberFormat::Fp(f) => f.bits(),
            NumberFormat::E8M0 => 8,
        }
    }
}

impl fmt::Display for NumberFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumberFormat::Int(i) => write!(f, "int{}", i.bits),
            NumberFormat::Fp(p) => write!(f, "e{}m{}", p.exp_bits, p.man_bits),
            NumberFormat::E8M0 => f.write_str("e8m0"),
        }
    }
}

impl FromStr for NumberFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let unknown = || Error::UnknownFormat(s.to_string());
        if lower == "e8m0" {
            return Ok(NumberFormat::E8M0);
        }
        if let Some(bits) = lower.strip_prefix("int") {
            let bits = bits.parse().map_err(|_| unknown())?;
            return Ok(NumberFormat::Int(IntFormat::new(bits)?));
        }
        if let Some(rest) = lower.strip_prefix('e') {
            let (e, m) = rest.split_once('m').ok_or_else(unknown)?;
            let e = e.parse().map_err(|_| unknown())?;
            let m = m.parse().map_err(|_| unknown())?;
            return Ok(NumberFormat::Fp(FpFormat::new(e, m)?));
        }
        Err(unknown())
    }
}

impl TryFrom<String> for NumberFormat {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NumberFormat> for String {
    fn from(f: NumberFormat) -> String {
        f.to_string()
    }
}

/// All representable values of an FP format, sorted, zero included once.
pub fn enumerate_codewords(f: FpFormat) -> Vec<f64> {
    let mags = f.magnitudes();
    let mut out: Vec<f64> = mags.iter().rev().filter(|&&m| m > 0.0).map(|&m| -m).collect();
    out.extend(mags.iter().copied());
    out.dedup();
    out
}

/// Largest finite representable magnitude.
pub fn max_level(fmt: NumberFormat) -> f64 {
    match fmt {
        NumberFormat::Int(i) => i.max_int() as f64,
        NumberFormat::Fp(f) => *f.magnitudes().last().expect("nonempty format"),
        NumberFormat::E8M0 => 2f64.powi(127),
    }
}

/// Positive, finite scale factor.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ScaleFactor(f64);

impl ScaleFactor {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::InvalidConfig(format!("scale factor {value} must be positive and finite")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `max|x| / max_level(fmt)`, or 1 for an all-zero input.
pub fn compute_scale(x: &[f64], fmt: NumberFormat) -> ScaleFactor {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        ScaleFactor(1.0)
    } else {
        ScaleFactor(m / max_level(fmt))
    }
}

/// Precomputed magnitude grid for fast round-to-nearest.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    format: NumberFormat,
    mags: Vec<f64>,
}

impl ScalarGrid {
    /// Not available for [`NumberFormat::E8M0`], whose grid is unbounded in
    /// practice; use [`quantize_e8m0`].
    pub fn new(format: NumberFormat) -> Result<Self> {
        let mags = match format {
            NumberFormat::Int(i) => (0..=i.max_int()).map(|v| v as f64).collect(),
            NumberFormat::Fp(f) => f.magnitudes(),
            NumberFormat::E8M0 => {
                return Err(Error::InvalidConfig("e8m0 is a scale-only format".into()))
            }
        };
        Ok(Self { format, mags })
    }

    pub fn format(&self) -> NumberFormat {
        self.format
    }

    pub fn max_level(&self) -> f64 {
        *self.mags.last().expect("nonempty grid")
    }

    /// Index of the nearest magnitude to `y >= 0`, saturating; exact ties go
    /// to the even index (even mantissa / even integer).
    #[inline]
    pub fn magnitude_index(&self, y: f64) -> usize {
        let mags = &self.mags;
        let hi = mags.partition_point(|&m| m < y);
        if hi == mags.len() {
            return mags.len() - 1;
        }
        if hi == 0 || mags[hi] == y {
            return hi;
        }
        let lo = hi - 1;
        let d_lo = y - mags[lo];
        let d_hi = mags[hi] - y;
        if d_lo < d_hi || (d_lo == d_hi && lo % 2 == 0) {
            lo
        } else {
            hi
        }
    }

    pub fn magnitude(&self, index: usize) -> f64 {
        self.mags[index]
    }

    /// Value on the unscaled grid nearest to `y`.
    #[inline]
    pub fn round(&self, y: f64) -> f64 {
        let m = self.mags[self.magnitude_index(y.abs())];
        if y.is_sign_negative() {
            -m
        } else {
            m
        }
    }

    /// `s * nearest(x / s)`.
    #[inline]
    pub fn quantize(&self, x: f64, s: ScaleFactor) -> f64 {
        s.0 * self.round(x / s.0)
    }
}

/// `s · nearest-codeword(x / s)` with saturation and ties to even.
pub fn quantize_rtn(x: f64, fmt: NumberFormat, s: ScaleFactor) -> f64 {
    ScalarGrid::new(fmt)
        .expect("quantize_rtn needs a scalar format")
        .quantize(x, s)
}

/// Nearest power of two in the log domain, halves rounding up.
pub fn quantize_e8m0(s: f64) -> Result<f64> {
    Ok(2f64.powi(e8m0_exponent(s)?))
}

/// Exponent chosen by [`quantize_e8m0`], clamped to `[-127, 127]`.
pub fn e8m0_exponent(s: f64) -> Result<i32> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidConfig(format!("e8m0 scale {s} must be positive and finite")));
    }
    Ok((s.log2() + 0.5).floor().clamp(-127.0, 127.0) as i32)
}

/// Byte encoding of an E8M0 exponent (bias 127).
pub fn e8m0_to_bits(exponent: i32) -> u8 {
    (exponent.clamp(-127, 127) + 127) as u8
}

/// E4M3 byte layout: sign in bit 7, exponent in bits 6..3, mantissa in 2..0.
pub mod e4m3 {
    use super::FpFormat;

    pub const NAN_MAGNITUDE_CODE: u8 = 0x7F;
    /// Smallest positive subnormal, 2^-9.
    pub const MIN_POSITIVE: f64 = 1.0 / 512.0;
    pub const MAX: f64 = 448.0;

    /// Round-to-nearest-even onto E4M3 with saturation, returned as a byte.
    pub fn encode(x: f64) -> u8 {
        thread_local! {
            static GRID: super::ScalarGrid =
                super::ScalarGrid::new(super::NumberFormat::Fp(FpFormat::E4M3)).unwrap();
        }
        let code = GRID.with(|g| g.magnitude_index(x.abs())) as u8;
        if x.is_sign_negative() && code != 0 {
            0x80 | code
        } else {
            code
        }
    }

    /// `None` for the NaN codes.
    pub fn decode(bits: u8) -> Option<f64> {
        let code = bits & 0x7F;
        if code == NAN_MAGNITUDE_CODE {
            return None;
        }
        let m = FpFormat::E4M3.decode_magnitude(code as u32);
        Some(if bits & 0x80 != 0 { -m } else { m })
    }
}
