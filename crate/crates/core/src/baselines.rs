//! Scaled block formats used as comparison points.
//!
//! A baseline splits the flattened tensor into groups of `g` scalars, gives
//! each group the scale `max|group| / max_level(format)`, stores that scale
//! in a small format of its own and rounds every scalar to the nearest
//! level. Named presets:
//!
//! | name        | scalars | group | scale                         |
//! |-------------|---------|-------|-------------------------------|
//! | `vsq-g16`   | INT4    | 16    | u8 multiple of a tensor scale |
//! | `mx4-g16`   | E1M2    | 16    | E8M0                          |
//! | `mxfp4-g32` | E2M1    | 32    | E8M0                          |
//!
//! Any other combination is written `fmt:<format>,g<N>,scale:<kind>` with
//! kind one of `e8m0`, `int8`, `e4m3` or `fp32`.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::BitwidthReport;
use crate::error::{Error, Result};
use crate::formats::{e4m3, quantize_e8m0, NumberFormat, ScalarGrid, ScaleFactor};
use crate::sum::NeumaierSum;
use crate::tensor::TensorView;

/// How a group scale is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKind {
    /// Power of two, 8 bits.
    E8m0,
    /// Unsigned 8-bit multiple of a per-tensor step, clamped to `[1, 255]`.
    Int8,
    /// E4M3 ratio to a per-tensor scale that maps the largest group scale
    /// to 448.
    E4m3,
    /// Unquantized, 32 bits.
    Fp32,
}

impl ScaleKind {
    pub fn bits(self) -> u32 {
        match self {
            ScaleKind::Fp32 => 32,
            _ => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ScaleKind::E8m0 => "e8m0",
            ScaleKind::Int8 => "int8",
            ScaleKind::E4m3 => "e4m3",
            ScaleKind::Fp32 => "fp32",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BaselineSpec {
    pub name: String,
    pub scalar_format: NumberFormat,
    pub group_len: usize,
    pub scale: ScaleKind,
}

impl BaselineSpec {
    pub fn new(scalar_format: NumberFormat, group_len: usize, scale: ScaleKind) -> Result<Self> {
        if group_len == 0 {
            return Err(Error::ZeroLength { name: "group length" });
        }
        if scalar_format == NumberFormat::E8M0 {
            return Err(Error::InvalidConfig("e8m0 cannot hold scalars".into()));
        }
        let name = format!("fmt:{scalar_format},g{group_len},scale:{}", scale.name());
        Ok(Self {
            name,
            scalar_format,
            group_len,
            scale,
        })
    }

    pub fn vsq_g16() -> Self {
        Self::preset("vsq-g16", NumberFormat::INT4, 16, ScaleKind::Int8)
    }

    pub fn mx4_g16() -> Self {
        Self::preset("mx4-g16", NumberFormat::E1M2, 16, ScaleKind::E8m0)
    }

    pub fn mxfp4_g32() -> Self {
        Self::preset("mxfp4-g32", NumberFormat::E2M1, 32, ScaleKind::E8m0)
    }

    /// The presets in table order.
    pub fn presets() -> Vec<Self> {
        vec![Self::vsq_g16(), Self::mx4_g16(), Self::mxfp4_g32()]
    }

    fn preset(name: &str, scalar_format: NumberFormat, group_len: usize, scale: ScaleKind) -> Self {
        Self {
            name: name.into(),
            scalar_format,
            group_len,
            scale,
        }
    }

    /// Scalar bits plus amortized scale bits.
    pub fn bits_per_scalar(&self) -> Ratio<u64> {
        Ratio::from_integer(self.scalar_format.bits() as u64)
            + Ratio::new(self.scale.bits() as u64, self.group_len as u64)
    }
}

impl fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for BaselineSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "vsq-g16" | "vsq" => return Ok(Self::vsq_g16()),
            "mx4-g16" | "mx4" => return Ok(Self::mx4_g16()),
            "mxfp4-g32" | "mxfp4" => return Ok(Self::mxfp4_g32()),
            _ => {}
        }
        let bad = || Error::UnknownFormat(s.to_string());
        let rest = lower.strip_prefix("fmt:").ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
        let [fmt, group, scale] = parts.as_slice() else {
            return Err(bad());
        };
        let scalar_format: NumberFormat = fmt.parse()?;
        let group_len: usize = group
            .strip_prefix('g')
            .and_then(|g| g.parse().ok())
            .ok_or_else(bad)?;
        let scale = match scale.strip_prefix("scale:").ok_or_else(bad)? {
            "e8m0" => ScaleKind::E8m0,
            "int8" => ScaleKind::Int8,
            "e4m3" => ScaleKind::E4m3,
            "fp32" => ScaleKind::Fp32,
            _ => return Err(bad()),
        };
        Self::new(scalar_format, group_len, scale)
    }
}

impl TryFrom<String> for BaselineSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaselineSpec> for String {
    fn from(b: BaselineSpec) -> String {
        b.name
    }
}

/// Stored scale of every group, given the raw `max/max_level` scales.
fn stored_scales(raw: &[f64], kind: ScaleKind) -> Vec<f64> {
    let top = raw.iter().fold(0.0f64, |m, &s| m.max(s));
    raw.iter()
        .map(|&s| {
            if s == 0.0 {
                return 0.0;
            }
            match kind {
                ScaleKind::Fp32 => s as f32 as f64,
                ScaleKind::E8m0 => quantize_e8m0(s).expect("positive finite scale"),
                ScaleKind::Int8 => {
                    let q = (s / top * 255.0).round_ties_even().clamp(1.0, 255.0);
                    q / 255.0 * top
                }
                ScaleKind::E4m3 => {
                    let unit = top / e4m3::MAX;
                    let b = e4m3::encode(s / unit).max(e4m3::encode(e4m3::MIN_POSITIVE));
                    e4m3::decode(b).expect("finite code") * unit
                }
            }
        })
        .collect()
}

/// Fake-quantize `t` with a baseline format.
pub fn quantize_baseline(t: &TensorView, spec: &BaselineSpec) -> Result<(TensorView, BitwidthReport)> {
    let grid = ScalarGrid::new(spec.scalar_format)?;
    if spec.group_len == 0 {
        return Err(Error::ZeroLength { name: "group length" });
    }
    let g = spec.group_len;
    let data = t.data();
    let max_level = grid.max_level();
    let raw: Vec<f64> = data
        .chunks(g)
        .map(|c| c.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs())) / max_level)
        .collect();
    let scales = stored_scales(&raw, spec.scale);
    let out: Vec<f32> = data
        .par_chunks(g)
        .zip(scales.par_iter())
        .flat_map_iter(|(chunk, &s)| {
            let grid = &grid;
            chunk.iter().map(move |&x| {
                if s == 0.0 {
                    0.0
                } else {
                    grid.quantize(x as f64, ScaleFactor::new(s).expect("positive scale")) as f32
                }
            })
        })
        .collect();
    let bits = spec.bits_per_scalar();
    let n = data.len() as u64;
    let report = BitwidthReport {
        index_and_selector_bits: Ratio::from_integer(spec.scalar_format.bits() as u64),
        effective_bits_per_scalar: bits,
        codebook_overhead_bits: Ratio::from_integer(0),
        measured_stream_bits: Some(n * spec.scalar_format.bits() as u64 + n.div_ceil(g as u64) * spec.scale.bits() as u64),
    };
    Ok((TensorView::new(out, t.shape().to_vec(), t.name())?, report))
}

/// `Σ(x - x̂)² / Σx²`.
pub fn nmse(x: &TensorView, x_hat: &TensorView) -> Result<f64> {
    nmse_slices(x.data(), x_hat.data())
}

pub fn nmse_slices(x: &[f32], x_hat: &[f32]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::LengthMismatch(x.len(), x_hat.len()));
    }
    let mut err = NeumaierSum::new();
    let mut energy = NeumaierSum::new();
    for (&a, &b) in x.iter().zip(x_hat) {
        let (a, b) = (a as f64, b as f64);
        err.add((a - b) * (a - b));
        energy.add(a * a);
    }
    if energy.value() == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(err.value() / energy.value())
}
