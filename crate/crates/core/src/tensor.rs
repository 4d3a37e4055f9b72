//! Tensor container, synthetic data and block decomposition.
//!
//! The `BCQT` container is little-endian throughout:
//!
//! | field   | type        |
//! |---------|-------------|
//! | magic   | `b"BCQT"`   |
//! | version | u32 (= 1)   |
//! | dtype   | u8 (0 = f32)|
//! | ndim    | u8          |
//! | dims    | u64 × ndim  |
//! | payload | f32 × ∏dims |

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

pub const TENSOR_MAGIC: [u8; 4] = *b"BCQT";
pub const TENSOR_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A flat array of finite scalars with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorView {
    data: Vec<f32>,
    shape: Vec<usize>,
    name: String,
}

impl TensorView {
    pub fn new(data: Vec<f32>, shape: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if shape.is_empty() || expected == 0 || data.is_empty() {
            return Err(Error::EmptyTensor);
        }
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        Ok(Self {
            data,
            shape,
            name: name.into(),
        })
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f32>, name: impl Into<String>) -> Result<Self> {
        let n = data.len();
        Self::new(data, vec![n], name)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        write_shape(&mut out, &self.shape);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: impl Into<String>) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "tensor header");
        let magic = r.array::<4>()?;
        if magic != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                expected: TENSOR_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != TENSOR_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "tensor",
                version,
            });
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let shape = read_shape(&mut r)?;
        let count = shape.iter().product::<usize>();
        if shape.is_empty() || count == 0 {
            return Err(Error::EmptyTensor);
        }
        r.what = "tensor payload";
        let payload = r.rest();
        let needed = count
            .checked_mul(4)
            .ok_or_else(|| Error::InvalidConfig("tensor too large".into()))?;
        if payload.len() < needed {
            return Err(Error::Truncated {
                what: "tensor payload",
                needed,
                found: payload.len(),
            });
        }
        if payload.len() > needed {
            return Err(Error::ShapeMismatch {
                shape,
                expected: count,
                actual: payload.len() / 4,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(data, shape, name)
    }
}

/// Read a `BCQT` file. The tensor name is the file stem.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorView> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TensorView::from_bytes(&bytes, name)
}

pub fn save_tensor(t: &TensorView, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, t.to_bytes())?;
    Ok(())
}

pub(crate) fn write_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub(crate) fn read_shape(r: &mut ByteReader<'_>) -> Result<Vec<usize>> {
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = r.u64()?;
        let d = usize::try_from(d).map_err(|_| Error::InvalidConfig(format!("dimension {d} too large")))?;
        shape.push(d);
    }
    if shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .is_none()
    {
        return Err(Error::InvalidConfig("shape overflows".into()));
    }
    Ok(shape)
}

/// Little-endian cursor that reports truncation with a section label.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    pub(crate) what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                what: self.what,
                needed: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}

/// Distribution for synthetic tensors.
///
/// Text form: `gaussian(mu,sigma)`, `laplace(mu,b)`, `uniform(a,b)`,
/// `outliers(sigma,outlier_frac,outlier_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistSpec {
    Gaussian { mu: f64, sigma: f64 },
    Laplace { mu: f64, b: f64 },
    Uniform { a: f64, b: f64 },
    /// Zero-mean gaussian whose samples are multiplied by `outlier_scale`
    /// with probability `outlier_frac`.
    GaussianOutliers {
        sigma: f64,
        outlier_frac: f64,
        outlier_scale: f64,
    },
}

impl DistSpec {
    pub const STANDARD_GAUSSIAN: DistSpec = DistSpec::Gaussian { mu: 0.0, sigma: 1.0 };

    /// Unit gaussian with 1% of samples scaled up tenfold; what a bare
    /// `outliers` parses to.
    pub const DEFAULT_OUTLIERS: DistSpec = DistSpec::GaussianOutliers {
        sigma: 1.0,
        outlier_frac: 0.01,
        outlier_scale: 10.0,
    };

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDistribution(msg));
        let params: &[f64] = match self {
            DistSpec::Gaussian { mu, sigma } => &[*mu, *sigma],
            DistSpec::Laplace { mu, b } => &[*mu, *b],
            DistSpec::Uniform { a, b } => &[*a, *b],
            DistSpec::GaussianOutliers {
                sigma,
                outlier_frac,
                outlier_scale,
            } => &[*sigma, *outlier_frac, *outlier_scale],
        };
        if params.iter().any(|p| !p.is_finite()) {
            return bad(format!("{self}: parameters must be finite"));
        }
        match *self {
            DistSpec::Gaussian { sigma, .. } if sigma <= 0.0 => bad("sigma must be positive".into()),
            DistSpec::Laplace { b, .. } if b <= 0.0 => bad("laplace scale must be positive".into()),
            DistSpec::Uniform { a, b } if a >= b => bad("uniform needs a < b".into()),
            DistSpec::GaussianOutliers {
                sigma,
                outlier_frac,
                outlier_scale,
            } => {
                if sigma <= 0.0 {
                    bad("sigma must be positive".into())
                } else if !(0.0..=1.0).contains(&outlier_frac) {
                    bad("outlier_frac must lie in [0, 1]".into())
                } else if outlier_scale <= 0.0 {
                    bad("outlier_scale must be positive".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DistSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistSpec::Gaussian { mu, sigma } => write!(f, "gaussian({mu},{sigma})"),
            DistSpec::Laplace { mu, b } => write!(f, "laplace({mu},{b})"),
            DistSpec::Uniform { a, b } => write!(f, "uniform({a},{b})"),
            DistSpec::GaussianOutliers {
                sigma,
                outlier_frac,
                outlier_scale,
            } => write!(f, "outliers({sigma},{outlier_frac},{outlier_scale})"),
        }
    }
}

impl FromStr for DistSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidDistribution(format!("cannot parse {s:?}"));
        let s = s.trim();
        let Some(open) = s.find('(') else {
            return match s.to_ascii_lowercase().as_str() {
                "gaussian" | "normal" => Ok(DistSpec::STANDARD_GAUSSIAN),
                "laplace" => Ok(DistSpec::Laplace { mu: 0.0, b: 1.0 }),
                "uniform" => Ok(DistSpec::Uniform { a: -1.0, b: 1.0 }),
                "outliers" | "gaussian-outliers" => Ok(DistSpec::DEFAULT_OUTLIERS),
                _ => Err(bad()),
            };
        };
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args: Vec<f64> = inner
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let name = s[..open].trim().to_ascii_lowercase();
        let spec = match (name.as_str(), args.as_slice()) {
            ("gaussian" | "normal", &[mu, sigma]) => DistSpec::Gaussian { mu, sigma },
            ("laplace", &[mu, b]) => DistSpec::Laplace { mu, b },
            ("uniform", &[a, b]) => DistSpec::Uniform { a, b },
            ("outliers" | "gaussian-outliers", &[sigma, outlier_frac, outlier_scale]) => {
                DistSpec::GaussianOutliers {
                    sigma,
                    outlier_frac,
                    outlier_scale,
                }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for DistSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DistSpec> for String {
    fn from(d: DistSpec) -> String {
        d.to_string()
    }
}

/// Deterministic synthetic tensor of shape `[n]`.
///
/// Samples come from stream [`Stream::Samples`]; outlier decisions from
/// [`Stream::Outliers`], one uniform per scalar, so a zero outlier fraction
/// reproduces the plain gaussian exactly.
pub fn synth_tensor(dist: DistSpec, n: usize, seed: u64) -> Result<TensorView> {
    dist.validate()?;
    if n == 0 {
        return Err(Error::EmptyTensor);
    }
    let mut rng = Rng::new(seed, Stream::Samples);
    let normals = |rng: &mut Rng| -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = rng.normal_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(n);
        out
    };
    let data: Vec<f32> = match dist {
        DistSpec::Gaussian { mu, sigma } => normals(&mut rng)
            .into_iter()
            .map(|z| (mu + sigma * z) as f32)
            .collect(),
        DistSpec::Laplace { mu, b } => (0..n).map(|_| (mu + b * rng.laplace()) as f32).collect(),
        DistSpec::Uniform { a, b } => (0..n).map(|_| (a + (b - a) * rng.uniform()) as f32).collect(),
        DistSpec::GaussianOutliers {
            sigma,
            outlier_frac,
            outlier_scale,
        } => {
            let mut flags = Rng::new(seed, Stream::Outliers);
            normals(&mut rng)
                .into_iter()
                .map(|z| {
                    let x = sigma * z;
                    if flags.uniform() < outlier_frac {
                        (x * outlier_scale) as f32
                    } else {
                        x as f32
                    }
                })
                .collect()
        }
    };
    TensorView::from_vec(data, dist.to_string())
}

/// A tensor split into block arrays of `array_len` scalars, each made of
/// blocks of `block_len` scalars, taken along the flattened last axis.
///
/// The tensor is zero-padded to a multiple of `array_len`; `pad` records how
/// many trailing scalars are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDecomposition {
    pub block_len: usize,
    pub array_len: usize,
    pub num_blocks: usize,
    pub num_arrays: usize,
    pub pad: usize,
    /// Length before padding.
    pub original_len: usize,
    data: Vec<f64>,
}

impl BlockDecomposition {
    pub fn from_slice(values: &[f64], block_len: usize, array_len: usize) -> Result<Self> {
        check_geometry(block_len, array_len)?;
        if values.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let original_len = values.len();
        let padded = original_len.div_ceil(array_len) * array_len;
        let mut data = Vec::with_capacity(padded);
        data.extend_from_slice(values);
        data.resize(padded, 0.0);
        Ok(Self {
            block_len,
            array_len,
            num_blocks: padded / block_len,
            num_arrays: padded / array_len,
            pad: padded - original_len,
            original_len,
            data,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn blocks_per_array(&self) -> usize {
        self.array_len / self.block_len
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.block_len..(i + 1) * self.block_len]
    }

    pub fn array(&self, j: usize) -> &[f64] {
        &self.data[j * self.array_len..(j + 1) * self.array_len]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.block_len)
    }

    pub fn arrays(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.array_len)
    }

    /// Number of leading blocks that contain no padding.
    pub fn complete_blocks(&self) -> usize {
        self.original_len / self.block_len
    }

    /// Scalars with padding stripped.
    pub fn unpadded(&self) -> &[f64] {
        &self.data[..self.original_len]
    }
}

pub(crate) fn check_geometry(block_len: usize, array_len: usize) -> Result<()> {
    if block_len == 0 {
        return Err(Error::ZeroLength { name: "block length" });
    }
    if array_len == 0 {
        return Err(Error::ZeroLength { name: "array length" });
    }
    if !array_len.is_multiple_of(block_len) {
        return Err(Error::NotMultiple {
            block_len,
            array_len,
        });
    }
    Ok(())
}

pub fn decompose(t: &TensorView, block_len: usize, array_len: usize) -> Result<BlockDecomposition> {
    let values: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
    BlockDecomposition::from_slice(&values, block_len, array_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_simple_file() {
        let t = TensorView::new(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], "t").unwrap();
        let back = TensorView::from_bytes(&t.to_bytes(), "t").unwrap();
        assert_eq!(back.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(back.shape(), &[2, 2]);
    }

    #[test]
    fn rejects_nan_payload() {
        let mut bytes = TensorView::from_vec(vec![1.0, 2.0], "t").unwrap().to_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            TensorView::from_bytes(&bytes, "t"),
            Err(Error::NonFiniteInput { index: 1 })
        ));
    }

    #[test]
    fn rejects_empty_shape() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"BCQT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(0);
        bytes.push(0);
        assert!(matches!(TensorView::from_bytes(&bytes, "t"), Err(Error::EmptyTensor)));
        assert!(matches!(TensorView::new(vec![], vec![0], "t"), Err(Error::EmptyTensor)));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = TensorView::from_vec(vec![1.0, 2.0], "t").unwrap().to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(TensorView::from_bytes(&wrong, "t"), Err(Error::BadMagic { .. })));
        assert!(matches!(
            TensorView::from_bytes(&bytes[..bytes.len() - 1], "t"),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(TensorView::from_bytes(&bytes[..6], "t"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            TensorView::new(vec![1.0; 4], vec![3], "t"),
            Err(Error::ShapeMismatch { expected: 3, actual: 4, .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bcqt");
        let t = TensorView::from_vec(vec![1.5, -2.25], "x").unwrap();
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back, t);
        let bits: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, vec![1.5f32.to_bits(), (-2.25f32).to_bits()]);
    }

    #[test]
    fn synth_is_deterministic() {
        let d = DistSpec::Gaussian { mu: 0.0, sigma: 1.0 };
        assert_eq!(synth_tensor(d, 8, 7).unwrap(), synth_tensor(d, 8, 7).unwrap());
        assert_ne!(synth_tensor(d, 8, 7).unwrap(), synth_tensor(d, 8, 8).unwrap());
    }

    #[test]
    fn uniform_mean() {
        let t = synth_tensor(DistSpec::Uniform { a: 0.0, b: 1.0 }, 100_000, 11).unwrap();
        let mean = crate::sum::sum(t.data().iter().map(|&x| x as f64)) / t.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!(t.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn zero_outlier_fraction_is_plain_gaussian() {
        let plain = synth_tensor(DistSpec::Gaussian { mu: 0.0, sigma: 2.0 }, 1001, 5).unwrap();
        let outl = synth_tensor(
            DistSpec::GaussianOutliers {
                sigma: 2.0,
                outlier_frac: 0.0,
                outlier_scale: 10.0,
            },
            1001,
            5,
        )
        .unwrap();
        assert_eq!(plain.data(), outl.data());
    }

    #[test]
    fn dist_parse_and_validation() {
        let d: DistSpec = "outliers(1, 0.01, 10)".parse().unwrap();
        assert_eq!(d.to_string().parse::<DistSpec>().unwrap(), d);
        assert!("gaussian(0,-1)".parse::<DistSpec>().is_err());
        assert!("uniform(1,1)".parse::<DistSpec>().is_err());
        assert!("outliers(1,2,10)".parse::<DistSpec>().is_err());
        assert!("cauchy(0,1)".parse::<DistSpec>().is_err());
        assert!(synth_tensor(DistSpec::Laplace { mu: 0.0, b: 0.0 }, 4, 1).is_err());
    }

    #[test]
    fn decompose_arithmetic() {
        let t = TensorView::from_vec(vec![1.0; 128], "t").unwrap();
        let d = decompose(&t, 8, 64).unwrap();
        assert_eq!((d.num_blocks, d.num_arrays, d.pad), (16, 2, 0));

        let t = TensorView::from_vec((0..100).map(|i| i as f32).collect(), "t").unwrap();
        let d = decompose(&t, 8, 64).unwrap();
        assert_eq!((d.padded_len(), d.pad, d.num_blocks), (128, 28, 16));
        assert_eq!(d.complete_blocks(), 12);
        let joined: Vec<f64> = d.blocks().flatten().copied().collect();
        assert_eq!(&joined[..100], d.unpadded());
        assert!(joined[100..].iter().all(|&x| x == 0.0));

        assert!(matches!(decompose(&t, 8, 12), Err(Error::NotMultiple { .. })));
        assert!(matches!(decompose(&t, 0, 12), Err(Error::ZeroLength { .. })));
        assert!(matches!(decompose(&t, 4, 0), Err(Error::ZeroLength { .. })));
    }
}
