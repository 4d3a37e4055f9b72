//! The `BCQC` stream: encoder, decoder and bitwidth accounting.
//!
//! Layout (little-endian):
//!
//! | field          | type                 |
//! |----------------|----------------------|
//! | magic          | `b"BCQC"`            |
//! | version        | u16 (= 1)            |
//! | `L_b`, `L_A`   | u16, u16             |
//! | `N_c`, `B`     | u8, u8               |
//! | `B_s`, `B_c`   | u8, u8               |
//! | shape          | ndim u8, dims u64 ×n |
//! | pad            | u32                  |
//! | family hash    | u64                  |
//! | `s_X`          | f32                  |
//! | payload        | packed bits          |
//!
//! The payload is one LSB-first bit string holding, in order, an E4M3 scale
//! byte per block array, a `log2(N_c)`-bit selector per block and a `B`-bit
//! index per scalar, zero-padded to a whole byte.
//!
//! A scalar decodes to `codeword / (ŝ_A · s_X)`, evaluated in f64 and rounded
//! once to f32. Scale byte 0 marks an all-zero array, which decodes to exact
//! zeros.

use std::fs;
use std::path::Path;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::bitio::{BitReader, BitWriter};
use crate::calib::{array_scale, CodebookFamily, QuantConfig};
use crate::error::{Error, Result};
use crate::formats::e4m3;
use crate::tensor::{check_geometry, read_shape, write_shape, BlockDecomposition, ByteReader, TensorView};

pub const STREAM_MAGIC: [u8; 4] = *b"BCQC";
pub const STREAM_VERSION: u16 = 1;

/// Per-tensor and per-array scales of an encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    pub tensor_scale: f32,
    /// One E4M3 byte per block array.
    pub array_scales: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTensor {
    pub block_len: usize,
    pub array_len: usize,
    pub num_codebooks: usize,
    pub bits: u32,
    pub scale_bits: u32,
    pub codeword_bits: u32,
    pub shape: Vec<usize>,
    /// Zero scalars appended to reach a whole number of arrays.
    pub pad: usize,
    pub family_hash: u64,
    pub scales: ScaleSet,
    /// One per block.
    pub selectors: Vec<u8>,
    /// One per scalar, padding included.
    pub indices: Vec<u8>,
}

impl EncodedTensor {
    pub fn config(&self) -> QuantConfig {
        QuantConfig {
            block_len: self.block_len,
            array_len: self.array_len,
            num_codebooks: self.num_codebooks,
            bits: self.bits,
            scale_bits: self.scale_bits,
            codeword_bits: self.codeword_bits,
            ..QuantConfig::default()
        }
    }

    pub fn original_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn padded_len(&self) -> usize {
        self.original_len() + self.pad
    }

    /// Bits of the packed payload before byte padding.
    pub fn payload_bits(&self) -> u64 {
        payload_bits(&self.config(), self.padded_len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.block_len as u16).to_le_bytes());
        out.extend_from_slice(&(self.array_len as u16).to_le_bytes());
        out.push(self.num_codebooks as u8);
        out.push(self.bits as u8);
        out.push(self.scale_bits as u8);
        out.push(self.codeword_bits as u8);
        write_shape(&mut out, &self.shape);
        out.extend_from_slice(&(self.pad as u32).to_le_bytes());
        out.extend_from_slice(&self.family_hash.to_le_bytes());
        out.extend_from_slice(&self.scales.tensor_scale.to_le_bytes());

        let mut w = BitWriter::new();
        for &s in &self.scales.array_scales {
            w.write(s as u64, self.scale_bits);
        }
        let sel_bits = self.num_codebooks.trailing_zeros();
        for &s in &self.selectors {
            w.write(s as u64, sel_bits);
        }
        for &i in &self.indices {
            w.write(i as u64, self.bits);
        }
        debug_assert_eq!(w.bit_len(), self.payload_bits());
        out.extend_from_slice(&w.finish());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "stream header");
        let magic = r.array::<4>()?;
        if magic != STREAM_MAGIC {
            return Err(Error::BadMagic {
                expected: STREAM_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != STREAM_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "stream",
                version: version as u32,
            });
        }
        let block_len = r.u16()? as usize;
        let array_len = r.u16()? as usize;
        let num_codebooks = r.u8()? as usize;
        let bits = r.u8()? as u32;
        let scale_bits = r.u8()? as u32;
        let codeword_bits = r.u8()? as u32;
        let shape = read_shape(&mut r)?;
        let pad = r.u32()? as usize;
        let family_hash = r.u64()?;
        let tensor_scale = r.f32()?;

        let corrupt = |m: String| Error::CorruptStream(m);
        let cfg = QuantConfig {
            block_len,
            array_len,
            num_codebooks,
            bits,
            scale_bits,
            codeword_bits,
            ..QuantConfig::default()
        };
        cfg.validate().map_err(|e| corrupt(format!("bad header: {e}")))?;
        let len: usize = shape.iter().product();
        if len == 0 {
            return Err(corrupt("empty shape".into()));
        }
        if pad >= array_len || !(len + pad).is_multiple_of(array_len) {
            return Err(corrupt(format!("pad {pad} does not complete an array of {array_len}")));
        }
        if !(tensor_scale.is_finite() && tensor_scale > 0.0) {
            return Err(corrupt(format!("tensor scale {tensor_scale} is not positive")));
        }

        r.what = "stream payload";
        let padded = len + pad;
        let need_bits = payload_bits(&cfg, padded);
        let need = need_bits.div_ceil(8) as usize;
        let payload = r.take(need)?;
        if !r.rest().is_empty() {
            return Err(corrupt("trailing bytes after payload".into()));
        }
        let mut br = BitReader::new(payload);
        let mut read = |n: u32| br.read(n).expect("payload length checked");
        let num_arrays = padded / array_len;
        let array_scales: Vec<u8> = (0..num_arrays).map(|_| read(scale_bits) as u8).collect();
        for (j, &s) in array_scales.iter().enumerate() {
            if s & 0x80 != 0 || e4m3::decode(s).is_none() {
                return Err(corrupt(format!("array {j} has invalid scale byte {s:#04x}")));
            }
        }
        let sel_bits = cfg.selector_bits();
        let selectors: Vec<u8> = (0..padded / block_len).map(|_| read(sel_bits) as u8).collect();
        let indices: Vec<u8> = (0..padded).map(|_| read(bits) as u8).collect();
        if br.read((need as u64 * 8 - need_bits) as u32) != Some(0) {
            return Err(corrupt("nonzero padding bits".into()));
        }
        Ok(Self {
            block_len,
            array_len,
            num_codebooks,
            bits,
            scale_bits,
            codeword_bits,
            shape,
            pad,
            family_hash,
            scales: ScaleSet {
                tensor_scale,
                array_scales,
            },
            selectors,
            indices,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Payload bits for `padded_len` scalars: indices, selectors and scales.
pub fn payload_bits(cfg: &QuantConfig, padded_len: usize) -> u64 {
    let n = padded_len as u64;
    n * cfg.bits as u64
        + (n / cfg.block_len as u64) * cfg.selector_bits() as u64
        + (n / cfg.array_len as u64) * cfg.scale_bits as u64
}

/// `s_A` of every array, `None` for all-zero arrays.
fn raw_scales(blocks: &BlockDecomposition, codeword_max: f64) -> Vec<Option<f64>> {
    blocks
        .arrays()
        .map(|a| a.iter().any(|&x| x != 0.0).then(|| array_scale(a, codeword_max)))
        .collect()
}

fn tensor_scale_from(raw: &[Option<f64>]) -> f32 {
    let max = raw.iter().flatten().fold(0.0f64, |m, &s| m.max(s));
    let s = if max > 0.0 { max / e4m3::MAX } else { 1.0 / e4m3::MAX };
    (s as f32).clamp(f32::MIN_POSITIVE, f32::MAX)
}

/// Per-tensor scale `s_X`: the largest array scale over 448, so every
/// ratio `s_A / s_X` fits E4M3. All-zero tensors get `1/448`.
pub fn tensor_scale(t: &TensorView, cfg: &QuantConfig) -> Result<f32> {
    cfg.validate()?;
    let blocks = crate::tensor::decompose(t, cfg.block_len, cfg.array_len)?;
    Ok(tensor_scale_from(&raw_scales(&blocks, cfg.codeword_max())))
}

/// E4M3 byte for the ratio `s_A / s_X`. Nonzero arrays never round to a
/// zero scale; they are clamped to the smallest subnormal instead.
fn scale_byte(raw: Option<f64>, s_x: f32) -> u8 {
    match raw {
        None => 0,
        Some(s) => {
            let b = e4m3::encode(s / s_x as f64);
            if b == 0 {
                e4m3::encode(e4m3::MIN_POSITIVE)
            } else {
                b
            }
        }
    }
}

/// Effective scale `ŝ_A · s_X` of a scale byte.
fn effective_scale(byte: u8, s_x: f32) -> f64 {
    e4m3::decode(byte).expect("scale bytes are validated") * s_x as f64
}

fn check_family(family: &CodebookFamily, cfg: &QuantConfig) -> Result<()> {
    cfg.validate()?;
    let mismatch = |what: &str, f: usize, c: usize| {
        Err(Error::FamilyMismatch(format!("{what}: family has {f}, configuration has {c}")))
    };
    if family.bits() != cfg.bits {
        return mismatch("B", family.bits() as usize, cfg.bits as usize);
    }
    if family.block_len() != cfg.block_len {
        return mismatch("Lb", family.block_len(), cfg.block_len);
    }
    if family.num_codebooks() != cfg.num_codebooks {
        return mismatch("Nc", family.num_codebooks(), cfg.num_codebooks);
    }
    if family.codeword_bits() != cfg.codeword_bits {
        return mismatch("Bc", family.codeword_bits() as usize, cfg.codeword_bits as usize);
    }
    Ok(())
}

/// Selectors and indices for every block given fixed scales.
fn quantize_blocks(blocks: &BlockDecomposition, family: &CodebookFamily, scales: &ScaleSet) -> (Vec<u8>, Vec<u8>) {
    let la = blocks.array_len;
    let lb = blocks.block_len;
    let per_array: Vec<(Vec<u8>, Vec<u8>)> = blocks
        .data()
        .par_chunks_exact(la)
        .zip(scales.array_scales.par_iter())
        .enumerate()
        .map(|(a, (array, &byte))| {
            let eff = if byte == 0 {
                0.0
            } else {
                effective_scale(byte, scales.tensor_scale)
            };
            let mut sel = Vec::with_capacity(la / lb);
            let mut idx = Vec::with_capacity(la);
            let mut norm = vec![0.0; lb];
            for (b, block) in array.chunks_exact(lb).enumerate() {
                for (n, &x) in norm.iter_mut().zip(block) {
                    *n = x * eff;
                }
                // Padding never votes on the selector.
                let real = blocks.original_len.saturating_sub(a * la + b * lb).min(lb);
                let (s, _) = family.map_block(&norm[..real]);
                let book = family.book(s);
                sel.push(s as u8);
                idx.extend(norm.iter().map(|&x| book.nearest(x) as u8));
            }
            (sel, idx)
        })
        .collect();
    let mut selectors = Vec::with_capacity(blocks.num_blocks);
    let mut indices = Vec::with_capacity(blocks.padded_len());
    for (s, i) in per_array {
        selectors.extend(s);
        indices.extend(i);
    }
    (selectors, indices)
}

fn compute_scales(blocks: &BlockDecomposition, cfg: &QuantConfig) -> ScaleSet {
    let raw = raw_scales(blocks, cfg.codeword_max());
    let tensor_scale = tensor_scale_from(&raw);
    ScaleSet {
        tensor_scale,
        array_scales: raw.iter().map(|&r| scale_byte(r, tensor_scale)).collect(),
    }
}

fn check_scales(scales: &ScaleSet, num_arrays: usize) -> Result<()> {
    if scales.array_scales.len() != num_arrays {
        return Err(Error::LengthMismatch(scales.array_scales.len(), num_arrays));
    }
    if !(scales.tensor_scale.is_finite() && scales.tensor_scale > 0.0) {
        return Err(Error::InvalidConfig("tensor scale must be positive".into()));
    }
    if scales
        .array_scales
        .iter()
        .any(|&b| b & 0x80 != 0 || e4m3::decode(b).is_none())
    {
        return Err(Error::InvalidConfig("array scales must be non-negative E4M3 values".into()));
    }
    Ok(())
}

fn encode_inner(t: &TensorView, family: &CodebookFamily, cfg: &QuantConfig, reuse: Option<&ScaleSet>) -> Result<EncodedTensor> {
    check_family(family, cfg)?;
    if !family.is_frozen() {
        return Err(Error::FamilyMismatch("encoding needs a frozen family".into()));
    }
    let blocks = crate::tensor::decompose(t, cfg.block_len, cfg.array_len)?;
    let scales = match reuse {
        Some(s) => {
            check_scales(s, blocks.num_arrays)?;
            s.clone()
        }
        None => compute_scales(&blocks, cfg),
    };
    let (selectors, indices) = quantize_blocks(&blocks, family, &scales);
    Ok(EncodedTensor {
        block_len: cfg.block_len,
        array_len: cfg.array_len,
        num_codebooks: cfg.num_codebooks,
        bits: cfg.bits,
        scale_bits: cfg.scale_bits,
        codeword_bits: cfg.codeword_bits,
        shape: t.shape().to_vec(),
        pad: blocks.pad,
        family_hash: family.hash(),
        scales,
        selectors,
        indices,
    })
}

/// Encode with a frozen family, computing scales from the data.
pub fn encode(t: &TensorView, family: &CodebookFamily, cfg: &QuantConfig) -> Result<EncodedTensor> {
    encode_inner(t, family, cfg, None)
}

/// Encode with scales supplied by the caller, e.g. from an earlier encoding.
pub fn encode_with_scales(
    t: &TensorView,
    family: &CodebookFamily,
    cfg: &QuantConfig,
    scales: &ScaleSet,
) -> Result<EncodedTensor> {
    encode_inner(t, family, cfg, Some(scales))
}

fn reconstruct(
    family: &CodebookFamily,
    block_len: usize,
    array_len: usize,
    scales: &ScaleSet,
    selectors: &[u8],
    indices: &[u8],
    len: usize,
) -> Vec<f32> {
    let bpa = array_len / block_len;
    let mut out: Vec<f32> = indices
        .par_chunks_exact(array_len)
        .zip(selectors.par_chunks_exact(bpa))
        .zip(scales.array_scales.par_iter())
        .flat_map_iter(|((idx, sel), &byte)| {
            let eff = if byte == 0 {
                0.0
            } else {
                effective_scale(byte, scales.tensor_scale)
            };
            idx.chunks_exact(block_len).zip(sel).flat_map(move |(bi, &s)| {
                let book = family.book(s as usize);
                bi.iter().map(move |&i| {
                    if eff == 0.0 {
                        0.0
                    } else {
                        (book.codewords()[i as usize] / eff) as f32
                    }
                })
            })
        })
        .collect();
    out.truncate(len);
    out
}

pub fn decode(e: &EncodedTensor, family: &CodebookFamily) -> Result<TensorView> {
    check_family(family, &e.config())?;
    let hash = family.hash();
    if hash != e.family_hash {
        return Err(Error::FamilyMismatch(format!(
            "stream was encoded with family {:016x}, got {hash:016x}",
            e.family_hash
        )));
    }
    check_geometry(e.block_len, e.array_len)?;
    let n = e.padded_len();
    if e.indices.len() != n || e.selectors.len() != n / e.block_len {
        return Err(Error::CorruptStream("section lengths do not match the header".into()));
    }
    if e.selectors.iter().any(|&s| s as usize >= e.num_codebooks) || e.indices.iter().any(|&i| (i as usize) >> e.bits != 0) {
        return Err(Error::CorruptStream("selector or index out of range".into()));
    }
    check_scales(&e.scales, n / e.array_len).map_err(|err| Error::CorruptStream(err.to_string()))?;
    let data = reconstruct(
        family,
        e.block_len,
        e.array_len,
        &e.scales,
        &e.selectors,
        &e.indices,
        e.original_len(),
    );
    TensorView::new(data, e.shape.clone(), "")
}

/// Quantize and reconstruct in one pass; works for unfrozen families too.
pub fn fake_quantize(t: &TensorView, family: &CodebookFamily, cfg: &QuantConfig) -> Result<Vec<f32>> {
    check_family(family, cfg)?;
    let blocks = crate::tensor::decompose(t, cfg.block_len, cfg.array_len)?;
    let scales = compute_scales(&blocks, cfg);
    let (selectors, indices) = quantize_blocks(&blocks, family, &scales);
    Ok(reconstruct(
        family,
        cfg.block_len,
        cfg.array_len,
        &scales,
        &selectors,
        &indices,
        blocks.original_len,
    ))
}

/// Bits per scalar of a configuration, exact.
#[derive(Debug, Clone, PartialEq)]
pub struct BitwidthReport {
    /// `B + log2(N_c)/L_b`: indices and selectors only.
    pub index_and_selector_bits: Ratio<u64>,
    /// The above plus `B_s/L_A` for the array scales.
    pub effective_bits_per_scalar: Ratio<u64>,
    /// `N_c · 2^B · B_c / L_X`, zero when no tensor length is given.
    pub codebook_overhead_bits: Ratio<u64>,
    /// Payload bits for the padded tensor, when a length is given.
    pub measured_stream_bits: Option<u64>,
}

impl BitwidthReport {
    pub fn total_bits_per_scalar(&self) -> Ratio<u64> {
        self.effective_bits_per_scalar + self.codebook_overhead_bits
    }
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Bitwidth of `cfg`. With a tensor length, the codebook storage is
/// amortized over it and the payload size is reported.
pub fn effective_bitwidth(cfg: &QuantConfig, tensor_len: Option<usize>) -> Result<BitwidthReport> {
    cfg.validate()?;
    let r = |n: u64, d: usize| Ratio::new(n, d as u64);
    let index_and_selector_bits = Ratio::from_integer(cfg.bits as u64) + r(cfg.selector_bits() as u64, cfg.block_len);
    let effective_bits_per_scalar = index_and_selector_bits + r(cfg.scale_bits as u64, cfg.array_len);
    let (codebook_overhead_bits, measured_stream_bits) = match tensor_len {
        Some(0) => return Err(Error::EmptyTensor),
        Some(n) => {
            let padded = n.div_ceil(cfg.array_len) * cfg.array_len;
            let book_bits = (cfg.num_codebooks as u64) << cfg.bits;
            (
                r(book_bits * cfg.codeword_bits as u64, n),
                Some(payload_bits(cfg, padded)),
            )
        }
        None => (Ratio::from_integer(0), None),
    };
    Ok(BitwidthReport {
        index_and_selector_bits,
        effective_bits_per_scalar,
        codebook_overhead_bits,
        measured_stream_bits,
    })
}

/// Storage of quantized weights and activations relative to 16-bit.
pub fn compression_factor(weight_dims: &[usize], act_dims: &[usize], bits_w: f64, bits_a: f64) -> Result<f64> {
    let numel = |dims: &[usize], name| {
        if dims.is_empty() || dims.contains(&0) {
            Err(Error::ZeroLength { name })
        } else {
            Ok(dims.iter().map(|&d| d as f64).product::<f64>())
        }
    };
    let w = numel(weight_dims, "weight dimensions")?;
    let a = numel(act_dims, "activation dimensions")?;
    Ok((a * bits_a + w * bits_w) / ((a + w) * 16.0))
}
