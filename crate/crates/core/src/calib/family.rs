//! Codebooks, codebook families and their JSON form.
//!
//! ```json
//! {"version":1,"B":4,"Bc":6,"Nc":16,"Lb":8,"codebooks":[[-31,-20,...],...]}
//! ```
//!
//! Frozen families store integer codewords; unfrozen families store reals.
//! The family hash is FNV-1a (64-bit) over the compact JSON bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lloyd_max::{midpoints, nearest_index, sq};

pub const FAMILY_VERSION: u32 = 1;

/// `2^B` sorted codewords in the normalized domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codewords: Vec<f64>,
    lookup: Lookup,
}

/// Bins over the codeword span, each holding the index range that can be
/// nearest for any value falling in it. Values outside the span land in the
/// end bins, whose outer edges are unbounded.
#[derive(Debug, Clone, PartialEq)]
struct Lookup {
    origin: f64,
    inv_width: f64,
    ranges: Vec<(u16, u16)>,
}

impl Lookup {
    const BINS_PER_CODEWORD: usize = 8;

    fn new(codewords: &[f64]) -> Self {
        let k = codewords.len();
        let (lo, hi) = (codewords[0], codewords[k - 1]);
        if !(hi > lo) {
            return Self {
                origin: lo,
                inv_width: 0.0,
                ranges: vec![(0, 0)],
            };
        }
        let thresholds = midpoints(codewords);
        let bins = Self::BINS_PER_CODEWORD * k;
        let pad = (hi - lo) / k as f64;
        let origin = lo - pad;
        let width = (hi - lo + 2.0 * pad) / bins as f64;
        // Edges are nudged outwards so rounding in the bin computation can
        // only widen a range.
        let nudge = 1e-9 * width;
        let index_at = |x: f64| nearest_index(codewords, &thresholds, x) as u16;
        let ranges = (0..bins)
            .map(|b| {
                let first = if b == 0 {
                    0
                } else {
                    index_at(origin + b as f64 * width - nudge)
                };
                let last = if b + 1 == bins {
                    (k - 1) as u16
                } else {
                    index_at(origin + (b + 1) as f64 * width + nudge)
                };
                (first, last)
            })
            .collect();
        Self {
            origin,
            inv_width: 1.0 / width,
            ranges,
        }
    }

    #[inline]
    fn range(&self, x: f64) -> (usize, usize) {
        let t = (x - self.origin) * self.inv_width;
        // `as` saturates, and NaN maps to bin 0.
        let bin = (t as usize).min(self.ranges.len() - 1);
        let (a, b) = self.ranges[bin];
        (a as usize, b as usize)
    }
}

impl Codebook {
    pub fn new(mut codewords: Vec<f64>) -> Result<Self> {
        if codewords.len() < 2 {
            return Err(Error::InvalidConfig("a codebook needs at least two codewords".into()));
        }
        if codewords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("codewords must be finite".into()));
        }
        codewords.sort_by(f64::total_cmp);
        Ok(Self::from_sorted(codewords))
    }

    pub(crate) fn from_sorted(codewords: Vec<f64>) -> Self {
        debug_assert!(codewords.windows(2).all(|w| w[0] <= w[1]));
        let lookup = Lookup::new(&codewords);
        Self { codewords, lookup }
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    /// Index of the nearest codeword; ties go to the lowest index.
    #[inline]
    pub fn nearest(&self, x: f64) -> usize {
        let (lo, hi) = self.lookup.range(x);
        let cw = &self.codewords;
        let mut best = lo;
        let mut best_err = sq(x - cw[lo]);
        for (k, &c) in cw.iter().enumerate().take(hi + 1).skip(lo + 1) {
            let e = sq(x - c);
            if e < best_err {
                best = k;
                best_err = e;
            }
        }
        best
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        self.codewords[self.nearest(x)]
    }

    /// Squared reconstruction error of a block, summed in element order.
    #[inline]
    pub fn block_sse(&self, block: &[f64]) -> f64 {
        block.iter().map(|&x| sq(x - self.quantize(x))).sum()
    }

    /// Largest movement of any codeword between two books of equal size.
    pub(crate) fn max_shift(&self, other: &Codebook) -> f64 {
        self.codewords
            .iter()
            .zip(&other.codewords)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Like [`Codebook::block_sse`], but gives up with `None` once the
    /// running error reaches `bound`.
    #[inline]
    pub(crate) fn block_sse_below(&self, block: &[f64], bound: f64) -> Option<f64> {
        let mut acc = 0.0;
        for &x in block {
            acc += sq(x - self.quantize(x));
            if acc >= bound {
                return None;
            }
        }
        (acc < bound).then_some(acc)
    }
}

/// The `N_c` codebooks shared by every block of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookFamily {
    books: Vec<Codebook>,
    bits: u32,
    codeword_bits: u32,
    block_len: usize,
    frozen: bool,
}

impl CodebookFamily {
    pub fn new(books: Vec<Codebook>, bits: u32, codeword_bits: u32, block_len: usize) -> Result<Self> {
        let family = Self {
            books,
            bits,
            codeword_bits,
            block_len,
            frozen: false,
        };
        family.validate().map_err(Error::InvalidConfig)?;
        Ok(family)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=8).contains(&self.bits) {
            return Err(format!("B must lie in 1..=8, got {}", self.bits));
        }
        if !(2..=8).contains(&self.codeword_bits) {
            return Err(format!("Bc must lie in 2..=8, got {}", self.codeword_bits));
        }
        if self.block_len == 0 {
            return Err("Lb must be positive".into());
        }
        let n = self.books.len();
        if n == 0 || !n.is_power_of_two() || n > 128 {
            return Err(format!("Nc must be a power of two in 1..=128, got {n}"));
        }
        let k = 1usize << self.bits;
        for (i, b) in self.books.iter().enumerate() {
            if b.len() != k {
                return Err(format!("codebook {i} has {} entries, expected {k}", b.len()));
            }
            if self.frozen {
                let lim = self.codeword_max();
                if b.codewords.iter().any(|&c| c.fract() != 0.0 || c.abs() > lim) {
                    return Err(format!("codebook {i} holds non-integer or out-of-range codewords"));
                }
            }
        }
        Ok(())
    }

    pub fn books(&self) -> &[Codebook] {
        &self.books
    }

    pub fn book(&self, i: usize) -> &Codebook {
        &self.books[i]
    }

    pub(crate) fn books_mut(&mut self) -> &mut Vec<Codebook> {
        &mut self.books
    }

    pub fn num_codebooks(&self) -> usize {
        self.books.len()
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn codeword_bits(&self) -> u32 {
        self.codeword_bits
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Largest integer codeword magnitude, `2^(Bc-1) - 1`.
    pub fn codeword_max(&self) -> f64 {
        ((1i64 << (self.codeword_bits - 1)) - 1) as f64
    }

    /// Selector minimizing the block's squared error (lowest index on ties),
    /// with that error.
    #[inline]
    pub fn map_block(&self, block: &[f64]) -> (usize, f64) {
        let mut best = 0;
        let mut best_sse = self.books[0].block_sse(block);
        for (i, book) in self.books.iter().enumerate().skip(1) {
            if let Some(sse) = book.block_sse_below(block, best_sse) {
                best = i;
                best_sse = sse;
            }
        }
        (best, best_sse)
    }

    /// Bytes needed to store every codeword at `Bc` bits.
    pub fn footprint_bytes(&self) -> usize {
        (self.books.len() * self.books[0].len() * self.codeword_bits as usize).div_ceil(8)
    }

    /// Codewords packed as `Bc`-bit two's complement, LSB-first, book-major.
    pub fn packed_codewords(&self) -> Result<Vec<u8>> {
        if !self.frozen {
            return Err(Error::InvalidConfig("only frozen families have integer codewords".into()));
        }
        let mut w = crate::bitio::BitWriter::new();
        let mask = (1u64 << self.codeword_bits) - 1;
        for book in &self.books {
            for &c in book.codewords() {
                w.write(c as i64 as u64 & mask, self.codeword_bits);
            }
        }
        Ok(w.finish())
    }

    pub fn to_json(&self) -> String {
        let codebooks = if self.frozen {
            CodewordTable::Int(
                self.books
                    .iter()
                    .map(|b| b.codewords.iter().map(|&c| c as i64).collect())
                    .collect(),
            )
        } else {
            CodewordTable::Real(self.books.iter().map(|b| b.codewords.clone()).collect())
        };
        let doc = FamilyDoc {
            version: FAMILY_VERSION,
            bits: self.bits,
            codeword_bits: self.codeword_bits,
            num_codebooks: self.books.len(),
            block_len: self.block_len,
            codebooks,
        };
        serde_json::to_string(&doc).expect("family serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FamilyDoc = serde_json::from_str(text).map_err(|e| Error::MalformedFamily(e.to_string()))?;
        if doc.version != FAMILY_VERSION {
            return Err(Error::MalformedFamily(format!("unsupported version {}", doc.version)));
        }
        let (rows, frozen): (Vec<Vec<f64>>, bool) = match doc.codebooks {
            CodewordTable::Int(rows) => (
                rows.into_iter()
                    .map(|r| r.into_iter().map(|c| c as f64).collect())
                    .collect(),
                true,
            ),
            CodewordTable::Real(rows) => (rows, false),
        };
        if rows.len() != doc.num_codebooks {
            return Err(Error::MalformedFamily(format!(
                "Nc is {} but {} codebooks are listed",
                doc.num_codebooks,
                rows.len()
            )));
        }
        let mut books = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.iter().any(|c| !c.is_finite()) {
                return Err(Error::MalformedFamily(format!("codebook {i} holds non-finite values")));
            }
            if !row.windows(2).all(|w| w[0] <= w[1]) {
                return Err(Error::MalformedFamily(format!("codebook {i} is not sorted")));
            }
            if row.len() < 2 {
                return Err(Error::MalformedFamily(format!("codebook {i} is too short")));
            }
            books.push(Codebook::from_sorted(row));
        }
        let family = Self {
            books,
            bits: doc.bits,
            codeword_bits: doc.codeword_bits,
            block_len: doc.block_len,
            frozen,
        };
        family.validate().map_err(Error::MalformedFamily)?;
        Ok(family)
    }

    /// 64-bit FNV-1a over [`CodebookFamily::to_json`].
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_json().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Round every codeword to the nearest integer (ties to even) and clamp to
/// `±(2^(Bc-1) - 1)`. Rounding is monotone, so books stay sorted.
pub fn freeze_family(family: &CodebookFamily) -> CodebookFamily {
    let lim = family.codeword_max();
    let books = family
        .books
        .iter()
        .map(|b| {
            Codebook::from_sorted(
                b.codewords
                    .iter()
                    .map(|&c| c.round_ties_even().clamp(-lim, lim))
                    .collect(),
            )
        })
        .collect();
    CodebookFamily {
        books,
        frozen: true,
        ..family.clone()
    }
}

pub fn save_family(family: &CodebookFamily, path: impl AsRef<Path>) -> Result<()> {
    family.save(path)
}

pub fn load_family(path: impl AsRef<Path>) -> Result<CodebookFamily> {
    CodebookFamily::load(path)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Serialize, Deserialize)]
struct FamilyDoc {
    version: u32,
    #[serde(rename = "B")]
    bits: u32,
    #[serde(rename = "Bc")]
    codeword_bits: u32,
    #[serde(rename = "Nc")]
    num_codebooks: usize,
    #[serde(rename = "Lb")]
    block_len: usize,
    codebooks: CodewordTable,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CodewordTable {
    Int(Vec<Vec<i64>>),
    Real(Vec<Vec<f64>>),
}
