//! Block clustered codebook calibration.
//!
//! Calibration alternates two steps until no block changes codebook or the
//! iteration cap is reached:
//!
//! 1. map every block to the codebook with the smallest block squared error;
//! 2. refit each codebook with Lloyd-Max over the scalars of its blocks,
//!    starting from the previous codebook.
//!
//! Both steps can only lower the total squared error, so the per-iteration
//! objective `J` (total squared error divided by scalar count) never rises.
//! Everything runs in the normalized domain, where each block array has been
//! scaled so that its largest magnitude is `2^(Bc-1) - 1`.

mod family;
mod init;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lloyd_max::{lloyd_max_levels, LloydMaxOptions, Levels};
use crate::rng::{Rng, Stream};
use crate::sum::NeumaierSum;
use crate::tensor::{check_geometry, BlockDecomposition, TensorView};

pub use family::{freeze_family, load_family, save_family, Codebook, CodebookFamily, FAMILY_VERSION};
pub use init::{init_family, kmeanspp_seeds, InitMethod};

/// Geometry and bit budget of one quantizer.
/// Missing fields take their [`Default`] values when deserializing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    /// Scalars per block (`L_b`).
    pub block_len: usize,
    /// Scalars per block array (`L_A`).
    pub array_len: usize,
    /// Codebooks in the family (`N_c`).
    pub num_codebooks: usize,
    /// Index bits per scalar (`B`).
    pub bits: u32,
    /// Bits of the per-array scale (`B_s`).
    pub scale_bits: u32,
    /// Bits of an integer codeword (`B_c`).
    pub codeword_bits: u32,
    /// Iteration cap (`M`).
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            block_len: 8,
            array_len: 64,
            num_codebooks: 16,
            bits: 4,
            scale_bits: 8,
            codeword_bits: 6,
            max_iters: 100,
            seed: 0,
        }
    }
}

impl QuantConfig {
    pub fn new(block_len: usize, array_len: usize, num_codebooks: usize, bits: u32) -> Self {
        Self {
            block_len,
            array_len,
            num_codebooks,
            bits,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_codeword_bits(mut self, codeword_bits: u32) -> Self {
        self.codeword_bits = codeword_bits;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.block_len, self.array_len)?;
        let nc = self.num_codebooks;
        if nc == 0 || !nc.is_power_of_two() || nc > 128 {
            return Err(Error::InvalidConfig(format!(
                "Nc must be a power of two in 1..=128, got {nc}"
            )));
        }
        if !(1..=8).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!("B must lie in 1..=8, got {}", self.bits)));
        }
        if self.scale_bits != 8 {
            return Err(Error::InvalidConfig(format!(
                "only 8-bit E4M3 array scales are supported, got Bs = {}",
                self.scale_bits
            )));
        }
        if !(2..=8).contains(&self.codeword_bits) {
            return Err(Error::InvalidConfig(format!(
                "Bc must lie in 2..=8, got {}",
                self.codeword_bits
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("the iteration cap must be positive".into()));
        }
        Ok(())
    }

    /// Bits of a block selector, `log2(N_c)`.
    pub fn selector_bits(&self) -> u32 {
        self.num_codebooks.trailing_zeros()
    }

    /// `2^(Bc-1) - 1`, the normalized range bound.
    pub fn codeword_max(&self) -> f64 {
        ((1i64 << (self.codeword_bits - 1)) - 1) as f64
    }
}

/// Equal-length blocks stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet {
    data: Vec<f64>,
    block_len: usize,
}

impl BlockSet {
    pub fn new(data: Vec<f64>, block_len: usize) -> Result<Self> {
        if block_len == 0 {
            return Err(Error::ZeroLength { name: "block length" });
        }
        if data.is_empty() {
            return Err(Error::EmptyData);
        }
        if !data.len().is_multiple_of(block_len) {
            return Err(Error::NotMultiple {
                block_len,
                array_len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        Ok(Self { data, block_len })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn num_blocks(&self) -> usize {
        self.data.len() / self.block_len
    }

    pub fn num_scalars(&self) -> usize {
        self.data.len()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.block_len..(i + 1) * self.block_len]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.block_len)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Concatenate several sets of the same block length.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a BlockSet>) -> Result<Self> {
        let mut data = Vec::new();
        let mut block_len = None;
        for s in sets {
            match block_len {
                None => block_len = Some(s.block_len),
                Some(l) if l != s.block_len => {
                    return Err(Error::InvalidConfig("block sets differ in block length".into()))
                }
                _ => {}
            }
            data.extend_from_slice(&s.data);
        }
        Self::new(data, block_len.ok_or(Error::EmptyData)?)
    }
}

/// A tensor after per-array scaling into the normalized domain.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTensor {
    /// Normalized, zero-padded scalars.
    pub blocks: BlockDecomposition,
    /// Raw per-array scale `s_A`.
    pub array_scales: Vec<f64>,
}

impl NormalizedTensor {
    /// Blocks free of padding, in order. These are what calibration sees.
    pub fn calibration_set(&self) -> Result<BlockSet> {
        let n = self.blocks.complete_blocks() * self.blocks.block_len;
        if n == 0 {
            return Err(Error::TooFewBlocks { needed: 1, found: 0 });
        }
        BlockSet::new(self.blocks.data()[..n].to_vec(), self.blocks.block_len)
    }
}

/// `s_A = (2^(Bc-1) - 1) / max|A|`, or 1 for an all-zero array.
pub fn array_scale(array: &[f64], codeword_max: f64) -> f64 {
    let m = array.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if m > 0.0 {
        codeword_max / m
    } else {
        1.0
    }
}

pub fn normalize_blocks(t: &TensorView, cfg: &QuantConfig) -> Result<NormalizedTensor> {
    let values: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
    normalize_values(&values, cfg)
}

pub fn normalize_values(values: &[f64], cfg: &QuantConfig) -> Result<NormalizedTensor> {
    let mut blocks = BlockDecomposition::from_slice(values, cfg.block_len, cfg.array_len)?;
    let cmax = cfg.codeword_max();
    let la = cfg.array_len;
    let mut array_scales = Vec::with_capacity(blocks.num_arrays);
    for array in blocks.data_mut().chunks_exact_mut(la) {
        let s = array_scale(array, cmax);
        for x in array.iter_mut() {
            *x *= s;
        }
        array_scales.push(s);
    }
    Ok(NormalizedTensor {
        blocks,
        array_scales,
    })
}

/// Which padding-free blocks of a tensor enter calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockSampling {
    #[default]
    All,
    /// At most this many blocks, drawn uniformly without replacement from
    /// the config seed and kept in tensor order.
    Uniform(usize),
}

impl BlockSampling {
    pub fn apply(&self, blocks: BlockSet, seed: u64) -> Result<BlockSet> {
        let k = match *self {
            BlockSampling::All => return Ok(blocks),
            BlockSampling::Uniform(0) => {
                return Err(Error::InvalidConfig("block sample size must be positive".into()))
            }
            BlockSampling::Uniform(k) if k >= blocks.num_blocks() => return Ok(blocks),
            BlockSampling::Uniform(k) => k,
        };
        let mut order: Vec<usize> = (0..blocks.num_blocks()).collect();
        let mut rng = Rng::new(seed, Stream::BlockSampling);
        for i in 0..k {
            let j = i + rng.below(order.len() - i);
            order.swap(i, j);
        }
        let mut picked = order[..k].to_vec();
        picked.sort_unstable();
        let lb = blocks.block_len();
        let data = picked
            .iter()
            .flat_map(|&i| blocks.data()[i * lb..(i + 1) * lb].iter().copied())
            .collect();
        BlockSet::new(data, lb)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibOptions {
    pub init: InitMethod,
    /// Options for every Lloyd-Max refit.
    pub lloyd: LloydMaxOptions,
    pub sampling: BlockSampling,
}

/// What happened during one calibration run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibTrace {
    /// `J` under the initial family with optimal mapping.
    pub initial_j: f64,
    /// `J` after the codebook update of each iteration.
    pub j: Vec<f64>,
    pub iterations_run: usize,
    /// Blocks per cluster after each iteration's mapping.
    pub cluster_sizes: Vec<Vec<usize>>,
    /// Blocks that changed cluster in each iteration.
    pub changed: Vec<usize>,
    /// 1-based iterations in which an empty cluster was re-seeded.
    pub reseed_iterations: Vec<usize>,
    /// True when the run stopped because no block changed cluster.
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl CalibTrace {
    pub fn final_j(&self) -> f64 {
        self.j.last().copied().unwrap_or(self.initial_j)
    }

    /// Whether `J` never rose by more than a factor `1 + slack`, ignoring
    /// re-seed iterations.
    pub fn is_monotone(&self, slack: f64) -> bool {
        let mut prev = self.initial_j;
        for (n, &j) in self.j.iter().enumerate() {
            if j > prev * (1.0 + slack) && !self.reseed_iterations.contains(&(n + 1)) {
                return false;
            }
            prev = j;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Calibrated family; not integer-frozen.
    pub family: CodebookFamily,
    pub trace: CalibTrace,
    /// Cluster of each block under the final update.
    pub assignment: Vec<usize>,
}

#[cfg(test)]
fn map_all(family: &CodebookFamily, blocks: &BlockSet) -> (Vec<usize>, Vec<f64>) {
    blocks
        .data()
        .par_chunks_exact(blocks.block_len())
        .map(|b| family.map_block(b))
        .unzip()
}

fn objective(sses: &[f64], scalars: usize) -> f64 {
    let mut s = NeumaierSum::new();
    s.extend(sses.iter().copied());
    s.value() / scalars as f64
}

fn sizes(assignment: &[usize], nc: usize) -> Vec<usize> {
    let mut out = vec![0; nc];
    for &a in assignment {
        out[a] += 1;
    }
    out
}

/// Give each empty cluster a codebook fitted to a high-error block.
///
/// Candidates are blocks in decreasing error order (lowest index on ties)
/// with positive error and a cluster of more than one block. The first
/// whose own Lloyd-Max codebook strictly lowers its error is moved into the
/// empty cluster. Returns the number of clusters re-seeded and a warning for
/// each one left empty.
pub fn handle_empty_cluster(
    family: &mut CodebookFamily,
    blocks: &BlockSet,
    assignment: &mut [usize],
    sses: &mut [f64],
    lloyd: &LloydMaxOptions,
) -> (usize, Vec<String>) {
    const MAX_ATTEMPTS: usize = 16;
    let nc = family.num_codebooks();
    let mut counts = sizes(assignment, nc);
    let empty: Vec<usize> = (0..nc).filter(|&i| counts[i] == 0).collect();
    if empty.is_empty() {
        return (0, Vec::new());
    }
    let mut order: Vec<usize> = (0..assignment.len()).filter(|&b| sses[b] > 0.0).collect();
    order.sort_by(|&a, &b| sses[b].total_cmp(&sses[a]).then(a.cmp(&b)));
    let k = 1usize << family.bits();
    let mut next = 0;
    let mut reseeded = 0;
    let mut warnings = Vec::new();
    for cluster in empty {
        let mut attempts = 0;
        let mut done = false;
        while next < order.len() && attempts < MAX_ATTEMPTS {
            let b = order[next];
            next += 1;
            if counts[assignment[b]] <= 1 {
                continue;
            }
            attempts += 1;
            let book = init::fit_codebook(blocks.block(b).to_vec(), k, lloyd);
            let sse = book.block_sse(blocks.block(b));
            if sse < sses[b] {
                family.books_mut()[cluster] = book;
                counts[assignment[b]] -= 1;
                counts[cluster] += 1;
                assignment[b] = cluster;
                sses[b] = sse;
                reseeded += 1;
                done = true;
                break;
            }
        }
        if !done {
            warnings.push(format!("cluster {cluster} is empty and could not be re-seeded"));
        }
    }
    (reseeded, warnings)
}

/// Relative slack applied to every pruning bound, covering rounding in the
/// floating-point error sums.
const BOUND_SLACK: f64 = 1e-12;

/// Exact block mapping that skips codebooks whose error provably exceeds the
/// error under the block's current codebook.
///
/// `lower[b * nc + j]` is a lower bound on the error norm of block `b` under
/// book `j`. When a refit moves every codeword of book `j` by at most `d`,
/// each scalar's quantization error under it moves by at most `d`, so the
/// block error norm moves by at most `d * sqrt(L_b)`.
struct Mapper {
    nc: usize,
    block_len: usize,
    lower: Vec<f64>,
}

impl Mapper {
    fn new(num_blocks: usize, nc: usize, block_len: usize) -> Self {
        Self {
            nc,
            block_len,
            lower: vec![0.0; num_blocks * nc],
        }
    }

    /// Move each block to its best codebook (lowest index on ties).
    /// `sses` must hold each block's error under its current codebook and
    /// is updated alongside `assignment`. Returns how many blocks moved.
    fn remap(&mut self, family: &CodebookFamily, blocks: &BlockSet, assignment: &mut [usize], sses: &mut [f64]) -> usize {
        let nc = self.nc;
        self.lower
            .par_chunks_mut(nc)
            .zip(blocks.data().par_chunks_exact(self.block_len))
            .zip(assignment.par_iter_mut())
            .zip(sses.par_iter_mut())
            .map(|(((lower, block), a), s)| {
                let current = *a;
                let limit = s.sqrt() * (1.0 + BOUND_SLACK);
                let mut best = current;
                let mut best_sse = *s;
                for (j, lj) in lower.iter_mut().enumerate() {
                    if j == current || *lj > limit {
                        continue;
                    }
                    // Summing every scalar keeps the stored bound tight.
                    let v = family.book(j).block_sse(block);
                    *lj = v.sqrt();
                    if v < best_sse || (v == best_sse && j < best) {
                        best = j;
                        best_sse = v;
                    }
                }
                lower[current] = s.sqrt();
                *a = best;
                *s = best_sse;
                usize::from(best != current)
            })
            .sum()
    }

    /// Loosen the bounds after codebooks moved from `before` to `after`.
    fn shift(&mut self, before: &[Codebook], after: &CodebookFamily) {
        let root = (self.block_len as f64).sqrt();
        let shifts: Vec<f64> = before
            .iter()
            .zip(after.books())
            .map(|(b, a)| b.max_shift(a) * root * (1.0 + BOUND_SLACK))
            .collect();
        if shifts.iter().all(|&d| d == 0.0) {
            return;
        }
        self.lower.par_chunks_mut(self.nc).for_each(|lower| {
            for (l, &d) in lower.iter_mut().zip(&shifts) {
                if d > 0.0 {
                    *l = (*l * (1.0 - BOUND_SLACK) - d).max(0.0);
                }
            }
        });
    }
}

fn assigned_sses(family: &CodebookFamily, blocks: &BlockSet, assignment: &[usize]) -> Vec<f64> {
    blocks
        .data()
        .par_chunks_exact(blocks.block_len())
        .zip(assignment.par_iter())
        .map(|(b, &a)| family.book(a).block_sse(b))
        .collect()
}

/// Run block clustered calibration on normalized blocks.
pub fn calibrate(blocks: &BlockSet, cfg: &QuantConfig, opts: &CalibOptions) -> Result<Calibration> {
    cfg.validate()?;
    if blocks.block_len() != cfg.block_len {
        return Err(Error::InvalidConfig(format!(
            "blocks have length {}, configuration says {}",
            blocks.block_len(),
            cfg.block_len
        )));
    }
    let nc = cfg.num_codebooks;
    let lb = cfg.block_len;
    let n_scalars = blocks.num_scalars();
    let mut family = init_family(blocks, cfg, &opts.init, &opts.lloyd)?;

    // Scalar positions in ascending value order. Scattering them by cluster
    // yields each cluster's scalars already sorted.
    let data = blocks.data();
    let mut order: Vec<u32> = (0..n_scalars as u32).collect();
    order.sort_by(|&a, &b| data[a as usize].total_cmp(&data[b as usize]).then(a.cmp(&b)));

    let mut mapper = Mapper::new(blocks.num_blocks(), nc, lb);
    let mut assignment = vec![0; blocks.num_blocks()];
    let mut sses = assigned_sses(&family, blocks, &assignment);
    mapper.remap(&family, blocks, &mut assignment, &mut sses);
    let mut trace = CalibTrace {
        initial_j: objective(&sses, n_scalars),
        ..CalibTrace::default()
    };
    for n in 1..=cfg.max_iters {
        let changed = if n == 1 {
            assignment.len()
        } else {
            if nc == 1 {
                trace.converged = true;
                break;
            }
            let changed = mapper.remap(&family, blocks, &mut assignment, &mut sses);
            if changed == 0 {
                trace.converged = true;
                break;
            }
            changed
        };

        let before = family.books().to_vec();
        let (reseeded, warnings) = handle_empty_cluster(&mut family, blocks, &mut assignment, &mut sses, &opts.lloyd);
        if reseeded > 0 {
            trace.reseed_iterations.push(n);
            log::debug!("iteration {n}: re-seeded {reseeded} empty cluster(s)");
        }
        for w in warnings {
            if !trace.warnings.contains(&w) {
                log::warn!("{w}");
                trace.warnings.push(w);
            }
        }

        let mut groups: Vec<Vec<f64>> = sizes(&assignment, nc)
            .into_iter()
            .map(|c| Vec::with_capacity(c * lb))
            .collect();
        for &p in &order {
            let p = p as usize;
            groups[assignment[p / lb]].push(data[p]);
        }
        let refit: Vec<Option<Codebook>> = groups
            .par_iter()
            .zip(family.books().par_iter())
            .map(|(g, book)| {
                (!g.is_empty()).then(|| {
                    let init = Levels::from_sorted(book.codewords().to_vec());
                    Codebook::from_sorted(lloyd_max_levels(g, init, &opts.lloyd))
                })
            })
            .collect();
        for (slot, book) in family.books_mut().iter_mut().zip(refit) {
            if let Some(book) = book {
                *slot = book;
            }
        }
        mapper.shift(&before, &family);
        sses = assigned_sses(&family, blocks, &assignment);

        trace.j.push(objective(&sses, n_scalars));
        trace.cluster_sizes.push(sizes(&assignment, nc));
        trace.changed.push(changed);
        trace.iterations_run = n;
    }
    log::debug!(
        "calibration: {} iterations, J {} -> {}",
        trace.iterations_run,
        trace.initial_j,
        trace.final_j()
    );
    Ok(Calibration {
        family,
        trace,
        assignment,
    })
}

/// Normalize a tensor and calibrate on its padding-free blocks.
pub fn calibrate_tensor(t: &TensorView, cfg: &QuantConfig, opts: &CalibOptions) -> Result<Calibration> {
    cfg.validate()?;
    let normalized = normalize_blocks(t, cfg)?;
    let set = opts.sampling.apply(normalized.calibration_set()?, cfg.seed)?;
    calibrate(&set, cfg, opts)
}
