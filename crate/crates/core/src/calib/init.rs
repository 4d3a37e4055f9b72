//! Initial codebook families.

use crate::error::{Error, Result};
use crate::lloyd_max::{lloyd_max_sorted, quantile_levels, sq, LloydMaxOptions};
use crate::rng::{Rng, Stream};

use super::{BlockSet, Codebook, CodebookFamily, QuantConfig};

/// How iteration-0 codebooks are chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitMethod {
    /// D² seeding over block vectors, then Lloyd-Max on each seed's group.
    #[default]
    KMeansPlusPlus,
    /// Sorted uniform draws over the normalized range.
    RandomCodewords,
    /// Start from these books, topping up to `N_c` with D²-sampled blocks.
    Warm(CodebookFamily),
}

/// Indices of `k` seed blocks chosen by k-means++ D² sampling.
///
/// When every remaining block coincides with a chosen seed the lowest
/// unchosen index is taken.
pub fn kmeanspp_seeds(blocks: &BlockSet, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = blocks.num_blocks();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut seeds = vec![rng.below(n)];
    let mut d2: Vec<f64> = blocks.iter().map(|b| dist2(b, blocks.block(seeds[0]))).collect();
    while seeds.len() < k.min(n) {
        let next = rng
            .weighted_index(&d2)
            .unwrap_or_else(|| (0..n).find(|i| !seeds.contains(i)).expect("k <= n"));
        seeds.push(next);
        let s = blocks.block(next);
        for (d, b) in d2.iter_mut().zip(blocks.iter()) {
            *d = d.min(dist2(b, s));
        }
    }
    seeds
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| sq(x - y)).sum()
}

pub(crate) fn fit_codebook(mut scalars: Vec<f64>, k: usize, opts: &LloydMaxOptions) -> Codebook {
    scalars.sort_by(f64::total_cmp);
    let init = quantile_levels(&scalars, k);
    Codebook::from_sorted(lloyd_max_sorted(&scalars, init, opts).levels.into_vec())
}

/// Iteration-0 family for `cfg` on `blocks`.
///
/// Returns the family and, for k-means++, the nearest-seed grouping used to
/// build it.
pub fn init_family(
    blocks: &BlockSet,
    cfg: &QuantConfig,
    method: &InitMethod,
    lloyd: &LloydMaxOptions,
) -> Result<CodebookFamily> {
    let nc = cfg.num_codebooks;
    if blocks.num_blocks() < nc {
        return Err(Error::TooFewBlocks {
            needed: nc,
            found: blocks.num_blocks(),
        });
    }
    let k = 1usize << cfg.bits;
    let books = match method {
        InitMethod::KMeansPlusPlus => {
            let mut rng = Rng::new(cfg.seed, Stream::KMeansInit);
            let seeds = kmeanspp_seeds(blocks, nc, &mut rng);
            let mut groups: Vec<Vec<f64>> = vec![Vec::new(); nc];
            for b in blocks.iter() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, &s) in seeds.iter().enumerate() {
                    let d = dist2(b, blocks.block(s));
                    if d < best_d {
                        best = i;
                        best_d = d;
                    }
                }
                groups[best].extend_from_slice(b);
            }
            let fallback = groups.iter().any(|g| g.is_empty()).then(|| fit_codebook(blocks.data().to_vec(), k, lloyd));
            groups
                .into_iter()
                .map(|g| {
                    if g.is_empty() {
                        fallback.clone().expect("fallback computed")
                    } else {
                        fit_codebook(g, k, lloyd)
                    }
                })
                .collect()
        }
        InitMethod::RandomCodewords => {
            let mut rng = Rng::new(cfg.seed, Stream::RandomCodebooks);
            let lim = cfg.codeword_max();
            (0..nc)
                .map(|_| {
                    let mut cw: Vec<f64> = (0..k).map(|_| lim * (2.0 * rng.uniform() - 1.0)).collect();
                    cw.sort_by(f64::total_cmp);
                    Codebook::from_sorted(cw)
                })
                .collect()
        }
        InitMethod::Warm(existing) => {
            if existing.bits() != cfg.bits || existing.block_len() != cfg.block_len {
                return Err(Error::FamilyMismatch("warm-start family has a different B or Lb".into()));
            }
            if existing.num_codebooks() > nc {
                return Err(Error::FamilyMismatch(format!(
                    "warm-start family has {} books, more than Nc = {nc}",
                    existing.num_codebooks()
                )));
            }
            extend_books(existing.books().to_vec(), blocks, nc, k, cfg.seed, lloyd)
        }
    };
    CodebookFamily::new(books, cfg.bits, cfg.codeword_bits, cfg.block_len)
}

/// Add D²-sampled books until `target` are present. A block's weight is its
/// squared error under the current books; each new book is the Lloyd-Max fit
/// of the sampled block's own scalars.
fn extend_books(
    mut books: Vec<Codebook>,
    blocks: &BlockSet,
    target: usize,
    k: usize,
    seed: u64,
    lloyd: &LloydMaxOptions,
) -> Vec<Codebook> {
    if books.len() >= target {
        return books;
    }
    let mut rng = Rng::new(seed, Stream::KMeansInit);
    let mut d2: Vec<f64> = blocks
        .iter()
        .map(|b| books.iter().map(|c| c.block_sse(b)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut used = Vec::new();
    while books.len() < target {
        let pick = if books.is_empty() {
            rng.below(blocks.num_blocks())
        } else {
            rng.weighted_index(&d2).unwrap_or_else(|| {
                (0..blocks.num_blocks())
                    .find(|i| !used.contains(i))
                    .unwrap_or(0)
            })
        };
        used.push(pick);
        let book = fit_codebook(blocks.block(pick).to_vec(), k, lloyd);
        for (d, b) in d2.iter_mut().zip(blocks.iter()) {
            *d = d.min(book.block_sse(b));
        }
        books.push(book);
    }
    books
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_split_separated_populations() {
        // 50 small blocks near 0 followed by 50 blocks near 20.
        let mut data = Vec::new();
        let mut rng = Rng::new(1, Stream::Samples);
        for i in 0..100 {
            let centre = if i < 50 { 0.0 } else { 20.0 };
            for _ in 0..8 {
                data.push(centre + 0.5 * rng.normal_pair().0);
            }
        }
        let blocks = BlockSet::new(data, 8).unwrap();
        let mut split = 0;
        for seed in 0..100 {
            let mut rng = Rng::new(seed, Stream::KMeansInit);
            let s = kmeanspp_seeds(&blocks, 2, &mut rng);
            if (s[0] < 50) != (s[1] < 50) {
                split += 1;
            }
        }
        assert!(split >= 99, "only {split}/100 seedings split the populations");
    }

    #[test]
    fn duplicate_blocks_fall_back_to_unchosen_index() {
        let blocks = BlockSet::new(vec![1.0; 12], 2).unwrap();
        let mut rng = Rng::new(0, Stream::KMeansInit);
        let s = kmeanspp_seeds(&blocks, 3, &mut rng);
        assert_eq!(s.len(), 3);
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 3);
    }
}
