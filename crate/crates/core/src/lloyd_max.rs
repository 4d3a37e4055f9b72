//! Lloyd-Max design of MSE-optimal scalar quantizers on empirical data.
//!
//! Each iteration places thresholds at the midpoints of the current levels,
//! then moves every level to the mean of the data between its thresholds.
//! A level whose region is empty keeps its previous value.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sum::{NeumaierSum, PrefixSums};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 300;

/// Sorted quantization levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Levels(Vec<f64>);

impl Levels {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("levels must be nonempty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("levels must be finite".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self(values))
    }

    pub(crate) fn from_sorted(values: Vec<f64>) -> Self {
        debug_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds(midpoints(&self.0))
    }
}

/// Decision thresholds between consecutive levels; `τ_0 = -∞` and
/// `τ_K = +∞` are implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(Vec<f64>);

impl Thresholds {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn midpoints(levels: &[f64]) -> Vec<f64> {
    levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Index of the level nearest to `x`; ties and duplicate levels resolve to
/// the lowest index. `thresholds` must be `midpoints(levels)`.
#[inline]
pub(crate) fn nearest_index(levels: &[f64], thresholds: &[f64], x: f64) -> usize {
    let n = levels.len();
    let guess = thresholds.partition_point(|&t| t < x);
    // Rounded midpoints can misplace x by one slot right at a tie.
    let lo = guess.saturating_sub(1);
    let hi = (guess + 1).min(n - 1);
    let mut best = lo;
    let mut best_err = sq(x - levels[lo]);
    for k in lo + 1..=hi {
        let e = sq(x - levels[k]);
        if e < best_err {
            best = k;
            best_err = e;
        }
    }
    while best > 0 && levels[best - 1] == levels[best] {
        best -= 1;
    }
    best
}

#[inline]
pub(crate) fn sq(x: f64) -> f64 {
    x * x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LloydMaxOptions {
    pub max_iters: usize,
    /// Stop once no level moves by this much or more.
    pub tol: f64,
    /// Record the MSE after every iteration.
    pub record_trace: bool,
}

impl Default for LloydMaxOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydMaxResult {
    pub levels: Levels,
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// MSE of the initial levels followed by the MSE after each iteration.
    /// Empty unless requested.
    pub trace: Vec<f64>,
}

/// Nearest-level assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub indices: Vec<usize>,
    pub mse: f64,
}

pub fn assign(data: &[f64], levels: &Levels) -> Assignment {
    let lv = levels.as_slice();
    let th = midpoints(lv);
    let mut sse = NeumaierSum::new();
    let indices = data
        .iter()
        .map(|&x| {
            let k = nearest_index(lv, &th, x);
            sse.add(sq(x - lv[k]));
            k
        })
        .collect();
    let mse = if data.is_empty() { 0.0 } else { sse.value() / data.len() as f64 };
    Assignment { indices, mse }
}

fn mse_of(data: &[f64], levels: &[f64]) -> f64 {
    let th = midpoints(levels);
    let total = crate::sum::sum(data.iter().map(|&x| sq(x - levels[nearest_index(levels, &th, x)])));
    total / data.len() as f64
}

fn check_inputs(data: &[f64], bits: u32) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if !(1..=16).contains(&bits) {
        return Err(Error::InvalidConfig(format!("Lloyd-Max bits must lie in 1..=16, got {bits}")));
    }
    if let Some(index) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    Ok(1usize << bits)
}

/// Levels at the means of `K` equal-count slices of the sorted data.
pub fn quantile_init(data: &[f64], bits: u32) -> Result<Levels> {
    let k = check_inputs(data, bits)?;
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_levels(&sorted, k))
}

pub(crate) fn quantile_levels(sorted: &[f64], k: usize) -> Levels {
    let n = sorted.len();
    Levels::from_sorted(
        (0..k)
            .map(|i| {
                let (start, end) = (i * n / k, (i + 1) * n / k);
                if end > start {
                    let mean = crate::sum::sum(sorted[start..end].iter().copied()) / (end - start) as f64;
                    mean.clamp(sorted[start], sorted[end - 1])
                } else {
                    sorted[start.min(n - 1)]
                }
            })
            .collect(),
    )
}

/// Randomized levels by D² seeding on the scalars (k-means++ in 1-D).
pub fn random_init(data: &[f64], bits: u32, rng: &mut Rng) -> Result<Levels> {
    let k = check_inputs(data, bits)?;
    let mut chosen = vec![data[rng.below(data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|&x| sq(x - chosen[0])).collect();
    while chosen.len() < k {
        let next = match rng.weighted_index(&d2) {
            Some(i) => data[i],
            None => chosen[chosen.len() - 1],
        };
        chosen.push(next);
        for (d, &x) in d2.iter_mut().zip(data) {
            *d = d.min(sq(x - next));
        }
    }
    Levels::new(chosen)
}

pub fn lloyd_max(data: &[f64], bits: u32, init: &Levels, opts: &LloydMaxOptions) -> Result<LloydMaxResult> {
    let k = check_inputs(data, bits)?;
    if init.len() != k {
        return Err(Error::InvalidConfig(format!(
            "initial levels: expected {k}, got {}",
            init.len()
        )));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(lloyd_max_sorted(&sorted, init.clone(), opts))
}

/// Core iteration on pre-sorted data. `init` must hold the target level count.
pub(crate) fn lloyd_max_sorted(sorted: &[f64], init: Levels, opts: &LloydMaxOptions) -> LloydMaxResult {
    let (levels, iterations, converged, trace) = iterate(sorted, init, opts);
    let mse = mse_of(sorted, &levels);
    LloydMaxResult {
        levels: Levels::from_sorted(levels),
        mse,
        iterations,
        converged,
        trace,
    }
}

/// Final levels only, skipping the closing MSE pass.
pub(crate) fn lloyd_max_levels(sorted: &[f64], init: Levels, opts: &LloydMaxOptions) -> Vec<f64> {
    iterate(sorted, init, opts).0
}

/// First index at or after `start` whose value exceeds `tau`, searched
/// outwards from `hint`.
fn boundary_near(sorted: &[f64], start: usize, hint: usize, tau: f64) -> usize {
    let n = sorted.len();
    let h = hint.clamp(start, n);
    let (lo, hi) = if h < n && sorted[h] <= tau {
        // Boundary lies right of h.
        let mut step = 1;
        let mut lo = h + 1;
        loop {
            let probe = h + step;
            if probe >= n {
                break (lo, n);
            }
            if sorted[probe] > tau {
                break (lo, probe);
            }
            lo = probe + 1;
            step *= 2;
        }
    } else {
        // Boundary is at or left of h.
        let mut step = 1;
        let mut hi = h;
        loop {
            if hi < start + step || hi < step {
                break (start, hi);
            }
            let probe = hi - step;
            if sorted[probe] <= tau {
                break (probe + 1, hi);
            }
            hi = probe;
            step *= 2;
        }
    };
    lo + sorted[lo..hi].partition_point(|&x| x <= tau)
}

fn iterate(sorted: &[f64], init: Levels, opts: &LloydMaxOptions) -> (Vec<f64>, usize, bool, Vec<f64>) {
    let prefix = PrefixSums::new(sorted);
    let k = init.len();
    let mut levels = init.into_vec();
    let mut next = vec![0.0; k];
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(mse_of(sorted, &levels));
    }
    let mut iterations = 0;
    let mut converged = false;
    // Region ends from the previous pass; boundaries rarely move far.
    let mut ends = vec![sorted.len() / 2; k];
    while iterations < opts.max_iters {
        iterations += 1;
        let mut start = 0;
        let mut movement = 0.0f64;
        for i in 0..k {
            let end = if i + 1 == k {
                sorted.len()
            } else {
                let tau = 0.5 * (levels[i] + levels[i + 1]);
                let e = boundary_near(sorted, start, ends[i], tau);
                ends[i] = e;
                e
            };
            next[i] = if end > start {
                let mean = prefix.range_sum(start, end) / (end - start) as f64;
                mean.clamp(sorted[start], sorted[end - 1])
            } else {
                levels[i]
            };
            movement = movement.max((next[i] - levels[i]).abs());
            start = end;
        }
        std::mem::swap(&mut levels, &mut next);
        if opts.record_trace {
            trace.push(mse_of(sorted, &levels));
        }
        if movement < opts.tol {
            converged = true;
            break;
        }
    }
    (levels, iterations, converged, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn fit(data: &[f64], bits: u32) -> LloydMaxResult {
        let init = quantile_init(data, bits).unwrap();
        lloyd_max(data, bits, &init, &LloydMaxOptions::default()).unwrap()
    }

    #[test]
    fn boundary_search_agrees_with_binary_search() {
        let sorted: Vec<f64> = [0.0, 1.0, 1.0, 1.0, 2.0, 3.0, 3.0, 5.0, 8.0, 8.0, 9.0].to_vec();
        for start in 0..=sorted.len() {
            for hint in 0..=sorted.len() + 2 {
                for t in -2..=20 {
                    let tau = t as f64 / 2.0;
                    let want = start + sorted[start..].partition_point(|&x| x <= tau);
                    assert_eq!(boundary_near(&sorted, start, hint, tau), want, "{start} {hint} {tau}");
                }
            }
        }
    }

    #[test]
    fn symmetric_two_point() {
        let r = fit(&[-1.0, -1.0, 1.0, 1.0], 1);
        assert_eq!(r.levels.as_slice(), &[-1.0, 1.0]);
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn four_points_one_bit() {
        let r = fit(&[1.0, 2.0, 3.0, 4.0], 1);
        assert_eq!(r.levels.as_slice(), &[1.5, 3.5]);
        assert!((r.mse - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_data() {
        let r = fit(&[2.5, 2.5, 2.5], 2);
        assert!(r.levels.as_slice().iter().all(|&l| l == 2.5));
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn empty_region_keeps_level() {
        let init = Levels::new(vec![-100.0, 0.0, 1.0, 2.0]).unwrap();
        let r = lloyd_max(&[0.0, 1.0, 2.0, 2.0], 2, &init, &LloydMaxOptions::default()).unwrap();
        assert_eq!(r.levels.as_slice()[0], -100.0);
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn assign_examples() {
        let lv = Levels::new(vec![0.0, 1.0]).unwrap();
        let a = assign(&[0.4], &lv);
        assert_eq!(a.indices, vec![0]);
        assert!((a.mse - 0.16).abs() < 1e-15);
        assert_eq!(assign(&[0.5], &lv).indices, vec![0]);
        let lv = Levels::new(vec![1.5, 3.5]).unwrap();
        assert!((assign(&[1.0, 2.0, 3.0, 4.0], &lv).mse - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nearest_prefers_lowest_duplicate() {
        let lv = [1.0, 1.0, 1.0, 5.0];
        let th = midpoints(&lv);
        assert_eq!(nearest_index(&lv, &th, 1.5), 0);
        assert_eq!(nearest_index(&lv, &th, 0.5), 0);
        assert_eq!(nearest_index(&lv, &th, 3.0), 0);
        assert_eq!(nearest_index(&lv, &th, 3.0001), 3);
    }

    #[test]
    fn trace_is_monotone_and_fixed_point_holds() {
        let mut rng = Rng::new(9, Stream::Samples);
        let data: Vec<f64> = (0..5000).map(|_| rng.laplace() + 0.3 * rng.uniform()).collect();
        let init = quantile_init(&data, 3).unwrap();
        let opts = LloydMaxOptions {
            record_trace: true,
            ..Default::default()
        };
        let r = lloyd_max(&data, 3, &init, &opts).unwrap();
        assert!(r.converged);
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
        }
        let a = assign(&data, &r.levels);
        for (k, &level) in r.levels.as_slice().iter().enumerate() {
            let members: Vec<f64> = data
                .iter()
                .zip(&a.indices)
                .filter(|(_, &i)| i == k)
                .map(|(&x, _)| x)
                .collect();
            if !members.is_empty() {
                let mean = crate::sum::sum(members.iter().copied()) / members.len() as f64;
                assert!((mean - level).abs() < 1e-8, "level {k}: {level} vs {mean}");
            }
        }
        let th = r.levels.thresholds();
        for (i, t) in th.as_slice().iter().enumerate() {
            let lv = r.levels.as_slice();
            assert_eq!(*t, 0.5 * (lv[i] + lv[i + 1]));
        }
    }

    #[test]
    fn many_levels_reach_zero_error() {
        let data = [0.1, 0.7, -3.0, 2.2, 0.7];
        let r = fit(&data, 3);
        assert!(r.mse < 1e-20);
    }

    #[test]
    fn input_errors() {
        let lv = Levels::new(vec![0.0, 1.0]).unwrap();
        let opts = LloydMaxOptions::default();
        assert!(matches!(lloyd_max(&[], 1, &lv, &opts), Err(Error::EmptyData)));
        assert!(lloyd_max(&[1.0], 0, &lv, &opts).is_err());
        assert!(lloyd_max(&[1.0], 2, &lv, &opts).is_err());
    }
}
