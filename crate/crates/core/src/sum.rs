//! Compensated summation.
//!
//! Every reduction whose result is reported (MSE, J-traces, conditional
//! means) goes through [`NeumaierSum`] in a fixed element order, so results
//! do not depend on thread count.

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    /// Raw `(sum, compensation)` pair, useful for accurate prefix differences.
    #[inline]
    pub fn parts(&self) -> (f64, f64) {
        (self.sum, self.comp)
    }
}

impl Extend<f64> for NeumaierSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

/// Sum a sequence in order with compensation.
pub fn sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    let mut acc = NeumaierSum::new();
    acc.extend(iter);
    acc.value()
}

/// Prefix sums stored as `(sum, compensation)` pairs.
///
/// `range_sum(a, b)` is accurate to a few ulps of the range sum itself, not
/// of the running total, which keeps conditional means exact enough for the
/// Lloyd-Max fixed point even on large sorted inputs.
#[derive(Debug, Clone)]
pub struct PrefixSums {
    parts: Vec<(f64, f64)>,
}

impl PrefixSums {
    pub fn new(data: &[f64]) -> Self {
        let mut parts = Vec::with_capacity(data.len() + 1);
        let mut acc = NeumaierSum::new();
        parts.push(acc.parts());
        for &x in data {
            acc.add(x);
            parts.push(acc.parts());
        }
        Self { parts }
    }

    #[inline]
    pub fn range_sum(&self, start: usize, end: usize) -> f64 {
        let (s1, c1) = self.parts[end];
        let (s0, c0) = self.parts[start];
        (s1 - s0) + (c1 - c0)
    }
}
