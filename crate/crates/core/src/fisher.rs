//! Fisher's exact test for pairwise label association.

use serde::{Deserialize, Serialize};

use crate::labelspace::LabelSet;

/// A 2×2 table of label co-occurrence counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// Both labels present.
    pub a: u64,
    /// Only the first label.
    pub b: u64,
    /// Only the second label.
    pub c: u64,
    /// Neither.
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// The same table with the two labels' roles exchanged.
    pub fn transposed(&self) -> Self {
        Self::new(self.a, self.c, self.b, self.d)
    }

    pub fn from_sets<'a, I>(sets: I, x: usize, y: usize) -> Self
    where
        I: IntoIterator<Item = &'a LabelSet>,
    {
        let mut t = Self::default();
        for s in sets {
            match (s.contains(&x), s.contains(&y)) {
                (true, true) => t.a += 1,
                (true, false) => t.b += 1,
                (false, true) => t.c += 1,
                (false, false) => t.d += 1,
            }
        }
        t
    }
}

/// `ln(k!)` for `k` in `0..=n`, summed exactly term by term.
pub struct LogFactorials(Vec<f64>);

impl LogFactorials {
    pub fn new(n: usize) -> Self {
        let mut v = Vec::with_capacity(n + 1);
        v.push(0.0);
        let mut acc = 0.0;
        for k in 1..=n {
            acc += (k as f64).ln();
            v.push(acc);
        }
        Self(v)
    }

    fn get(&self, k: u64) -> f64 {
        self.0[k as usize]
    }

    fn ensure(&mut self, n: u64) {
        let mut acc = *self.0.last().expect("table holds 0!");
        for k in self.0.len()..=n as usize {
            acc += (k as f64).ln();
            self.0.push(acc);
        }
    }
}

/// Two-sided p-value: total probability of all tables with the observed
/// margins whose point probability does not exceed the observed one.
pub fn fisher_exact_p(t: &ContingencyTable) -> f64 {
    let mut lf = LogFactorials::new(0);
    fisher_exact_p_with(t, &mut lf)
}

pub fn fisher_exact_p_with(t: &ContingencyTable, lf: &mut LogFactorials) -> f64 {
    let n = t.total();
    if n == 0 {
        return 1.0;
    }
    lf.ensure(n);
    // Label order must not matter, down to rounding.
    let t = if t.b > t.c { t.transposed() } else { *t };
    let row1 = t.a + t.b;
    let col1 = t.a + t.c;
    let row2 = n - row1;
    let col2 = n - col1;
    let lo = col1.saturating_sub(row2);
    let hi = row1.min(col1);
    let fixed = lf.get(row1) + lf.get(row2) + lf.get(col1) + lf.get(col2) - lf.get(n);
    let log_p = |x: u64| {
        fixed - lf.get(x) - lf.get(row1 - x) - lf.get(col1 - x) - lf.get(row2 + x - col1)
    };
    let observed = log_p(t.a);
    let cutoff = observed + 1e-7f64.ln_1p();
    let mut total = 0.0;
    for x in lo..=hi {
        let lp = log_p(x);
        if lp <= cutoff {
            total += (lp - observed).exp();
        }
    }
    (total * observed.exp()).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Association statistics over all unordered label pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAnalysis {
    pub pairs: usize,
    pub significant: usize,
    /// Percentage of pairs with `p < alpha`.
    pub rate: f64,
    pub alpha: f64,
}

pub fn pair_p_value(sets: &[&LabelSet], x: usize, y: usize, lf: &mut LogFactorials) -> f64 {
    fisher_exact_p_with(&ContingencyTable::from_sets(sets.iter().copied(), x, y), lf)
}

/// Tests every unordered pair of the `num_labels` labels on gold sets.
pub fn significant_pair_rate(sets: &[&LabelSet], num_labels: usize, alpha: f64) -> PairAnalysis {
    let mut lf = LogFactorials::new(sets.len());
    let mut pairs = 0;
    let mut significant = 0;
    for x in 0..num_labels {
        for y in x + 1..num_labels {
            pairs += 1;
            if pair_p_value(sets, x, y, &mut lf) < alpha {
                significant += 1;
            }
        }
    }
    PairAnalysis {
        pairs,
        significant,
        rate: if pairs == 0 { 0.0 } else { 100.0 * significant as f64 / pairs as f64 },
        alpha,
    }
}
