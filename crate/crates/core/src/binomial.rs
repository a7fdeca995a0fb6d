//! Exact binomial tail probabilities, computed in log space from a table of
//! log-factorials so that trial counts in the 10⁵ range stay accurate.

/// Binomial law with a fixed number of trials.
#[derive(Debug, Clone)]
pub struct Binomial {
    n: u64,
    // ln(i!) for i in 0..=n
    ln_fact: Vec<f64>,
}

impl Binomial {
    pub fn new(n: u64) -> Self {
        let mut ln_fact = Vec::with_capacity(n as usize + 1);
        let mut acc = 0.0f64;
        ln_fact.push(0.0);
        for i in 1..=n {
            acc += (i as f64).ln();
            ln_fact.push(acc);
        }
        Binomial { n, ln_fact }
    }

    pub fn trials(&self) -> u64 {
        self.n
    }

    fn ln_choose(&self, k: u64) -> f64 {
        self.ln_fact[self.n as usize] - self.ln_fact[k as usize] - self.ln_fact[(self.n - k) as usize]
    }

    /// ln P(X = k).
    pub fn ln_pmf(&self, k: u64, p: f64) -> f64 {
        if k > self.n {
            return f64::NEG_INFINITY;
        }
        if p <= 0.0 {
            return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
        }
        if p >= 1.0 {
            return if k == self.n { 0.0 } else { f64::NEG_INFINITY };
        }
        self.ln_choose(k) + k as f64 * p.ln() + (self.n - k) as f64 * (-p).ln_1p()
    }

    fn sum_range(&self, from: u64, to: u64, p: f64) -> f64 {
        if from > to {
            return 0.0;
        }
        let terms: Vec<f64> = (from..=to).map(|i| self.ln_pmf(i, p)).collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return 0.0;
        }
        let s: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
        (max + s.ln()).exp().min(1.0)
    }

    /// P(X ≥ k).
    pub fn upper_tail(&self, k: u64, p: f64) -> f64 {
        if k == 0 {
            return 1.0;
        }
        if k > self.n {
            return 0.0;
        }
        self.sum_range(k, self.n, p)
    }

    /// P(X ≤ k).
    pub fn lower_tail(&self, k: u64, p: f64) -> f64 {
        if k >= self.n {
            return 1.0;
        }
        self.sum_range(0, k, p)
    }
}
