//! Robust regions for transformations with several independent
//! multiplicative parameters, each smoothed with the same Rayleigh law.
//!
//! With `β_i² ~ Exp(mean 2σ²)` a point `γ` belongs to the region when
//!
//! ```text
//! P(Σ (γ_i² − 1) β_i² ≤ r)  >  P(Σ (γ_i² − 1) β_i² ≥ θ)
//! ```
//!
//! where `r` and `θ` solve
//!
//! ```text
//! P(Σ (1 − γ_i⁻²) β_i² ≤ r) = p̲A,    P(Σ (1 − γ_i⁻²) β_i² ≥ θ) = p̄B.
//! ```
//!
//! All probabilities are Monte-Carlo estimates over one fixed matrix of
//! draws, so every estimated CDF is a monotone step function of its
//! threshold. Thresholds and membership use independent streams.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{chunk_ranges, SeededSampler, PAR_CHUNK};
use crate::{Error, Result};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_549;

pub const MIN_MC_SAMPLES: usize = 10_000;

const THRESHOLD_STREAM: u64 = 0;
const MEMBERSHIP_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiCertProblem {
    pub n: usize,
    pub sigma: f64,
    pub pa_lower: f64,
    pub pb_upper: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl MultiCertProblem {
    pub fn new(n: usize, sigma: f64, pa_lower: f64, pb_upper: f64, mc_samples: usize, seed: u64) -> Result<Self> {
        let p = MultiCertProblem {
            n,
            sigma,
            pa_lower,
            pb_upper,
            mc_samples,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("parameter count must be positive"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::domain("sigma", self.sigma));
        }
        if !(self.pa_lower > 0.0 && self.pa_lower < 1.0) {
            return Err(Error::domain("pa_lower", self.pa_lower));
        }
        if !(self.pb_upper >= 0.0 && self.pb_upper < 1.0) {
            return Err(Error::domain("pb_upper", self.pb_upper));
        }
        if self.pa_lower <= self.pb_upper {
            return Err(Error::invalid(format!(
                "pa_lower {} must exceed pb_upper {}",
                self.pa_lower, self.pb_upper
            )));
        }
        check_mc_samples(self.mc_samples)
    }
}

fn check_mc_samples(m: usize) -> Result<()> {
    if m < MIN_MC_SAMPLES {
        return Err(Error::invalid(format!(
            "mc_samples must be at least {MIN_MC_SAMPLES}, got {m}"
        )));
    }
    Ok(())
}

/// A Monte-Carlo probability with its 99% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub p: f64,
    pub half_width: f64,
    pub samples: usize,
}

impl McEstimate {
    fn from_count(hits: usize, samples: usize) -> Self {
        let p = hits as f64 / samples as f64;
        McEstimate {
            p,
            half_width: Z99 * (p * (1.0 - p) / samples as f64).sqrt(),
            samples,
        }
    }

    fn exact(p: f64, samples: usize) -> Self {
        McEstimate {
            p,
            half_width: 0.0,
            samples,
        }
    }

    pub fn lower(&self) -> f64 {
        (self.p - self.half_width).clamp(0.0, 1.0)
    }

    pub fn upper(&self) -> f64 {
        (self.p + self.half_width).clamp(0.0, 1.0)
    }
}

/// `m × n` matrix of `β²` draws, row-major.
#[derive(Debug, Clone)]
struct DrawMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DrawMatrix {
    fn generate(sampler: &SeededSampler, n: usize, m: usize, sigma: f64) -> Self {
        let scale = 2.0 * sigma * sigma;
        let total = (n * m) as u64;
        let parts: Vec<Vec<f64>> = chunk_ranges(total, PAR_CHUNK)
            .into_par_iter()
            .map(|r| sampler.uniforms(r).into_iter().map(|u| -scale * u.ln()).collect())
            .collect();
        DrawMatrix {
            n,
            values: parts.concat(),
        }
    }

    /// `Σ c_i β_i²` for every row.
    fn weighted_sums(&self, coeffs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(coeffs.len(), self.n);
        self.values
            .par_chunks(self.n)
            .map(|row| row.iter().zip(coeffs).map(|(b, c)| b * c).sum())
            .collect()
    }
}

/// Monte-Carlo estimate of `P(Σ c_i β_i² ≤ threshold)` with `β_i ~
/// Rayleigh(σ)` i.i.d.
pub fn weighted_expsum_cdf(
    coeffs: &[f64],
    sigma: f64,
    threshold: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if coeffs.is_empty() {
        return Err(Error::invalid("coefficient vector is empty"));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::domain("sigma", sigma));
    }
    if let Some(&c) = coeffs.iter().find(|c| !c.is_finite()) {
        return Err(Error::domain("coefficient", c));
    }
    if threshold.is_nan() {
        return Err(Error::domain("threshold", threshold));
    }
    check_mc_samples(mc_samples)?;
    if coeffs.iter().all(|&c| c == 0.0) {
        let p = if threshold >= 0.0 { 1.0 } else { 0.0 };
        return Ok(McEstimate::exact(p, mc_samples));
    }
    let mut sorted = coeffs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let draws = DrawMatrix::generate(&SeededSampler::new(seed, THRESHOLD_STREAM), sorted.len(), mc_samples, sigma);
    let sums = draws.weighted_sums(&sorted);
    Ok(McEstimate::from_count(sums.iter().filter(|&&s| s <= threshold).count(), mc_samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Inside,
    Outside,
    /// The two 99% intervals overlap.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionQuery {
    pub gamma: Vec<f64>,
    /// `None` for the identity point, which is adjoined without solving.
    pub r: Option<f64>,
    pub theta: Option<f64>,
    pub prob_a: Option<McEstimate>,
    pub prob_b: Option<McEstimate>,
    pub membership: Membership,
}

impl RegionQuery {
    pub fn in_region(&self) -> bool {
        self.membership == Membership::Inside
    }
}

/// Solved thresholds for one γ. `Identity` when every coefficient vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Thresholds {
    Identity,
    Solved { r: f64, theta: f64 },
}

/// A problem together with its precomputed draw matrices. Queries are pure
/// and may run concurrently.
#[derive(Debug, Clone)]
pub struct MultiCertifier {
    problem: MultiCertProblem,
    threshold_draws: DrawMatrix,
    membership_draws: DrawMatrix,
}

impl MultiCertifier {
    pub fn new(problem: MultiCertProblem) -> Result<Self> {
        problem.validate()?;
        let base = SeededSampler::new(problem.seed, THRESHOLD_STREAM);
        let gen = |s: u64| DrawMatrix::generate(&base.stream(s), problem.n, problem.mc_samples, problem.sigma);
        Ok(MultiCertifier {
            problem,
            threshold_draws: gen(THRESHOLD_STREAM),
            membership_draws: gen(MEMBERSHIP_STREAM),
        })
    }

    pub fn problem(&self) -> &MultiCertProblem {
        &self.problem
    }

    fn canonical(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        if gamma.len() != self.problem.n {
            return Err(Error::invalid(format!(
                "gamma has {} entries, problem has {}",
                gamma.len(),
                self.problem.n
            )));
        }
        if let Some(&g) = gamma.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::domain("gamma entry", g));
        }
        let mut sorted = gamma.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(sorted)
    }

    /// Thresholds `r` and `θ` for the sum `Σ (1 − γ_i⁻²) β_i²`.
    ///
    /// On the empirical step CDF, `r` is the smallest value whose CDF reaches
    /// `p̲A` and `θ` the largest whose upper tail still reaches `p̄B`; these
    /// are the limits of bisection on the estimate. `θ = +∞` when `p̄B = 0`.
    pub fn solve_thresholds(&self, gamma: &[f64]) -> Result<Thresholds> {
        let sorted = self.canonical(gamma)?;
        if sorted.iter().all(|&g| g == 1.0) {
            return Ok(Thresholds::Identity);
        }
        let coeffs: Vec<f64> = sorted.iter().map(|g| 1.0 - g.powi(-2)).collect();
        let mut sums = self.threshold_draws.weighted_sums(&coeffs);
        let m = sums.len();
        let pa = self.problem.pa_lower;
        let pb = self.problem.pb_upper;

        let k_r = ((pa * m as f64).ceil() as usize).clamp(1, m);
        let r = order_statistic(&mut sums, k_r);
        let theta = if pb == 0.0 {
            f64::INFINITY
        } else {
            let k_t = ((m as f64 + 1.0 - pb * m as f64).floor() as usize).clamp(1, m);
            order_statistic(&mut sums, k_t)
        };
        Ok(Thresholds::Solved { r, theta })
    }

    pub fn in_robust_region(&self, gamma: &[f64]) -> Result<RegionQuery> {
        let (r, theta) = match self.solve_thresholds(gamma)? {
            Thresholds::Identity => {
                return Ok(RegionQuery {
                    gamma: gamma.to_vec(),
                    r: None,
                    theta: None,
                    prob_a: None,
                    prob_b: None,
                    membership: Membership::Inside,
                })
            }
            Thresholds::Solved { r, theta } => (r, theta),
        };
        let sorted = self.canonical(gamma)?;
        let coeffs: Vec<f64> = sorted.iter().map(|g| g * g - 1.0).collect();
        let sums = self.membership_draws.weighted_sums(&coeffs);
        let m = sums.len();
        let below = sums.iter().filter(|&&s| s <= r).count();
        let above = sums.iter().filter(|&&s| s >= theta).count();
        let a = McEstimate::from_count(below, m);
        let b = McEstimate::from_count(above, m);
        let membership = if a.lower() > b.upper() {
            Membership::Inside
        } else if a.upper() < b.lower() {
            Membership::Outside
        } else {
            Membership::Unknown
        };
        Ok(RegionQuery {
            gamma: gamma.to_vec(),
            r: Some(r),
            theta: Some(theta),
            prob_a: Some(a),
            prob_b: Some(b),
            membership,
        })
    }

    /// Membership for every point, evaluated in parallel.
    pub fn scan(&self, points: &[Vec<f64>]) -> Result<Vec<RegionQuery>> {
        points.par_iter().map(|g| self.in_robust_region(g)).collect()
    }

    /// Membership on the Cartesian product of per-axis grids.
    pub fn scan_grid(&self, axes: &[Vec<f64>]) -> Result<Vec<RegionQuery>> {
        if axes.len() != self.problem.n {
            return Err(Error::invalid(format!(
                "{} grid axes for {} parameters",
                axes.len(),
                self.problem.n
            )));
        }
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&g| {
                        let mut q = p.clone();
                        q.push(g);
                        q
                    })
                })
                .collect();
        }
        self.scan(&points)
    }
}

/// The `k`-th smallest (1-based). Reorders `values`.
fn order_statistic(values: &mut [f64], k: usize) -> f64 {
    *values.select_nth_unstable_by(k - 1, f64::total_cmp).1
}

/// One-shot convenience wrapper around [`MultiCertifier`].
pub fn solve_thresholds(problem: &MultiCertProblem, gamma: &[f64]) -> Result<Thresholds> {
    MultiCertifier::new(*problem)?.solve_thresholds(gamma)
}

/// One-shot convenience wrapper around [`MultiCertifier`].
pub fn in_robust_region(problem: &MultiCertProblem, gamma: &[f64]) -> Result<RegionQuery> {
    MultiCertifier::new(*problem)?.in_robust_region(gamma)
}
