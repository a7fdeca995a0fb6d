//! Certification when every gamma-corrected image is stored with 8 bits per
//! channel.
//!
//! The base classifier is first smoothed with additive Gaussian noise, which
//! makes it robust in an ℓ2 ball. A gamma draw only counts for the candidate
//! label when that ball covers the conversion-error bound `E`. The outer
//! Rayleigh certificate is then computed from probabilities shifted by the
//! total mistake budget
//!
//! ```text
//! ρ = α + (1 − q_E) + α_E
//! ```
//!
//! and clipped to the attack interval Γ for which `E` was estimated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binomial::Binomial;
use crate::cert_engine::{
    certify_rayleigh_with, clopper_pearson, AbstainReason, CertOutcome, Certificate, ProbBounds, SampleCounts, Side,
};
use crate::distributions::{RayleighParams, SeededSampler, SmoothingDistribution};
use crate::smoothing_runtime::{BaseClassifier, Label, LabelCounts};
use crate::transforms::{conversion_error, gamma_correct, quantize8, GammaFactor, ImageTensor};
use crate::{normal, Error, Result};

const GAMMA_STREAM: u64 = 0;
const SELECTION_STREAM: u64 = 1;
/// Noise for gamma draw `j` comes from stream `INNER_STREAM_BASE + j`.
const INNER_STREAM_BASE: u64 = 2;

/// An attack interval `[min, max]` containing 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct GammaInterval {
    min: f64,
    max: f64,
}

impl GammaInterval {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && min > 0.0) {
            return Err(Error::domain("gamma interval minimum", min));
        }
        if !max.is_finite() || !(min <= 1.0 && 1.0 <= max) || min == max {
            return Err(Error::invalid(format!(
                "gamma interval [{min}, {max}] must satisfy 0 < min ≤ 1 ≤ max, min < max"
            )));
        }
        Ok(GammaInterval { min, max })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn contains_interval(&self, other: &GammaInterval) -> bool {
        self.min <= other.min && other.max <= self.max
    }
}

impl TryFrom<[f64; 2]> for GammaInterval {
    type Error = Error;

    fn try_from([lo, hi]: [f64; 2]) -> Result<Self> {
        GammaInterval::new(lo, hi)
    }
}

impl From<GammaInterval> for [f64; 2] {
    fn from(g: GammaInterval) -> [f64; 2] {
        [g.min, g.max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "q_E")]
    pub q_e: f64,
    #[serde(rename = "alpha_E")]
    pub alpha_e: f64,
    /// A floor on the total budget; the value used is the larger of this and
    /// the sum computed from α.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub gamma_interval: GammaInterval,
}

impl ErrorBudget {
    pub fn new(e: f64, q_e: f64, alpha_e: f64, gamma_interval: GammaInterval) -> Result<Self> {
        let b = ErrorBudget {
            e,
            q_e,
            alpha_e,
            rho: None,
            gamma_interval,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        self.rho = Some(rho);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e.is_finite() && self.e >= 0.0) {
            return Err(Error::domain("E", self.e));
        }
        if !(self.q_e > 0.0 && self.q_e <= 1.0) {
            return Err(Error::domain("q_E", self.q_e));
        }
        if !(0.0..1.0).contains(&self.alpha_e) {
            return Err(Error::domain("alpha_E", self.alpha_e));
        }
        if let Some(r) = self.rho {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::domain("rho", r));
            }
        }
        Ok(())
    }

    /// Total budget at certification confidence `1 − alpha`.
    pub fn effective_rho(&self, alpha: f64) -> Result<f64> {
        let computed = error_budget(alpha, self.q_e, self.alpha_e)?.rho;
        Ok(self.rho.map_or(computed, |r| r.max(computed)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub rho: f64,
    /// `false` when ρ ≥ 1/2: every certification abstains.
    pub feasible: bool,
}

/// `ρ = α + (1 − q_E) + α_E`, rounded to 15 significant digits so that
/// decimal inputs give the double nearest the decimal sum.
pub fn error_budget(alpha: f64, q_e: f64, alpha_e: f64) -> Result<BudgetCheck> {
    for (what, v) in [("alpha", alpha), ("q_E", q_e), ("alpha_E", alpha_e)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(what, v));
        }
    }
    let raw = alpha + (1.0 - q_e) + alpha_e;
    let rho: f64 = format!("{raw:.14e}").parse().expect("formatted float parses");
    Ok(BudgetCheck {
        rho,
        feasible: rho < 0.5,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustedBounds {
    pub pa_lower: f64,
    pub pb_upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Adjustment {
    Adjusted(AdjustedBounds),
    Abstain(AbstainReason),
}

/// Shifts the bounds by ρ: `p̲A − ρ`, `p̄B + ρ`. Abstains when they cross or
/// the lower bound is no longer above 1/2.
pub fn adjust_probabilities(pa_lower: f64, pb_upper: f64, rho: f64) -> Result<Adjustment> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::domain("rho", rho));
    }
    let pa = pa_lower - rho;
    let pb = pb_upper + rho;
    Ok(if pa <= pb {
        Adjustment::Abstain(AbstainReason::BoundsCross {
            pa_lower: pa,
            pb_upper: pb,
        })
    } else if pa <= 0.5 {
        Adjustment::Abstain(AbstainReason::LowConfidence { pa_lower: pa })
    } else {
        Adjustment::Adjusted(AdjustedBounds {
            pa_lower: pa,
            pb_upper: pb,
        })
    })
}

/// Certified ℓ2 radius `σ·Φ⁻¹(p̲A)` of a Gaussian-smoothed classifier, or
/// `None` when `p̲A ≤ 1/2`. Zero noise gives radius 0.
pub fn gaussian_l2_radius(pa_lower: f64, sigma_gauss: f64) -> Result<Option<f64>> {
    if !(sigma_gauss.is_finite() && sigma_gauss >= 0.0) {
        return Err(Error::domain("sigma_gauss", sigma_gauss));
    }
    if !(0.0..=1.0).contains(&pa_lower) {
        return Err(Error::domain("pa_lower", pa_lower));
    }
    if pa_lower <= 0.5 {
        return Ok(None);
    }
    if sigma_gauss == 0.0 {
        return Ok(Some(0.0));
    }
    Ok(Some(sigma_gauss * normal::quantile(pa_lower)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealisticConfig {
    pub n_eps: u64,
    pub n_gamma: u64,
    /// 0 disables the inner noise.
    pub sigma_gauss: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl RealisticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_eps == 0 || self.n_gamma == 0 {
            return Err(Error::invalid("n_eps and n_gamma must be positive"));
        }
        if self.n_eps.checked_mul(self.n_gamma).is_none() {
            return Err(Error::invalid("n_eps × n_gamma overflows"));
        }
        if !(self.sigma_gauss.is_finite() && self.sigma_gauss >= 0.0) {
            return Err(Error::domain("sigma_gauss", self.sigma_gauss));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain("alpha", self.alpha));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> u64 {
        self.n_eps * self.n_gamma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealisticResult {
    pub label: Label,
    /// Inner-smoothed label at γ = 1; `None` when the budget was infeasible.
    pub candidate: Option<usize>,
    pub rho: f64,
    /// Clopper–Pearson lower bound on the hit rate, before adjustment.
    pub pa_lower: Option<f64>,
    pub adjusted: Option<AdjustedBounds>,
    /// Clipped to the budget's attack interval.
    pub certificate: Option<Certificate>,
    pub counts: Option<SampleCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abstain_reason: Option<AbstainReason>,
    pub gamma_interval: GammaInterval,
}

impl RealisticResult {
    fn abstain(reason: AbstainReason, rho: f64, budget: &ErrorBudget) -> Self {
        RealisticResult {
            label: Label::Abstain,
            candidate: None,
            rho,
            pa_lower: None,
            adjusted: None,
            certificate: None,
            counts: None,
            abstain_reason: Some(reason),
            gamma_interval: budget.gamma_interval,
        }
    }
}

/// Labels of `base(clip(x + N(0, σ²I)))` for `count` noise draws of `stream`.
fn gaussian_label_counts(
    base: &dyn BaseClassifier,
    x: &ImageTensor,
    sigma: f64,
    sampler: &SeededSampler,
    count: u64,
) -> Result<LabelCounts> {
    let d = x.len() as u64;
    let mut counts = LabelCounts::default();
    if sigma == 0.0 {
        counts.0.insert(base.classify(x)?, count);
        return Ok(counts);
    }
    for i in 0..count {
        let noise = sampler.uniforms(i * d..(i + 1) * d);
        let noisy: Vec<f64> = x
            .data()
            .iter()
            .zip(noise)
            .map(|(v, u)| v + sigma * normal::quantile(u))
            .collect();
        let label = base.classify(&ImageTensor::from_clamped(x.dims().to_vec(), noisy)?)?;
        *counts.0.entry(label).or_default() += 1;
    }
    Ok(counts)
}

/// Double smoothing: Gaussian noise inside, Rayleigh gamma factors outside.
pub fn certify_realistic(
    base: &dyn BaseClassifier,
    x: &ImageTensor,
    cfg: &RealisticConfig,
    budget: &ErrorBudget,
) -> Result<RealisticResult> {
    cfg.validate()?;
    budget.validate()?;
    let rho = budget.effective_rho(cfg.alpha)?;
    if rho >= 0.5 {
        return Ok(RealisticResult::abstain(AbstainReason::BudgetInfeasible { rho }, rho, budget));
    }
    let root = SeededSampler::new(cfg.seed, GAMMA_STREAM);
    let candidate = gaussian_label_counts(base, x, cfg.sigma_gauss, &root.stream(SELECTION_STREAM), cfg.n_eps)?
        .mode()
        .expect("n_eps ≥ 1");

    let params = RayleighParams::unit_median();
    let dist = SmoothingDistribution::rayleigh(params);
    let betas = dist.par_sample(&root, cfg.n_gamma as usize)?;
    let hits = betas
        .par_iter()
        .enumerate()
        .map(|(j, &beta)| -> Result<u64> {
            let xb = quantize8(&gamma_correct(x, GammaFactor::new(beta)?));
            let sampler = root.stream(INNER_STREAM_BASE + j as u64);
            let inner = gaussian_label_counts(base, &xb, cfg.sigma_gauss, &sampler, cfg.n_eps)?;
            let k = SampleCounts::new(inner.get(candidate), cfg.n_eps)?;
            let pa = clopper_pearson(k, cfg.alpha, Side::Lower)?;
            Ok(match gaussian_l2_radius(pa, cfg.sigma_gauss)? {
                Some(r) if r >= budget.e => 1,
                _ => 0,
            })
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;

    let counts = SampleCounts::new(hits, cfg.n_gamma)?;
    let pa_lower = clopper_pearson(counts, cfg.alpha, Side::Lower)?;
    let mut result = RealisticResult {
        label: Label::Abstain,
        candidate: Some(candidate),
        rho,
        pa_lower: Some(pa_lower),
        adjusted: None,
        certificate: None,
        counts: Some(counts),
        abstain_reason: None,
        gamma_interval: budget.gamma_interval,
    };
    let adjusted = match adjust_probabilities(pa_lower, 1.0 - pa_lower, rho)? {
        Adjustment::Abstain(reason) => {
            result.abstain_reason = Some(reason);
            return Ok(result);
        }
        Adjustment::Adjusted(a) => a,
    };
    result.adjusted = Some(adjusted);
    let bounds = ProbBounds::new(adjusted.pa_lower, adjusted.pb_upper, 1.0 - rho)?;
    match certify_rayleigh_with(&bounds, params)? {
        CertOutcome::Certified(c) => {
            let g = budget.gamma_interval;
            result.label = Label::Class(candidate);
            result.certificate = Some(c.clipped(g.min(), g.max()));
        }
        CertOutcome::Abstain(reason) => result.abstain_reason = Some(reason),
    }
    Ok(result)
}

/// Attack factors over which the conversion error is maximized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaGrid {
    /// Evenly spaced, both endpoints included.
    Points(usize),
    /// Multiples of the step inside the interval. Grids of nested intervals
    /// are nested, so their maxima are ordered.
    Lattice(f64),
}

impl Default for GammaGrid {
    fn default() -> Self {
        GammaGrid::Points(64)
    }
}

impl GammaGrid {
    pub fn points(&self, interval: &GammaInterval) -> Result<Vec<f64>> {
        let (lo, hi) = (interval.min(), interval.max());
        let pts: Vec<f64> = match *self {
            GammaGrid::Points(k) => {
                if k < 2 {
                    return Err(Error::invalid(format!("grid needs at least 2 points, got {k}")));
                }
                (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
            }
            GammaGrid::Lattice(step) => {
                if !(step.is_finite() && step > 0.0) {
                    return Err(Error::domain("grid step", step));
                }
                let first = (lo / step - 1e-9).ceil() as u64;
                let last = (hi / step + 1e-9).floor() as u64;
                (first..=last).map(|k| k as f64 * step).filter(|&g| g > 0.0).collect()
            }
        };
        if pts.is_empty() {
            return Err(Error::invalid("gamma grid has no points inside the interval"));
        }
        Ok(pts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionErrorConfig {
    pub gamma_interval: GammaInterval,
    #[serde(rename = "q_E")]
    pub q_e: f64,
    #[serde(rename = "alpha_E")]
    pub alpha_e: f64,
    #[serde(default)]
    pub grid: GammaGrid,
    /// Rayleigh draws of β per dataset element.
    pub draws_per_input: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionErrorEstimate {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "q_E")]
    pub q_e: f64,
    #[serde(rename = "alpha_E")]
    pub alpha_e: f64,
    pub samples: usize,
    /// 1-based rank of the order statistic returned as `E`.
    pub order_index: usize,
    pub gamma_interval: GammaInterval,
    pub grid_size: usize,
    pub caveat: String,
}

/// Distribution-free upper confidence bound on the `q`-quantile: the
/// smallest order statistic `x_(k)` with `P(Bin(m, q) ≥ k) ≤ α`, so that
/// `x_(k)` falls below the quantile with probability at most α.
///
/// Returns the bound and `k`.
pub fn upper_quantile_bound(samples: &[f64], q: f64, alpha: f64) -> Result<(f64, usize)> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::domain("quantile level", q));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain("alpha", alpha));
    }
    if let Some(&v) = samples.iter().find(|v| v.is_nan()) {
        return Err(Error::domain("sample", v));
    }
    let m = samples.len();
    let needed = min_samples_for_quantile_bound(q, alpha);
    if m < needed {
        return Err(Error::InsufficientSamples { needed, available: m });
    }
    let bin = Binomial::new(m as u64);
    // the tail decreases in k and is ≤ α at k = m
    let (mut lo, mut hi) = (1usize, m);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if bin.upper_tail(mid as u64, q) <= alpha {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut sorted = samples.to_vec();
    let value = *sorted.select_nth_unstable_by(lo - 1, f64::total_cmp).1;
    Ok((value, lo))
}

/// Smallest `m` with `q^m ≤ α`.
pub fn min_samples_for_quantile_bound(q: f64, alpha: f64) -> usize {
    let mut m = (alpha.ln() / q.ln()).ceil().max(1.0) as usize;
    while m > 1 && q.powi(m as i32 - 1) <= alpha {
        m -= 1;
    }
    while q.powi(m as i32) > alpha {
        m += 1;
    }
    m
}

/// Estimates `E` with `P(max_{γ∈Γ} ‖ε(β, γ, x)‖₂ ≤ E) ≥ q_E` at confidence
/// `1 − α_E`, over `x` from `dataset` and `β ~ Rayleigh` (unit median).
pub fn estimate_conversion_error(
    dataset: &[ImageTensor],
    cfg: &ConversionErrorConfig,
) -> Result<ConversionErrorEstimate> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if cfg.draws_per_input == 0 {
        return Err(Error::invalid("draws_per_input must be positive"));
    }
    let grid = cfg.grid.points(&cfg.gamma_interval)?;
    let gammas: Vec<GammaFactor> = grid.iter().map(|&g| GammaFactor::new(g)).collect::<Result<_>>()?;
    let dist = SmoothingDistribution::rayleigh(RayleighParams::unit_median());
    let sampler = SeededSampler::new(cfg.seed, 0);
    let per = cfg.draws_per_input as u64;
    let maxima: Vec<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, x)| -> Result<Vec<f64>> {
            let i = i as u64;
            dist.sample_range(&sampler, i * per..(i + 1) * per)
                .into_iter()
                .map(|beta| {
                    let beta = GammaFactor::new(beta)?;
                    Ok(gammas.iter().map(|&g| conversion_error(x, beta, g)).fold(0.0, f64::max))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let (e, order_index) = upper_quantile_bound(&maxima, cfg.q_e, cfg.alpha_e)?;
    Ok(ConversionErrorEstimate {
        e,
        q_e: cfg.q_e,
        alpha_e: cfg.alpha_e,
        samples: maxima.len(),
        order_index,
        gamma_interval: cfg.gamma_interval,
        grid_size: grid.len(),
        caveat: "maximum over gamma is taken on a finite grid".into(),
    })
}
