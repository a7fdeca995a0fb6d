//! Single-parameter certificates for Rayleigh smoothing, exact
//! Clopper–Pearson bounds, and log-space baseline certificates.
//!
//! For a smoothing law with CDF `F`, an attack factor `γ` applied before
//! smoothing turns `β` into `γβ`, whose CDF at `F⁻¹(q)` is
//! `F(γ⁻¹F⁻¹(q))`. For the Rayleigh law this composite does not depend on σ:
//!
//! ```text
//! F(γ⁻¹ F⁻¹(q)) = 1 − (1 − q)^(1/γ²)
//! ```
//!
//! which is what [`reduced_cdf_map`] evaluates. The certificate endpoints are
//! the unique roots of
//!
//! ```text
//! h(γ1, p̄B) + h(γ1, 1 − p̲A) = 1,   γ1 ∈ (0, 1]
//! h(γ2, p̲A) + h(γ2, 1 − p̄B) = 1,   γ2 ∈ [1, ∞)
//! ```

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::binomial::Binomial;
use crate::distributions::{DistributionKind, RayleighParams, SmoothingDistribution};
use crate::root::{self, Tolerance};
use crate::{normal, Error, Result};

/// Smallest γ1 searched for. A root below it is reported as the floor itself.
pub const GAMMA1_FLOOR: f64 = 1e-9;
/// Largest γ2 searched for. Beyond it the certificate is unbounded above.
pub const GAMMA2_CAP: f64 = 1e9;

const ROOT_TOL: Tolerance = Tolerance {
    abs: 1e-12,
    max_iter: 200,
};
const CP_TOL: Tolerance = Tolerance {
    abs: 1e-10,
    max_iter: 200,
};

/// Confidence bounds on the top-class and runner-up probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbBounds {
    pub pa_lower: f64,
    pub pb_upper: f64,
    /// 1 − α.
    pub confidence: f64,
}

impl ProbBounds {
    pub fn new(pa_lower: f64, pb_upper: f64, confidence: f64) -> Result<Self> {
        if !(pa_lower > 0.0 && pa_lower < 1.0) {
            return Err(Error::domain("pa_lower", pa_lower));
        }
        if !(0.0..1.0).contains(&pb_upper) {
            return Err(Error::domain("pb_upper", pb_upper));
        }
        if !(confidence > 0.0 && confidence <= 1.0) {
            return Err(Error::domain("confidence", confidence));
        }
        Ok(ProbBounds {
            pa_lower,
            pb_upper,
            confidence,
        })
    }

    /// Uses the trivial runner-up bound p̄B = 1 − p̲A.
    pub fn trivial(pa_lower: f64, confidence: f64) -> Result<Self> {
        ProbBounds::new(pa_lower, 1.0 - pa_lower, confidence)
    }

    pub fn is_certifiable(&self) -> bool {
        self.pa_lower > self.pb_upper
    }
}

/// Sampled hit counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub successes: u64,
    pub trials: u64,
}

impl SampleCounts {
    pub fn new(successes: u64, trials: u64) -> Result<Self> {
        if trials == 0 {
            return Err(Error::invalid("trials must be positive"));
        }
        if successes > trials {
            return Err(Error::invalid(format!(
                "successes ({successes}) exceed trials ({trials})"
            )));
        }
        Ok(SampleCounts { successes, trials })
    }

    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertMethod {
    Bisection,
    ClosedForm,
    Reciprocal,
    LogSpace,
}

/// A multiplicative robustness interval: every attack factor strictly between
/// `gamma1` and `gamma2` leaves the smoothed prediction unchanged.
///
/// `gamma2` is `f64::INFINITY` when unbounded; it serializes as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub gamma1: f64,
    #[serde(with = "unbounded_as_null")]
    pub gamma2: f64,
    pub method: CertMethod,
    pub distribution: SmoothingDistribution,
    pub confidence: f64,
}

mod unbounded_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Certificate {
    pub fn is_unbounded(&self) -> bool {
        self.gamma2.is_infinite()
    }

    /// Strict membership: γ1 < γ < γ2. The identity γ = 1 is always included.
    pub fn contains(&self, gamma: f64) -> bool {
        gamma == 1.0 || (self.gamma1 < gamma && gamma < self.gamma2)
    }

    /// Intersection with `[lo, hi]`, which must contain 1.
    pub fn clipped(&self, lo: f64, hi: f64) -> Certificate {
        Certificate {
            gamma1: self.gamma1.max(lo),
            gamma2: self.gamma2.min(hi),
            ..*self
        }
    }
}

/// Why a certificate could not be issued.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum AbstainReason {
    /// p̲A ≤ p̄B.
    BoundsCross { pa_lower: f64, pb_upper: f64 },
    /// p̲A ≤ 1/2.
    LowConfidence { pa_lower: f64 },
    /// The total mistake budget ρ is at least 1/2.
    BudgetInfeasible { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CertOutcome {
    Certified(Certificate),
    Abstain(AbstainReason),
}

impl CertOutcome {
    pub fn certificate(&self) -> Option<&Certificate> {
        match self {
            CertOutcome::Certified(c) => Some(c),
            CertOutcome::Abstain(_) => None,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, CertOutcome::Abstain(_))
    }
}

/// h(γ, q) = 1 − (1 − q)^(1/γ²), the Rayleigh composite F(γ⁻¹F⁻¹(q)).
pub fn reduced_cdf_map(gamma: f64, q: f64) -> Result<f64> {
    if !(gamma > 0.0) || gamma.is_nan() {
        return Err(Error::domain("gamma", gamma));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::domain("probability", q));
    }
    Ok(reduced(gamma, q))
}

fn reduced(gamma: f64, q: f64) -> f64 {
    -((-q).ln_1p() / (gamma * gamma)).exp_m1()
}

fn check_open_bounds(bounds: &ProbBounds) -> Result<()> {
    if !(bounds.pa_lower > 0.0 && bounds.pa_lower < 1.0) {
        return Err(Error::domain("pa_lower", bounds.pa_lower));
    }
    if !(bounds.pb_upper > 0.0 && bounds.pb_upper < 1.0) {
        return Err(Error::domain("pb_upper", bounds.pb_upper));
    }
    Ok(())
}

/// Solves the two endpoint equations given their residual functions, both
/// decreasing in γ with a sign change at γ = 1.
fn solve_endpoints<F1, F2>(lower_residual: F1, upper_residual: F2) -> (f64, f64)
where
    F1: Fn(f64) -> f64,
    F2: Fn(f64) -> f64,
{
    // Picking the inner end of each final bracket keeps the interval sound.
    let gamma1 = match root::expand_down(&lower_residual, 1.0, GAMMA1_FLOOR) {
        Some((lo, hi)) => root::bisect(&lower_residual, lo, hi, ROOT_TOL)
            .map(|b| b.hi)
            .unwrap_or(hi),
        None => GAMMA1_FLOOR,
    };
    let gamma2 = match root::expand_up(&upper_residual, 1.0, GAMMA2_CAP) {
        Some((lo, hi)) => root::bisect(&upper_residual, lo, hi, ROOT_TOL)
            .map(|b| b.lo)
            .unwrap_or(lo),
        None => f64::INFINITY,
    };
    (gamma1.min(1.0), gamma2.max(1.0))
}

/// Rayleigh certificate by bracketed bisection on the reduced equations.
///
/// The result holds for every Rayleigh scale σ.
pub fn certify_rayleigh(bounds: &ProbBounds) -> Result<CertOutcome> {
    certify_rayleigh_with(bounds, RayleighParams::unit_median())
}

/// As [`certify_rayleigh`], recording `params` as the smoothing law.
pub fn certify_rayleigh_with(bounds: &ProbBounds, params: RayleighParams) -> Result<CertOutcome> {
    check_open_bounds(bounds)?;
    if !bounds.is_certifiable() {
        return Ok(abstain_cross(bounds));
    }
    let (pa, pb) = (bounds.pa_lower, bounds.pb_upper);
    let (gamma1, gamma2) = solve_endpoints(
        |g| reduced(g, pb) + reduced(g, 1.0 - pa) - 1.0,
        |g| reduced(g, pa) + reduced(g, 1.0 - pb) - 1.0,
    );
    Ok(CertOutcome::Certified(Certificate {
        gamma1,
        gamma2,
        method: CertMethod::Bisection,
        distribution: SmoothingDistribution::rayleigh(params),
        confidence: bounds.confidence,
    }))
}

/// Rayleigh certificate solved directly on `F(γ⁻¹F⁻¹(·))` with the explicit
/// CDF and quantile of `params`. Agrees with [`certify_rayleigh`] for every σ;
/// kept as an independent route for cross-checking.
pub fn certify_rayleigh_explicit(bounds: &ProbBounds, params: RayleighParams) -> Result<CertOutcome> {
    check_open_bounds(bounds)?;
    if !bounds.is_certifiable() {
        return Ok(abstain_cross(bounds));
    }
    let (pa, pb) = (bounds.pa_lower, bounds.pb_upper);
    let f = |z: f64| params.cdf_unchecked(z);
    let q = |p: f64| params.quantile_unchecked(p);
    let (q_pb, q_not_pa, q_pa, q_not_pb) = (q(pb), q(1.0 - pa), q(pa), q(1.0 - pb));
    let (gamma1, gamma2) = solve_endpoints(
        |g| f(q_pb / g) + f(q_not_pa / g) - 1.0,
        |g| f(q_pa / g) + f(q_not_pb / g) - 1.0,
    );
    Ok(CertOutcome::Certified(Certificate {
        gamma1,
        gamma2,
        method: CertMethod::Bisection,
        distribution: SmoothingDistribution::rayleigh(params),
        confidence: bounds.confidence,
    }))
}

/// Closed-form Rayleigh certificate for the trivial runner-up bound:
/// γ1 = √(ln p̲A / ln ½), γ2 = √(ln(1 − p̲A) / ln ½).
pub fn certify_rayleigh_closed_form(pa_lower: f64, confidence: f64) -> Result<CertOutcome> {
    if !(pa_lower > 0.0 && pa_lower < 1.0) {
        return Err(Error::domain("pa_lower", pa_lower));
    }
    if pa_lower <= 0.5 {
        return Ok(CertOutcome::Abstain(AbstainReason::LowConfidence { pa_lower }));
    }
    let gamma1 = (pa_lower.ln() / -LN_2).sqrt();
    let gamma2 = ((-pa_lower).ln_1p() / -LN_2).sqrt();
    Ok(CertOutcome::Certified(Certificate {
        gamma1,
        gamma2,
        method: CertMethod::ClosedForm,
        distribution: SmoothingDistribution::rayleigh(RayleighParams::unit_median()),
        confidence,
    }))
}

/// Certificate for smoothing with 1/β, β ~ Rayleigh: the Rayleigh interval
/// mapped through γ ↦ 1/γ.
pub fn certify_inverse_rayleigh(bounds: &ProbBounds) -> Result<CertOutcome> {
    certify_inverse_rayleigh_with(bounds, RayleighParams::unit_median())
}

pub fn certify_inverse_rayleigh_with(bounds: &ProbBounds, params: RayleighParams) -> Result<CertOutcome> {
    Ok(match certify_rayleigh_with(bounds, params)? {
        CertOutcome::Certified(c) => CertOutcome::Certified(reciprocal(&c, params)),
        abstain => abstain,
    })
}

fn reciprocal(c: &Certificate, params: RayleighParams) -> Certificate {
    let gamma1 = if c.gamma2.is_infinite() {
        GAMMA1_FLOOR
    } else {
        1.0 / c.gamma2
    };
    Certificate {
        gamma1,
        gamma2: 1.0 / c.gamma1,
        method: CertMethod::Reciprocal,
        distribution: SmoothingDistribution::inverse_rayleigh(params),
        confidence: c.confidence,
    }
}

fn abstain_cross(bounds: &ProbBounds) -> CertOutcome {
    CertOutcome::Abstain(AbstainReason::BoundsCross {
        pa_lower: bounds.pa_lower,
        pb_upper: bounds.pb_upper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower,
    Upper,
}

/// One-sided exact Clopper–Pearson bound at level 1 − α.
///
/// `Lower` is the largest p with P(Bin(n, p) ≥ k) ≤ α; `Upper` the smallest p
/// with P(Bin(n, p) ≤ k) ≤ α. Both are found by bisection on the exact tail,
/// rounded outward to within 1e-10.
pub fn clopper_pearson(counts: SampleCounts, alpha: f64, side: Side) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain("alpha", alpha));
    }
    let SampleCounts { successes: k, trials: n } = counts;
    let bin = Binomial::new(n);
    match side {
        Side::Lower => {
            if k == 0 {
                return Ok(0.0);
            }
            let b = root::bisect(|p| bin.upper_tail(k, p) - alpha, 0.0, 1.0, CP_TOL)
                .expect("binomial upper tail spans [0, 1]");
            Ok(b.lo)
        }
        Side::Upper => {
            if k == n {
                return Ok(1.0);
            }
            let b = root::bisect(|p| bin.lower_tail(k, p) - alpha, 0.0, 1.0, CP_TOL)
                .expect("binomial lower tail spans [0, 1]");
            Ok(b.hi)
        }
    }
}

/// Where the runner-up bound p̄B comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerUp {
    /// p̄B = 1 − p̲A; the whole α goes to p̲A.
    Trivial,
    /// Clopper–Pearson upper bound on these counts; α is split evenly.
    Counts(SampleCounts),
}

/// Estimation-phase counts to certificate, abstaining when p̲A ≤ 1/2.
pub fn certify_from_counts(
    dist: &SmoothingDistribution,
    top: SampleCounts,
    runner_up: RunnerUp,
    alpha: f64,
) -> Result<CertOutcome> {
    let alpha_a = match runner_up {
        RunnerUp::Trivial => alpha,
        RunnerUp::Counts(_) => alpha / 2.0,
    };
    let pa_lower = clopper_pearson(top, alpha_a, Side::Lower)?;
    if pa_lower <= 0.5 {
        return Ok(CertOutcome::Abstain(AbstainReason::LowConfidence { pa_lower }));
    }
    let pb_upper = match runner_up {
        RunnerUp::Trivial => 1.0 - pa_lower,
        RunnerUp::Counts(c) => clopper_pearson(c, alpha / 2.0, Side::Upper)?,
    };
    if dist.kind() == DistributionKind::Rayleigh && runner_up == RunnerUp::Trivial {
        let mut out = certify_rayleigh_closed_form(pa_lower, 1.0 - alpha)?;
        if let CertOutcome::Certified(c) = &mut out {
            c.distribution = *dist;
        }
        return Ok(out);
    }
    certify_bounds(dist, &ProbBounds::new(pa_lower, pb_upper, 1.0 - alpha)?)
}

/// Certificate for `bounds` under any supported smoothing law.
pub fn certify_bounds(dist: &SmoothingDistribution, bounds: &ProbBounds) -> Result<CertOutcome> {
    match dist.kind() {
        DistributionKind::Rayleigh => certify_rayleigh_with(bounds, RayleighParams::new(dist.scale())?),
        DistributionKind::InverseRayleigh => {
            certify_inverse_rayleigh_with(bounds, RayleighParams::new(dist.scale())?)
        }
        _ => log_space_certificate(dist, bounds),
    }
}

/// Additive radius in log space for a symmetric 1-D smoothing law, or `None`
/// to abstain.
///
/// - Gaussian(s): R = (s/2)(Φ⁻¹(p̲A) − Φ⁻¹(p̄B))
/// - Laplace(s):  R = −s·ln(2(1 − p̲A)), requires p̲A > 1/2 (uses p̲A only)
/// - Uniform[−s, s]: R = s·(p̲A − p̄B)
pub fn log_space_additive_radius(kind: DistributionKind, scale: f64, pa_lower: f64, pb_upper: f64) -> Result<Option<f64>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::domain("scale", scale));
    }
    if !(pa_lower > 0.0 && pa_lower < 1.0) {
        return Err(Error::domain("pa_lower", pa_lower));
    }
    if !(0.0..1.0).contains(&pb_upper) {
        return Err(Error::domain("pb_upper", pb_upper));
    }
    if pa_lower <= pb_upper {
        return Ok(None);
    }
    let r = match kind {
        DistributionKind::LogGaussian => {
            if pb_upper == 0.0 {
                return Err(Error::domain("pb_upper", pb_upper));
            }
            0.5 * scale * (normal::quantile(pa_lower) - normal::quantile(pb_upper))
        }
        DistributionKind::LogLaplace => {
            if pa_lower <= 0.5 {
                return Ok(None);
            }
            -scale * (2.0 * (1.0 - pa_lower)).ln()
        }
        DistributionKind::LogUniform => scale * (pa_lower - pb_upper),
        other => {
            return Err(Error::invalid(format!("{other} is not a log-space law")));
        }
    };
    Ok(Some(r))
}

/// Log-space baseline certificate with base e: (e^{−R}, e^{R}).
pub fn log_space_radius(kind: DistributionKind, scale: f64, pa_lower: f64, pb_upper: f64) -> Result<CertOutcome> {
    let dist = SmoothingDistribution::new(kind, scale)?;
    log_space_certificate(&dist, &ProbBounds::new(pa_lower, pb_upper, 1.0)?)
}

fn log_space_certificate(dist: &SmoothingDistribution, bounds: &ProbBounds) -> Result<CertOutcome> {
    let Some(r) = log_space_additive_radius(dist.kind(), dist.scale(), bounds.pa_lower, bounds.pb_upper)? else {
        return Ok(if bounds.is_certifiable() {
            CertOutcome::Abstain(AbstainReason::LowConfidence {
                pa_lower: bounds.pa_lower,
            })
        } else {
            abstain_cross(bounds)
        });
    };
    let r_nat = r * dist.log_base().ln().abs();
    Ok(CertOutcome::Certified(Certificate {
        gamma1: (-r_nat).exp().max(GAMMA1_FLOOR),
        gamma2: r_nat.exp(),
        method: CertMethod::LogSpace,
        distribution: *dist,
        confidence: bounds.confidence,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleTarget {
    UnitMedian,
    UnitMean,
}

pub fn rayleigh_scale_for(target: ScaleTarget) -> RayleighParams {
    match target {
        ScaleTarget::UnitMedian => RayleighParams::unit_median(),
        ScaleTarget::UnitMean => RayleighParams::unit_mean(),
    }
}

/// Bound pairs of the standard certificate table.
pub const REFERENCE_BOUNDS: [(f64, f64); 8] = [
    (0.6, 0.4),
    (0.6, 0.2),
    (0.7, 0.3),
    (0.7, 0.1),
    (0.8, 0.2),
    (0.9, 0.1),
    (0.99, 0.01),
    (0.999, 0.001),
];

/// Standard deviation of `ln β` for any Rayleigh law: `π/√24`.
pub const RAYLEIGH_LOG_SD: f64 = 0.641_274_915_080_932;

/// Scale of a base-e log-space law whose log standard deviation equals that
/// of the Rayleigh law. All such laws have median 1.
pub fn matched_log_scale(kind: DistributionKind) -> Result<f64> {
    match kind {
        DistributionKind::LogGaussian => Ok(RAYLEIGH_LOG_SD),
        DistributionKind::LogLaplace => Ok(RAYLEIGH_LOG_SD / std::f64::consts::SQRT_2),
        DistributionKind::LogUniform => Ok(RAYLEIGH_LOG_SD * 3f64.sqrt()),
        other => Err(Error::invalid(format!("{other} is not a log-space law"))),
    }
}
