//! Positive-support smoothing laws and deterministic sampling.
//!
//! Every draw is produced by the inverse-CDF transform of a uniform taken from
//! a ChaCha8 keystream addressed by `(seed, stream_index, draw_index)`. The
//! value of draw `i` therefore does not depend on how a batch is split across
//! workers.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{normal, Error, Result};

/// Scale of a Rayleigh law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RayleighParams {
    sigma: f64,
}

impl RayleighParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::domain("rayleigh sigma", sigma));
        }
        Ok(RayleighParams { sigma })
    }

    /// σ = 1/√(2 ln 2), the scale whose median is 1. This is the default.
    pub fn unit_median() -> Self {
        RayleighParams {
            sigma: 1.0 / (2.0 * LN_2).sqrt(),
        }
    }

    /// σ = √(2/π), the scale whose mean is 1.
    pub fn unit_mean() -> Self {
        RayleighParams {
            sigma: (2.0 / PI).sqrt(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn median(&self) -> f64 {
        self.sigma * (2.0 * LN_2).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.sigma * (PI / 2.0).sqrt()
    }

    pub fn pdf(&self, z: f64) -> f64 {
        if z < 0.0 {
            return 0.0;
        }
        let s2 = self.sigma * self.sigma;
        z / s2 * (-z * z / (2.0 * s2)).exp()
    }

    /// F(z) = 1 − exp(−z²/(2σ²)).
    pub fn cdf(&self, z: f64) -> Result<f64> {
        if z.is_nan() || z < 0.0 {
            return Err(Error::domain("rayleigh cdf argument", z));
        }
        Ok(self.cdf_unchecked(z))
    }

    pub(crate) fn cdf_unchecked(&self, z: f64) -> f64 {
        let t = z / self.sigma;
        -(-0.5 * t * t).exp_m1()
    }

    /// F⁻¹(p) = σ·√(−2 ln(1 − p)) for p in [0, 1).
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain("rayleigh quantile probability", p));
        }
        Ok(self.quantile_unchecked(p))
    }

    pub(crate) fn quantile_unchecked(&self, p: f64) -> f64 {
        self.sigma * (-2.0 * (-p).ln_1p()).sqrt()
    }

    /// CDF of 1/β for β ~ Rayleigh(σ): exp(−1/(2σ²z²)).
    pub fn inverse_cdf(&self, z: f64) -> Result<f64> {
        if z.is_nan() || z <= 0.0 {
            return Err(Error::domain("inverse rayleigh cdf argument", z));
        }
        Ok(self.inverse_cdf_unchecked(z))
    }

    fn inverse_cdf_unchecked(&self, z: f64) -> f64 {
        let t = self.sigma * z;
        (-0.5 / (t * t)).exp()
    }
}

impl Default for RayleighParams {
    fn default() -> Self {
        RayleighParams::unit_median()
    }
}

impl TryFrom<f64> for RayleighParams {
    type Error = Error;

    fn try_from(sigma: f64) -> Result<Self> {
        RayleighParams::new(sigma)
    }
}

impl From<RayleighParams> for f64 {
    fn from(p: RayleighParams) -> f64 {
        p.sigma
    }
}

/// Free-function form of [`RayleighParams::cdf`].
pub fn rayleigh_cdf(params: RayleighParams, z: f64) -> Result<f64> {
    params.cdf(z)
}

/// Free-function form of [`RayleighParams::quantile`].
pub fn rayleigh_quantile(params: RayleighParams, p: f64) -> Result<f64> {
    params.quantile(p)
}

/// Free-function form of [`RayleighParams::inverse_cdf`].
pub fn inverse_rayleigh_cdf(params: RayleighParams, z: f64) -> Result<f64> {
    params.inverse_cdf(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Rayleigh,
    InverseRayleigh,
    /// log_b(Z) ~ N(0, scale²)
    LogGaussian,
    /// log_b(Z) ~ Laplace(0, scale)
    LogLaplace,
    /// log_b(Z) ~ U[−scale, scale]
    LogUniform,
}

impl DistributionKind {
    pub fn is_log_space(self) -> bool {
        matches!(
            self,
            DistributionKind::LogGaussian | DistributionKind::LogLaplace | DistributionKind::LogUniform
        )
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DistributionKind::Rayleigh => "rayleigh",
            DistributionKind::InverseRayleigh => "inverse_rayleigh",
            DistributionKind::LogGaussian => "log_gaussian",
            DistributionKind::LogLaplace => "log_laplace",
            DistributionKind::LogUniform => "log_uniform",
        };
        f.write_str(s)
    }
}

#[derive(Deserialize)]
struct RawDistribution {
    kind: DistributionKind,
    scale: f64,
    #[serde(default = "default_log_base")]
    log_base: f64,
}

fn default_log_base() -> f64 {
    std::f64::consts::E
}

/// A one-parameter smoothing law on the positive reals.
///
/// For the Rayleigh kinds `scale` is σ. For the log-space kinds `scale` is the
/// standard deviation (Gaussian), the Laplace scale, or the half-width of the
/// uniform support of `log_base`-logarithm of the draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct SmoothingDistribution {
    kind: DistributionKind,
    scale: f64,
    log_base: f64,
}

impl TryFrom<RawDistribution> for SmoothingDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        SmoothingDistribution::new(raw.kind, raw.scale)?.with_log_base(raw.log_base)
    }
}

impl SmoothingDistribution {
    pub fn new(kind: DistributionKind, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::domain("distribution scale", scale));
        }
        Ok(SmoothingDistribution {
            kind,
            scale,
            log_base: default_log_base(),
        })
    }

    pub fn rayleigh(params: RayleighParams) -> Self {
        SmoothingDistribution {
            kind: DistributionKind::Rayleigh,
            scale: params.sigma(),
            log_base: default_log_base(),
        }
    }

    pub fn inverse_rayleigh(params: RayleighParams) -> Self {
        SmoothingDistribution {
            kind: DistributionKind::InverseRayleigh,
            ..SmoothingDistribution::rayleigh(params)
        }
    }

    /// Only meaningful for the log-space kinds. Base `b` and `1/b` give the
    /// same law because the underlying laws are symmetric.
    pub fn with_log_base(mut self, log_base: f64) -> Result<Self> {
        if !(log_base.is_finite() && log_base > 0.0 && log_base != 1.0) {
            return Err(Error::domain("log base", log_base));
        }
        self.log_base = log_base;
        Ok(self)
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn log_base(&self) -> f64 {
        self.log_base
    }

    fn rayleigh_params(&self) -> RayleighParams {
        RayleighParams { sigma: self.scale }
    }

    fn ln_base(&self) -> f64 {
        self.log_base.ln().abs()
    }

    /// CDF of the underlying symmetric law of a log-space kind.
    fn symmetric_cdf(&self, x: f64) -> f64 {
        let s = self.scale;
        match self.kind {
            DistributionKind::LogGaussian => normal::cdf(x / s),
            DistributionKind::LogLaplace => {
                if x < 0.0 {
                    0.5 * (x / s).exp()
                } else {
                    1.0 - 0.5 * (-x / s).exp()
                }
            }
            DistributionKind::LogUniform => ((x + s) / (2.0 * s)).clamp(0.0, 1.0),
            _ => unreachable!("not a log-space kind"),
        }
    }

    fn symmetric_quantile(&self, p: f64) -> f64 {
        let s = self.scale;
        match self.kind {
            DistributionKind::LogGaussian => s * normal::quantile(p),
            DistributionKind::LogLaplace => {
                if p < 0.5 {
                    s * (2.0 * p).ln()
                } else {
                    -s * (2.0 * (1.0 - p)).ln()
                }
            }
            DistributionKind::LogUniform => s * (2.0 * p - 1.0),
            _ => unreachable!("not a log-space kind"),
        }
    }

    fn symmetric_pdf(&self, x: f64) -> f64 {
        let s = self.scale;
        match self.kind {
            DistributionKind::LogGaussian => {
                let t = x / s;
                (-0.5 * t * t).exp() / (s * (2.0 * PI).sqrt())
            }
            DistributionKind::LogLaplace => (-(x.abs()) / s).exp() / (2.0 * s),
            DistributionKind::LogUniform => {
                if x.abs() <= s {
                    1.0 / (2.0 * s)
                } else {
                    0.0
                }
            }
            _ => unreachable!("not a log-space kind"),
        }
    }

    /// P(Z ≤ z). Zero for z ≤ 0.
    pub fn cdf(&self, z: f64) -> f64 {
        if z.is_nan() {
            return f64::NAN;
        }
        if z <= 0.0 {
            return 0.0;
        }
        match self.kind {
            DistributionKind::Rayleigh => self.rayleigh_params().cdf_unchecked(z),
            DistributionKind::InverseRayleigh => self.rayleigh_params().inverse_cdf_unchecked(z),
            _ => self.symmetric_cdf(z.ln() / self.ln_base()),
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        if !(z > 0.0) || z.is_infinite() {
            return 0.0;
        }
        match self.kind {
            DistributionKind::Rayleigh => self.rayleigh_params().pdf(z),
            DistributionKind::InverseRayleigh => self.rayleigh_params().pdf(1.0 / z) / (z * z),
            _ => {
                let lb = self.ln_base();
                self.symmetric_pdf(z.ln() / lb) / (z * lb)
            }
        }
    }

    /// Inverse CDF for p in the open unit interval.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain("quantile probability", p));
        }
        Ok(self.quantile_unchecked(p))
    }

    fn quantile_unchecked(&self, p: f64) -> f64 {
        match self.kind {
            DistributionKind::Rayleigh => self.rayleigh_params().quantile_unchecked(p),
            DistributionKind::InverseRayleigh => 1.0 / self.rayleigh_params().quantile_unchecked(1.0 - p),
            _ => (self.symmetric_quantile(p) * self.ln_base()).exp(),
        }
    }

    /// Draws with indices `range` from `sampler`'s stream.
    pub fn sample_range(&self, sampler: &SeededSampler, range: Range<u64>) -> Vec<f64> {
        sampler
            .uniforms(range)
            .into_iter()
            .map(|u| self.quantile_unchecked(u))
            .collect()
    }

    /// The first `count` draws of `sampler`'s stream.
    pub fn sample(&self, sampler: &SeededSampler, count: usize) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        Ok(self.sample_range(sampler, 0..count as u64))
    }

    /// Same values as [`sample`](Self::sample), computed in parallel chunks.
    pub fn par_sample(&self, sampler: &SeededSampler, count: usize) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        let chunks = chunk_ranges(count as u64, PAR_CHUNK);
        let parts: Vec<Vec<f64>> = chunks
            .into_par_iter()
            .map(|r| self.sample_range(sampler, r))
            .collect();
        Ok(parts.concat())
    }
}

impl fmt::Display for SmoothingDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_log_space() {
            write!(f, "{}(scale={}, base={})", self.kind, self.scale, self.log_base)
        } else {
            write!(f, "{}(sigma={})", self.kind, self.scale)
        }
    }
}

pub(crate) const PAR_CHUNK: u64 = 8192;

/// Splits `0..count` into consecutive ranges of at most `chunk` indices.
pub(crate) fn chunk_ranges(count: u64, chunk: u64) -> Vec<Range<u64>> {
    (0..count.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(count))
        .collect()
}

/// Address of a deterministic uniform stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededSampler {
    pub seed: u64,
    pub stream_index: u64,
}

impl SeededSampler {
    pub fn new(seed: u64, stream_index: u64) -> Self {
        SeededSampler { seed, stream_index }
    }

    /// Same seed, different stream.
    pub fn stream(&self, stream_index: u64) -> Self {
        SeededSampler {
            seed: self.seed,
            stream_index,
        }
    }

    fn rng_at(&self, draw_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_index);
        // one u64 = two 32-bit keystream words
        rng.set_word_pos(2 * draw_index as u128);
        rng
    }

    /// Raw 64-bit words for the given draw indices.
    pub fn words(&self, range: Range<u64>) -> Vec<u64> {
        let mut rng = self.rng_at(range.start);
        range.map(|_| rng.next_u64()).collect()
    }

    /// Uniforms in the open interval (0, 1) for the given draw indices.
    pub fn uniforms(&self, range: Range<u64>) -> Vec<f64> {
        self.words(range).into_iter().map(open_unit).collect()
    }

    pub fn uniform_at(&self, draw_index: u64) -> f64 {
        open_unit(self.rng_at(draw_index).next_u64())
    }
}

/// Top 52 bits mapped to the cell midpoints of a 2⁻⁵² grid, never 0 or 1.
fn open_unit(word: u64) -> f64 {
    ((word >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const UM: f64 = 0.849_321_800_288_019_1; // 1/√(2 ln 2)

    fn um() -> RayleighParams {
        RayleighParams::unit_median()
    }

    #[test]
    fn unit_median_and_mean_scales() {
        assert!((um().sigma() - UM).abs() < 1e-12);
        assert!((RayleighParams::unit_mean().sigma() - (2.0 / PI).sqrt()).abs() < 1e-12);
        assert!((um().median() - 1.0).abs() < 1e-12);
        assert!((RayleighParams::unit_mean().mean() - 1.0).abs() < 1e-12);
        assert!(RayleighParams::new(0.0).is_err());
        assert!(RayleighParams::new(-1.0).is_err());
        assert!(RayleighParams::new(f64::NAN).is_err());
    }

    #[test]
    fn rayleigh_cdf_examples() {
        assert_eq!(um().cdf(0.0).unwrap(), 0.0);
        assert!((um().cdf(1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((um().cdf(2.0).unwrap() - 0.9375).abs() < 1e-15);
        assert!(um().cdf(-0.1).is_err());
    }

    #[test]
    fn rayleigh_quantile_examples() {
        assert!((um().quantile(0.5).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(um().quantile(0.0).unwrap(), 0.0);
        assert!((um().quantile(0.9375).unwrap() - 2.0).abs() < 1e-14);
        assert!(um().quantile(1.0).is_err());
        assert!(um().quantile(-0.1).is_err());
    }

    #[test]
    fn inverse_rayleigh_cdf_examples() {
        assert!((um().inverse_cdf(1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(um().inverse_cdf(f64::INFINITY).unwrap(), 1.0);
        assert!((um().inverse_cdf(0.5).unwrap() - 0.0625).abs() < 1e-15);
        assert!(um().inverse_cdf(0.0).is_err());
        assert!(um().inverse_cdf(-2.0).is_err());
    }

    #[test]
    fn log_base_validation() {
        let d = SmoothingDistribution::new(DistributionKind::LogGaussian, 0.5).unwrap();
        assert!(d.with_log_base(1.0).is_err());
        assert!(d.with_log_base(0.0).is_err());
        // base b and 1/b coincide
        let b2 = d.with_log_base(2.0).unwrap();
        let b_half = d.with_log_base(0.5).unwrap();
        for &z in &[0.1, 0.7, 1.0, 3.0] {
            assert!((b2.cdf(z) - b_half.cdf(z)).abs() < 1e-15);
        }
    }

    #[test]
    fn log_uniform_samples_stay_in_support() {
        let lambda = 0.8;
        let d = SmoothingDistribution::new(DistributionKind::LogUniform, lambda).unwrap();
        let xs = d.sample(&SeededSampler::new(3, 0), 50_000).unwrap();
        let (lo, hi) = ((-lambda).exp(), lambda.exp());
        assert!(xs.iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn partitioned_streams_reproduce_single_stream() {
        let d = SmoothingDistribution::rayleigh(um());
        let s = SeededSampler::new(11, 2);
        let whole = d.sample(&s, 1000).unwrap();
        let mut parts = Vec::new();
        for r in [0..250, 250..500, 500..750, 750..1000] {
            parts.extend(d.sample_range(&s, r));
        }
        assert_eq!(whole, parts);
        assert_eq!(whole, d.par_sample(&s, 1000).unwrap());
        assert_eq!(s.uniform_at(617), s.uniforms(617..618)[0]);
        // different streams differ
        assert_ne!(whole, d.sample(&s.stream(3), 1000).unwrap());
    }

    #[test]
    fn uniforms_are_open() {
        assert!(open_unit(0) > 0.0);
        assert!(open_unit(u64::MAX) < 1.0);
    }

    #[test]
    fn chunking_covers_range() {
        let r = chunk_ranges(20_000, 8192);
        assert_eq!(r, vec![0..8192, 8192..16384, 16384..20_000]);
        assert!(chunk_ranges(0, 10).is_empty());
    }

    #[test]
    fn serde_round_trip_validates() {
        let d = SmoothingDistribution::new(DistributionKind::LogLaplace, 0.3).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        let back: SmoothingDistribution = serde_json::from_str(&s).unwrap();
        assert_eq!(d, back);
        let bad = r#"{"kind":"rayleigh","scale":-1.0}"#;
        assert!(serde_json::from_str::<SmoothingDistribution>(bad).is_err());
    }
}
