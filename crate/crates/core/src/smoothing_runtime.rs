//! The Monte-Carlo smoothed classifier over a multiplicative transform.
//!
//! Prediction is two-phase: `n0` selection draws pick the modal label, then
//! `n` fresh estimation draws bound its probability from below. Draws come
//! from fixed streams of the configured seed (stream 0 for selection, 1 for
//! estimation), so results do not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cert_engine::{
    certify_from_counts, clopper_pearson, AbstainReason, CertOutcome, Certificate, RunnerUp, SampleCounts, Side,
};
use crate::distributions::{chunk_ranges, SeededSampler, SmoothingDistribution, PAR_CHUNK};
use crate::transforms::{read_raw_tensor, GammaCorrection, ImageTensor, ParametricTransform};
use crate::{Error, Result};

const SELECTION_STREAM: u64 = 0;
const ESTIMATION_STREAM: u64 = 1;

/// A deterministic labelling function.
pub trait BaseClassifier: Send + Sync {
    fn classify(&self, x: &ImageTensor) -> Result<usize>;

    fn describe(&self) -> String;
}

impl<C: BaseClassifier + ?Sized> BaseClassifier for Box<C> {
    fn classify(&self, x: &ImageTensor) -> Result<usize> {
        (**self).classify(x)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Label 0 when the first entry is at least `threshold`, else 1.
///
/// With input pixel `v` and gamma smoothing, the transformed pixel `v^β`
/// clears the threshold iff `β ≤ ln t / ln v`, so the smoothed probability of
/// label 0 is the smoothing CDF at that ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOracle {
    pub value: f64,
    pub threshold: f64,
}

impl ThresholdOracle {
    pub fn new(value: f64, threshold: f64) -> Result<Self> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::domain("oracle pixel value", value));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::domain("oracle threshold", threshold));
        }
        Ok(ThresholdOracle { value, threshold })
    }

    /// The single-pixel input `[value]`.
    pub fn input_tensor(&self) -> ImageTensor {
        ImageTensor::from_vec(vec![self.value]).expect("value in (0, 1]")
    }

    /// `ln t / ln v`, the largest factor that keeps label 0.
    pub fn critical_factor(&self) -> Result<f64> {
        if self.value == 1.0 {
            return Err(Error::domain("oracle pixel value", self.value));
        }
        Ok(self.threshold.ln() / self.value.ln())
    }
}

impl BaseClassifier for ThresholdOracle {
    fn classify(&self, x: &ImageTensor) -> Result<usize> {
        Ok(if x.data()[0] >= self.threshold { 0 } else { 1 })
    }

    fn describe(&self) -> String {
        format!("threshold(t={})", self.threshold)
    }
}

/// Always returns the same label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstantClassifier {
    pub label: usize,
}

impl BaseClassifier for ConstantClassifier {
    fn classify(&self, _x: &ImageTensor) -> Result<usize> {
        Ok(self.label)
    }

    fn describe(&self) -> String {
        format!("constant({})", self.label)
    }
}

/// A stable hash of the input bits, reduced modulo `classes`. Behaves like a
/// uniformly random labelling that is still a function of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashClassifier {
    pub classes: usize,
}

impl HashClassifier {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("hash classifier needs at least one class"));
        }
        Ok(HashClassifier { classes })
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl BaseClassifier for HashClassifier {
    fn classify(&self, x: &ImageTensor) -> Result<usize> {
        let h = x
            .data()
            .iter()
            .fold(0x9e37_79b9_7f4a_7c15u64, |h, v| mix64(h ^ v.to_bits()));
        Ok((h % self.classes as u64) as usize)
    }

    fn describe(&self) -> String {
        format!("hash(classes={})", self.classes)
    }
}

/// `argmax(W x + b)` with `W` of shape `classes × len(x)`; ties go to the
/// lowest index.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    classes: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn new(classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("linear classifier needs at least one class"));
        }
        if bias.len() != classes {
            return Err(Error::invalid(format!("bias has {} entries for {classes} classes", bias.len())));
        }
        if weights.is_empty() || !weights.len().is_multiple_of(classes) {
            return Err(Error::invalid(format!(
                "weights length {} is not a positive multiple of {classes}",
                weights.len()
            )));
        }
        if let Some(&w) = weights.iter().chain(&bias).find(|w| !w.is_finite()) {
            return Err(Error::domain("linear classifier parameter", w));
        }
        Ok(LinearClassifier { classes, weights, bias })
    }

    pub fn input_len(&self) -> usize {
        self.weights.len() / self.classes
    }

    pub fn scores(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        let d = self.input_len();
        if x.len() != d {
            return Err(Error::invalid(format!("input has {} entries, classifier expects {d}", x.len())));
        }
        Ok(self
            .weights
            .chunks_exact(d)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x.data()).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }
}

impl BaseClassifier for LinearClassifier {
    fn classify(&self, x: &ImageTensor) -> Result<usize> {
        let scores = self.scores(x)?;
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(best)
    }

    fn describe(&self) -> String {
        format!("linear(classes={}, inputs={})", self.classes, self.input_len())
    }
}

/// On-disk classifier description. Without a `kind` tag it is a linear
/// classifier whose MST1 tensors are given relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierManifest {
    Linear { weights: PathBuf, bias: PathBuf, classes: usize },
    Threshold { threshold: f64 },
    Constant { label: usize },
    Hash { classes: usize },
}

/// Reads a classifier manifest; a missing `kind` means `linear`.
pub fn load_classifier(path: impl AsRef<Path>) -> Result<Box<dyn BaseClassifier>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("kind").or_insert_with(|| "linear".into());
    }
    let manifest: ClassifierManifest = serde_json::from_value(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    build_classifier(&manifest, dir)
}

/// Instantiates `manifest`, resolving relative tensor paths against `dir`.
pub fn build_classifier(manifest: &ClassifierManifest, dir: &Path) -> Result<Box<dyn BaseClassifier>> {
    Ok(match manifest {
        ClassifierManifest::Linear { weights, bias, classes } => {
            let (_, w) = read_raw_tensor(dir.join(weights))?;
            let (_, b) = read_raw_tensor(dir.join(bias))?;
            Box::new(LinearClassifier::new(*classes, w, b)?)
        }
        ClassifierManifest::Threshold { threshold } => {
            if !(*threshold > 0.0 && *threshold < 1.0) {
                return Err(Error::domain("oracle threshold", *threshold));
            }
            // the pixel value only matters for exact probabilities
            Box::new(ThresholdOracle {
                value: 1.0,
                threshold: *threshold,
            })
        }
        ClassifierManifest::Constant { label } => Box::new(ConstantClassifier { label: *label }),
        ClassifierManifest::Hash { classes } => Box::new(HashClassifier::new(*classes)?),
    })
}

/// How the runner-up bound p̄B is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerUpBound {
    /// p̄B = 1 − p̲A.
    #[default]
    Trivial,
    /// Clopper–Pearson upper bound on the most frequent other label, with α
    /// split evenly between the two bounds.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    #[serde(default = "default_n0")]
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub dist: SmoothingDistribution,
    pub seed: u64,
    #[serde(default)]
    pub runner_up: RunnerUpBound,
}

fn default_n0() -> u64 {
    SmoothingConfig::DEFAULT_N0
}

impl SmoothingConfig {
    pub const DEFAULT_N0: u64 = 100;

    pub fn new(n: u64, alpha: f64, dist: SmoothingDistribution, seed: u64) -> Result<Self> {
        let cfg = SmoothingConfig {
            n0: Self::DEFAULT_N0.min(n),
            n,
            alpha,
            dist,
            seed,
            runner_up: RunnerUpBound::Trivial,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_n0(mut self, n0: u64) -> Result<Self> {
        self.n0 = n0;
        self.validate()?;
        Ok(self)
    }

    pub fn with_runner_up(mut self, runner_up: RunnerUpBound) -> Self {
        self.runner_up = runner_up;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 < 10 {
            return Err(Error::invalid(format!("n0 must be at least 10, got {}", self.n0)));
        }
        if self.n < self.n0 {
            return Err(Error::invalid(format!("n ({}) must be at least n0 ({})", self.n, self.n0)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain("alpha", self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Abstain,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Abstain => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Abstain => f.write_str("abstain"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub label: Label,
    /// The selected label, reported even on abstention.
    pub candidate: usize,
    pub pa_lower: f64,
    pub certificate: Option<Certificate>,
    pub counts: SampleCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abstain_reason: Option<AbstainReason>,
}

/// Label frequencies from one batch of draws.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts(pub BTreeMap<usize, u64>);

impl LabelCounts {
    fn merge(mut self, other: LabelCounts) -> LabelCounts {
        for (k, v) in other.0 {
            *self.0.entry(k).or_default() += v;
        }
        self
    }

    pub fn get(&self, label: usize) -> u64 {
        self.0.get(&label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    /// Most frequent label, lowest index on ties. `None` when empty.
    pub fn mode(&self) -> Option<usize> {
        // BTreeMap iterates in increasing label order; keep the first maximum
        let mut best: Option<(usize, u64)> = None;
        for (&k, &v) in &self.0 {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        best.map(|(k, _)| k)
    }

    /// Count of the most frequent label other than `label`.
    pub fn runner_up(&self, label: usize) -> u64 {
        self.0.iter().filter(|(&k, _)| k != label).map(|(_, &v)| v).max().unwrap_or(0)
    }
}

/// A base classifier smoothed over a parametric transform.
pub struct SmoothedClassifier<'a> {
    base: &'a dyn BaseClassifier,
    transform: &'a dyn ParametricTransform,
    cfg: SmoothingConfig,
}

impl<'a> SmoothedClassifier<'a> {
    /// Smoothing over gamma correction.
    pub fn new(base: &'a dyn BaseClassifier, cfg: SmoothingConfig) -> Result<Self> {
        SmoothedClassifier::with_transform(base, &GammaCorrection, cfg)
    }

    pub fn with_transform(
        base: &'a dyn BaseClassifier,
        transform: &'a dyn ParametricTransform,
        cfg: SmoothingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(SmoothedClassifier { base, transform, cfg })
    }

    pub fn config(&self) -> &SmoothingConfig {
        &self.cfg
    }

    /// Labels of `base(T(x, β_j))` for the first `count` draws of `stream`.
    pub fn label_counts(&self, x: &ImageTensor, stream: u64, count: u64) -> Result<LabelCounts> {
        let sampler = SeededSampler::new(self.cfg.seed, stream);
        chunk_ranges(count, PAR_CHUNK)
            .into_par_iter()
            .map(|r| {
                let mut counts = LabelCounts::default();
                for beta in self.cfg.dist.sample_range(&sampler, r) {
                    let label = self.base.classify(&self.transform.apply(x, beta)?)?;
                    *counts.0.entry(label).or_default() += 1;
                }
                Ok(counts)
            })
            .try_reduce(LabelCounts::default, |a, b| Ok(a.merge(b)))
    }

    /// The two-phase predict-and-certify protocol.
    pub fn predict_certify(&self, x: &ImageTensor) -> Result<PredictionResult> {
        let cfg = &self.cfg;
        let selection = self.label_counts(x, SELECTION_STREAM, cfg.n0)?;
        let candidate = selection.mode().expect("n0 ≥ 10 draws");
        let estimation = self.label_counts(x, ESTIMATION_STREAM, cfg.n)?;
        let counts = SampleCounts::new(estimation.get(candidate), cfg.n)?;

        let (runner_up, alpha_a) = match cfg.runner_up {
            RunnerUpBound::Trivial => (RunnerUp::Trivial, cfg.alpha),
            RunnerUpBound::Empirical => (
                RunnerUp::Counts(SampleCounts::new(estimation.runner_up(candidate), cfg.n)?),
                cfg.alpha / 2.0,
            ),
        };
        let pa_lower = clopper_pearson(counts, alpha_a, Side::Lower)?;
        let outcome = if pa_lower <= 0.5 {
            CertOutcome::Abstain(AbstainReason::LowConfidence { pa_lower })
        } else {
            certify_from_counts(&cfg.dist, counts, runner_up, cfg.alpha)?
        };
        Ok(match outcome {
            CertOutcome::Certified(c) => PredictionResult {
                label: Label::Class(candidate),
                candidate,
                pa_lower,
                certificate: Some(c),
                counts,
                abstain_reason: None,
            },
            CertOutcome::Abstain(reason) => PredictionResult {
                label: Label::Abstain,
                candidate,
                pa_lower,
                certificate: None,
                counts,
                abstain_reason: Some(reason),
            },
        })
    }

    /// Plurality vote over the `n` estimation draws, without abstention.
    ///
    /// The draws are the same for every input, so along a sweep the vote
    /// share of a label changes only through the input.
    pub fn vote(&self, x: &ImageTensor) -> Result<usize> {
        Ok(self
            .label_counts(x, ESTIMATION_STREAM, self.cfg.n)?
            .mode()
            .expect("n ≥ 10 draws"))
    }
}

/// Smoothed label probability of an oracle input under attack factor
/// `attack_gamma`: `P(v^{βγ} ≥ t) = cdf(ln t / ln v / γ)`.
pub fn exact_oracle_probability(
    oracle: &ThresholdOracle,
    attack_gamma: f64,
    dist: &SmoothingDistribution,
) -> Result<f64> {
    if !(attack_gamma.is_finite() && attack_gamma > 0.0) {
        return Err(Error::domain("attack gamma", attack_gamma));
    }
    Ok(dist.cdf(oracle.critical_factor()? / attack_gamma))
}

/// Last correctly classified factors on either side of 1. Both ends are
/// inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepInterval {
    pub left: f64,
    pub right: f64,
}

/// Walks γ = 1 ± k·step outward until the prediction on `T(x, γ)` differs
/// from the prediction at γ = 1. The upward walk stops at `gamma_max`, the
/// downward walk at `step`; both limits are evaluated even when off-grid.
///
/// Returns `None` when the prediction at γ = 1 differs from `true_label`.
pub fn empirical_sweep<F>(
    classify: F,
    transform: &dyn ParametricTransform,
    x: &ImageTensor,
    true_label: Option<usize>,
    step: f64,
    gamma_max: f64,
) -> Result<Option<SweepInterval>>
where
    F: Fn(&ImageTensor) -> Result<usize>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::domain("sweep step", step));
    }
    if !(gamma_max.is_finite() && gamma_max >= 1.0) {
        return Err(Error::domain("gamma_max", gamma_max));
    }
    let reference = classify(x)?;
    if true_label.is_some_and(|t| t != reference) {
        return Ok(None);
    }
    let correct = |g: f64| -> Result<bool> { Ok(classify(&transform.apply(x, g)?)? == reference) };

    let mut right = 1.0;
    for k in 1.. {
        let g = (1.0 + k as f64 * step).min(gamma_max);
        if g <= right || !correct(g)? {
            break;
        }
        right = g;
    }
    let mut left = 1.0;
    if step < 1.0 {
        for k in 1.. {
            let g = (1.0 - k as f64 * step).max(step);
            if g >= left || !correct(g)? {
                break;
            }
            left = g;
        }
    }
    Ok(Some(SweepInterval { left, right }))
}

/// [`empirical_sweep`] of a smoothed classifier's plurality vote over its own
/// transform.
pub fn smoothed_sweep(
    smoothed: &SmoothedClassifier<'_>,
    x: &ImageTensor,
    true_label: Option<usize>,
    step: f64,
    gamma_max: f64,
) -> Result<Option<SweepInterval>> {
    empirical_sweep(|t| smoothed.vote(t), smoothed.transform, x, true_label, step, gamma_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::RayleighParams;

    fn rayleigh() -> SmoothingDistribution {
        SmoothingDistribution::rayleigh(RayleighParams::unit_median())
    }

    fn oracle() -> ThresholdOracle {
        ThresholdOracle::new(0.5, 0.25).unwrap()
    }

    #[test]
    fn config_validation() {
        let d = rayleigh();
        assert!(SmoothingConfig::new(9, 0.01, d, 0).is_err());
        assert!(SmoothingConfig::new(100, 0.0, d, 0).is_err());
        assert!(SmoothingConfig::new(100, 1.0, d, 0).is_err());
        let cfg = SmoothingConfig::new(1000, 0.01, d, 0).unwrap();
        assert_eq!(cfg.n0, 100);
        assert!(cfg.with_n0(5).is_err());
        assert!(cfg.with_n0(1001).is_err());
        let json = r#"{"n": 500, "alpha": 0.01, "dist": {"kind": "rayleigh", "scale": 0.8}, "seed": 3}"#;
        let parsed: SmoothingConfig = serde_json::from_str(json).unwrap();
        assert_eq!((parsed.n0, parsed.runner_up), (100, RunnerUpBound::Trivial));
    }

    #[test]
    fn exact_oracle_examples() {
        let d = rayleigh();
        assert!((exact_oracle_probability(&oracle(), 1.0, &d).unwrap() - 0.9375).abs() < 1e-12);
        assert!((exact_oracle_probability(&oracle(), 2.0, &d).unwrap() - 0.5).abs() < 1e-12);
        let o = ThresholdOracle::new(0.5, 0.5).unwrap();
        assert!((exact_oracle_probability(&o, 1.0, &d).unwrap() - 0.5).abs() < 1e-12);
        assert!((exact_oracle_probability(&o, 4.0, &d).unwrap() - d.cdf(0.25)).abs() < 1e-15);
        let flat = ThresholdOracle::new(1.0, 0.5).unwrap();
        assert!(exact_oracle_probability(&flat, 1.0, &d).is_err());
        assert!(exact_oracle_probability(&oracle(), 0.0, &d).is_err());
    }

    #[test]
    fn label_counts_mode_breaks_ties_low() {
        let c = LabelCounts([(3, 5), (1, 5), (7, 2)].into_iter().collect());
        assert_eq!(c.mode(), Some(1));
        assert_eq!(c.runner_up(1), 5);
        assert_eq!(c.runner_up(3), 5);
        assert_eq!(LabelCounts::default().mode(), None);
    }

    #[test]
    fn oracle_prediction() {
        let o = oracle();
        let cfg = SmoothingConfig::new(20_000, 0.001, rayleigh(), 1).unwrap();
        let s = SmoothedClassifier::new(&o, cfg).unwrap();
        let r = s.predict_certify(&o.input_tensor()).unwrap();
        assert_eq!(r.label, Label::Class(0));
        assert!(r.pa_lower < 0.9375 && r.pa_lower > 0.93, "{}", r.pa_lower);
        let c = r.certificate.unwrap();
        assert!(c.gamma2 <= 2.0 && c.gamma1 < 1.0);
        assert!(r.abstain_reason.is_none());
    }

    #[test]
    fn constant_never_abstains() {
        let base = ConstantClassifier { label: 4 };
        let x = ImageTensor::from_vec(vec![0.3, 0.6]).unwrap();
        for n in [10, 100, 1000] {
            let cfg = SmoothingConfig::new(n, 0.001, rayleigh(), 0).unwrap().with_n0(10).unwrap();
            let r = SmoothedClassifier::new(&base, cfg).unwrap().predict_certify(&x).unwrap();
            assert_eq!(r.label, Label::Class(4));
            assert_eq!(r.counts.successes, n);
            let cp = clopper_pearson(SampleCounts::new(n, n).unwrap(), 0.001, Side::Lower).unwrap();
            assert_eq!(r.pa_lower, cp);
            // k = n: the bound is alpha^(1/n)
            assert!((cp - 0.001f64.powf(1.0 / n as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn hash_classifier_abstains() {
        let base = HashClassifier::new(10).unwrap();
        let x = ImageTensor::from_vec(vec![0.2, 0.4, 0.9]).unwrap();
        let mut abstained = 0;
        for seed in 0..20 {
            let cfg = SmoothingConfig::new(1000, 0.001, rayleigh(), seed).unwrap();
            let r = SmoothedClassifier::new(&base, cfg).unwrap().predict_certify(&x).unwrap();
            if r.label == Label::Abstain {
                assert!(r.certificate.is_none());
                assert!(matches!(r.abstain_reason, Some(AbstainReason::LowConfidence { .. })));
                abstained += 1;
            }
        }
        assert_eq!(abstained, 20);
    }

    #[test]
    fn hash_classifier_is_stable() {
        let h = HashClassifier::new(7).unwrap();
        let x = ImageTensor::from_vec(vec![0.1, 0.2]).unwrap();
        assert_eq!(h.classify(&x).unwrap(), h.classify(&x.clone()).unwrap());
    }

    #[test]
    fn deterministic_results() {
        let o = oracle();
        let cfg = SmoothingConfig::new(5000, 0.01, rayleigh(), 42).unwrap();
        let s = SmoothedClassifier::new(&o, cfg).unwrap();
        let x = o.input_tensor();
        assert_eq!(s.predict_certify(&x).unwrap(), s.predict_certify(&x).unwrap());
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = one.install(|| s.predict_certify(&x).unwrap());
        assert_eq!(single, s.predict_certify(&x).unwrap());
    }

    #[test]
    fn empirical_runner_up() {
        let o = oracle();
        let cfg = SmoothingConfig::new(5000, 0.01, rayleigh(), 3)
            .unwrap()
            .with_runner_up(RunnerUpBound::Empirical);
        let r = SmoothedClassifier::new(&o, cfg).unwrap().predict_certify(&o.input_tensor()).unwrap();
        assert_eq!(r.label, Label::Class(0));
        let c = r.certificate.unwrap();
        assert!(c.gamma1 < 1.0 && c.gamma2 > 1.0);
    }

    #[test]
    fn sweep_examples() {
        let base = ConstantClassifier { label: 1 };
        let x = ImageTensor::from_vec(vec![0.5]).unwrap();
        let s = empirical_sweep(|t| base.classify(t), &GammaCorrection, &x, Some(1), 0.01, 3.0).unwrap();
        let s = s.unwrap();
        assert_eq!((s.left, s.right), (0.01, 3.0));
        let none = empirical_sweep(|t| base.classify(t), &GammaCorrection, &x, Some(0), 0.01, 3.0).unwrap();
        assert!(none.is_none());
        assert!(empirical_sweep(|t| base.classify(t), &GammaCorrection, &x, None, 0.0, 3.0).is_err());
        assert!(empirical_sweep(|t| base.classify(t), &GammaCorrection, &x, None, 0.1, 0.5).is_err());
        // off-grid limit is still evaluated
        let s = empirical_sweep(|t| base.classify(t), &GammaCorrection, &x, None, 0.3, 2.0).unwrap().unwrap();
        assert_eq!((s.left, s.right), (0.3, 2.0));
    }

    #[test]
    fn base_oracle_sweep_flips_at_critical_factor() {
        // the unsmoothed oracle keeps label 0 while 0.5^γ ≥ 0.25, i.e. γ ≤ 2
        let o = oracle();
        let s = empirical_sweep(|t| o.classify(t), &GammaCorrection, &o.input_tensor(), Some(0), 0.01, 5.0)
            .unwrap()
            .unwrap();
        assert!((s.right - 2.0).abs() < 1e-9);
        assert_eq!(s.left, 0.01);
    }

    #[test]
    fn linear_classifier() {
        let c = LinearClassifier::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(c.classify(&ImageTensor::from_vec(vec![0.9, 0.1]).unwrap()).unwrap(), 0);
        assert_eq!(c.classify(&ImageTensor::from_vec(vec![0.1, 0.9]).unwrap()).unwrap(), 1);
        assert_eq!(c.classify(&ImageTensor::from_vec(vec![0.5, 0.5]).unwrap()).unwrap(), 0);
        assert!(c.classify(&ImageTensor::from_vec(vec![0.5]).unwrap()).is_err());
        assert!(LinearClassifier::new(2, vec![1.0; 3], vec![0.0; 2]).is_err());
        assert!(LinearClassifier::new(2, vec![1.0; 4], vec![0.0; 3]).is_err());
    }

    #[test]
    fn manifest_loading() {
        use crate::transforms::encode_mst1;
        let dir = tempfile::tempdir().unwrap();
        let raw = |dims: Vec<u32>, data: &[f64]| {
            let mut b = b"MST1".to_vec();
            b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                b.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b
        };
        std::fs::write(dir.path().join("w.mst"), raw(vec![2, 2], &[2.0, -1.0, -1.0, 2.0])).unwrap();
        std::fs::write(dir.path().join("b.mst"), encode_mst1(&ImageTensor::from_vec(vec![0.0, 0.5]).unwrap()))
            .unwrap();
        let m = dir.path().join("model.json");
        std::fs::write(&m, r#"{"weights": "w.mst", "bias": "b.mst", "classes": 2}"#).unwrap();
        let c = load_classifier(&m).unwrap();
        assert_eq!(c.classify(&ImageTensor::from_vec(vec![1.0, 0.0]).unwrap()).unwrap(), 0);
        assert_eq!(c.classify(&ImageTensor::from_vec(vec![0.0, 0.2]).unwrap()).unwrap(), 1);

        std::fs::write(&m, r#"{"kind": "constant", "label": 3}"#).unwrap();
        assert_eq!(load_classifier(&m).unwrap().describe(), "constant(3)");
        std::fs::write(&m, r#"{"kind": "threshold", "threshold": 1.5}"#).unwrap();
        assert!(load_classifier(&m).is_err());
        std::fs::write(&m, r#"{"weights": "missing.mst", "bias": "b.mst", "classes": 2}"#).unwrap();
        assert!(load_classifier(&m).is_err());
    }

    #[test]
    fn larger_alpha_never_adds_abstention() {
        let o = ThresholdOracle::new(0.5, 0.4).unwrap();
        let x = o.input_tensor();
        let mut was_certified = false;
        for alpha in [1e-6, 1e-4, 1e-3, 0.01, 0.05, 0.2] {
            let cfg = SmoothingConfig::new(2000, alpha, rayleigh(), 8).unwrap();
            let r = SmoothedClassifier::new(&o, cfg).unwrap().predict_certify(&x).unwrap();
            let certified = r.label != Label::Abstain;
            assert!(!was_certified || certified, "alpha {alpha} abstained");
            was_certified |= certified;
        }
        assert!(was_certified);
    }
}
