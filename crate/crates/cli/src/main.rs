#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use smoothcert::cert_engine::{
    certify_bounds, certify_rayleigh, matched_log_scale, CertOutcome, Certificate, ProbBounds, REFERENCE_BOUNDS,
};
use smoothcert::distributions::{DistributionKind, RayleighParams, SmoothingDistribution};
use smoothcert::realistic_pipeline::{
    certify_realistic, estimate_conversion_error, ConversionErrorConfig, ErrorBudget, GammaGrid, GammaInterval,
    RealisticConfig,
};
use smoothcert::smoothing_runtime::{
    load_classifier, smoothed_sweep, Label, RunnerUpBound, SmoothedClassifier, SmoothingConfig,
};
use smoothcert::transforms::{read_tensor, ImageTensor};

const DEFAULT_PA_GRID: &str = "0.8,0.85,0.9,0.95,0.99,0.999";

#[derive(Parser)]
#[command(name = "smoothcert", version, about = "Certified robustness to multiplicative transformations")]
struct Cli {
    /// Seed for every Monte-Carlo stream.
    #[arg(long, global = true, env = "SMOOTHCERT_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certificates for the reference (pa, pb) pairs as CSV.
    Table(TableArgs),
    /// Certificate for given probability bounds.
    Cert(CertArgs),
    /// Monte-Carlo smoothed prediction and certificate for one input.
    Smooth(SmoothArgs),
    /// Double-smoothed certificate for quantized inputs under an error budget.
    Realistic(RealisticArgs),
    /// Distribution-free upper bound on the conversion error over a dataset.
    EstimateError(EstimateArgs),
    /// Certified intervals of several smoothing laws over a pa grid as CSV.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CsvOutput {
    /// Emit the JSON envelope instead of CSV.
    #[arg(long)]
    json: bool,
    /// Also write the run manifest to this file.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[command(flatten)]
    out: CsvOutput,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistArg {
    Rayleigh,
    #[value(name = "inv-rayleigh", alias = "inverse-rayleigh")]
    InvRayleigh,
    LogGaussian,
    LogLaplace,
    LogUniform,
}

impl DistArg {
    fn kind(self) -> DistributionKind {
        match self {
            DistArg::Rayleigh => DistributionKind::Rayleigh,
            DistArg::InvRayleigh => DistributionKind::InverseRayleigh,
            DistArg::LogGaussian => DistributionKind::LogGaussian,
            DistArg::LogLaplace => DistributionKind::LogLaplace,
            DistArg::LogUniform => DistributionKind::LogUniform,
        }
    }

    /// Rayleigh kinds default to the unit-median σ; log-space kinds to the
    /// scale whose log-spread matches it.
    fn distribution(self, scale: Option<f64>) -> Result<SmoothingDistribution> {
        let kind = self.kind();
        let scale = match scale {
            Some(s) => s,
            None if kind.is_log_space() => matched_log_scale(kind)?,
            None => RayleighParams::unit_median().sigma(),
        };
        Ok(SmoothingDistribution::new(kind, scale)?)
    }
}

#[derive(Args)]
struct CertArgs {
    /// Lower bound on the top-class probability.
    #[arg(long)]
    pa: f64,
    /// Upper bound on the runner-up probability.
    #[arg(long, required_unless_present = "trivial_pb", conflicts_with = "trivial_pb")]
    pb: Option<f64>,
    /// Use pb = 1 - pa.
    #[arg(long)]
    trivial_pb: bool,
    #[arg(long, value_enum, default_value = "rayleigh")]
    dist: DistArg,
    /// σ for Rayleigh kinds, log-space scale otherwise.
    #[arg(long)]
    scale: Option<f64>,
    /// Confidence recorded on the certificate.
    #[arg(long, default_value_t = 1.0)]
    confidence: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SmoothArgs {
    /// MST1 input tensor.
    #[arg(long)]
    input: PathBuf,
    /// Classifier manifest (JSON).
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = SmoothingConfig::DEFAULT_N0)]
    n0: u64,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "rayleigh")]
    dist: DistArg,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, value_enum, default_value = "trivial")]
    runner_up: RunnerUpArg,
    /// Also walk the attack factor grid on the smoothed vote.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long, default_value_t = 3.0)]
    gamma_max: f64,
    /// Label the sweep must keep; defaults to the predicted label.
    #[arg(long)]
    true_label: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunnerUpArg {
    Trivial,
    Empirical,
}

#[derive(Args)]
struct RealisticArgs {
    /// Error budget JSON.
    #[arg(long)]
    budget: PathBuf,
    /// Sampling config JSON; a missing seed is filled from --seed.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Directory of MST1 tensors; every `*.mst1` file is used.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    gamma_min: f64,
    #[arg(long)]
    gamma_max: f64,
    #[arg(long, default_value_t = 0.9)]
    qe: f64,
    #[arg(long, default_value_t = 0.01)]
    alphae: f64,
    /// `N` or `points:N` for N even points, `lattice:STEP` for multiples of STEP.
    #[arg(long, default_value = "points:64", value_parser = parse_grid)]
    grid: GammaGrid,
    #[arg(long, default_value_t = 1)]
    draws_per_input: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated smoothing laws.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "rayleigh,log-gaussian,log-laplace,log-uniform")]
    dists: Vec<DistArg>,
    /// Comma list `a,b,c` or range `start:stop:step`; pb = 1 - pa.
    #[arg(long, default_value = DEFAULT_PA_GRID, value_parser = parse_pa_grid)]
    pa_grid: PaGrid,
    #[command(flatten)]
    out: CsvOutput,
}

#[derive(Clone, Debug)]
struct PaGrid(Vec<f64>);

fn parse_grid(s: &str) -> Result<GammaGrid, String> {
    let (kind, value) = s.split_once(':').unwrap_or(("points", s));
    match kind {
        "points" => value
            .parse()
            .map(GammaGrid::Points)
            .map_err(|e| format!("bad point count {value:?}: {e}")),
        "lattice" => value
            .parse()
            .map(GammaGrid::Lattice)
            .map_err(|e| format!("bad lattice step {value:?}: {e}")),
        _ => Err(format!("unknown grid kind {kind:?}; expected points or lattice")),
    }
}

fn parse_pa_grid(s: &str) -> Result<PaGrid, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}"));
    let values = if let [start, stop, step] = s.split(':').collect::<Vec<_>>()[..] {
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err("range needs start <= stop and step > 0".into());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=count).map(|i| start + i as f64 * step).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() || values.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err("pa values must lie in (0, 1)".into());
    }
    Ok(PaGrid(values))
}

/// Provenance block written alongside every result.
#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: Value,
    seed: u64,
    version: &'static str,
    duration_ms: f64,
}

struct Report {
    command: &'static str,
    config: Value,
    result: Value,
    csv: Option<String>,
    abstained: bool,
}

impl Report {
    fn json(command: &'static str, config: Value, result: impl Serialize, abstained: bool) -> Result<Report> {
        Ok(Report {
            command,
            config,
            result: serde_json::to_value(result)?,
            csv: None,
            abstained,
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::from(2),
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether the command abstained.
fn run(cli: Cli) -> Result<bool> {
    let start = Instant::now();
    let seed = cli.seed;
    let (report, csv_out) = match &cli.command {
        Command::Table(a) => (cmd_table()?, Some(&a.out)),
        Command::Cert(a) => (cmd_cert(a)?, None),
        Command::Smooth(a) => (cmd_smooth(a, seed)?, None),
        Command::Realistic(a) => (cmd_realistic(a, seed)?, None),
        Command::EstimateError(a) => (cmd_estimate_error(a, seed)?, None),
        Command::Compare(a) => (cmd_compare(a)?, Some(&a.out)),
    };
    let manifest = RunManifest {
        command: report.command,
        config: report.config,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        duration_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    let plain_cert = matches!(&cli.command, Command::Cert(a) if !a.json);
    if let Some(out) = csv_out {
        if let Some(path) = &out.manifest {
            std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")
                .with_context(|| format!("writing manifest {}", path.display()))?;
        }
        if !out.json {
            print!("{}", report.csv.expect("csv commands render csv"));
            return Ok(report.abstained);
        }
    }
    if plain_cert {
        print!("{}", render_plain_cert(&report.result));
    } else {
        let envelope = json!({ "manifest": manifest, "result": report.result });
        println!("{}", serde_json::to_string_pretty(&envelope)?);
    }
    Ok(report.abstained)
}

fn render_plain_cert(result: &Value) -> String {
    if result["outcome"] == "certified" {
        let g2 = result["gamma2"].as_f64().map_or("inf".to_string(), |g| format!("{g:.4}"));
        format!(
            "certified: gamma1 = {:.4}, gamma2 = {g2}\nmethod: {}\nconfidence: {}\n",
            result["gamma1"].as_f64().unwrap_or(f64::NAN),
            result["method"].as_str().unwrap_or("?"),
            result["confidence"],
        )
    } else {
        format!("abstain: {}\n", result["reason"].as_str().unwrap_or("?"))
    }
}

fn fmt_gamma(g: f64) -> String {
    if g.is_finite() {
        format!("{g}")
    } else {
        "inf".into()
    }
}

fn cmd_table() -> Result<Report> {
    let mut csv = String::from("pa,pb,gamma1,gamma2,gamma1_full,gamma2_full\n");
    let mut rows = Vec::new();
    for &(pa, pb) in &REFERENCE_BOUNDS {
        let outcome = certify_rayleigh(&ProbBounds::new(pa, pb, 1.0)?)?;
        let c = outcome.certificate().context("reference row abstained")?;
        writeln!(
            csv,
            "{pa:.3},{pb:.3},{:.2},{:.2},{},{}",
            c.gamma1,
            c.gamma2,
            c.gamma1,
            fmt_gamma(c.gamma2)
        )?;
        rows.push(json!({ "pa": pa, "pb": pb, "gamma1": c.gamma1, "gamma2": c.gamma2 }));
    }
    let config = json!({ "distribution": SmoothingDistribution::rayleigh(RayleighParams::unit_median()) });
    Ok(Report {
        command: "table",
        config,
        result: json!({ "rows": rows }),
        csv: Some(csv),
        abstained: false,
    })
}

fn cmd_cert(a: &CertArgs) -> Result<Report> {
    let pb = if a.trivial_pb { 1.0 - a.pa } else { a.pb.expect("clap enforces --pb") };
    if !(a.pa > 0.0 && a.pa < 1.0) {
        bail!("--pa must lie in (0, 1), got {}", a.pa);
    }
    if !(0.0..1.0).contains(&pb) {
        bail!("--pb must lie in [0, 1), got {pb}");
    }
    if a.pa + pb > 1.0 + 1e-12 {
        bail!("--pa {} and --pb {pb} sum above 1; they bound disjoint events", a.pa);
    }
    let dist = a.dist.distribution(a.scale)?;
    let outcome = certify_bounds(&dist, &ProbBounds::new(a.pa, pb, a.confidence)?)?;
    let config = json!({ "pa": a.pa, "pb": pb, "distribution": dist, "confidence": a.confidence });
    Report::json("cert", config, outcome, outcome.is_abstain())
}

fn read_input(path: &Path) -> Result<ImageTensor> {
    read_tensor(path).with_context(|| format!("reading input tensor {}", path.display()))
}

fn cmd_smooth(a: &SmoothArgs, seed: u64) -> Result<Report> {
    let x = read_input(&a.input)?;
    let base = load_classifier(&a.classifier).with_context(|| format!("loading classifier {}", a.classifier.display()))?;
    let runner_up = match a.runner_up {
        RunnerUpArg::Trivial => RunnerUpBound::Trivial,
        RunnerUpArg::Empirical => RunnerUpBound::Empirical,
    };
    let cfg = SmoothingConfig::new(a.n, a.alpha, a.dist.distribution(a.scale)?, seed)?
        .with_n0(a.n0)?
        .with_runner_up(runner_up);
    let smoothed = SmoothedClassifier::new(base.as_ref(), cfg)?;
    let prediction = smoothed.predict_certify(&x)?;
    let mut config = json!({
        "input": a.input,
        "classifier": a.classifier,
        "base": base.describe(),
        "smoothing": cfg,
    });
    let mut result = json!({ "prediction": prediction });
    if a.sweep {
        let label = a.true_label.or(prediction.label.class());
        let sweep = match label {
            Some(l) => smoothed_sweep(&smoothed, &x, Some(l), a.step, a.gamma_max)?,
            None => None,
        };
        config["sweep"] = json!({ "step": a.step, "gamma_max": a.gamma_max, "true_label": label });
        result["sweep"] = serde_json::to_value(sweep)?;
    }
    let abstained = prediction.label == Label::Abstain;
    Report::json("smooth", config, result, abstained)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_realistic(a: &RealisticArgs, seed: u64) -> Result<Report> {
    let budget: ErrorBudget = serde_json::from_value(read_json(&a.budget)?)
        .with_context(|| format!("invalid budget {}", a.budget.display()))?;
    let mut raw = read_json(&a.config)?;
    if let Some(obj) = raw.as_object_mut() {
        obj.entry("seed").or_insert(seed.into());
    }
    let cfg: RealisticConfig =
        serde_json::from_value(raw).with_context(|| format!("invalid config {}", a.config.display()))?;
    let x = read_input(&a.input)?;
    let base = load_classifier(&a.classifier).with_context(|| format!("loading classifier {}", a.classifier.display()))?;
    let result = certify_realistic(base.as_ref(), &x, &cfg, &budget)?;
    let config = json!({
        "input": a.input,
        "classifier": a.classifier,
        "base": base.describe(),
        "budget": budget,
        "sampling": cfg,
    });
    let abstained = result.label == Label::Abstain;
    Report::json("realistic", config, result, abstained)
}

fn cmd_estimate_error(a: &EstimateArgs, seed: u64) -> Result<Report> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.dataset)
        .with_context(|| format!("reading dataset directory {}", a.dataset.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "mst1"));
    files.sort();
    if files.is_empty() {
        bail!("no .mst1 files in {}", a.dataset.display());
    }
    let dataset = files.iter().map(|p| read_input(p)).collect::<Result<Vec<_>>>()?;
    let cfg = ConversionErrorConfig {
        gamma_interval: GammaInterval::new(a.gamma_min, a.gamma_max)?,
        q_e: a.qe,
        alpha_e: a.alphae,
        grid: a.grid,
        draws_per_input: a.draws_per_input,
        seed,
    };
    let estimate = estimate_conversion_error(&dataset, &cfg)?;
    let config = json!({ "dataset": a.dataset, "files": files.len(), "estimation": cfg });
    Report::json("estimate-error", config, estimate, false)
}

#[derive(Serialize)]
struct CompareRow {
    distribution: DistributionKind,
    scale: f64,
    pa: f64,
    pb: f64,
    certificate: Option<Certificate>,
}

fn cmd_compare(a: &CompareArgs) -> Result<Report> {
    let dists = a
        .dists
        .iter()
        .map(|d| d.distribution(None))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("distribution,scale,pa,pb,gamma1,gamma2,log_width\n");
    let mut rows = Vec::new();
    for &pa in &a.pa_grid.0 {
        // 1 - 0.9 is 0.09999999999999998; the grid is given to far fewer digits
        let pb = ((1.0 - pa) * 1e12).round() / 1e12;
        for dist in &dists {
            let outcome = certify_bounds(dist, &ProbBounds::new(pa, pb, 1.0)?)?;
            let cert = match outcome {
                CertOutcome::Certified(c) => Some(c),
                CertOutcome::Abstain(_) => None,
            };
            match cert {
                Some(c) => writeln!(
                    csv,
                    "{},{},{pa},{pb},{},{},{}",
                    dist.kind(),
                    dist.scale(),
                    c.gamma1,
                    fmt_gamma(c.gamma2),
                    fmt_gamma((c.gamma2 / c.gamma1).ln())
                )?,
                None => writeln!(csv, "{},{},{pa},{pb},,,", dist.kind(), dist.scale())?,
            }
            rows.push(CompareRow {
                distribution: dist.kind(),
                scale: dist.scale(),
                pa,
                pb,
                certificate: cert,
            });
        }
    }
    let config = json!({ "distributions": dists, "pa_grid": a.pa_grid.0 });
    Ok(Report {
        command: "compare",
        config,
        result: json!({ "rows": rows }),
        csv: Some(csv),
        abstained: false,
    })
}
