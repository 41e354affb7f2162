//! Command-line front end: config loading, the fit → propagate → tune →
//! validate pipeline, and report emission.
//!
//! Every command computes all of its outputs in memory first and writes them
//! only when the whole pipeline succeeded.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::detector::{self, ChiSquaredDetector, TuningReport};
use crate::em::{em_fit, read_samples_csv};
use crate::error::{Error, Result};
use crate::gmm::{Gmm, GmmJson, GmmSampler, ReductionConfig};
use crate::linalg;
use crate::lti::{self, LtiSystem, NoiseSource, ZeroNoise};
use crate::mc::{self, EmpiricalSummary, McOptions};
use crate::residual::{self, ReductionSpec, ResidualModel};

pub const DEFAULT_TAIL_TOL: f64 = 1e-6;
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;
pub const DEFAULT_CDF_POINTS: usize = 100;

#[derive(Debug, Parser)]
#[command(
    name = "chi2tune",
    version,
    about = "Tune chi-squared residual detectors under Gaussian-mixture noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find the threshold that gives `target_rate`.
    Tune(JobArgs),
    /// False-alarm rate of the configured `alpha`.
    Evaluate(JobArgs),
    /// Fit a Gaussian mixture to samples with EM.
    FitNoise(FitArgs),
    /// Simulate plant and observer and dump the residual trace.
    Simulate(SimArgs),
}

#[derive(Debug, Args)]
pub struct JobArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also run the Monte-Carlo oracle.
    #[arg(long)]
    pub mc: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tail_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Headerless CSV, one sample per row.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub modes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tail_tol: Option<f64>,
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 2 for input/config errors, 3 for numerical failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                2
            } else {
                3
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Tune(a) => run_job(&a, Mode::Tune),
        Command::Evaluate(a) => run_job(&a, Mode::Evaluate),
        Command::FitNoise(a) => run_fit(&a),
        Command::Simulate(a) => run_simulate(&a),
    }
}

// ---------------------------------------------------------------- config

/// System matrices as stored in JSON; `G` may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemJson {
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<f64>>,
}

impl SystemJson {
    pub fn build(&self) -> Result<LtiSystem> {
        let f = linalg::from_rows("system.F", &self.f)?;
        let c = linalg::from_rows("system.C", &self.c)?;
        let l = linalg::from_rows("system.L", &self.l)?;
        match &self.g {
            Some(g) => LtiSystem::new(f, linalg::from_rows("system.G", g)?, c, l),
            None => LtiSystem::without_input(f, c, l),
        }
    }

    pub fn from_system(sys: &LtiSystem) -> Self {
        Self {
            f: linalg::to_rows(sys.f()),
            g: Some(linalg::to_rows(sys.g())),
            c: linalg::to_rows(sys.c()),
            l: linalg::to_rows(sys.l()),
        }
    }
}

/// Where a noise model comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Gmm(Gmm),
    Samples {
        path: PathBuf,
        mode_count: usize,
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSpec {
    pub samples: usize,
    pub burn_in: Option<usize>,
    pub seed: Option<u64>,
    pub batches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfSpec {
    pub alpha_max: Option<f64>,
    pub points: usize,
}

/// Parsed job configuration with paths resolved against the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct JobConfig {
    pub system: SystemJson,
    pub noise_eta: NoiseSpec,
    pub noise_v: Option<NoiseSpec>,
    pub tail_tol: Option<f64>,
    pub k_star: Option<usize>,
    pub reduction: ReductionSpec,
    pub alpha: Option<f64>,
    pub target_rate: Option<f64>,
    pub mc: McSpec,
    pub cdf: CdfSpec,
}

fn field<T: DeserializeOwned>(
    obj: &Map<String, Value>,
    name: &str,
    prefix: &str,
) -> Result<Option<T>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| Error::config(format!("{prefix}{name}"), e.to_string())),
    }
}

fn object<'a>(v: &'a Value, name: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::config(name, "expected a JSON object"))
}

fn reject_unknown(obj: &Map<String, Value>, known: &[&str], prefix: &str) -> Result<()> {
    match obj.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(Error::config(format!("{prefix}{k}"), "unknown field")),
        None => Ok(()),
    }
}

fn read_json(path: &Path, name: &str) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(name, format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(name, format!("{}: {e}", path.display())))
}

/// An inline object, or a string path to a JSON file holding one.
fn inline_or_file(v: &Value, name: &str, base: &Path) -> Result<Value> {
    match v {
        Value::String(p) => read_json(&base.join(p), name),
        Value::Object(_) => Ok(v.clone()),
        _ => Err(Error::config(name, "expected an object or a path string")),
    }
}

fn parse_noise(v: &Value, name: &str, base: &Path) -> Result<NoiseSpec> {
    let obj = object(v, name)?;
    let prefix = format!("{name}.");
    reject_unknown(obj, &["gmm", "samples", "mode_count", "seed"], &prefix)?;
    match (obj.get("gmm"), obj.get("samples")) {
        (Some(g), None) => {
            for k in ["mode_count", "seed"] {
                if obj.contains_key(k) {
                    return Err(Error::config(
                        format!("{prefix}{k}"),
                        "only valid together with `samples`",
                    ));
                }
            }
            let doc: GmmJson =
                serde_json::from_value(inline_or_file(g, &format!("{prefix}gmm"), base)?)
                    .map_err(|e| Error::config(format!("{prefix}gmm"), e.to_string()))?;
            Ok(NoiseSpec::Gmm(Gmm::from_json(&doc)?))
        }
        (None, Some(_)) => {
            let path: String = field(obj, "samples", &prefix)?.expect("present");
            let mode_count: usize = field(obj, "mode_count", &prefix)?.ok_or_else(|| {
                Error::config(format!("{prefix}mode_count"), "required with `samples`")
            })?;
            if mode_count == 0 {
                return Err(Error::config(
                    format!("{prefix}mode_count"),
                    "must be positive",
                ));
            }
            Ok(NoiseSpec::Samples {
                path: base.join(path),
                mode_count,
                seed: field(obj, "seed", &prefix)?,
            })
        }
        _ => Err(Error::config(
            name,
            "exactly one of `gmm` or `samples` is required",
        )),
    }
}

fn parse_reduction(v: Option<&Value>) -> Result<ReductionSpec> {
    match v {
        None | Some(Value::Null) => Ok(ReductionSpec::Auto),
        Some(Value::String(s)) => match s.as_str() {
            "auto" => Ok(ReductionSpec::Auto),
            "none" => Ok(ReductionSpec::None),
            other => Err(Error::config(
                "reduction",
                format!("unknown keyword `{other}`"),
            )),
        },
        Some(v @ Value::Object(_)) => {
            let cfg: ReductionConfig = serde_json::from_value(v.clone())
                .map_err(|e| Error::config("reduction", e.to_string()))?;
            let checked = ReductionConfig::new(cfg.d_mu, cfg.d_k)
                .map_err(|e| Error::config("reduction", e.to_string()))?
                .with_merge(cfg.merge);
            Ok(ReductionSpec::Fixed(checked))
        }
        Some(_) => Err(Error::config(
            "reduction",
            "expected \"auto\", \"none\" or {d_mu, d_K}",
        )),
    }
}

impl JobConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        let obj = object(&root, "config")?;
        reject_unknown(
            obj,
            &[
                "system",
                "noise_eta",
                "noise_v",
                "tail_tol",
                "k_star",
                "reduction",
                "alpha",
                "target_rate",
                "mc",
                "cdf",
            ],
            "",
        )?;

        let system_value = obj
            .get("system")
            .ok_or_else(|| Error::config("system", "required"))?;
        let system: SystemJson =
            serde_json::from_value(inline_or_file(system_value, "system", base)?)
                .map_err(|e| Error::config("system", e.to_string()))?;

        let noise_eta = parse_noise(
            obj.get("noise_eta")
                .ok_or_else(|| Error::config("noise_eta", "required"))?,
            "noise_eta",
            base,
        )?;
        let noise_v = match obj.get("noise_v") {
            None | Some(Value::Null) => None,
            Some(v) => Some(parse_noise(v, "noise_v", base)?),
        };

        let tail_tol: Option<f64> = field(obj, "tail_tol", "")?;
        if let Some(t) = tail_tol {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config("tail_tol", "must lie in (0, 1)"));
            }
        }
        let k_star: Option<usize> = field(obj, "k_star", "")?;
        if k_star == Some(0) {
            return Err(Error::config("k_star", "must be positive"));
        }
        let alpha: Option<f64> = field(obj, "alpha", "")?;
        if let Some(a) = alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("alpha", "must be positive"));
            }
        }
        let target_rate: Option<f64> = field(obj, "target_rate", "")?;
        if let Some(t) = target_rate {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config("target_rate", "must lie in (0, 1)"));
            }
        }

        let mc = match obj.get("mc") {
            None | Some(Value::Null) => McSpec {
                samples: DEFAULT_MC_SAMPLES,
                burn_in: None,
                seed: None,
                batches: mc::DEFAULT_BATCHES,
            },
            Some(v) => {
                let m = object(v, "mc")?;
                reject_unknown(m, &["samples", "burn_in", "seed", "batches"], "mc.")?;
                let spec = McSpec {
                    samples: field(m, "samples", "mc.")?.unwrap_or(DEFAULT_MC_SAMPLES),
                    burn_in: field(m, "burn_in", "mc.")?,
                    seed: field(m, "seed", "mc.")?,
                    batches: field(m, "batches", "mc.")?.unwrap_or(mc::DEFAULT_BATCHES),
                };
                if spec.samples == 0 {
                    return Err(Error::config("mc.samples", "must be positive"));
                }
                if spec.batches == 0 {
                    return Err(Error::config("mc.batches", "must be positive"));
                }
                spec
            }
        };
        let cdf = match obj.get("cdf") {
            None | Some(Value::Null) => CdfSpec {
                alpha_max: None,
                points: DEFAULT_CDF_POINTS,
            },
            Some(v) => {
                let c = object(v, "cdf")?;
                reject_unknown(c, &["alpha_max", "points"], "cdf.")?;
                let spec = CdfSpec {
                    alpha_max: field(c, "alpha_max", "cdf.")?,
                    points: field(c, "points", "cdf.")?.unwrap_or(DEFAULT_CDF_POINTS),
                };
                if spec.points == 0 {
                    return Err(Error::config("cdf.points", "must be positive"));
                }
                if let Some(a) = spec.alpha_max {
                    if !(a > 0.0 && a.is_finite()) {
                        return Err(Error::config("cdf.alpha_max", "must be positive"));
                    }
                }
                spec
            }
        };

        Ok(Self {
            system,
            noise_eta,
            noise_v,
            tail_tol,
            k_star,
            reduction: parse_reduction(obj.get("reduction"))?,
            alpha,
            target_rate,
            mc,
            cdf,
        })
    }
}

// ---------------------------------------------------------------- pipeline

/// Timing and progress lines destined for `run.log`.
#[derive(Default)]
struct RunLog {
    text: String,
    start: Option<Instant>,
}

impl RunLog {
    fn new() -> Self {
        Self {
            text: String::new(),
            start: Some(Instant::now()),
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        let _ = writeln!(self.text, "{name}: {:.3} s", t.elapsed().as_secs_f64());
        Ok(out)
    }

    fn finish(mut self) -> String {
        if let Some(s) = self.start {
            let _ = writeln!(self.text, "total: {:.3} s", s.elapsed().as_secs_f64());
        }
        self.text
    }
}

/// Pending output files, written together once everything succeeded.
struct Outputs(Vec<(String, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.0.push((name.to_string(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    fn write(self, dir: &Path, log: RunLog) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.0 {
            std::fs::write(dir.join(name), bytes)?;
        }
        std::fs::write(dir.join("run.log"), log.finish())?;
        Ok(())
    }
}

fn resolve_noise(spec: &NoiseSpec, default_seed: u64) -> Result<Gmm> {
    match spec {
        NoiseSpec::Gmm(g) => Ok(g.clone()),
        NoiseSpec::Samples {
            path,
            mode_count,
            seed,
        } => {
            let samples = read_samples_csv(path)?;
            Ok(em_fit(&samples, *mode_count, seed.unwrap_or(default_seed))?.gmm)
        }
    }
}

struct Pipeline {
    sys: LtiSystem,
    eta: Gmm,
    v: Option<Gmm>,
    model: ResidualModel,
}

fn build_pipeline(cfg: &JobConfig, tail_tol: f64, seed: u64, log: &mut RunLog) -> Result<Pipeline> {
    let sys = cfg.system.build()?;
    let eta = log.stage("noise_eta", || resolve_noise(&cfg.noise_eta, seed))?;
    let v = match &cfg.noise_v {
        Some(s) => Some(log.stage("noise_v", || resolve_noise(s, seed))?),
        None => None,
    };
    if eta.dim() != sys.p() {
        return Err(Error::dim("noise_eta", sys.p(), eta.dim()));
    }
    if let Some(v) = &v {
        if v.dim() != sys.n() {
            return Err(Error::dim("noise_v", sys.n(), v.dim()));
        }
    }
    let k_star = match cfg.k_star {
        Some(k) => k,
        None => lti::settling_horizon(&sys, tail_tol)?,
    };
    let model = log.stage("residual_model", || {
        residual::residual_model_at(&sys, &eta, v.as_ref(), k_star, cfg.reduction)
    })?;
    Ok(Pipeline { sys, eta, v, model })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Tune,
    Evaluate,
}

/// Contents of `tuning_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub command: String,
    pub alpha: f64,
    pub false_alarm: f64,
    pub target_rate: Option<f64>,
    pub k_star: usize,
    pub tail_tol: Option<f64>,
    pub reduction: ReductionConfig,
    /// Modes before reduction, as a decimal string when it fits in 128 bits.
    pub mode_count_exact: Option<String>,
    pub mode_count_exact_log10: f64,
    pub mode_count_reduced: usize,
    pub tuning: TuningReport,
    pub empirical: Option<EmpiricalSummary>,
    /// Analytic minus empirical false-alarm rate.
    pub analytic_minus_empirical: Option<f64>,
}

fn run_job(args: &JobArgs, mode: Mode) -> Result<()> {
    let mut log = RunLog::new();
    let cfg = JobConfig::load(&args.config)?;
    let tail_tol = args.tail_tol.or(cfg.tail_tol).unwrap_or(DEFAULT_TAIL_TOL);
    if !(tail_tol > 0.0 && tail_tol < 1.0) {
        return Err(Error::config("tail_tol", "must lie in (0, 1)"));
    }
    let seed = args.seed.unwrap_or(0);
    let p = build_pipeline(&cfg, tail_tol, seed, &mut log)?;

    let (alpha, report) = match mode {
        Mode::Tune => {
            let target = cfg
                .target_rate
                .ok_or_else(|| Error::config("target_rate", "required by `tune`"))?;
            log.stage("tune", || detector::tune_threshold(&p.model, target))?
        }
        Mode::Evaluate => {
            let alpha = cfg
                .alpha
                .ok_or_else(|| Error::config("alpha", "required by `evaluate`"))?;
            (
                alpha,
                log.stage("evaluate", || detector::false_alarm_rate(&p.model, alpha))?,
            )
        }
    };

    let alpha_max = cfg
        .cdf
        .alpha_max
        .unwrap_or_else(|| (3.0 * alpha).max(2.0 * p.model.p() as f64));
    let curve = log.stage("cdf_curve", || {
        detector::cdf_curve(&p.model, alpha_max, cfg.cdf.points)
    })?;

    let mut outputs = Outputs(Vec::new());
    let empirical = if args.mc {
        let det = ChiSquaredDetector::for_model(&p.model, alpha)?;
        let opts = McOptions {
            samples: cfg.mc.samples,
            burn_in: cfg.mc.burn_in.unwrap_or(5 * p.model.k_star),
            seed: args.seed.or(cfg.mc.seed).unwrap_or(0),
            batches: cfg.mc.batches,
            histogram_bins: 100,
            ks_per_batch: mc::DEFAULT_KS_SAMPLES.div_ceil(cfg.mc.batches),
        };
        let summary = log.stage("monte_carlo", || {
            mc::empirical_false_alarm(
                &p.sys,
                &p.eta,
                p.v.as_ref(),
                &det,
                &opts,
                Some(&p.model.mixture),
            )
        })?;
        let mut hist = Vec::new();
        summary.histogram.write_csv(&mut hist)?;
        outputs.add("histogram.csv", hist);
        Some(summary)
    } else {
        None
    };

    let job = JobReport {
        command: match mode {
            Mode::Tune => "tune".into(),
            Mode::Evaluate => "evaluate".into(),
        },
        alpha,
        false_alarm: report.false_alarm,
        target_rate: if mode == Mode::Tune {
            cfg.target_rate
        } else {
            None
        },
        k_star: p.model.k_star,
        tail_tol: if cfg.k_star.is_some() {
            None
        } else {
            Some(tail_tol)
        },
        reduction: p.model.reduction,
        mode_count_exact: p.model.mode_count_exact.map(|c| c.to_string()),
        mode_count_exact_log10: p.model.mode_count_exact_log10,
        mode_count_reduced: p.model.mixture.len(),
        analytic_minus_empirical: empirical
            .as_ref()
            .map(|e| report.false_alarm - e.alarm_rate),
        empirical,
        tuning: report,
    };

    outputs.add_json("tuning_report.json", &job)?;
    outputs.add_json("residual_model.json", &p.model.to_json())?;
    outputs.add("cdf_curve.csv", curve_csv(&curve)?);
    outputs.write(&args.out, log)
}

fn curve_csv(curve: &[(f64, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "false_alarm"])?;
    for (a, f) in curve {
        w.write_record(&[a.to_string(), f.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let mut log = RunLog::new();
    if args.modes == 0 {
        return Err(Error::config("modes", "must be positive"));
    }
    let samples = read_samples_csv(&args.samples)?;
    let fit = log.stage("em_fit", || em_fit(&samples, args.modes, args.seed))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "log_likelihood"])?;
    w.write_record(&["0".to_string(), fit.initial_log_likelihood.to_string()])?;
    for (i, ll) in fit.trace.iter().enumerate() {
        w.write_record(&[(i + 1).to_string(), ll.to_string()])?;
    }
    let trace = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    let mut outputs = Outputs(Vec::new());
    outputs.add_json("fitted_gmm.json", &fit.gmm.to_json())?;
    outputs.add("loglik_trace.csv", trace);
    outputs.write(&args.out, log)
}

fn run_simulate(args: &SimArgs) -> Result<()> {
    let mut log = RunLog::new();
    let cfg = JobConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(0);
    let sys = cfg.system.build()?;
    let eta = resolve_noise(&cfg.noise_eta, seed)?;
    if eta.dim() != sys.p() {
        return Err(Error::dim("noise_eta", sys.p(), eta.dim()));
    }
    let v = match &cfg.noise_v {
        Some(s) => Some(resolve_noise(s, seed)?),
        None => None,
    };

    // distance measure column when a threshold is configured
    let det = match cfg.alpha {
        Some(alpha) => {
            let tail_tol = args.tail_tol.or(cfg.tail_tol).unwrap_or(DEFAULT_TAIL_TOL);
            let p = build_pipeline(&cfg, tail_tol, seed, &mut log)?;
            Some(ChiSquaredDetector::for_model(&p.model, alpha)?)
        }
        None => None,
    };

    let eta_s = GmmSampler::new(&eta)?;
    let zero = ZeroNoise(sys.n());
    let v_s;
    let v_src: &dyn NoiseSource = match &v {
        Some(g) => {
            v_s = GmmSampler::new(g)?;
            &v_s
        }
        None => &zero,
    };
    let trace = log.stage("simulate", || {
        lti::simulate(&sys, v_src, &eta_s, &[], args.steps, seed)
    })?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    header.extend((0..sys.p()).map(|i| format!("r{i}")));
    if det.is_some() {
        header.push("z".into());
        header.push("alarm".into());
    }
    w.write_record(&header)?;
    for (k, r) in trace.residuals.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(r.iter().map(|x| x.to_string()));
        if let Some(d) = &det {
            let z = d.distance(r);
            row.push(z.to_string());
            row.push(u8::from(z > d.threshold()).to_string());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut outputs = Outputs(Vec::new());
    outputs.add("residual_trace.csv", bytes);
    outputs.write(&args.out, log)
}

/// Config JSON for a system and noise mixtures, used by tests and examples.
pub fn job_config_json(
    sys: &LtiSystem,
    noise_eta: &Gmm,
    noise_v: Option<&Gmm>,
    extra: &[(&str, Value)],
) -> Value {
    let mut obj = Map::new();
    obj.insert(
        "system".into(),
        serde_json::to_value(SystemJson::from_system(sys)).expect("serializable"),
    );
    obj.insert(
        "noise_eta".into(),
        serde_json::json!({ "gmm": noise_eta.to_json() }),
    );
    if let Some(v) = noise_v {
        obj.insert("noise_v".into(), serde_json::json!({ "gmm": v.to_json() }));
    }
    for (k, v) in extra {
        obj.insert((*k).to_string(), v.clone());
    }
    Value::Object(obj)
}

/// Convenience for building systems from row slices.
pub fn matrix(rows: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base_config() -> Value {
        json!({
            "system": {"F": [[0.8, 0.2], [-0.25, 0.1]], "C": [[0.5, 0.5]], "L": [[0.3], [-0.3]]},
            "noise_eta": {"gmm": {"dim": 1, "modes": [{"weight": 1.0, "mean": [0.0], "cov": [[1.0]]}]}},
            "alpha": 1.0
        })
    }

    fn parse(v: &Value) -> Result<JobConfig> {
        JobConfig::parse(&v.to_string(), Path::new("."))
    }

    fn config_field(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn parses_minimal_config() {
        let cfg = parse(&base_config()).unwrap();
        assert_eq!(cfg.reduction, ReductionSpec::Auto);
        assert!(cfg.noise_v.is_none());
        assert_eq!(cfg.mc.batches, mc::DEFAULT_BATCHES);
        let sys = cfg.system.build().unwrap();
        assert_eq!(sys.g().shape(), (2, 1));
    }

    #[test]
    fn reduction_forms() {
        let mut v = base_config();
        v["reduction"] = json!("none");
        assert_eq!(parse(&v).unwrap().reduction, ReductionSpec::None);
        v["reduction"] = json!({"d_mu": 0.1, "d_K": 0.2, "merge": "keep_representative"});
        match parse(&v).unwrap().reduction {
            ReductionSpec::Fixed(c) => {
                assert_eq!((c.d_mu, c.d_k), (0.1, 0.2));
                assert_eq!(c.merge, crate::MergeRule::KeepRepresentative);
            }
            other => panic!("{other:?}"),
        }
        v["reduction"] = json!({"d_mu": -1.0, "d_K": 0.2});
        assert_eq!(config_field(parse(&v).unwrap_err()), "reduction");
        v["reduction"] = json!("sometimes");
        assert_eq!(config_field(parse(&v).unwrap_err()), "reduction");
    }

    #[test]
    fn errors_name_the_field() {
        let mut v = base_config();
        v["target_rate"] = json!(1.5);
        assert_eq!(config_field(parse(&v).unwrap_err()), "target_rate");

        let mut v = base_config();
        v["noise_eta"] = json!({"gmm": {"dim": 1, "modes": []}, "samples": "x.csv"});
        assert_eq!(config_field(parse(&v).unwrap_err()), "noise_eta");

        let mut v = base_config();
        v["noise_eta"] = json!({"samples": "x.csv"});
        assert_eq!(config_field(parse(&v).unwrap_err()), "noise_eta.mode_count");

        let mut v = base_config();
        v["mc"] = json!({"samples": 0});
        assert_eq!(config_field(parse(&v).unwrap_err()), "mc.samples");

        let mut v = base_config();
        v["bogus"] = json!(1);
        assert_eq!(config_field(parse(&v).unwrap_err()), "bogus");

        let mut v = base_config();
        v.as_object_mut().unwrap().remove("system");
        assert_eq!(config_field(parse(&v).unwrap_err()), "system");

        let mut v = base_config();
        v["system"]["F"] = json!([[0.8, 0.2], [0.1]]);
        assert_eq!(
            config_field(parse(&v).unwrap().system.build().unwrap_err()),
            "system.F"
        );
    }

    #[test]
    fn malformed_json_is_an_input_error() {
        let e = JobConfig::parse("{ not json", Path::new(".")).unwrap_err();
        assert!(e.is_input_error());
    }

    #[test]
    fn unstable_system_is_numerical() {
        let mut v = base_config();
        v["system"]["F"] = json!([[2.0, 0.0], [0.0, 0.1]]);
        let e = parse(&v).unwrap().system.build().unwrap_err();
        assert!(!e.is_input_error());
    }

    #[test]
    fn config_builder_round_trips() {
        let sys = LtiSystem::without_input(matrix(&[&[0.5]]), matrix(&[&[1.0]]), matrix(&[&[0.2]]))
            .unwrap();
        let g = Gmm::single(nalgebra::DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let v = job_config_json(&sys, &g, None, &[("alpha", json!(2.0))]);
        let cfg = parse(&v).unwrap();
        assert_eq!(cfg.system.build().unwrap(), sys);
        assert_eq!(cfg.noise_eta, NoiseSpec::Gmm(g));
        assert_eq!(cfg.alpha, Some(2.0));
    }
}
