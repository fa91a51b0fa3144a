//! Command-line front end.
//!
//! Exit codes: 0 success, 1 audit found a violation, 2 input error
//! (bad flag, malformed config or model), 3 infeasible rate allocation,
//! 4 output could not be written.
//!
//! Configuration precedence: `key=value` overrides, then dedicated flags,
//! then the `--config` file, then built-in defaults.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bounds::{self, NormOrder, PerturbationBall, RobustnessReport};
use crate::channel::{self, TranscriptRow};
use crate::graph::{CompGraph, GraphSpec, ModalityInput, NodeKind, NodeSpec, Tensor, ToyFusionModel};
use crate::pipeline::{Experiment, ExperimentConfig, PipelineError, Scheme, TrialKey};
use crate::ratesolver::{self, ModalitySpec, SolverError, SolverInstance};

pub const EXIT_OK: i32 = 0;
pub const EXIT_AUDIT: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "semrate", version, about = "Rate-adaptive unequal error protection for multi-modal semantic transmission")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build (and train) the fusion model and write it as JSON.
    Model(ExperimentArgs),
    /// Certified output box, robustness bound and per-modality importance.
    Bound(BoundArgs),
    /// Per-modality semantic importance only.
    Importance(BoundArgs),
    /// Solve a rate-allocation instance by bisection.
    Solve(SolveArgs),
    /// Run trials at the first SNR point and print per-trial records.
    Simulate(ExperimentArgs),
    /// Run the SNR sweep and write the per-modality CSV.
    Sweep(ExperimentArgs),
    /// Check convexity, delay equality and end-to-end soundness.
    Audit(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed of the random streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated mean SNR grid in dB.
    #[arg(long = "snr-db", value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_db: Option<Vec<f64>>,
    #[arg(long)]
    pub delta0: Option<f64>,
    #[arg(long)]
    pub blocklength: Option<u64>,
    /// Quantization bits per feature element.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Comma-separated schemes: adaptive, fixed, fixed:R, errorfree.
    #[arg(long, value_delimiter = ',')]
    pub scheme: Option<Vec<String>>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Worker threads for the sweep.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Compute κ once from a calibration sample.
    #[arg(long)]
    pub freeze_kappa: bool,
    /// Config overrides as key=value (value parsed as JSON when possible).
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// JSON bound configuration; the built-in sum demo when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Uniform radius for every modality.
    #[arg(long)]
    pub delta: Option<f64>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// JSON solver instance; the built-in single-modality instance when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub delta0: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    pub overrides: Vec<String>,
}

/// Inputs of `bound` and `importance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    /// A graph JSON file or a fusion-model JSON file (its decoder is used).
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// An inline graph, used when `model` is absent.
    #[serde(default)]
    pub graph: Option<GraphSpec>,
    /// One vector per modality.
    pub center: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
    #[serde(default)]
    pub p: NormOrder,
}

/// y = u1 + u2 over two scalar modalities.
pub fn demo_sum_graph() -> GraphSpec {
    GraphSpec {
        nodes: vec![
            NodeSpec::new("u1", NodeKind::Input { modality: 0, dim: 1 }, &[]),
            NodeSpec::new("u2", NodeKind::Input { modality: 1, dim: 1 }, &[]),
            NodeSpec::new("y", NodeKind::Add, &["u1", "u2"]),
        ],
        output: "y".into(),
        modalities: vec![
            ModalityInput { input: "u1".into(), dim: 1 },
            ModalityInput { input: "u2".into(), dim: 1 },
        ],
    }
}

pub fn demo_bound_config() -> BoundConfig {
    BoundConfig {
        model: None,
        graph: Some(demo_sum_graph()),
        center: vec![vec![0.2], vec![0.3]],
        radii: vec![0.1, 0.1],
        p: NormOrder::Inf,
    }
}

/// a = 0.5, b = 1, k = 10, D = 1, Δ₀ = 0.05: τ* = 1 − ln(9)/10.
pub fn demo_solver_instance() -> SolverInstance {
    SolverInstance {
        delta0: 0.05,
        links: vec![ModalitySpec::Constants { payload_bits: 1.0, a: 0.5, b: 1.0, k: 10.0 }],
        tol: None,
        max_iter: None,
    }
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Infeasible(String),
    Io(String),
    Audit(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Io(_) => EXIT_IO,
            CliError::Audit(_) => EXIT_AUDIT,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Infeasible(m) | CliError::Io(m) | CliError::Audit(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Solver(SolverError::Infeasible(_)) => CliError::Infeasible(e.to_string()),
            PipelineError::Io(_) => CliError::Io(e.to_string()),
            PipelineError::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Infeasible(_) => CliError::Infeasible(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn input<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{context}: {e}"))
}

fn read_json_value(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(input(&format!("cannot read {}", path.display())))?;
    serde_json::from_str(&text).map_err(input(&format!("malformed JSON in {}", path.display())))
}

/// Applies `key=value` pairs; values are parsed as JSON, falling back to a string.
pub fn apply_overrides(base: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    let obj = base
        .as_object_mut()
        .ok_or_else(|| CliError::Input("configuration must be a JSON object".into()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("override '{o}' is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        obj.insert(key.trim().to_string(), value);
    }
    Ok(())
}

fn layered<T: Serialize + DeserializeOwned>(
    default: T,
    file: Option<&Path>,
    flags: Vec<(&str, Value)>,
    overrides: &[String],
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(default).expect("config serializes");
    if let Some(path) = file {
        let file_value = read_json_value(path)?;
        let Value::Object(fields) = file_value else {
            return Err(CliError::Input(format!("{} must hold a JSON object", path.display())));
        };
        let obj = value.as_object_mut().expect("config is an object");
        for (k, v) in fields {
            obj.insert(k, v);
        }
    }
    let obj = value.as_object_mut().expect("config is an object");
    for (k, v) in flags {
        obj.insert(k.to_string(), v);
    }
    apply_overrides(&mut value, overrides)?;
    serde_json::from_value(value).map_err(input("invalid configuration"))
}

pub fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig, CliError> {
    let mut flags: Vec<(&str, Value)> = Vec::new();
    if let Some(s) = args.seed {
        flags.push(("seed", s.into()));
    }
    if let Some(v) = &args.snr_db {
        flags.push(("snr_db", serde_json::to_value(v).expect("floats serialize")));
    }
    if let Some(v) = args.delta0 {
        flags.push(("delta0", v.into()));
    }
    if let Some(v) = args.blocklength {
        flags.push(("blocklength", v.into()));
    }
    if let Some(v) = args.bits {
        flags.push(("bits", v.into()));
    }
    if let Some(v) = &args.scheme {
        for s in v {
            s.parse::<Scheme>().map_err(|e| CliError::Input(e.to_string()))?;
        }
        flags.push(("schemes", serde_json::to_value(v).expect("strings serialize")));
    }
    if let Some(v) = args.tol {
        flags.push(("tol", v.into()));
    }
    if let Some(v) = args.jobs {
        flags.push(("jobs", v.into()));
    }
    if args.freeze_kappa {
        flags.push(("freeze_kappa", true.into()));
    }
    let config: ExperimentConfig = layered(ExperimentConfig::default(), args.config.as_deref(), flags, &args.overrides)?;
    config.validate().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(config)
}

fn bound_config(args: &BoundArgs) -> Result<BoundConfig, CliError> {
    let base = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(input(&format!("cannot read {}", path.display())))?;
            serde_json::from_str::<BoundConfig>(&text).map_err(input(&format!("malformed bound config {}", path.display())))?
        }
        None => demo_bound_config(),
    };
    let mut config: BoundConfig = layered(base, None, Vec::new(), &args.overrides)?;
    if let Some(d) = args.delta {
        config.radii = vec![d; config.radii.len().max(config.center.len())];
    }
    Ok(config)
}

fn load_graph(config: &BoundConfig) -> Result<CompGraph, CliError> {
    match (&config.model, &config.graph) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(input(&format!("cannot read {}", path.display())))?;
            match serde_json::from_str::<CompGraph>(&text) {
                Ok(g) => Ok(g),
                Err(graph_err) => match serde_json::from_str::<ToyFusionModel>(&text) {
                    Ok(m) => Ok(m.decoder().clone()),
                    Err(_) => Err(CliError::Input(format!("invalid model {}: {graph_err}", path.display()))),
                },
            }
        }
        (None, Some(spec)) => CompGraph::new(spec.clone()).map_err(input("invalid graph")),
        (None, None) => Err(CliError::Input("bound config needs 'model' or 'graph'".into())),
    }
}

fn certify_config(config: &BoundConfig) -> Result<RobustnessReport, CliError> {
    let graph = load_graph(config)?;
    let center: Vec<Tensor> = config
        .center
        .iter()
        .map(|v| Tensor::vector(v.clone()))
        .collect::<Result<_, _>>()
        .map_err(input("invalid center"))?;
    let ball = PerturbationBall::new(config.p, config.radii.clone()).map_err(input("invalid ball"))?;
    bounds::certify(&graph, &center, &ball).map_err(input("bound propagation failed"))
}

/// Writes `text` to `path`, or to `stdout` when no path is given.
fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display()))),
        None => stdout.write_all(text.as_bytes()).map_err(|e| CliError::Io(format!("stdout: {e}"))),
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("records serialize");
    s.push('\n');
    s
}

fn cmd_model(args: &ExperimentArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let config = experiment_config(args)?;
    let exp = Experiment::new(config)?;
    let meta = exp.model().metadata();
    let _ = writeln!(
        stderr,
        "model: dims {:?}, hidden {}, {} parameters, final loss {}",
        exp.model().feature_dims(),
        meta.hidden_dim,
        exp.model().num_parameters(),
        meta.training_loss.last().map_or("n/a".to_string(), |l| format!("{l:.6e}"))
    );
    emit(args.out.as_deref(), &pretty(exp.model()), stdout)
}

fn cmd_bound(args: &BoundArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let report = certify_config(&bound_config(args)?)?;
    emit(args.out.as_deref(), &pretty(&report), stdout)
}

fn cmd_importance(args: &BoundArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let config = bound_config(args)?;
    let report = certify_config(&config)?;
    #[derive(Serialize)]
    struct Importance {
        kappa: Vec<f64>,
        p: NormOrder,
    }
    emit(args.out.as_deref(), &pretty(&Importance { kappa: report.kappa, p: config.p }), stdout)
}

fn cmd_solve(args: &SolveArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let base = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(input(&format!("cannot read {}", path.display())))?;
            serde_json::from_str(&text).map_err(input(&format!("malformed solver instance {}", path.display())))?
        }
        None => demo_solver_instance(),
    };
    let mut flags: Vec<(&str, Value)> = Vec::new();
    if let Some(v) = args.delta0 {
        flags.push(("delta0", v.into()));
    }
    if let Some(v) = args.tol {
        flags.push(("tol", v.into()));
    }
    let inst: SolverInstance = layered(base, None, flags, &args.overrides)?;
    let links = inst.build_links()?;
    let sol = ratesolver::solve_bisection(
        &links,
        inst.delta0,
        inst.tol.unwrap_or(ratesolver::DEFAULT_TOL),
        inst.max_iter.unwrap_or(ratesolver::DEFAULT_MAX_ITER),
    )?;
    emit(args.out.as_deref(), &pretty(&sol), stdout)
}

fn cmd_simulate(args: &ExperimentArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let config = experiment_config(args)?;
    let exp = Experiment::new(config)?;
    let snr_db = exp.config().snr_db[0];
    let mut records = String::new();
    let mut transcript = Vec::new();
    for trial in 0..exp.config().trials as u64 {
        for r in exp.run_slot(0, trial) {
            let r = r.map_err(|f| CliError::from_failure(&f.error))?;
            if r.scheme != Scheme::ErrorFree {
                for (m, o) in r.modalities.iter().enumerate() {
                    transcript.push(TranscriptRow {
                        trial,
                        modality: m,
                        fading: exp.config().fading,
                        gain: o.gain,
                        snr: o.snr,
                        rate: o.rate,
                        eps: o.eps,
                        bits: o.payload_bits,
                        flips: o.flips,
                    });
                }
            }
            records.push_str(&serde_json::to_string(&r).expect("records serialize"));
            records.push('\n');
        }
    }
    let _ = TrialKey { snr_index: 0, snr_db, trial: 0 };
    stdout.write_all(records.as_bytes()).map_err(|e| CliError::Io(format!("stdout: {e}")))?;
    if let Some(path) = &args.out {
        let file = fs::File::create(path).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        channel::write_transcript(&transcript, file).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

impl CliError {
    fn from_failure(message: &str) -> Self {
        if message.contains("infeasible") {
            CliError::Infeasible(message.to_string())
        } else {
            CliError::Input(message.to_string())
        }
    }
}

fn cmd_sweep(args: &ExperimentArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let config = experiment_config(args)?;
    if let Some(path) = &args.out {
        // Fail on an unwritable path before doing any work.
        fs::File::create(path).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    }
    let sweep = Experiment::new(config)?.sweep()?;
    let csv = sweep.csv_string()?;
    emit(args.out.as_deref(), &csv, stdout)?;
    let log: &mut dyn Write = if args.out.is_some() { stdout } else { stderr };
    for s in &sweep.summaries {
        let _ = writeln!(
            log,
            "snr_db={} scheme={} trials={} failures={} mse={:.6e} mae={:.6e} delay={:.4} gamma_realized={:.4e} rates={:?} violations={}",
            s.snr_db,
            s.scheme,
            s.trials,
            s.failures,
            s.mse_mean,
            s.mae_mean,
            s.delay_mean,
            s.gamma_realized_mean,
            s.rate_mean,
            s.violations
        );
    }
    Ok(())
}

/// Outcome of `semrate audit`.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub convexity_points: usize,
    pub convexity_violations: usize,
    pub sign_mismatches: usize,
    pub max_cross_partial: f64,
    pub delay_mismatches: usize,
    pub soundness_violations: usize,
    pub failures: usize,
    pub trials: usize,
    pub passed: bool,
}

/// Convexity of the constraint on 10³ grid points per SNR, equal delays and
/// end-to-end soundness over the configured sweep.
pub fn run_audit(config: ExperimentConfig) -> Result<AuditReport, PipelineError> {
    let exp = Experiment::new(config)?;
    let fractions: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
    let prep = exp.prepare(&exp.draw_sample(0)?)?;
    let (mut points, mut violations, mut mismatches, mut cross) = (0, 0, 0, 0.0f64);
    for &snr in &exp.config().snr_db {
        let links = exp.links(&prep, &exp.channel_states(snr, 0)?)?;
        let audit = ratesolver::convexity_audit(&links, &fractions)?;
        points += audit.points.len();
        violations += audit.violations;
        mismatches += audit.sign_mismatches;
        cross = cross.max(audit.max_cross_partial);
    }
    let sweep = exp.sweep()?;
    let mut delay_mismatches = 0;
    for t in sweep.trials.iter().filter(|t| t.scheme == Scheme::Adaptive) {
        let d: Vec<f64> = t.modalities.iter().map(|o| o.payload_bits as f64 / o.rate).collect();
        if d.iter().any(|x| (x - d[0]).abs() > 1e-9 * d[0]) {
            delay_mismatches += 1;
        }
        let fixed = sweep
            .trials
            .iter()
            .find(|f| matches!(f.scheme, Scheme::Fixed(None)) && f.snr_db == t.snr_db && f.trial == t.trial);
        if let Some(f) = fixed {
            if (f.delay - t.delay).abs() > 1e-9 * t.delay {
                delay_mismatches += 1;
            }
        }
    }
    let soundness_violations = sweep.trials.iter().filter(|t| !t.is_sound(1e-9)).count();
    let passed = violations == 0 && mismatches == 0 && cross <= 1e-6 && delay_mismatches == 0 && soundness_violations == 0;
    Ok(AuditReport {
        convexity_points: points,
        convexity_violations: violations,
        sign_mismatches: mismatches,
        max_cross_partial: cross,
        delay_mismatches,
        soundness_violations,
        failures: sweep.failures.len(),
        trials: sweep.trials.len(),
        passed,
    })
}

fn cmd_audit(args: &ExperimentArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let report = run_audit(experiment_config(args)?)?;
    emit(args.out.as_deref(), &pretty(&report), stdout)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Audit("audit found violations".into()))
    }
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Model(a) => cmd_model(a, stdout, stderr),
        Command::Bound(a) => cmd_bound(a, stdout),
        Command::Importance(a) => cmd_importance(a, stdout),
        Command::Solve(a) => cmd_solve(a, stdout),
        Command::Simulate(a) => cmd_simulate(a, stdout),
        Command::Sweep(a) => cmd_sweep(a, stdout, stderr),
        Command::Audit(a) => cmd_audit(a, stdout),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
            } else {
                let _ = write!(stdout, "{}", e.render());
            }
            return code;
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.code()
        }
    }
}
