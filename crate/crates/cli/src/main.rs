//! `apg-lab`: run, diagnose and compare policy optimizers on tabular MDPs.

mod validate;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use apg_core::diagnostics::{diagnose_records, last_decade, linear_rate_fit, loglog_slope, resolved_tail};
use apg_core::experiments::{
    builtin_env, compare, compare_csv, diagnose_live, execute, render_compare_table, seed_sweep, EnvPreset, PRESETS,
};
use apg_core::schedule::{c_inf_surrogate, smoothness_constant};
use apg_core::trace::{read_trace_file, write_atomic, write_run};
use apg_core::{load_mdp_file, Algorithm, LogSpacing, Mdp, PolicyParams, RunConfig, StepSchedule};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

fn after_help() -> String {
    format!(
        "Presets: {}\nAlgorithms: {}\nSchedules: nearly-constant, constant, exponential-clipped, normalized\n\n\
         Exit codes: 0 success, 1 invalid input or failed check, 2 numeric failure, 3 I/O error.\n\
         APG_LAB_THREADS caps the worker threads of compare and sweep.",
        PRESETS.join(", "),
        Algorithm::NAMES.join(", ")
    )
}

#[derive(Parser)]
#[command(name = "apg-lab", version, about = "Policy optimization laboratory for tabular softmax MDPs", after_help = after_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimizer and write a CSV trace plus JSON sidecar.
    Run(RunArgs),
    /// Summarize an existing trace, or run and diagnose live.
    Diagnose(DiagnoseArgs),
    /// Fit the convergence rate of a trace.
    Slope(SlopeArgs),
    /// Check gradients and identities on an environment.
    Validate(ValidateArgs),
    /// Run every preset/algorithm pair and tabulate the results.
    Compare(CompareArgs),
    /// Run one configuration over a range of seeds.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScheduleKind {
    NearlyConstant,
    Constant,
    ExponentialClipped,
    Normalized,
}

#[derive(Args, Clone)]
#[group(multiple = false)]
struct EnvSource {
    /// Built-in environment (see the list below); default mdp5x5-uniform.
    #[arg(long)]
    env: Option<String>,
    /// MDP description in JSON.
    #[arg(long, value_name = "PATH")]
    env_file: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EnvArgs {
    #[command(flatten)]
    source: EnvSource,
    /// Override the discount factor.
    #[arg(long)]
    gamma: Option<f64>,
    /// Initial parameters as a JSON array of rows; default is the preset's, or zeros.
    #[arg(long, value_name = "PATH")]
    init: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AlgoArgs {
    /// Optimizer name.
    #[arg(long, default_value = "apg")]
    algo: String,
    /// Heavy-ball momentum factor in [0, 1).
    #[arg(long, default_value_t = apg_core::optim::DEFAULT_HB_MOMENTUM)]
    hb_beta: f64,
    /// Sample batch size of sapg and spg.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Iteration shift of the three-sequence method.
    #[arg(long, default_value_t = 0)]
    t_shift: u64,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    /// Step schedule; default is the one the algorithm is analysed with.
    #[arg(long, value_enum)]
    schedule: Option<ScheduleKind>,
    /// Step size of the constant schedule; default 1/L.
    #[arg(long)]
    eta: Option<f64>,
    /// Growth base of the exponential clipped schedule, must exceed 1.
    #[arg(long)]
    beta: Option<f64>,
    /// Bound on the visitation ratio; default 1 / min mu.
    #[arg(long)]
    c_inf: Option<f64>,
}

#[derive(Args, Clone)]
struct RunOpts {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    algo: AlgoArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Iterations; default is the preset's recommendation.
    #[arg(long)]
    iters: Option<u64>,
    /// Seed of the sampled-gradient methods.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Log every n-th iteration instead of the default geometric spacing.
    #[arg(long, value_name = "N")]
    log_every: Option<u64>,
    /// Threshold for condition (i); default M_C at C = 3/2.
    #[arg(long)]
    condition_m: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    opts: RunOpts,
    /// Trace CSV; the sidecar goes next to it.
    #[arg(long, default_value = "trace.csv")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Existing trace CSV; without it the run described by the other flags is performed.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    #[command(flatten)]
    opts: RunOpts,
    /// Late logged iterations checked for near-concavity in a live run.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Near-concavity constant C > 1.
    #[arg(long, default_value_t = 1.5)]
    c: f64,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SlopeArgs {
    #[arg(long, default_value = "trace.csv")]
    trace: PathBuf,
    /// Window start; default is the start of the last decade.
    #[arg(long)]
    t_min: Option<f64>,
    /// Window end; default is the last logged iteration.
    #[arg(long)]
    t_max: Option<f64>,
    /// Fit ln(gap) against t on the resolved tail instead of the log-log slope.
    #[arg(long)]
    linear: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Seed of the random test points.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated presets.
    #[arg(long, value_delimiter = ',', default_value = "mdp5x5-uniform")]
    presets: Vec<String>,
    /// Comma-separated algorithms, run with their default schedules.
    #[arg(long, value_delimiter = ',', default_value = "pg,hbpg,apg")]
    algos: Vec<String>,
    #[arg(long, default_value_t = 100_000)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    opts: RunOpts,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An environment resolved from the command line.
struct Env {
    label: String,
    preset: Option<&'static str>,
    mdp: Mdp,
    init: PolicyParams,
    recommended_iters: u64,
}

fn load_env(args: &EnvArgs) -> anyhow::Result<Env> {
    let mut env = match (&args.source.env, &args.source.env_file) {
        (_, Some(path)) => {
            let mdp = load_mdp_file(path).with_context(|| format!("loading {}", path.display()))?;
            let init = PolicyParams::zeros(mdp.n_states(), mdp.n_actions());
            Env { label: path.display().to_string(), preset: None, mdp, init, recommended_iters: 100_000 }
        }
        (name, None) => {
            let EnvPreset { name, mdp, init_theta, recommended_iters } =
                builtin_env(name.as_deref().unwrap_or("mdp5x5-uniform"))?;
            Env { label: name.to_string(), preset: Some(name), mdp, init: init_theta, recommended_iters }
        }
    };
    if let Some(gamma) = args.gamma {
        env.mdp = env.mdp.with_gamma(gamma)?;
    }
    if let Some(path) = &args.init {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let init: PolicyParams = serde_json::from_str(&text).map_err(apg_core::Error::from)?;
        let (ns, na) = init.shape();
        if (ns, na) != (env.mdp.n_states(), env.mdp.n_actions()) {
            bail!(apg_core::Error::Config(format!(
                "initial parameters are {ns} x {na}, environment is {} x {}",
                env.mdp.n_states(),
                env.mdp.n_actions()
            )));
        }
        env.init = init;
    }
    Ok(env)
}

fn algorithm(args: &AlgoArgs) -> anyhow::Result<Algorithm> {
    Ok(match Algorithm::from_str(&args.algo)? {
        Algorithm::Hbpg { .. } => Algorithm::Hbpg { momentum: args.hb_beta },
        Algorithm::Sapg { .. } => Algorithm::Sapg { batch: args.batch },
        Algorithm::Spg { .. } => Algorithm::Spg { batch: args.batch },
        Algorithm::Ag { .. } => Algorithm::Ag { t_shift: args.t_shift },
        other => other,
    })
}

fn config_error(msg: String) -> anyhow::Error {
    apg_core::Error::Config(msg).into()
}

/// Builds the schedule, rejecting parameters that do not belong to it.
fn schedule(args: &ScheduleArgs, algo: &Algorithm, mdp: &Mdp) -> anyhow::Result<StepSchedule> {
    let kind = match args.schedule {
        Some(kind) => kind,
        None => match algo.default_schedule(mdp)? {
            StepSchedule::Constant { .. } => ScheduleKind::Constant,
            StepSchedule::ExponentialClipped { .. } => ScheduleKind::ExponentialClipped,
            StepSchedule::Normalized { .. } => ScheduleKind::Normalized,
            _ => ScheduleKind::NearlyConstant,
        },
    };
    if args.eta.is_some() && kind != ScheduleKind::Constant {
        return Err(config_error("--eta applies to the constant schedule only".into()));
    }
    if args.beta.is_some() && kind != ScheduleKind::ExponentialClipped {
        return Err(config_error("--beta applies to the exponential-clipped schedule only".into()));
    }
    if args.c_inf.is_some() && !matches!(kind, ScheduleKind::ExponentialClipped | ScheduleKind::Normalized) {
        return Err(config_error("--c-inf applies to the exponential-clipped and normalized schedules only".into()));
    }
    let c_inf = args.c_inf.unwrap_or_else(|| c_inf_surrogate(mdp));
    Ok(match kind {
        ScheduleKind::NearlyConstant => StepSchedule::nearly_constant(mdp),
        ScheduleKind::Constant => StepSchedule::constant_eta(args.eta.unwrap_or(1.0 / smoothness_constant(mdp)))?,
        ScheduleKind::ExponentialClipped => match args.beta {
            Some(beta) => StepSchedule::exponential_clipped(mdp, beta, c_inf)?,
            None => StepSchedule::exponential_clipped_default(mdp, c_inf)?,
        },
        ScheduleKind::Normalized => StepSchedule::normalized(mdp, c_inf)?,
    })
}

/// Validates the flags that do not depend on the environment, then loads it.
fn resolve(opts: &RunOpts) -> anyhow::Result<(Env, RunConfig)> {
    let algo = algorithm(&opts.algo)?;
    if let Some(beta) = opts.schedule.beta {
        if !(beta > 1.0) {
            return Err(config_error(format!("beta must exceed 1, got {beta}")));
        }
    }
    if opts.log_every == Some(0) {
        return Err(config_error("--log-every must be at least 1".into()));
    }
    let env = load_env(&opts.env)?;
    let cfg = RunConfig {
        schedule: schedule(&opts.schedule, &algo, &env.mdp)?,
        algorithm: algo,
        n_iters: opts.iters.unwrap_or(env.recommended_iters),
        seed: opts.seed,
        log: opts.log_every.map_or_else(LogSpacing::default, |every| LogSpacing::Every { every }),
        condition_m: opts.condition_m,
    };
    Ok((env, cfg))
}

/// Writes `text` to `path` atomically, or to stdout.
fn emit(text: &str, path: Option<&Path>) -> anyhow::Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => std::io::stdout().write_all(text.as_bytes()).map_err(apg_core::Error::from)?,
    }
    Ok(())
}

fn json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(apg_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

fn csv_of<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(apg_core::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| apg_core::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes)?)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let (env, cfg) = resolve(&args.opts)?;
    let (trace, manifest) = execute(&env.label, &env.mdp, &env.init, &cfg)?;
    let sidecar = write_run(&args.out, &trace, &manifest)?;
    let s = &manifest.summary;
    match args.format {
        Format::Json => emit(&json(s)?, None)?,
        Format::Csv => emit(&csv_of(&[FlatSummary::of(s)])?, None)?,
        Format::Text => println!(
            "final_gap_rho {:.6e}\nrestarts {}\nfinal_t {}\ntrace {}\nsidecar {}",
            s.final_gap_rho,
            s.restart_count,
            s.final_t,
            args.out.display(),
            sidecar.display()
        ),
    }
    Ok(())
}

#[derive(Serialize)]
struct FlatSummary {
    final_t: u64,
    final_gap_rho: f64,
    restart_count: u64,
}

impl FlatSummary {
    fn of(s: &apg_core::trace::RunSummary) -> Self {
        FlatSummary { final_t: s.final_t, final_gap_rho: s.final_gap_rho, restart_count: s.restart_count }
    }
}

fn cmd_diagnose(args: DiagnoseArgs) -> anyhow::Result<()> {
    let text = match &args.trace {
        Some(path) => {
            let records = read_trace_file(path).with_context(|| format!("reading {}", path.display()))?;
            json(&diagnose_records(&records)?)?
        }
        None => {
            let (env, cfg) = resolve(&args.opts)?;
            let (_, report) = diagnose_live(&env.label, &env.mdp, &env.init, &cfg, args.samples, args.c)?;
            json(&report)?
        }
    };
    emit(&text, args.out.as_deref())
}

#[derive(Serialize)]
struct SlopeReport {
    fit: &'static str,
    t_min: f64,
    t_max: f64,
    slope: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pearson_r: Option<f64>,
}

fn cmd_slope(args: SlopeArgs) -> anyhow::Result<()> {
    let records = read_trace_file(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.t as f64, r.gap_rho)).collect();
    let report = if args.linear {
        let (lo, hi) = resolved_tail(&records, 1e-12, 0.5)
            .ok_or_else(|| apg_core::Error::Window("no record with gap above 1e-12".into()))?;
        let (lo, hi) = (args.t_min.unwrap_or(lo), args.t_max.unwrap_or(hi));
        let (rate, r) = linear_rate_fit(&points, lo, hi)?;
        SlopeReport { fit: "linear", t_min: lo, t_max: hi, slope: rate, pearson_r: Some(r) }
    } else {
        let (lo, hi) = last_decade(&records);
        let (lo, hi) = (args.t_min.unwrap_or(lo), args.t_max.unwrap_or(hi));
        SlopeReport { fit: "loglog", t_min: lo, t_max: hi, slope: loglog_slope(&points, lo, hi)?, pearson_r: None }
    };
    match args.format {
        Format::Json => emit(&json(&report)?, None),
        Format::Csv => emit(&csv_of(&[report])?, None),
        Format::Text => {
            println!("{} slope {:.6} over t in [{}, {}]", report.fit, report.slope, report.t_min, report.t_max);
            if let Some(r) = report.pearson_r {
                println!("pearson_r {r:.6}");
            }
            Ok(())
        }
    }
}

fn cmd_validate(args: ValidateArgs) -> anyhow::Result<()> {
    let env = load_env(&args.env)?;
    let checks = validate::run_checks(&env.mdp, &env.init, args.seed)?;
    for c in &checks {
        println!("{} {:<22} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        bail!(ValidationFailed(failed));
    }
    Ok(())
}

#[derive(Debug)]
struct ValidationFailed(usize);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    let algos: Vec<Algorithm> = args.algos.iter().map(|a| Algorithm::from_str(a)).collect::<Result<_, _>>()?;
    let presets: Vec<&str> = args.presets.iter().map(String::as_str).collect();
    let rows = compare(&presets, &algos, args.iters, args.seed)?;
    let text = match args.format {
        Format::Text => render_compare_table(&rows),
        Format::Csv => compare_csv(&rows)?,
        Format::Json => json(&rows)?,
    };
    emit(&text, args.out.as_deref())
}

#[derive(Serialize)]
struct SweepSummary {
    env: String,
    algorithm: Algorithm,
    n_iters: u64,
    mean_final_gap: f64,
    runs: Vec<apg_core::experiments::SweepRow>,
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let (env, cfg) = resolve(&args.opts)?;
    let Some(name) = env.preset else {
        return Err(config_error("sweep runs on presets only; use --env".into()));
    };
    let preset = EnvPreset {
        name,
        mdp: env.mdp,
        init_theta: env.init,
        recommended_iters: env.recommended_iters,
    };
    let seeds: Vec<u64> = (args.opts.seed..args.opts.seed + args.seeds).collect();
    let runs = seed_sweep(&preset, &cfg, &seeds)?;
    let mean = runs.iter().map(|r| r.final_gap).sum::<f64>() / runs.len().max(1) as f64;
    let text = match args.format {
        Format::Csv => csv_of(&runs)?,
        Format::Json => json(&SweepSummary {
            env: preset.name.to_string(),
            algorithm: cfg.algorithm,
            n_iters: cfg.n_iters,
            mean_final_gap: mean,
            runs,
        })?,
        Format::Text => {
            let mut out = format!("{:>6} {:>14} {:>9}\n", "seed", "final_gap", "restarts");
            for r in &runs {
                out.push_str(&format!("{:>6} {:>14.6e} {:>9}\n", r.seed, r.final_gap, r.restarts));
            }
            out.push_str(&format!("mean final gap {mean:.6e} over {} seeds\n", runs.len()));
            out
        }
    };
    emit(&text, args.out.as_deref())
}

/// Exit code of a failed command: the library's classification when one is
/// found in the error chain, 3 for bare I/O errors, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<apg_core::Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Slope(a) => cmd_slope(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
