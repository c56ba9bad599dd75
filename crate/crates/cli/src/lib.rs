//! Command-line driver: theory constants, simulation summaries, the verifier suite,
//! coupling studies and report merging.
//!
//! Exit codes: 0 when every selected verifier passes, 1 when one fails, 2 for
//! configuration or argument errors, 3 for runtime failures.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fieldlab::coupling::{self, CouplingSetup};
use fieldlab::theory::{self, DecayKind, MomentParams};
use fieldlab::verify::{self, claims, VerificationReport};
use fieldlab::{sums, Block, Error, FieldModel, MultiIndex};
use serde_json::json;

pub use config::{ConfigError, ExperimentConfig};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "fieldlab", version, about = "Partial sums of weakly dependent random fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the constant table for given moment order and decay rate.
    Theory(TheoryArgs),
    /// Sample the configured field and write summary statistics.
    Simulate(RunArgs),
    /// Run the selected verifiers.
    Verify(RunArgs),
    /// Run the coupling studies.
    Couple(RunArgs),
    /// Merge earlier report directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct TheoryArgs {
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    d_p: f64,
    #[arg(long, default_value_t = 2.0)]
    c0: f64,
    #[arg(long, value_enum, default_value_t = Decay::Power)]
    decay: Decay,
    /// Cone parameter for the scheme search.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.05)]
    mu: f64,
    #[arg(long, default_value_t = 0.05)]
    gamma1: f64,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Decay {
    Power,
    Exponential,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Comma-separated claim ids.
    #[arg(long, value_delimiter = ',')]
    verifiers: Option<Vec<String>>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directories holding a `report.json`.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Overflow(_) | Error::Infeasible(_) | Error::NotContained(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Parses `argv` (program name first) and runs the subcommand; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Theory(a) => theory_cmd(&a),
        Command::Simulate(a) => with_config(&a, simulate),
        Command::Verify(a) => with_config(&a, verify_cmd),
        Command::Couple(a) => with_config(&a, couple),
        Command::Report(a) => report(&a),
    };
    match outcome {
        Ok(true) => EXIT_PASS,
        Ok(false) => EXIT_FAIL,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("runtime error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn theory_cmd(a: &TheoryArgs) -> Result<bool, Failure> {
    let decay = match a.decay {
        Decay::Power => DecayKind::Power,
        Decay::Exponential => DecayKind::Exponential,
    };
    let params = MomentParams::new(a.d, a.p, a.d_p, a.c0, a.lambda, decay)?;
    let delta = theory::choose_delta(&params)?;
    let scheme = match theory::choose_scheme(a.d, a.tau, a.mu, delta, a.gamma1) {
        Ok(s) => json!({"alpha": s.alpha, "beta": s.beta, "gamma0": s.gamma0, "tau": s.tau, "rho": s.rho}),
        Err(e) => json!({"error": e.to_string()}),
    };
    let doc = json!({
        "p": a.p,
        "lambda": a.lambda,
        "d": a.d,
        "t0": theory::t0(),
        "psi": theory::psi(a.p)?,
        "delta": delta,
        "lambda1": theory::lambda1(a.d, delta, a.p)?,
        "lambda2": theory::lambda2(a.d, delta, a.p)?,
        "tau0": theory::tau0(delta)?,
        "moricz_a": theory::moricz_a(a.d, delta)?,
        "scheme": scheme,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(true)
}

struct Resolved {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn with_config(a: &RunArgs, body: fn(&Resolved) -> Result<bool, Failure>) -> Result<bool, Failure> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(v) = &a.verifiers {
        cfg.verifiers = v.clone();
    }
    if let Some(w) = a.workers {
        cfg.workers = Some(w);
    }
    let out = cfg.output(a.output.as_deref());
    cfg.output_dir = Some(out.clone());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("resolved_config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        if w == 0 {
            return Err(Failure::Config("workers = 0".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Failure::Runtime(e.to_string()))?;
    let resolved = Resolved { cfg, out };
    pool.install(|| body(&resolved))
}

fn cubes(d: usize, sides: &[i64]) -> Result<Vec<Block>, Failure> {
    Ok(sides.iter().map(|&s| Block::cube(d, s)).collect::<Result<_, _>>()?)
}

fn diagonal(d: usize, sides: &[i64]) -> Vec<MultiIndex> {
    sides.iter().map(|&s| MultiIndex::splat(d, s)).collect()
}

fn simulate(r: &Resolved) -> Result<bool, Failure> {
    let cfg = &r.cfg;
    let model = cfg.model()?;
    let d = model.dim();
    let mut rows = Vec::new();
    for (i, u) in cubes(d, &cfg.ladder)?.iter().enumerate() {
        let s = sums::block_sums(&model, u, cfg.replicates, fieldlab::rng::Stream::derive_seed(cfg.seed, i as u64))?;
        let card = u.cardinality()? as f64;
        let (mean, se) = fieldlab::stats::mean_se(&s);
        let grid = fieldlab::fields::sample(&model, u, cfg.seed, 0)?;
        let values = grid.values();
        rows.push(json!({
            "block": u,
            "mean_sum": mean,
            "se_mean_sum": se,
            "var_sum_per_site": fieldlab::stats::sample_variance(&s) / card,
            "exact_var_per_site": sums::exact_variance(&model, std::slice::from_ref(u))? / card,
            "first_replicate": {
                "min": values.iter().cloned().fold(f64::INFINITY, f64::min),
                "max": values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                "mean": values.iter().sum::<f64>() / card,
            },
        }));
    }
    let doc = json!({"model": model.to_spec(), "sigma2": fieldlab::fields::sigma2(&model), "replicates": cfg.replicates, "seed": cfg.seed, "rungs": rows});
    std::fs::write(r.out.join("simulate.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(true)
}

const GENERAL: &[&str] = &[
    claims::MOMENT,
    claims::MAXIMAL,
    claims::TAIL,
    claims::CLT_DISTANCE,
    claims::LIL,
    claims::DEPENDENCE,
    claims::NOISE_STABILITY,
    claims::VARIANCE_ASYMPTOTICS,
    claims::SECOND_MOMENT,
    claims::NEIGHBOR_SUM,
    claims::VARIANCE_DEFECT,
];
const COUPLING: &[&str] = &[claims::COUPLING_ERROR, claims::APPROXIMATION];

fn selected(cfg: &ExperimentConfig) -> Result<Vec<String>, Failure> {
    if cfg.verifiers.is_empty() {
        let mut all: Vec<String> = GENERAL.iter().map(|s| s.to_string()).collect();
        if cfg.scheme.is_some() {
            all.extend(COUPLING.iter().map(|s| s.to_string()));
        }
        return Ok(all);
    }
    for v in &cfg.verifiers {
        if !GENERAL.contains(&v.as_str()) && !COUPLING.contains(&v.as_str()) {
            return Err(Failure::Config(format!("unknown verifier `{v}`")));
        }
    }
    Ok(cfg.verifiers.clone())
}

fn scheme_of(cfg: &ExperimentConfig, d: usize) -> Result<coupling::BlockScheme, Failure> {
    let s = cfg.scheme.as_ref().ok_or_else(|| Failure::Config("coupling verifiers need `scheme`".into()))?;
    let params = theory::SchemeParams::new(s.alpha, s.beta, s.tau, s.gamma0)?;
    Ok(coupling::build_scheme(&params, s.depth, d, s.tau)?)
}

fn coupling_depths(cfg: &ExperimentConfig, scheme: &coupling::BlockScheme) -> Vec<u64> {
    if cfg.coupling_depths.is_empty() {
        (1..=scheme.depth).collect()
    } else {
        cfg.coupling_depths.clone()
    }
}

fn run_verifier(id: &str, cfg: &ExperimentConfig, model: &FieldModel) -> Result<VerificationReport, Failure> {
    let d = model.dim();
    let seed = fieldlab::rng::Stream::derive_seed(cfg.seed, GENERAL.iter().chain(COUPLING).position(|c| *c == id).unwrap() as u64);
    let reps = cfg.replicates;
    let tol = &cfg.tolerances;
    let report = match id {
        claims::MOMENT => verify::check_moment_inequality(model, cfg.delta(d)?, &cubes(d, &cfg.ladder)?, reps, seed, tol)?,
        claims::MAXIMAL => verify::check_maximal_inequality(model, cfg.delta(d)?, &cubes(d, &cfg.ladder)?, reps, seed, tol)?,
        claims::TAIL => {
            let side = *cfg.ladder.last().ok_or_else(|| Failure::Config("empty ladder".into()))?;
            verify::check_tail_bound(model, cfg.delta(d)?, &Block::cube(d, side)?, &cfg.tail_x, reps, seed, tol)?
        }
        claims::CLT_DISTANCE => verify::check_clt_distance(model, &diagonal(d, &cfg.clt_ladder), reps, seed, tol)?,
        claims::LIL => verify::check_lil(model, cfg.lil_depth, reps, seed, cfg.tau, tol)?,
        claims::DEPENDENCE => verify::check_dependence(model, &cfg.geometries(d), None, cfg.trials, reps, seed, tol)?,
        claims::NOISE_STABILITY => verify::check_dependence(model, &cfg.geometries(d), Some(cfg.noise), cfg.trials, reps, seed, tol)?,
        claims::VARIANCE_ASYMPTOTICS => verify::check_variance_asymptotics(model, &diagonal(d, &cfg.ladder), reps, seed, tol)?,
        claims::SECOND_MOMENT => {
            let lambda = cfg.moment.as_ref().map_or(1.0, |m| m.lambda);
            verify::check_second_moment_bound(model, lambda, &cubes(d, &cfg.ladder)?)?
        }
        claims::NEIGHBOR_SUM => verify::check_neighbor_sum_bound(d, &cfg.neighbor_nu, &cfg.neighbor_sides, tol)?,
        claims::VARIANCE_DEFECT => {
            let family: Vec<Vec<Block>> = cubes(d, &cfg.defect_ladder)?.into_iter().map(|b| vec![b]).collect();
            verify::check_variance_defect(model, &family, tol)?
        }
        claims::COUPLING_ERROR => {
            let scheme = scheme_of(cfg, d)?;
            verify::check_coupling_error_decay(model, &scheme, &coupling_depths(cfg, &scheme), cfg.calibration, reps, seed, tol)?
        }
        claims::APPROXIMATION => {
            let scheme = scheme_of(cfg, d)?;
            verify::check_approximation_error(model, &scheme, cfg.cdf, &coupling_depths(cfg, &scheme), reps, seed, cfg.ci_level, tol)?
        }
        other => return Err(Failure::Config(format!("unknown verifier `{other}`"))),
    };
    Ok(report)
}

fn verify_cmd(r: &Resolved) -> Result<bool, Failure> {
    let model = r.cfg.model()?;
    let mut reports = Vec::new();
    for id in selected(&r.cfg)? {
        let rep = run_verifier(&id, &r.cfg, &model)?;
        eprintln!("{:<24} {}", rep.claim_id, if rep.pass { "PASS" } else { "FAIL" });
        reports.push(rep);
    }
    verify::emit_report(&reports, &r.out)?;
    Ok(reports.iter().all(|x| x.pass))
}

fn couple(r: &Resolved) -> Result<bool, Failure> {
    let cfg = &r.cfg;
    let model = cfg.model()?;
    let scheme = scheme_of(cfg, model.dim())?;
    let setup = CouplingSetup::new(&model, &scheme, cfg.cdf, cfg.seed)?;
    let study = coupling::block_study(&setup, cfg.replicates, cfg.seed)?;
    coupling::write_summary_csv(&study, &r.out.join("coupling_blocks.csv"))?;
    let rep = run_verifier(claims::APPROXIMATION, cfg, &model)?;
    eprintln!("{:<24} {}", rep.claim_id, if rep.pass { "PASS" } else { "FAIL" });
    let pass = rep.pass;
    verify::emit_report(&[rep], &r.out)?;
    Ok(pass)
}

fn report(a: &ReportArgs) -> Result<bool, Failure> {
    let mut all = Vec::new();
    for dir in &a.input {
        if !Path::new(dir).join("report.json").exists() {
            return Err(Failure::Config(format!("{} has no report.json", dir.display())));
        }
        all.extend(verify::load_reports(dir)?);
    }
    verify::emit_report(&all, &a.output)?;
    Ok(all.iter().all(|x| x.pass))
}
