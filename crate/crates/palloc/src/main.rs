use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use palloc::analytics::{self, CriticalMethod};
use palloc::ctmc::{self, Variant};
use palloc::desim::{self, PolicyKind, SimConfig};
use palloc::experiments::{self, ClassifierSettings};
use palloc::policy::{self, AllocationVector};
use palloc::{Error, SystemParams};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "palloc",
    about = "Parallel-server queueing under probabilistic allocation policies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a critical traffic intensity: --p for the two-point error
    /// family, --m for deterministic m-th shortest routing (exactly one).
    Vcr {
        #[arg(long)]
        s: usize,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        m: Option<usize>,
        /// Bisection bracket width for --m.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Certify an allocation vector against the maximality condition.
    PolicyCheck {
        /// Power-of-d policy: S D.
        #[arg(long, num_args = 2, value_names = ["S", "D"])]
        pw: Option<Vec<usize>>,
        /// Two-point error policy: S M P.
        #[arg(long, num_args = 3, value_names = ["S", "M", "P"])]
        error: Option<Vec<f64>>,
        /// Explicit comma-separated allocation vector.
        #[arg(long)]
        vec: Option<String>,
        /// Uniform routing over S servers.
        #[arg(long, value_name = "S")]
        uniform: Option<usize>,
    },
    /// Run one simulation from a TOML config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve a truncated ordered-queue chain and export its stationary
    /// distribution.
    Ctmc {
        #[arg(long)]
        s: usize,
        /// One of: jsq, uniform, pw:D, error:M:P, vec:a,b,...
        #[arg(long)]
        policy: String,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 60)]
        cap: u32,
        #[arg(long, default_value = "idling")]
        variant: String,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario suite and classify each sample path.
    Experiment {
        /// figure1 (second-smallest-workload errors), figure2
        /// (third-smallest), or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 4)]
        s: usize,
        #[arg(long, default_value_t = 0.05)]
        offset: f64,
        #[arg(long, default_value_t = 1_000_000)]
        horizon: u64,
        /// Added to each scenario's built-in seed.
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Maximum concurrent scenario runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 0.01)]
        theta: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) | CliError::Io(_) => EXIT_USAGE,
                CliError::Lib(Error::InvalidParameter(_))
                | CliError::Lib(Error::NonErgodicFrontServer { .. }) => EXIT_VALIDATION,
                CliError::Lib(_) => EXIT_NUMERIC,
            })
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(std::io::Error),
    Lib(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Vcr { s, p, m, tol } => cmd_vcr(s, p, m, tol),
        Command::PolicyCheck {
            pw,
            error,
            vec,
            uniform,
        } => cmd_policy_check(pw, error, vec, uniform),
        Command::Simulate {
            config,
            seed,
            horizon,
            out,
        } => cmd_simulate(&config, seed, horizon, out),
        Command::Ctmc {
            s,
            policy,
            rho,
            mu,
            cap,
            variant,
            tol,
            out,
        } => cmd_ctmc(s, &policy, rho, mu, cap, &variant, tol, out),
        Command::Experiment {
            suite,
            s,
            offset,
            horizon,
            seed_base,
            out_dir,
            jobs,
            theta,
        } => cmd_experiment(&suite, s, offset, horizon, seed_base, &out_dir, jobs, theta),
    }
}

fn cmd_vcr(s: usize, p: Option<f64>, m: Option<usize>, tol: f64) -> Result<(), CliError> {
    let report = match (p, m) {
        (Some(_), Some(_)) => return Err(usage("give exactly one of --p and --m")),
        (None, None) => return Err(usage("give exactly one of --p and --m")),
        (Some(p), None) => {
            if p <= 0.0 {
                return Err(usage("--p must be positive (the formula is singular at 0)"));
            }
            analytics::v_cr(p, s)?
        }
        (None, Some(m)) => analytics::v_cr_1m(s, m, tol)?,
    };
    let method = match report.method {
        CriticalMethod::ClosedForm => "closed-form",
        CriticalMethod::Bisection => "bisection",
    };
    println!("critical_value = {:.9}", report.value);
    println!("method = {method}");
    println!("residual = {:.3e}", report.residual);
    Ok(())
}

fn cmd_policy_check(
    pw: Option<Vec<usize>>,
    error: Option<Vec<f64>>,
    vec: Option<String>,
    uniform: Option<usize>,
) -> Result<(), CliError> {
    let given = usize::from(pw.is_some())
        + usize::from(error.is_some())
        + usize::from(vec.is_some())
        + usize::from(uniform.is_some());
    if given != 1 {
        return Err(usage("give exactly one of --pw, --error, --vec, --uniform"));
    }
    let allocation = if let Some(args) = pw {
        policy::pw_allocation(args[0], args[1])?
    } else if let Some(args) = error {
        let s = args[0] as usize;
        let m = args[1] as usize;
        policy::error_allocation(s, m, args[2])?
    } else if let Some(s) = uniform {
        policy::uniform_allocation(s)?
    } else {
        parse_vector_allocation(&vec.expect("checked"))?
    };

    let s = allocation.servers();
    let uniform_vec = policy::uniform_allocation(s)?;
    println!("allocation = {:?}", allocation.probs());
    let tails = |v: &[f64]| -> Vec<f64> {
        let mut acc = 0.0;
        let mut out: Vec<f64> = v.iter().rev().map(|&x| {
            acc += x;
            acc
        }).collect();
        out.reverse();
        out
    };
    println!("tail_sums = {:?}", tails(allocation.probs()));
    println!("uniform_tail_sums = {:?}", tails(uniform_vec.probs()));
    let cmp = policy::gsc_compare(allocation.probs(), uniform_vec.probs())?;
    println!("comparison_vs_uniform = {cmp:?}");
    if policy::satisfies_maximality_condition(&allocation) {
        println!("certified: maximal (stable for every traffic intensity below 1)");
    } else {
        println!("not certified: the maximality condition does not hold");
    }
    Ok(())
}

fn parse_vector_allocation(text: &str) -> Result<AllocationVector, CliError> {
    let probs: Result<Vec<f64>, _> = text.split(',').map(|t| t.trim().parse::<f64>()).collect();
    let probs = probs.map_err(|e| usage(format!("malformed allocation vector: {e}")))?;
    Ok(AllocationVector::new(probs)?)
}

fn parse_policy_spec(spec: &str, s: usize) -> Result<AllocationVector, CliError> {
    if spec == "jsq" {
        let mut probs = vec![0.0; s];
        probs[0] = 1.0;
        return Ok(AllocationVector::new(probs)?);
    }
    if spec == "uniform" {
        return Ok(policy::uniform_allocation(s)?);
    }
    if let Some(d) = spec.strip_prefix("pw:") {
        let d = d
            .parse::<usize>()
            .map_err(|e| usage(format!("bad pw spec: {e}")))?;
        return Ok(policy::pw_allocation(s, d)?);
    }
    if let Some(rest) = spec.strip_prefix("error:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 2 {
            return Err(usage("error policy spec is error:M:P"));
        }
        let m = parts[0]
            .parse::<usize>()
            .map_err(|e| usage(format!("bad error spec: {e}")))?;
        let p = parts[1]
            .parse::<f64>()
            .map_err(|e| usage(format!("bad error spec: {e}")))?;
        return Ok(policy::error_allocation(s, m, p)?);
    }
    if let Some(rest) = spec.strip_prefix("vec:") {
        let v = parse_vector_allocation(rest)?;
        if v.servers() != s {
            return Err(usage("vector length does not match --s"));
        }
        return Ok(v);
    }
    Err(usage(format!("unknown policy spec '{spec}'")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    params: ParamsSection,
    policy: PolicySection,
    run: RunSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsSection {
    s: usize,
    lambda: f64,
    mu: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySection {
    /// "queue" or "workload".
    kind: String,
    /// Queue policies: jsq, uniform, pw:D, error:M:P, vec:a,b,...
    allocation: Option<String>,
    /// Workload policies.
    m: Option<usize>,
    p: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    /// "idling" or "non-idling".
    variant: String,
    horizon_arrivals: u64,
    seed: u64,
    sample_stride: u64,
    split_monitor: Option<usize>,
    max_samples: Option<usize>,
    output: Option<String>,
}

fn parse_variant(text: &str) -> Result<Variant, CliError> {
    match text {
        "idling" => Ok(Variant::Idling),
        "non-idling" | "nonidling" => Ok(Variant::NonIdling),
        other => Err(usage(format!("unknown variant '{other}'"))),
    }
}

fn load_sim_config(path: &Path) -> Result<(SimConfig, Option<String>), CliError> {
    let text = fs::read_to_string(path)?;
    let file: ConfigFile = toml::from_str(&text)
        .map_err(|e| usage(format!("config parse error in {}: {e}", path.display())))?;
    let params = SystemParams::new(file.params.s, file.params.lambda, file.params.mu)?;
    let policy = match file.policy.kind.as_str() {
        "queue" => {
            let spec = file
                .policy
                .allocation
                .as_deref()
                .ok_or_else(|| usage("queue policy needs an 'allocation' key"))?;
            PolicyKind::QueueBased(parse_policy_spec(spec, file.params.s)?)
        }
        "workload" => {
            let m = file
                .policy
                .m
                .ok_or_else(|| usage("workload policy needs 'm'"))?;
            let p = file
                .policy
                .p
                .ok_or_else(|| usage("workload policy needs 'p'"))?;
            PolicyKind::WorkloadBased { m, p }
        }
        other => return Err(usage(format!("unknown policy kind '{other}'"))),
    };
    let config = SimConfig {
        params,
        policy,
        variant: parse_variant(&file.run.variant)?,
        horizon_arrivals: file.run.horizon_arrivals,
        seed: file.run.seed,
        sample_stride: file.run.sample_stride,
        split_monitor: file.run.split_monitor,
        max_samples: file.run.max_samples.unwrap_or(10_000_000),
    };
    config.validate()?;
    Ok((config, file.run.output))
}

fn describe_config(config: &SimConfig) -> String {
    let policy = match &config.policy {
        PolicyKind::QueueBased(p) => format!("queue allocation={:?}", p.probs()),
        PolicyKind::WorkloadBased { m, p } => format!("workload m={m} p={p}"),
    };
    format!(
        "s={} lambda={} mu={} rho={:.6} policy=[{}] variant={:?} horizon={} seed={} stride={} split_monitor={:?}",
        config.params.servers(),
        config.params.lambda(),
        config.params.mu(),
        config.params.rho(),
        policy,
        config.variant,
        config.horizon_arrivals,
        config.seed,
        config.sample_stride,
        config.split_monitor,
    )
}

fn cmd_simulate(
    path: &Path,
    seed: Option<u64>,
    horizon: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut config, output) = load_sim_config(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(horizon) = horizon {
        config.horizon_arrivals = horizon;
    }
    config.validate()?;
    let report = desim::simulate(&config)?;

    let out_path = out
        .or(output.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("run_{}.csv", config.seed)));
    let mut file = fs::File::create(&out_path)?;
    desim::write_sample_path_csv(&mut file, &report, &describe_config(&config))?;

    println!("wrote {}", out_path.display());
    println!("arrivals_processed = {}", report.arrivals_processed);
    println!("final_time = {:.6}", report.final_time);
    println!("time_avg_total_load = {:.6}", report.time_avg_total_load);
    println!("empty_visits = {}", report.empty_visits);
    if config.split_monitor.is_some() {
        println!("split_episodes = {}", report.split_episodes.len());
        match desim::measure_overflow_rate(&report) {
            Ok(rate) => println!("overflow_rate = {rate:.6}"),
            Err(_) => println!("overflow_rate = undefined (no exposure)"),
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ctmc(
    s: usize,
    policy_spec: &str,
    rho: f64,
    mu: f64,
    cap: u32,
    variant: &str,
    tol: f64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if !(rho > 0.0) {
        return Err(usage("--rho must be positive"));
    }
    let lambda = rho * s as f64 * mu;
    let params = SystemParams::new(s, lambda, mu)?;
    let allocation = parse_policy_spec(policy_spec, s)?;
    let variant = parse_variant(variant)?;
    let chain = ctmc::build_generator(&params, &allocation, variant, cap)?;
    let pi = ctmc::stationary_distribution(&chain, tol)?;

    let mean = ctmc::stationary_mean_total(&chain, &pi);
    let boundary = ctmc::boundary_mass(&chain, &pi);
    println!("states = {}", chain.states().len());
    println!("mean_total_queue = {:.9}", mean);
    println!("boundary_mass = {boundary:.3e}");
    println!("residual = {:.3e}", ctmc::balance_residual(&chain, &pi));

    let out_path = out.unwrap_or_else(|| PathBuf::from("stationary.csv"));
    let mut file = fs::File::create(&out_path)?;
    let comment = format!(
        "s={s} rho={rho} mu={mu} lambda={lambda} policy={policy_spec} variant={variant:?} cap={cap} tol={tol}"
    );
    ctmc::write_stationary_csv(&mut file, &chain, &pi, &comment)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_experiment(
    suite: &str,
    s: usize,
    offset: f64,
    horizon: u64,
    seed_base: u64,
    out_dir: &Path,
    jobs: usize,
    theta: f64,
) -> Result<(), CliError> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let mut scenarios = experiments::build_figure_suite(s, horizon, offset)?;
    scenarios.retain(|sc| match suite {
        "figure1" => sc.name.starts_with("j2sw"),
        "figure2" => sc.name.starts_with("j3sw"),
        "all" => true,
        _ => true,
    });
    if !matches!(suite, "figure1" | "figure2" | "all") {
        return Err(usage(format!("unknown suite '{suite}'")));
    }
    for sc in &mut scenarios {
        sc.config.seed += seed_base;
    }
    fs::create_dir_all(out_dir)?;
    let settings = ClassifierSettings {
        theta,
        ..Default::default()
    };

    // Bounded fan-out over scenarios; results keep scenario order.
    let mut results: Vec<Option<(experiments::Scenario, desim::MetricsReport, experiments::StabilityVerdict)>> =
        (0..scenarios.len()).map(|_| None).collect();
    let mut remaining: Vec<(usize, experiments::Scenario)> =
        scenarios.into_iter().enumerate().collect();
    while !remaining.is_empty() {
        let batch: Vec<(usize, experiments::Scenario)> = remaining
            .drain(..remaining.len().min(jobs))
            .collect();
        let outcomes = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .into_iter()
                .map(|(i, sc)| {
                    let settings = settings;
                    scope.spawn(move || {
                        let out = experiments::run_scenario(&sc, &settings);
                        (i, sc, out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scenario thread panicked"))
                .collect::<Vec<_>>()
        });
        for (i, sc, out) in outcomes {
            let (report, verdict) = out?;
            results[i] = Some((sc, report, verdict));
        }
    }

    let summary_path = out_dir.join("summary.csv");
    let mut summary = fs::File::create(&summary_path)?;
    writeln!(
        summary,
        "# suite={suite} s={s} offset={offset} horizon={horizon} seed_base={seed_base} theta={theta}"
    )?;
    writeln!(summary, "scenario,rho,critical_value,verdict,slope,empty_visits")?;
    for slot in results {
        let (scenario, report, verdict) = slot.expect("all scenarios ran");
        let file_name = format!("{}_{}.csv", scenario.name, scenario.config.seed);
        let mut file = fs::File::create(out_dir.join(&file_name))?;
        desim::write_sample_path_csv(&mut file, &report, &describe_config(&scenario.config))?;
        let line = experiments::summary_line(&scenario, &verdict);
        writeln!(summary, "{line}")?;
        println!("{line}");
    }
    println!("wrote {}", summary_path.display());
    Ok(())
}
