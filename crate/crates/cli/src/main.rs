//! `bihard`: build, certify, trace, and benchmark hard bilevel instances.
//!
//! Exit codes: 0 on success, 1 when a certification check fails or a run
//! violates its contract, 2 on usage errors (from the argument parser).
//! All file outputs are written atomically (temp file plus rename) and
//! contain no timestamps, so identical invocations produce identical bytes.

use anyhow::{bail, Context, Result};
use bilevel_hardness::harness::{
    chain_trace, fit_scaling, report, run_algorithm, Algorithm, RunConfig, RunTrace,
};
use bilevel_hardness::instance::{derive_params, FunctionClassParams, Mode};
use bilevel_hardness::verify::{all_passed, run_class_suite, run_suite, CheckResult, CheckStatus};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "bihard",
    version,
    about = "Worst-case bilevel instances: derivation, certification, chain traces, scaling"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Det,
    Stoc,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Det => Mode::Deterministic,
            ModeArg::Stoc => Mode::Stochastic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AlgArg {
    GreedyProber,
    PenaltyGd,
    F2saStyle,
    AltSgd,
    ExactHypergradDiag,
}

impl From<AlgArg> for Algorithm {
    fn from(a: AlgArg) -> Algorithm {
        match a {
            AlgArg::GreedyProber => Algorithm::GreedyProber,
            AlgArg::PenaltyGd => Algorithm::PenaltyGd,
            AlgArg::F2saStyle => Algorithm::F2saStyle,
            AlgArg::AltSgd => Algorithm::AltSgd,
            AlgArg::ExactHypergradDiag => Algorithm::ExactHypergradDiag,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Kappa,
    Eps,
    Sigma,
}

/// One sweep axis, written on the command line as `axis=v1,v2,...`.
#[derive(Clone)]
struct AxisSpec {
    axis: Axis,
    values: Vec<f64>,
}

fn parse_axis_spec(s: &str) -> Result<AxisSpec, String> {
    let (name, rest) = s
        .split_once('=')
        .ok_or_else(|| format!("expected axis=v1,v2,... got '{s}'"))?;
    let axis = match name {
        "kappa" => Axis::Kappa,
        "eps" => Axis::Eps,
        "sigma" => Axis::Sigma,
        other => return Err(format!("unknown grid axis '{other}' (kappa, eps, sigma)")),
    };
    let values = rest
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad {name} value '{t}': {e}"))
        })
        .collect::<Result<Vec<f64>, String>>()?;
    if values.is_empty() {
        return Err(format!("axis '{name}' needs at least one value"));
    }
    Ok(AxisSpec { axis, values })
}

/// Function-class parameters shared by every subcommand.
#[derive(Args, Clone)]
struct ClassArgs {
    /// Upper-objective smoothness bound L_f.
    #[arg(long = "l-f", default_value_t = 1.0)]
    l_f: f64,
    /// Lower-objective smoothness bound L_g.
    #[arg(long = "l-g", default_value_t = 100.0)]
    l_g: f64,
    /// Lower-level strong convexity mu.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Initial hyper-objective gap budget Delta.
    #[arg(long, default_value_t = 10.0)]
    delta: f64,
    /// Target stationarity accuracy eps.
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Oracle noise ceiling sigma (stochastic mode only).
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Oracle model: deterministic or stochastic.
    #[arg(long, value_enum, default_value_t = ModeArg::Det)]
    mode: ModeArg,
}

impl ClassArgs {
    fn derive(&self) -> Result<bilevel_hardness::instance::DerivedInstanceParams> {
        let fc = FunctionClassParams {
            l_f: self.l_f,
            l_g: self.l_g,
            mu: self.mu,
            delta: self.delta,
            eps: self.eps,
            sigma: self.sigma,
        };
        derive_params(fc, self.mode.into()).context("deriving instance parameters")
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Derive every instance constant and print it as JSON.
    Params {
        #[command(flatten)]
        class: ClassArgs,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the certification suite; one line per check, exit 1 on failure.
    Verify {
        #[command(flatten)]
        class: ClassArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only the function-class membership checks.
        #[arg(long)]
        class_only: bool,
        /// Certify a whole parameter grid: deterministic plus one stochastic
        /// suite per sigma, over every kappa x eps cell. Bare `--grid` uses
        /// kappa=25,100,400 eps=0.2,0.1,0.05 sigma=0.5,1; repeat the flag
        /// with `axis=v1,v2,...` specs to override an axis (sigma=0 drops
        /// the stochastic suites). L_f, mu, and Delta come from their flags.
        #[arg(
            long,
            num_args = 0..,
            value_parser = parse_axis_spec,
            conflicts_with_all = ["l_g", "eps", "sigma", "mode"]
        )]
        grid: Option<Vec<AxisSpec>>,
        /// Write the full check results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one algorithm under the zero-respecting protocol referee.
    Trace {
        #[command(flatten)]
        class: ClassArgs,
        #[arg(long, value_enum, default_value_t = AlgArg::GreedyProber)]
        alg: AlgArg,
        /// Oracle call budget (default: four chain lengths plus slack).
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Measure stationarity every this many calls.
        #[arg(long, default_value_t = 1)]
        measure_every: usize,
        /// Assert the exact deterministic support shapes along the run.
        #[arg(long)]
        check_shape: bool,
        /// Append activation events as JSON lines to this file.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write the run report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
    /// Sweep condition numbers or accuracies and fit the call-count law.
    Bench {
        #[command(flatten)]
        class: ClassArgs,
        /// Sweep axes as `kappa=v1,v2,...` and/or `eps=v1,v2,...`; kappa
        /// sweeps hold eps at its flag value and vice versa.
        #[arg(long, value_parser = parse_axis_spec, required = true)]
        grid: Vec<AxisSpec>,
        #[arg(long, value_enum, default_value_t = AlgArg::GreedyProber)]
        alg: AlgArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the sweep report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
}

fn main() {
    env_logger::init();
    if let Ok(threads) = std::env::var("THREADS") {
        if let Ok(t) = threads.parse::<usize>() {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .ok();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Params { class, out } => {
            let params = class.derive()?;
            let body = serde_json::to_string_pretty(&params)? + "\n";
            emit(out.as_deref(), &body)?;
            Ok(0)
        }
        Cmd::Verify {
            class,
            seed,
            class_only,
            grid,
            out,
        } => {
            if let Some(specs) = grid {
                return grid_verify(&class, seed, class_only, &specs, out.as_deref());
            }
            let params = class.derive()?;
            let results = if class_only {
                run_class_suite(&params, seed)
            } else {
                run_suite(&params, seed)
            };
            print_check_lines(&results);
            if let Some(path) = out {
                let body = serde_json::to_string_pretty(&serde_json::json!({
                    "suite_version": env!("CARGO_PKG_VERSION"),
                    "fc": params.fc,
                    "derived": params,
                    "results": results,
                }))? + "\n";
                write_atomic(&path, body.as_bytes())?;
            }
            Ok(if all_passed(&results) { 0 } else { 1 })
        }
        Cmd::Trace {
            class,
            alg,
            budget,
            seed,
            measure_every,
            check_shape,
            log,
            out,
            format,
        } => {
            let params = class.derive()?;
            let default_budget = 4 * params.t_len * params.n + 1000;
            let cfg = RunConfig {
                budget: budget.unwrap_or(default_budget),
                measure_every,
                seed,
                keep_events: true,
            };
            let trace: RunTrace = if check_shape {
                if !matches!(Algorithm::from(alg), Algorithm::GreedyProber) {
                    bail!("--check-shape applies to the greedy prober only");
                }
                chain_trace(&params, cfg.budget, cfg.seed)?
            } else {
                run_algorithm(alg.into(), &params, cfg)?
            };
            if let Some(path) = log {
                let mut body = String::new();
                for ev in &trace.events {
                    body.push_str(&serde_json::to_string(ev)?);
                    body.push('\n');
                }
                write_atomic(&path, body.as_bytes())?;
            }
            let rep = report(std::slice::from_ref(&trace));
            let body = match format {
                FormatArg::Json => serde_json::to_string_pretty(&rep.json)? + "\n",
                FormatArg::Csv => rep.csv,
            };
            emit(out.as_deref(), &body)?;
            Ok(0)
        }
        Cmd::Bench {
            class,
            grid,
            alg,
            seed,
            out,
            format,
        } => {
            if grid.iter().any(|s| s.axis == Axis::Sigma) {
                bail!("bench sweeps the kappa and eps axes only");
            }
            let kappas: Vec<f64> = axis_values(&grid, Axis::Kappa);
            let eps_list: Vec<f64> = axis_values(&grid, Axis::Eps);
            let mut traces: Vec<RunTrace> = Vec::new();
            let mut fits = serde_json::Map::new();
            if !kappas.is_empty() {
                let mut pts = Vec::new();
                for &kappa in &kappas {
                    let mut c = class.clone();
                    c.l_g = kappa * c.mu;
                    let trace = sweep_run(&c, alg, seed)?;
                    let calls = trace
                        .reached_eps_at
                        .context("sweep run exhausted its budget")?;
                    pts.push((kappa, calls as f64));
                    traces.push(trace);
                }
                if pts.len() >= 4 {
                    fits.insert(
                        "kappa_sweep".into(),
                        serde_json::to_value(fit_scaling(&pts)?)?,
                    );
                }
            }
            if !eps_list.is_empty() {
                let mut pts = Vec::new();
                for &eps in &eps_list {
                    let mut c = class.clone();
                    c.eps = eps;
                    let trace = sweep_run(&c, alg, seed)?;
                    let calls = trace
                        .reached_eps_at
                        .context("sweep run exhausted its budget")?;
                    pts.push((eps, calls as f64));
                    traces.push(trace);
                }
                if pts.len() >= 4 {
                    fits.insert(
                        "eps_sweep".into(),
                        serde_json::to_value(fit_scaling(&pts)?)?,
                    );
                }
            }
            let rep = report(&traces);
            let body = match format {
                FormatArg::Json => {
                    let mut json = serde_json::Map::new();
                    json.insert("runs".into(), rep.json["runs"].clone());
                    json.insert("fits".into(), serde_json::Value::Object(fits));
                    serde_json::to_string_pretty(&serde_json::Value::Object(json))? + "\n"
                }
                FormatArg::Csv => rep.csv,
            };
            emit(out.as_deref(), &body)?;
            Ok(0)
        }
    }
}

fn axis_values(specs: &[AxisSpec], axis: Axis) -> Vec<f64> {
    specs
        .iter()
        .filter(|s| s.axis == axis)
        .flat_map(|s| s.values.iter().copied())
        .collect()
}

fn print_check_lines(results: &[CheckResult]) {
    for r in results {
        let tag = match r.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Info => "INFO",
        };
        println!(
            "{tag} {:<24} margin {:+.3e}  {}",
            r.check_id, r.margin, r.details
        );
    }
}

/// Certify every instance of the grid; exit 1 if any suite has a failure.
fn grid_verify(
    class: &ClassArgs,
    seed: u64,
    class_only: bool,
    specs: &[AxisSpec],
    out: Option<&Path>,
) -> Result<i32> {
    let mut kappas = vec![25.0, 100.0, 400.0];
    let mut eps_list = vec![0.2, 0.1, 0.05];
    let mut sigmas = vec![0.5, 1.0];
    for s in specs {
        match s.axis {
            Axis::Kappa => kappas = s.values.clone(),
            Axis::Eps => eps_list = s.values.clone(),
            Axis::Sigma => sigmas = s.values.clone(),
        }
    }
    // sigma = 0 means "deterministic only".
    sigmas.retain(|&s| s > 0.0);
    let mut instances = Vec::new();
    let mut failed = 0usize;
    let mut total = 0usize;
    for &kappa in &kappas {
        for &eps in &eps_list {
            let mut cells: Vec<(Mode, f64)> = vec![(Mode::Deterministic, 0.0)];
            cells.extend(sigmas.iter().map(|&s| (Mode::Stochastic, s)));
            for (mode, sigma) in cells {
                let fc = FunctionClassParams {
                    l_f: class.l_f,
                    l_g: kappa * class.mu,
                    mu: class.mu,
                    delta: class.delta,
                    eps,
                    sigma,
                };
                let params = derive_params(fc, mode)
                    .with_context(|| format!("deriving kappa {kappa} eps {eps} sigma {sigma}"))?;
                let results = if class_only {
                    run_class_suite(&params, seed)
                } else {
                    run_suite(&params, seed)
                };
                total += 1;
                let ok = all_passed(&results);
                if !ok {
                    failed += 1;
                }
                println!(
                    "== kappa {kappa} eps {eps} sigma {sigma} mode {} (n {}, T {}): {}",
                    params.mode,
                    params.n,
                    params.t_len,
                    if ok { "pass" } else { "FAIL" }
                );
                print_check_lines(&results);
                instances.push(serde_json::json!({
                    "fc": params.fc,
                    "derived": params,
                    "results": results,
                }));
            }
        }
    }
    println!("grid: {}/{total} instances passed", total - failed);
    if let Some(path) = out {
        let body = serde_json::to_string_pretty(&serde_json::json!({
            "suite_version": env!("CARGO_PKG_VERSION"),
            "instances": instances,
        }))? + "\n";
        write_atomic(path, body.as_bytes())?;
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

/// One sweep instance run with sparse measurement; event logs are dropped
/// because long chains would make them enormous.
fn sweep_run(class: &ClassArgs, alg: AlgArg, seed: u64) -> Result<RunTrace> {
    let params = class.derive()?;
    let cfg = RunConfig {
        budget: 4 * params.t_len * params.n + 1000,
        measure_every: usize::MAX,
        seed,
        keep_events: false,
    };
    run_algorithm(alg.into(), &params, cfg)
        .with_context(|| format!("sweep run at L_g {} eps {} failed", class.l_g, class.eps))
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, body.as_bytes()),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

/// Write via a sibling temp file and rename, so partial output never
/// appears under the final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .with_context(|| format!("output path {} has no file name", path.display()))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f =
            fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
