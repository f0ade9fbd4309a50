//! `distkf`: observability checks, gain synthesis and Monte Carlo simulation
//! for distributed filters over directed sensor networks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use distkf_core::gain::GAINS_FORMAT;
use distkf_core::observability::analyze_with;
use distkf_core::simulator::{monte_carlo, GainPlan, MetricsSummary};
use distkf_core::{
    load_scenario, riccati_recursion, scenario_hash, steady_state, GainSchedule, StateSpaceNetwork,
    SteadyState, SteadyStateOptions,
};
use serde::Serialize;

/// Environment variable capping the number of worker threads.
const THREADS_ENV: &str = "DISTKF_THREADS";

#[derive(Parser, Debug)]
#[command(name = "distkf", version, about = "Distributed filtering over directed sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distributed observability of every agent (exit 1 if any agent fails).
    Check {
        scenario: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Include the distributed observability matrices in the JSON report.
        #[arg(long, requires = "json")]
        full: bool,
    },
    /// Compute optimal gains and write them to an artifact.
    Gains(GainsArgs),
    /// Monte Carlo simulation; writes per-step, per-agent metrics as CSV.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct GainsArgs {
    scenario: PathBuf,
    /// Number of time-varying steps to compute.
    #[arg(long, conflicts_with = "steady_state", required_unless_present = "steady_state")]
    steps: Option<usize>,
    /// Iterate the recursion to its fixed point.
    #[arg(long)]
    steady_state: bool,
    #[arg(long)]
    out: PathBuf,
    /// Relative change below which the fixed-point iteration stops.
    #[arg(long, default_value_t = SteadyStateOptions::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = SteadyStateOptions::default().max_iter)]
    max_iter: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    scenario: PathBuf,
    /// Precomputed gains artifact (computed on the fly otherwise).
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Horizon K; defaults to the artifact's horizon, or 50.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: PathBuf,
    /// JSON summary (spectral radii, whiteness, final errors).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Simulate even if some agent is not distributedly observable.
    #[arg(long)]
    allow_unobservable: bool,
    /// Use the steady-state gains at every step.
    #[arg(long)]
    steady_state_gains: bool,
}

/// Failures mapped to exit codes.
#[derive(Debug)]
enum Failure {
    /// The analysis came out negative (exit 1).
    Negative(String),
    /// Bad input or I/O (exit 2).
    Input(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().map_err(Failure::Input).and_then(|()| match cli.command {
        Command::Check { scenario, json, full } => cmd_check(&scenario, json, full),
        Command::Gains(args) => cmd_gains(&args),
        Command::Simulate(args) => cmd_simulate(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Negative(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load(path: &Path) -> anyhow::Result<StateSpaceNetwork> {
    load_scenario(path).with_context(|| format!("scenario {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn cmd_check(path: &Path, json: bool, full: bool) -> Outcome {
    let model = load(path)?;
    let report = analyze_with(&model, full);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    } else {
        println!("n = {}, m = {}, global rank {}", report.n, model.m(), report.global_rank);
        println!("{:>8} {:>11} {:>17} {:>11}", "agent", "local rank", "distributed rank", "observable");
        for (a, local) in report.per_agent.iter().zip(&report.local_ranks) {
            println!("{:>8} {:>11} {:>17} {:>11}", a.agent.0, local, a.rank, yes_no(a.distributedly_observable));
        }
        println!("strongly connected: {}", yes_no(report.connected));
        println!("all agents distributedly observable: {}", yes_no(report.all_agents_observable));
    }
    let bad = report.unobservable_agents();
    if bad.is_empty() {
        Ok(())
    } else {
        let names: Vec<_> = bad.iter().map(|a| a.to_string()).collect();
        Err(Failure::Negative(format!("not distributedly observable: {}", names.join(", "))))
    }
}

fn print_radii(traces: &[f64], radii: &[f64], network: f64) {
    println!("{:>8} {:>16} {:>16}", "agent", "trace(P+)", "spectral radius");
    for (i, (t, r)) in traces.iter().zip(radii).enumerate() {
        println!("{:>8} {:>16.9} {:>16.9}", i + 1, t, r);
    }
    println!("network spectral radius: {network:.9}");
}

fn cmd_gains(args: &GainsArgs) -> Outcome {
    let model = load(&args.scenario)?;
    let schedule = match args.steps {
        Some(0) => return Err(Failure::Input(anyhow::anyhow!("--steps must be at least 1"))),
        Some(k) => {
            let sched = riccati_recursion(&model, k).context("gain recursion")?;
            let last = sched.covariances.last().expect("k >= 1");
            let gains = sched.steps.last().expect("k >= 1").matrices();
            let est = distkf_core::DistributedEstimator::new(&model).context("innovation layout")?;
            let radii: Vec<f64> = gains
                .iter()
                .zip(est.structures())
                .map(|(g, s)| distkf_core::gain::agent_spectral_radius(&model.system, g, s))
                .collect();
            let net = distkf_core::gain::network_spectral_radius(&model, &gains, est.structures())
                .context("network spectral radius")?;
            let traces: Vec<f64> = model.ids().map(|id| last.plus.trace(id)).collect();
            println!("computed {k} steps");
            print_radii(&traces, &radii, net);
            sched
        }
        None => {
            let opts = SteadyStateOptions { tol: args.tol, max_iter: args.max_iter, ..Default::default() };
            let ss = steady_state(&model, opts).context("steady-state iteration")?;
            println!(
                "converged: {} (iterations {}, final change {:.3e}{})",
                ss.converged,
                ss.iterations,
                ss.final_change,
                if ss.diverged { ", diverged" } else { "" }
            );
            print_radii(&ss.traces(), &ss.spectral_radii, ss.network_spectral_radius);
            if !ss.converged {
                eprintln!("warning: the recursion did not converge; gains are from the last iterate");
            }
            GainSchedule {
                format: GAINS_FORMAT.to_string(),
                scenario_hash: scenario_hash(&model),
                n: model.n(),
                m: model.m(),
                steps: Vec::new(),
                covariances: Vec::new(),
                steady_state: Some(ss),
            }
        }
    };
    let mut out = create(&args.out)?;
    serde_json::to_writer(&mut out, &schedule).context("writing gains")?;
    out.flush().context("writing gains")?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_gains(path: &Path, model: &StateSpaceNetwork) -> anyhow::Result<GainSchedule> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let sched: GainSchedule = serde_json::from_reader(std::io::BufReader::new(file))
        .with_context(|| format!("malformed gains artifact {}", path.display()))?;
    if sched.format != GAINS_FORMAT {
        bail!("unsupported gains format {:?} (expected {GAINS_FORMAT:?})", sched.format);
    }
    if sched.scenario_hash != scenario_hash(model) {
        bail!("gains computed for different scenario");
    }
    Ok(sched)
}

#[derive(Serialize)]
struct SimulationReport<'a> {
    scenario_hash: String,
    gains: &'static str,
    #[serde(flatten)]
    summary: &'a MetricsSummary,
}

fn cmd_simulate(args: &SimulateArgs) -> Outcome {
    let model = load(&args.scenario)?;
    if args.runs == 0 {
        return Err(Failure::Input(anyhow::anyhow!("--runs must be at least 1")));
    }
    let report = distkf_core::analyze(&model);
    if !report.all_agents_observable && !args.allow_unobservable {
        let names: Vec<_> = report.unobservable_agents().iter().map(|a| a.to_string()).collect();
        return Err(Failure::Negative(format!(
            "not distributedly observable: {} (pass --allow-unobservable to simulate anyway)",
            names.join(", ")
        )));
    }

    let artifact = args.gains.as_deref().map(|p| load_gains(p, &model)).transpose()?;
    let use_steady = args.steady_state_gains || artifact.as_ref().is_some_and(|a| a.steps.is_empty());
    let (plan, steady, horizon): (GainPlan, Option<SteadyState>, usize) = if use_steady {
        let ss = match artifact.and_then(|a| a.steady_state) {
            Some(ss) => ss,
            None if args.gains.is_some() => {
                return Err(Failure::Input(anyhow::anyhow!("gains artifact has no steady-state section")))
            }
            None => steady_state(&model, SteadyStateOptions::default()).context("steady-state iteration")?,
        };
        (GainPlan::steady(&ss), Some(ss), args.steps.unwrap_or(50))
    } else {
        match artifact {
            Some(a) => {
                let horizon = args.steps.unwrap_or(a.horizon());
                if horizon > a.horizon() {
                    return Err(Failure::Input(anyhow::anyhow!(
                        "gains artifact covers {} steps, {horizon} requested",
                        a.horizon()
                    )));
                }
                (GainPlan::from_schedule(&a), None, horizon)
            }
            None => {
                let horizon = args.steps.unwrap_or(50);
                let sched = riccati_recursion(&model, horizon).context("gain recursion")?;
                (GainPlan::from_schedule(&sched), None, horizon)
            }
        }
    };
    if horizon == 0 {
        return Err(Failure::Input(anyhow::anyhow!("--steps must be at least 1")));
    }

    let mut summary = monte_carlo(&model, &plan, horizon, args.runs, args.seed).context("simulation")?;
    summary.steady_state_converged = steady.as_ref().map(|s| s.converged);

    let mut csv = create(&args.csv)?;
    summary.write_csv(&mut csv).context("writing CSV")?;
    csv.flush().context("writing CSV")?;

    if let Some(path) = &args.summary {
        let rep = SimulationReport {
            scenario_hash: scenario_hash(&model),
            gains: if use_steady { "steady-state" } else { "time-varying" },
            summary: &summary,
        };
        let mut out = create(path)?;
        serde_json::to_writer_pretty(&mut out, &rep).context("writing summary")?;
        out.flush().context("writing summary")?;
    }

    println!("{} runs, {} steps, seed {}", args.runs, horizon, args.seed);
    println!("{:>8} {:>16} {:>16} {:>16}", "agent", "final MSE", "trace(P+)", "centralized");
    for (i, (mse, tr)) in summary.final_empirical_mse.iter().zip(&summary.final_analytic_trace).enumerate() {
        println!("{:>8} {:>16.9} {:>16.9} {:>16.9}", i + 1, mse, tr, summary.final_centralized_trace);
    }
    Ok(())
}
