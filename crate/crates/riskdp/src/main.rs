//! Command-line front end: instance I/O, solve/sweep/oracle/check/simulate.
//!
//! Exit codes: 0 success, 1 failed check, 2 validation or usage failure,
//! 3 infeasible start, 4 oracle limit exceeded. Set `RISKDP_LOG` to control
//! log verbosity.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use riskdp::analysis::{self, SweepOptions};
use riskdp::instance::{ConstantsBundle, MdpInstance, RawInstance};
use riskdp::report::{self, format_value, ReportInputs, Timing};
use riskdp::risk;
use riskdp::solver::{value_iteration, Engine};
use riskdp::thresholds::{min_risk_dp, ThresholdGrids};

const DEFAULT_M_R: f64 = 1.0 - 1e-6;

#[derive(Parser)]
#[command(
    name = "riskdp",
    version,
    about = "Finite-horizon MDP solver with dynamic, time-consistent risk constraints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for the solver (default: available parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for randomized checks
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance and write a JSON report
    Solve(SolveArgs),
    /// Solve across a ladder of grid sizes and emit a convergence CSV
    Sweep(SweepArgs),
    /// Exact optimum by brute-force policy enumeration
    Oracle(OracleArgs),
    /// Run the risk-coherence and operator-law harnesses
    Check(CheckArgs),
    /// Solve, then exactly evaluate the extracted policy
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Instance file (JSON)
    #[arg(long)]
    instance: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Start state name
    #[arg(long)]
    x0: String,
    /// Start risk budget
    #[arg(long)]
    r0: f64,
    /// Number of grid cells per budget interval
    #[arg(long = "grid-m", default_value_t = 100)]
    grid_m: usize,
    /// Override the grid extension epsilon
    #[arg(long)]
    epsilon: Option<f64>,
    /// Inner minimizer: naive or bnb
    #[arg(long, default_value = "bnb")]
    engine: Engine,
    /// Report output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feasibility-correspondence Lipschitz constant for the error bound
    #[arg(long, default_value_t = DEFAULT_M_R)]
    mr: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    x0: String,
    #[arg(long)]
    r0: f64,
    /// Grid-cell counts, comma separated; an empty string yields a
    /// header-only CSV
    #[arg(long, default_value = "5,10,20,40,60,80,100,150")]
    ms: String,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value = "bnb")]
    engine: Engine,
    /// Policy-enumeration limit for the oracle column
    #[arg(long, default_value_t = 10_000_000)]
    limit: u128,
    /// Per-solve timeout in milliseconds (0 disables)
    #[arg(long, default_value_t = 0)]
    timeout_ms: u64,
    /// CSV output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    x0: String,
    #[arg(long)]
    r0: f64,
    /// Policy-enumeration limit
    #[arg(long, default_value_t = 10_000_000)]
    limit: u128,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trials per harness
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long = "grid-m", default_value_t = 8)]
    grid_m: usize,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    x0: String,
    #[arg(long)]
    r0: f64,
    #[arg(long = "grid-m", default_value_t = 100)]
    grid_m: usize,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value = "bnb")]
    engine: Engine,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RISKDP_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: failed to configure {threads} threads: {e}");
            std::process::exit(2);
        }
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Check(args) => cmd_check(args, seed),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            std::process::exit(f.code);
        }
    }
}

struct LoadedInstance {
    instance: MdpInstance,
    digest: String,
}

fn load_instance(path: &Path) -> Result<LoadedInstance, Failure> {
    let bytes = fs::read(path)
        .map_err(|e| Failure::new(2, format!("cannot read {}: {e}", path.display())))?;
    let raw: RawInstance = serde_json::from_slice(&bytes)
        .map_err(|e| Failure::new(2, format!("cannot parse {}: {e}", path.display())))?;
    let instance = raw
        .validate()
        .map_err(|e| Failure::new(2, e.to_string()))?;
    Ok(LoadedInstance {
        instance,
        digest: report::instance_digest(&bytes),
    })
}

fn resolve_state(instance: &MdpInstance, name: &str) -> Result<usize, Failure> {
    instance
        .state_index(name)
        .ok_or_else(|| Failure::new(2, format!("unknown state \"{name}\"")))
}

fn write_output(out: &Option<PathBuf>, content: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, content)
            .map_err(|e| Failure::new(2, format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(content.as_bytes())
                .map_err(|e| Failure::new(2, format!("cannot write to stdout: {e}")))
        }
    }
}

fn cmd_solve(args: SolveArgs) -> Result<i32, Failure> {
    let total_start = Instant::now();
    let loaded = load_instance(&args.common.instance)?;
    let instance = &loaded.instance;
    let x0 = resolve_state(instance, &args.x0)?;

    let grid_start = Instant::now();
    let min_risk = min_risk_dp(instance);
    let grids = ThresholdGrids::build(instance, &min_risk, args.grid_m, args.epsilon);
    let grid_ms = grid_start.elapsed().as_millis();

    let solve_start = Instant::now();
    let tables = value_iteration(instance, &grids, args.engine)
        .map_err(|e| Failure::new(2, e.to_string()))?;
    let solve_ms = solve_start.elapsed().as_millis();

    let constants = ConstantsBundle::derive(instance, args.mr)
        .map_err(|e| Failure::new(2, e.to_string()))?;
    let error_bound = analysis::compute_error_bound(&constants, grids.max_delta())
        .map_err(|e| Failure::new(2, e.to_string()))?;

    let report = report::build_solve_report(ReportInputs {
        instance,
        digest: loaded.digest,
        engine: args.engine,
        grid_regions: args.grid_m,
        epsilon_override: args.epsilon,
        x0,
        r0: args.r0,
        grids: &grids,
        tables: &tables,
        constants: &constants,
        m_r_defaulted: args.mr == DEFAULT_M_R,
        error_bound: &error_bound,
        timing: Timing {
            grid_ms,
            solve_ms,
            total_ms: total_start.elapsed().as_millis(),
        },
    });
    let mut rendered = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::new(2, format!("report serialization failed: {e}")))?;
    rendered.push('\n');
    write_output(&args.out, &rendered)?;

    let root_value = tables.values.query(&grids, 0, x0, args.r0);
    println!("value = {}", format_value(root_value));
    match grids.grid(0, x0).snap_down(args.r0) {
        None => {
            println!(
                "budget {} is below the minimum achievable risk {}",
                format_value(args.r0),
                format_value(grids.grid(0, x0).lower)
            );
            return Ok(3);
        }
        Some(ri) => {
            println!(
                "snapped threshold = {}",
                format_value(grids.grid(0, x0).point(ri))
            );
            if let Some(decision) = tables.policy.decision(0, x0, ri) {
                println!("action = {}", instance.action_name(decision.action));
                let updates: Vec<String> = decision
                    .thresholds
                    .iter()
                    .enumerate()
                    .map(|(xp, &ti)| {
                        format!(
                            "{} -> {}",
                            instance.state_name(xp),
                            format_value(grids.grid(1, xp).point(ti))
                        )
                    })
                    .collect();
                println!("threshold updates: {}", updates.join(", "));
            }
        }
    }
    if root_value.is_finite() {
        Ok(0)
    } else {
        Ok(3)
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, Failure> {
    let loaded = load_instance(&args.common.instance)?;
    let instance = &loaded.instance;
    let x0 = resolve_state(instance, &args.x0)?;
    let ms: Vec<usize> = args
        .ms
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Failure::new(2, format!("bad grid size \"{s}\": {e}")))
        })
        .collect::<Result<_, _>>()?;
    let options = SweepOptions {
        engine: args.engine,
        epsilon: args.epsilon,
        oracle_limit: args.limit,
        per_solve_timeout: (args.timeout_ms > 0).then(|| Duration::from_millis(args.timeout_ms)),
    };
    let rows = analysis::sweep_grid_sizes(instance, x0, args.r0, &ms, &options);
    let mut csv = String::from("M,delta,value,oracle_gap,wall_ms\n");
    for row in &rows {
        let value = row.value.map(format_value).unwrap_or_default();
        let gap = row.oracle_gap.map(format_value).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.regions,
            format_value(row.delta),
            value,
            gap,
            row.wall_ms
        ));
    }
    write_output(&args.out, &csv)?;
    Ok(0)
}

fn cmd_oracle(args: OracleArgs) -> Result<i32, Failure> {
    let loaded = load_instance(&args.common.instance)?;
    let instance = &loaded.instance;
    let x0 = resolve_state(instance, &args.x0)?;
    match analysis::brute_force_optimum(instance, x0, args.r0, args.limit) {
        Ok(outcome) => {
            println!("optimum = {}", format_value(outcome.value));
            println!(
                "feasible policies = {} of {}",
                outcome.feasible_policies, outcome.total_policies
            );
            Ok(0)
        }
        Err(e @ analysis::AnalysisError::LimitExceeded { .. }) => Err(Failure::new(4, e.to_string())),
        Err(e) => Err(Failure::new(2, e.to_string())),
    }
}

fn cmd_check(args: CheckArgs, seed: u64) -> Result<i32, Failure> {
    let loaded = load_instance(&args.common.instance)?;
    let instance = &loaded.instance;
    let mut failed = false;

    let coherence = risk::check_coherence_axioms(instance.risk(), args.trials, seed);
    match &coherence.counterexample {
        None => println!(
            "coherence axioms ({}): PASS [{} trials]",
            instance.risk(),
            coherence.trials
        ),
        Some(ce) => {
            failed = true;
            println!(
                "coherence axioms ({}): FAIL [{} at trial {}, lhs {}, rhs {}]",
                instance.risk(),
                ce.axiom,
                ce.trial,
                format_value(ce.lhs),
                format_value(ce.rhs)
            );
        }
    }

    let min_risk = min_risk_dp(instance);
    let grids = ThresholdGrids::build(instance, &min_risk, args.grid_m, args.epsilon);
    let operator = analysis::operator_property_harness(instance, &grids, args.trials, seed);
    match &operator.counterexample {
        None => println!("operator laws: PASS [{} trials]", operator.trials),
        Some(v) => {
            failed = true;
            println!(
                "operator laws: FAIL [{} at trial {}, stage {}, state {}, index {}: {}]",
                v.law, v.trial, v.stage, v.state, v.grid_index, v.detail
            );
        }
    }

    Ok(if failed { 1 } else { 0 })
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32, Failure> {
    let loaded = load_instance(&args.common.instance)?;
    let instance = &loaded.instance;
    let x0 = resolve_state(instance, &args.x0)?;
    let min_risk = min_risk_dp(instance);
    let grids = ThresholdGrids::build(instance, &min_risk, args.grid_m, args.epsilon);
    let tables = value_iteration(instance, &grids, args.engine)
        .map_err(|e| Failure::new(2, e.to_string()))?;
    match analysis::evaluate_policy(instance, &grids, &tables, x0, args.r0) {
        Ok(eval) => {
            println!("expected cost J = {}", format_value(eval.expected_cost));
            println!("dynamic risk R = {}", format_value(eval.dynamic_risk));
            println!(
                "feasibility margin r0 - R = {}",
                format_value(args.r0 - eval.dynamic_risk)
            );
            Ok(0)
        }
        Err(e @ analysis::AnalysisError::InfeasibleStart { .. }) => {
            Err(Failure::new(3, e.to_string()))
        }
        Err(e) => Err(Failure::new(2, e.to_string())),
    }
}
