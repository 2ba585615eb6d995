//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 solver
//! non-convergence, 3 verified-property violation. Machine-format output is
//! byte-deterministic for identical arguments and seeds.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::closed_form::{
    closed_form_game, closed_form_solution, eval_f_star, f_star_csv, stability_criterion_n3,
};
use crate::dual::{solve_dual_with_partition, SolveOptions, TieRule};
use crate::game::{build_game, check_superadditive, core_check, core_check_n3, CoalitionGame};
use crate::measure::{
    check_assumptions, generate_instance, instance_to_json, load_instance, tie_summary,
    GeneratorFamily, RegimeTag,
};
use crate::monotonicity::{
    build_sharpness_new, build_sharpness_new1, verify_decrease_bound, verify_general_lower_bound,
    verify_scale_bound, verify_shift_equality, MonotonicityReport,
};
use crate::oracle::transportation_lp;
use crate::values::{value_report, values_csv};
use crate::{Instance, Real};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;
pub const EXIT_PROPERTY_VIOLATION: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Human-readable summary.
    Report,
    /// Deterministic JSON.
    Machine,
    /// CSV rows (solve and closedform only).
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TieRuleArg {
    LowestIndex,
    ProportionalSplit,
}

impl From<TieRuleArg> for TieRule {
    fn from(v: TieRuleArg) -> Self {
        match v {
            TieRuleArg::LowestIndex => TieRule::LowestIndex,
            TieRuleArg::ProportionalSplit => TieRule::ProportionalSplit,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "partition-opt",
    about = "Capacity-constrained optimal partition: equilibrium prices, values, coalition games"
)]
struct Cli {
    #[arg(long, global = true, value_enum, default_value_t = Format::Report)]
    format: Format,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for equilibrium prices, partition, and values.
    Solve(SolveArgs),
    /// Audit an instance against the model assumptions (ties, level sets).
    Check {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Build the coalition game and audit super-additivity.
    Game {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Core stability certificate for a game or an instance.
    Core {
        /// JSON game file {"n": N, "values": [...]}.
        #[arg(long, conflicts_with = "instance")]
        game: Option<PathBuf>,
        #[arg(long)]
        instance: Option<PathBuf>,
    },
    /// Multiplicative closed forms on the uniform unit grid, with optional
    /// cross-check against the generic solver.
    Closedform(ClosedformArgs),
    /// Verify a monotonicity bound under a wisdom perturbation of agent 1.
    Perturb(PerturbArgs),
    /// Build a sharpness counterexample and demonstrate its gap.
    Sharpness(SharpnessArgs),
    /// Generate an instance file.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    tolerance: Real,
    #[arg(long, default_value_t = 100_000)]
    max_iterations: usize,
    #[arg(long, value_enum, default_value_t = TieRuleArg::LowestIndex)]
    tie_rule: TieRuleArg,
    /// Skip the exact-oracle duality-gap cross check.
    #[arg(long)]
    no_oracle: bool,
}

#[derive(Debug, Args)]
struct ClosedformArgs {
    /// Grid resolution for psi(x) = x on [0, 1].
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Strictly increasing multipliers, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<Real>,
    /// Capacities summing to 1, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    capacities: Vec<Real>,
    /// Also solve the same instance generically and compare.
    #[arg(long)]
    cross_check: bool,
    /// Sample count for csv output of (m, F*(m)).
    #[arg(long, default_value_t = 101)]
    csv_samples: usize,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Scale factor beta: verifies the scale bound.
    #[arg(long, conflicts_with_all = ["shift", "row_file"])]
    scale: Option<Real>,
    /// Shift lambda: verifies the shift equality (S/US regimes).
    #[arg(long, conflicts_with = "row_file")]
    shift: Option<Real>,
    /// JSON array with a replacement wisdom row for agent 1.
    #[arg(long)]
    row_file: Option<PathBuf>,
    /// Domination factor for a replacement row.
    #[arg(long, requires = "row_file")]
    beta: Option<Real>,
    /// Bump cap: switches the replacement-row check to the decrease bound.
    #[arg(long, requires = "beta")]
    lambda: Option<Real>,
}

#[derive(Debug, Args)]
struct SharpnessArgs {
    /// Which construction: "new" (general bound) or "new1" (decrease bound).
    #[arg(value_parser = ["new", "new1"])]
    theorem: String,
    #[arg(long)]
    beta: Real,
    #[arg(long, default_value_t = 1.0)]
    lambda: Real,
    #[arg(long)]
    s: Real,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Family: "multiplicative" or "random".
    #[arg(value_parser = ["multiplicative", "random"])]
    family: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<Real>,
    #[arg(long, value_delimiter = ',')]
    capacities: Vec<Real>,
    #[arg(long, default_value_t = 3)]
    agents: usize,
    #[arg(long, value_parser = ["under", "saturated", "over"], default_value = "saturated")]
    regime: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses argv, runs the requested subcommand, and maps outcomes to the exit
/// code taxonomy.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are successes; everything else is a
            // usage error.
            let code = if err.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = err.print();
            return code;
        }
    };
    let format = cli.format;
    let output = cli.output.clone();
    match dispatch(cli) {
        Ok(outcome) => {
            if let Err(err) = emit(&outcome.text, &output) {
                eprintln!("error: {err:#}");
                return EXIT_VALIDATION;
            }
            outcome.code
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            let _ = format;
            EXIT_VALIDATION
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("PARTITION_OPT_THREADS") {
        if let Ok(threads) = v.parse::<usize>() {
            if threads > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

struct Outcome {
    text: String,
    code: i32,
}

fn emit(text: &str, output: &Option<PathBuf>) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {path:?}"))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Solve(args) => cmd_solve(args, cli.format),
        Command::Check { instance } => cmd_check(&instance, cli.format),
        Command::Game { instance } => cmd_game(&instance, cli.format),
        Command::Core { game, instance } => cmd_core(game, instance, cli.format),
        Command::Closedform(args) => cmd_closedform(args, cli.format),
        Command::Perturb(args) => cmd_perturb(args, cli.format),
        Command::Sharpness(args) => cmd_sharpness(args, cli.format),
        Command::Gen(args) => cmd_gen(args),
    }
}

fn machine<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

#[derive(Serialize)]
struct SolveOutput {
    regime: RegimeTag,
    #[serde(flatten)]
    report: crate::dual::DualReport<Real>,
    values: crate::values::ValueReport<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    duality_gap: Option<Real>,
}

fn cmd_solve(args: SolveArgs, format: Format) -> Result<Outcome> {
    let instance = load_instance(&args.instance)?;
    let options = SolveOptions {
        tolerance: args.tolerance,
        max_iterations: args.max_iterations,
        tie_rule: args.tie_rule.into(),
    };
    if options.tolerance <= 0.0 {
        bail!("tolerance must be positive");
    }
    let sol = solve_dual_with_partition(&instance, &options);
    let values = value_report(&instance, &sol.partition, &sol.report.price);
    let duality_gap = if !args.no_oracle
        && instance.points() * (instance.agents() + 1) <= 200_000
    {
        Some((sol.report.dual_value - transportation_lp(&instance).objective).abs())
    } else {
        None
    };
    let out = SolveOutput {
        regime: instance.regime.tag,
        report: sol.report,
        values,
        duality_gap,
    };
    let code = if out.report.converged { EXIT_OK } else { EXIT_NO_CONVERGENCE };
    let text = match format {
        Format::Machine => machine(&out)?,
        Format::Csv => values_csv(&out.values),
        Format::Report => {
            let mut t = String::new();
            t.push_str(&format!("regime: {:?}\n", out.regime));
            t.push_str(&format!(
                "prices ({:?}): {:?}\n",
                out.report.price.normalization, out.report.price.prices
            ));
            t.push_str(&format!("dual value: {:.12}\n", out.report.dual_value));
            t.push_str(&format!("total profit: {:.12}\n", out.values.total));
            t.push_str(&format!("individual values: {:?}\n", out.values.individual_values));
            t.push_str(&format!(
                "iterations: {}, tie mass: {:.3e}, converged: {}\n",
                out.report.iterations, out.report.tie_mass, out.report.converged
            ));
            if let Some(gap) = out.duality_gap {
                t.push_str(&format!("duality gap vs exact oracle: {gap:.3e}\n"));
            }
            t
        }
    };
    Ok(Outcome { text, code })
}

fn cmd_check(path: &PathBuf, format: Format) -> Result<Outcome> {
    let instance = load_instance(path)?;
    let report = check_assumptions(&instance);
    let text = match format {
        Format::Machine => machine(&report)?,
        _ => {
            let mut t = String::new();
            t.push_str(&format!("points: {}, agents: {}\n", instance.points(), instance.agents()));
            t.push_str(&format!("regime: {:?}\n", instance.regime.tag));
            t.push_str(&format!("clean: {}\n", report.is_empty()));
            for ((i, j), count) in tie_summary(&report) {
                t.push_str(&format!("tied wisdom values between agents {i} and {j}: {count}\n"));
            }
            if !report.level_set_violations.is_empty() {
                t.push_str(&format!(
                    "repeated scalar levels with positive mass: {}\n",
                    report.level_set_violations.len()
                ));
            }
            t
        }
    };
    Ok(Outcome { text, code: EXIT_OK })
}

#[derive(Serialize)]
struct GameOutput {
    game: CoalitionGame<Real>,
    superadditivity_violations: Vec<crate::game::SuperadditivityViolation<Real>>,
}

fn cmd_game(path: &PathBuf, format: Format) -> Result<Outcome> {
    let instance = load_instance(path)?;
    let game = build_game(&instance)?;
    let violations = check_superadditive(&game);
    let code = if violations.is_empty() { EXIT_OK } else { EXIT_PROPERTY_VIOLATION };
    let out = GameOutput {
        game,
        superadditivity_violations: violations,
    };
    let text = match format {
        Format::Machine => machine(&out)?,
        _ => {
            let mut t = String::new();
            t.push_str(&format!("agents: {}\n", out.game.n_agents));
            for (mask, v) in out.game.values.iter().enumerate() {
                t.push_str(&format!("nu({mask:#06b}) = {v:.9}\n"));
            }
            t.push_str(&format!(
                "super-additivity violations: {}\n",
                out.superadditivity_violations.len()
            ));
            t
        }
    };
    Ok(Outcome { text, code })
}

fn cmd_core(
    game_path: Option<PathBuf>,
    instance_path: Option<PathBuf>,
    format: Format,
) -> Result<Outcome> {
    let game: CoalitionGame<Real> = match (game_path, instance_path) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {path:?}"))?;
            serde_json::from_str(&text)?
        }
        (None, Some(path)) => build_game(&load_instance(&path)?)?,
        (None, None) => bail!("core requires --game or --instance"),
    };
    let cert = core_check(&game);
    let n3 = (game.n_agents == 3)
        .then(|| core_check_n3(&game).ok())
        .flatten();
    #[derive(Serialize)]
    struct CoreOutput {
        certificate: crate::game::CoreCertificate<Real>,
        #[serde(skip_serializing_if = "Option::is_none")]
        strict_criterion_n3: Option<crate::game::CoreStatus>,
    }
    let out = CoreOutput {
        certificate: cert,
        strict_criterion_n3: n3,
    };
    let text = match format {
        Format::Machine => machine(&out)?,
        _ => {
            let mut t = String::new();
            t.push_str(&format!("core: {:?}\n", out.certificate.status));
            t.push_str(&format!("balanced-collection optimum: {:.9}\n", out.certificate.optimum));
            if out.certificate.boundary {
                t.push_str("boundary case: a proper balanced collection attains the grand value\n");
            }
            if let Some(alloc) = &out.certificate.allocation {
                t.push_str(&format!("allocation: {alloc:?}\n"));
            }
            if let Some(coll) = &out.certificate.violating_collection {
                for (mask, w) in coll {
                    t.push_str(&format!("  collection member {mask:#06b} weight {w:.6}\n"));
                }
            }
            if let Some(strict) = &out.strict_criterion_n3 {
                t.push_str(&format!("strict three-player criterion: {strict:?}\n"));
            }
            t
        }
    };
    Ok(Outcome { text, code: EXIT_OK })
}

fn cmd_closedform(args: ClosedformArgs, format: Format) -> Result<Outcome> {
    let (xs, ws) = crate::measure::unit_grid(args.n);
    let model = crate::closed_form::build_model(&xs, &ws);
    let capacities = crate::measure::CapacityVector::new(args.capacities.clone());
    let solution = closed_form_solution(&model, &args.lambdas, &capacities)?;
    let game = closed_form_game(&model, &args.lambdas, &capacities)?;
    let stability = (args.lambdas.len() == 3)
        .then(|| stability_criterion_n3(&model, &args.lambdas, &args.capacities).ok())
        .flatten();

    let cross_check = if args.cross_check {
        let instance = generate_instance(
            &GeneratorFamily::UniformGridMultiplicative {
                n: args.n,
                lambdas: args.lambdas.clone(),
                capacities: args.capacities.clone(),
            },
            0,
        )?;
        let sol = solve_dual_with_partition(&instance, &SolveOptions::default());
        let generic = crate::values::individual_values(&instance, &sol.partition);
        let max_dev = generic
            .iter()
            .zip(&solution.individual_values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max);
        Some((generic, max_dev))
    } else {
        None
    };

    #[derive(Serialize)]
    struct ClosedformOutput {
        solution: crate::closed_form::ClosedFormSolution<Real>,
        game: CoalitionGame<Real>,
        #[serde(skip_serializing_if = "Option::is_none")]
        stability_n3: Option<crate::game::CoreStatus>,
        #[serde(skip_serializing_if = "Option::is_none")]
        generic_values: Option<Vec<Real>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        cross_check_deviation: Option<Real>,
    }
    let out = ClosedformOutput {
        solution,
        game,
        stability_n3: stability,
        generic_values: cross_check.as_ref().map(|(v, _)| v.clone()),
        cross_check_deviation: cross_check.as_ref().map(|&(_, d)| d),
    };
    let code = match out.cross_check_deviation {
        Some(d) if d > 1e-6 * (1.0 + eval_f_star(&model, model.total_mass)?) => {
            EXIT_PROPERTY_VIOLATION
        }
        _ => EXIT_OK,
    };
    let text = match format {
        Format::Machine => machine(&out)?,
        Format::Csv => f_star_csv(&model, args.csv_samples),
        Format::Report => {
            let mut t = String::new();
            t.push_str(&format!("breakpoints: {:?}\n", out.solution.breakpoints.cal_m));
            t.push_str(&format!("individual values: {:?}\n", out.solution.individual_values));
            t.push_str(&format!("game values: {:?}\n", out.game.values));
            if let Some(s) = &out.stability_n3 {
                t.push_str(&format!("three-player stability: {s:?}\n"));
            }
            if let Some(d) = out.cross_check_deviation {
                t.push_str(&format!("max deviation vs generic solver: {d:.3e}\n"));
            }
            t
        }
    };
    Ok(Outcome { text, code })
}

fn cmd_perturb(args: PerturbArgs, format: Format) -> Result<Outcome> {
    let instance = load_instance(&args.instance)?;
    let report: MonotonicityReport<Real> = if let Some(beta) = args.scale {
        verify_scale_bound(&instance, beta)?
    } else if let Some(lambda) = args.shift {
        verify_shift_equality(&instance, lambda)?
    } else if let Some(path) = &args.row_file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
        let row: Vec<Real> = serde_json::from_str(&text)?;
        let beta = args.beta.ok_or_else(|| anyhow!("--beta required with --row-file"))?;
        match args.lambda {
            Some(lambda) => verify_decrease_bound(&instance, &row, beta, lambda)?,
            None => verify_general_lower_bound(&instance, &row, beta)?,
        }
    } else {
        bail!("perturb requires --scale, --shift, or --row-file");
    };
    let code = if report.satisfied { EXIT_OK } else { EXIT_PROPERTY_VIOLATION };
    let text = match format {
        Format::Machine => machine(&report)?,
        _ => format_monotonicity(&report),
    };
    Ok(Outcome { text, code })
}

fn format_monotonicity(report: &MonotonicityReport<Real>) -> String {
    format!(
        "bound: {:?}\nbaseline P1: {:.9}\nperturbed P1: {:.9}\nbound value: {:.9}\nmargin: {:.3e}\nsatisfied: {}\n",
        report.bound_kind,
        report.baseline_value,
        report.perturbed_value,
        report.bound_value,
        report.margin,
        report.satisfied
    )
}

fn cmd_sharpness(args: SharpnessArgs, format: Format) -> Result<Outcome> {
    let (instance, row, report, gap_line) = match args.theorem.as_str() {
        "new" => {
            let (instance, row) = build_sharpness_new(args.beta, args.s)?;
            let report = verify_general_lower_bound(&instance, &row, args.beta)?;
            let ratio = report.perturbed_value / report.baseline_value;
            let line = format!(
                "ratio perturbed/baseline: {ratio:.6} (bound {:.6}, target below {:.6})\n",
                args.beta - 1.0,
                args.s
            );
            (instance, row, report, line)
        }
        "new1" => {
            let (instance, row) = build_sharpness_new1(args.beta, args.lambda, args.s)?;
            let report = verify_decrease_bound(&instance, &row, args.beta, args.lambda)?;
            let m1 = instance.capacities.capacities[0];
            let drop = (report.baseline_value - report.perturbed_value) / m1;
            let line = format!(
                "drop per unit capacity: {drop:.6} (target above {:.6}, cap {:.6})\n",
                args.s,
                args.lambda * (2.0 - args.beta) / (args.beta - 1.0)
            );
            (instance, row, report, line)
        }
        other => bail!("unknown sharpness construction {other:?}"),
    };
    let _ = (&instance, &row);
    let code = if report.satisfied { EXIT_OK } else { EXIT_PROPERTY_VIOLATION };
    let text = match format {
        Format::Machine => machine(&report)?,
        _ => {
            let mut t = format_monotonicity(&report);
            t.push_str(&gap_line);
            t
        }
    };
    Ok(Outcome { text, code })
}

fn cmd_gen(args: GenArgs) -> Result<Outcome> {
    let instance: Instance = match args.family.as_str() {
        "multiplicative" => {
            if args.lambdas.is_empty() || args.capacities.is_empty() {
                bail!("multiplicative generation requires --lambdas and --capacities");
            }
            generate_instance(
                &GeneratorFamily::UniformGridMultiplicative {
                    n: args.n,
                    lambdas: args.lambdas.clone(),
                    capacities: args.capacities.clone(),
                },
                args.seed,
            )?
        }
        "random" => {
            let regime = match args.regime.as_str() {
                "under" => RegimeTag::UnderSaturated,
                "over" => RegimeTag::OverSaturated,
                _ => RegimeTag::Saturated,
            };
            crate::measure::random_instance(args.n, args.agents, regime, args.seed)
        }
        other => bail!("unknown generator family {other:?}"),
    };
    Ok(Outcome {
        text: format!("{}\n", instance_to_json(&instance)),
        code: EXIT_OK,
    })
}
