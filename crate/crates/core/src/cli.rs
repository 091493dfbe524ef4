//! Command-line frontend: load a market file, run relaxations, emit bounds,
//! certificates, and oracle cross-checks as line-oriented JSON reports.
//!
//! Exit codes: 0 success, 2 static arbitrage detected (validation failure
//! or an infeasible relaxation), 1 any other error. Set
//! `BASKETBOUND_VERBOSE=1` for solver iteration logs on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::hedging::{self, HedgeCertificate};
use crate::market::{self, MarketSpec};
use crate::oracle::{self, GridSpec, OracleError};
use crate::relaxation::{
    assemble_compact, assemble_unbounded, solve_bound, ConicProblem, RelaxationSpec, Side,
};
use crate::relaxation::LocalizerSet;
use crate::report::Report;
use crate::semigroup::{Mode, MomentIndex};
use crate::solver::{DenseIpm, SolveStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_ARBITRAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "basketbound",
    about = "Static-arbitrage price bounds for basket options via moment relaxations",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Compact,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LocalizersArg {
    Full,
    Paper,
}

/// Flags shared by every relaxation-running subcommand.
#[derive(Debug, Args)]
pub struct RelaxArgs {
    /// Market description file.
    #[arg(long)]
    pub market: PathBuf,
    /// Relaxation order N.
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Which bound to compute.
    #[arg(long, value_enum, default_value_t = SideArg::Lower)]
    pub side: SideArg,
    /// Hierarchy flavor.
    #[arg(long, value_enum, default_value_t = ModeArg::Compact)]
    pub mode: ModeArg,
    /// Canonical rewriting of straddle squares.
    #[arg(long = "reduce-squares", value_enum, default_value_t = Switch::On)]
    pub reduce_squares: Switch,
    /// Localizing-matrix generator set.
    #[arg(long, value_enum, default_value_t = LocalizersArg::Full)]
    pub localizers: LocalizersArg,
    /// Override the support-sum bound β derived from the box.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Solver tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute one price bound.
    Bound {
        #[command(flatten)]
        relax: RelaxArgs,
        /// Also write the report line to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute a bound and emit the replicating-portfolio certificate.
    Hedge {
        #[command(flatten)]
        relax: RelaxArgs,
        /// Certificate output path.
        #[arg(long)]
        cert: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Self-check sample count.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Grid-LP bounds over measures supported on the box.
    Oracle {
        #[arg(long)]
        market: PathBuf,
        /// Grid points per axis.
        #[arg(long, default_value_t = 201)]
        grid: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-verify a certificate file against a market.
    Check {
        #[arg(long)]
        market: PathBuf,
        #[arg(long)]
        cert: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dump the canonical monomial index, one monomial per line.
    DumpIndex {
        #[arg(long)]
        market: PathBuf,
        #[arg(long, default_value_t = 4)]
        degree: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Compact)]
        mode: ModeArg,
        #[arg(long = "reduce-squares", value_enum, default_value_t = Switch::On)]
        reduce_squares: Switch,
    },
    /// Export the assembled relaxation in the sparse text format.
    ExportProblem {
        #[command(flatten)]
        relax: RelaxArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn emit(line: &str, output: Option<&Path>) -> Result<(), String> {
    println!("{line}");
    if let Some(path) = output {
        std::fs::write(path, format!("{line}\n")).map_err(|e| format!("write {path:?}: {e}"))?;
    }
    Ok(())
}

fn load_market(path: &Path) -> Result<MarketSpec, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("read {}: {e}", path.display()))?;
    market::load_market(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Validate and report violations; `Err` carries the exit code.
fn validated(market: MarketSpec, command: &str, output: Option<&Path>) -> Result<MarketSpec, i32> {
    let violations = market.validate();
    if violations.is_empty() {
        return Ok(market);
    }
    let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
    for v in &lines {
        eprintln!("validation: {v}");
    }
    let mut r = Report::new(command);
    r.push_str("status", "invalid_market").push_str_list("violations", &lines);
    let _ = emit(&r.to_line(), output);
    Err(EXIT_ARBITRAGE)
}

fn assemble(market: &MarketSpec, relax: &RelaxArgs) -> Result<ConicProblem, String> {
    let side = match relax.side {
        SideArg::Lower => Side::Lower,
        SideArg::Upper => Side::Upper,
    };
    let mode = match relax.mode {
        ModeArg::Compact => Mode::Compact,
        ModeArg::Unbounded => Mode::Unbounded,
    };
    let spec = RelaxationSpec {
        order: relax.order,
        mode,
        side,
        reduce: relax.reduce_squares == Switch::On,
        localizer_set: match relax.localizers {
            LocalizersArg::Full => LocalizerSet::Full,
            LocalizersArg::Paper => LocalizerSet::Paper,
        },
        beta_override: relax.beta,
    };
    let assembled = match mode {
        Mode::Compact => assemble_compact(market, &spec),
        Mode::Unbounded => assemble_unbounded(market, &spec),
    };
    assembled.map_err(|e| e.to_string())
}

fn backend() -> DenseIpm {
    let verbose = std::env::var("BASKETBOUND_VERBOSE").map(|v| v != "0").unwrap_or(false);
    DenseIpm { verbose }
}

fn side_name(side: SideArg) -> &'static str {
    match side {
        SideArg::Lower => "lower",
        SideArg::Upper => "upper",
    }
}

fn mode_name(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Compact => "compact",
        ModeArg::Unbounded => "unbounded",
    }
}

fn run_bound(relax: &RelaxArgs, output: Option<&Path>) -> i32 {
    let command = "bound";
    let market = match load_market(&relax.market) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let market = match validated(market, command, output) {
        Ok(m) => m,
        Err(code) => return code,
    };
    let problem = match assemble(&market, relax) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let result = match solve_bound(&problem, &backend(), relax.tol) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let mut r = Report::new(command);
    r.push_str("side", side_name(relax.side))
        .push_int("order", relax.order as i64)
        .push_str("mode", mode_name(relax.mode));
    match result.status {
        SolveStatus::Optimal | SolveStatus::Inaccurate => {
            r.push_f64("value", result.value);
            r.push_str(
                "status",
                if result.status == SolveStatus::Optimal { "optimal" } else { "inaccurate" },
            );
        }
        SolveStatus::PrimalInfeasible => {
            r.push_str("status", "arbitrage_detected");
        }
        SolveStatus::DualInfeasible => {
            r.push_str("status", "unbounded");
        }
    }
    r.push_f64("residual_primal", result.solution.residuals.primal_eq)
        .push_f64("residual_dual", result.solution.residuals.dual)
        .push_f64("residual_gap", result.solution.residuals.gap)
        .push_int("iterations", result.solution.iterations as i64);
    if emit(&r.to_line(), output).is_err() {
        return EXIT_ERROR;
    }
    match result.status {
        SolveStatus::PrimalInfeasible => EXIT_ARBITRAGE,
        _ => EXIT_OK,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_hedge(
    relax: &RelaxArgs,
    cert_path: &Path,
    output: Option<&Path>,
    samples: usize,
    seed: u64,
) -> i32 {
    let command = "hedge";
    let market = match load_market(&relax.market) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let market = match validated(market, command, output) {
        Ok(m) => m,
        Err(code) => return code,
    };
    let problem = match assemble(&market, relax) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let result = match solve_bound(&problem, &backend(), relax.tol) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    if result.status == SolveStatus::PrimalInfeasible {
        let mut r = Report::new(command);
        r.push_str("status", "arbitrage_detected");
        let _ = emit(&r.to_line(), output);
        return EXIT_ARBITRAGE;
    }
    let cert = match hedging::extract(&problem, &result, relax.tol) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let check = match hedging::check_certificate(&cert, &market, samples, seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    if std::fs::write(cert_path, cert.to_json()).is_err() {
        eprintln!("error: cannot write certificate to {}", cert_path.display());
        return EXIT_ERROR;
    }
    let mut r = Report::new(command);
    r.push_str("side", side_name(relax.side))
        .push_int("order", relax.order as i64)
        .push_f64("value", result.value)
        .push_str("status", "optimal")
        .push_str("certificate", &cert_path.display().to_string())
        .push_f64("check_max_residual", check.max_residual)
        .push_f64("check_min_slack", check.min_slack)
        .push_int("check_samples", check.samples as i64);
    if emit(&r.to_line(), output).is_err() {
        return EXIT_ERROR;
    }
    EXIT_OK
}

fn run_oracle(path: &Path, grid: usize, tol: f64, output: Option<&Path>) -> i32 {
    let command = "oracle";
    let market = match load_market(path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let market = match validated(market, command, output) {
        Ok(m) => m,
        Err(code) => return code,
    };
    match oracle::lp_bounds(&market, &GridSpec::new(grid), &backend(), tol) {
        Ok(b) => {
            let mut r = Report::new(command);
            r.push_f64("min", b.min)
                .push_f64("max", b.max)
                .push_int("grid_points", b.grid_points as i64)
                .push_str("status", "optimal");
            if emit(&r.to_line(), output).is_err() {
                return EXIT_ERROR;
            }
            EXIT_OK
        }
        Err(OracleError::GridInfeasible { status }) => {
            let mut r = Report::new(command);
            r.push_str("status", "infeasible")
                .push_str("detail", &format!("{status:?}"))
                .push_int("grid_points", grid as i64);
            let _ = emit(&r.to_line(), output);
            EXIT_ARBITRAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn run_check(
    market_path: &Path,
    cert_path: &Path,
    samples: usize,
    seed: u64,
    output: Option<&Path>,
) -> i32 {
    let command = "check";
    let market = match load_market(market_path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let text = match std::fs::read_to_string(cert_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: read {}: {e}", cert_path.display());
            return EXIT_ERROR;
        }
    };
    let cert = match HedgeCertificate::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let check = match hedging::check_certificate(&cert, &market, samples, seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    // Tolerances follow the replication-identity scale on the support
    // region: payoff monomials grow like β^degree.
    let residual_tol = 1e-5 * (1.0 + cert.beta.powi(2 * cert.order as i32));
    let slack_tol = 1e-5;
    let pass = check.max_residual <= residual_tol && check.min_slack >= -slack_tol;
    let mut r = Report::new(command);
    r.push_str("side", match cert.side { Side::Lower => "lower", Side::Upper => "upper" })
        .push_f64("bound", cert.bound)
        .push_f64("max_residual", check.max_residual)
        .push_f64("min_slack", check.min_slack)
        .push_f64("min_sos", check.min_sos)
        .push_f64("residual_tol", residual_tol)
        .push_int("samples", check.samples as i64)
        .push_bool("pass", pass);
    if emit(&r.to_line(), output).is_err() {
        return EXIT_ERROR;
    }
    if pass {
        EXIT_OK
    } else {
        EXIT_ERROR
    }
}

fn run_dump_index(path: &Path, degree: usize, mode: ModeArg, reduce: Switch) -> i32 {
    let market = match load_market(path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let idx = MomentIndex::build(
        degree,
        match mode {
            ModeArg::Compact => Mode::Compact,
            ModeArg::Unbounded => Mode::Unbounded,
        },
        reduce == Switch::On,
        &market,
    );
    print!("{}", idx.dump());
    EXIT_OK
}

fn run_export(relax: &RelaxArgs, output: Option<&Path>) -> i32 {
    let market = match load_market(&relax.market) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let problem = match assemble(&market, relax) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let text = problem.export_text();
    match output {
        Some(path) => {
            if std::fs::write(path, &text).is_err() {
                eprintln!("error: cannot write {}", path.display());
                return EXIT_ERROR;
            }
        }
        None => print!("{text}"),
    }
    EXIT_OK
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match &cli.command {
        Command::Bound { relax, output } => run_bound(relax, output.as_deref()),
        Command::Hedge { relax, cert, output, samples, seed } => {
            run_hedge(relax, cert, output.as_deref(), *samples, *seed)
        }
        Command::Oracle { market, grid, tol, output } => {
            run_oracle(market, *grid, *tol, output.as_deref())
        }
        Command::Check { market, cert, samples, seed, output } => {
            run_check(market, cert, *samples, *seed, output.as_deref())
        }
        Command::DumpIndex { market, degree, mode, reduce_squares } => {
            run_dump_index(market, *degree, *mode, *reduce_squares)
        }
        Command::ExportProblem { relax, output } => run_export(relax, output.as_deref()),
    }
}
