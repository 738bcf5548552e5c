use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use meanmatch::config::RunConfig;
use meanmatch::diagnostics::{export_figure_data, Provenance, DEFAULT_BANDS};
use meanmatch::income::{calibrate, default_init, CalibrationOptions, Family, QuantileData};
use meanmatch::mc::{compare_to_pde, run_replicates, write_event_log, SimConfig, Thresholds};
use meanmatch::run::{load_run, write_solution_files, ManifestBuilder};
use meanmatch::solver::solve_fixed_point_with;
use meanmatch::theory::{
    audit_solution, check_no_match, check_nonempty, check_uniqueness, constants_for, AuditTolerances,
};
use meanmatch::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CALIBRATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "meanmatch",
    version,
    about = "Mean field equilibria of two-sided matching markets"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Pln,
    Gp,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the equilibrium and write fields, residual trace and manifest.
    Solve,
    /// Fit the initial quality distributions to a `prob,value` quantile CSV.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        family: FamilyArg,
        /// Fit the distribution conditioned on [0, domain-max].
        #[arg(long, default_value_t = 7000.0)]
        domain_max: f64,
        /// Fit the unconditioned distribution instead.
        #[arg(long)]
        untruncated: bool,
    },
    /// Print theoretical constants and conditions; optionally audit a solved run.
    Check {
        /// Directory written by `solve`.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Monte-Carlo cross-check of a solved run.
    Simulate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
        /// Also write the event log of replicate 0.
        #[arg(long)]
        events: bool,
    },
    /// Export figure data of a solved run.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::NonMonotone { .. } => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = Result<u8, Failure>;

fn set_thread_cap() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("MEANMATCH_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| usage(format!("MEANMATCH_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn load_config(cli: &Cli, fallback_dir: Option<&Path>) -> Result<RunConfig, Failure> {
    let path = match (&cli.config, fallback_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(meanmatch::run::CONFIG_FILE),
        (None, None) => return Err(usage("--config is required")),
    };
    let mut config = RunConfig::from_path(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn cmd_solve(cli: &Cli) -> CmdResult {
    let config = load_config(cli, None)?;
    let params = config.market();
    params.validate()?;
    let grids = config.grids()?;
    let quiet = cli.quiet;
    let mut builder = ManifestBuilder::start("solve", &config, &cli.out)?;
    let state = solve_fixed_point_with(&params, &grids, &config.solver, |n, terms| {
        if !quiet && (n % 100 == 0 || n == 1) {
            eprintln!("iter {n:>6}  E = {:.4e}", terms.total());
        }
    })?;
    write_solution_files(&mut builder, &config, &state)?;
    let manifest = builder.finish(Some(&state))?;
    if !quiet {
        println!(
            "converged: {}  iterations: {}  residual: {:.4e}  wall time: {:.1}s",
            state.converged, state.iteration, state.residual, manifest.wall_time_s
        );
    }
    Ok(if state.converged { 0 } else { EXIT_SOLVER })
}

fn cmd_calibrate(cli: &Cli, data: &Path, family: FamilyArg, domain_max: f64, untruncated: bool) -> CmdResult {
    let text = fs::read_to_string(data).map_err(|e| Failure::from(Error::io(data, e)))?;
    let table = QuantileData::from_csv_str(&text)?;
    if table.len() < 3 {
        return Err(usage(format!("{}: need at least 3 quantile rows", data.display())));
    }
    let families: &[Family] = match family {
        FamilyArg::Pln => &[Family::ParetoLognormal],
        FamilyArg::Gp => &[Family::GeneralizedPareto],
        FamilyArg::All => &[Family::ParetoLognormal, Family::GeneralizedPareto],
    };
    let options = CalibrationOptions {
        domain_max: (!untruncated).then_some(domain_max),
        ..Default::default()
    };
    fs::create_dir_all(&cli.out).map_err(|e| Failure::from(Error::io(&cli.out, e)))?;
    let mut code = 0;
    if !cli.quiet {
        println!(
            "{:<20} {:>10} {:>8} {:>10}  params",
            "family", "rrmse(%)", "iters", "converged"
        );
    }
    for fam in families {
        let result = calibrate(*fam, &table, &default_init(*fam, &table), &options)?;
        let path = cli.out.join(format!("calibration_{fam}.json"));
        let body = serde_json::to_string_pretty(&result).map_err(Error::from)? + "\n";
        fs::write(&path, body).map_err(|e| Failure::from(Error::io(&path, e)))?;
        if !cli.quiet {
            let params = serde_json::to_value(&result.density).map_err(Error::from)?;
            println!(
                "{:<20} {:>10.4} {:>8} {:>10}  {}",
                fam.to_string(),
                100.0 * result.rrmse,
                result.iterations,
                result.converged,
                params["params"]
            );
        }
        if !result.converged {
            code = EXIT_CALIBRATION;
        }
    }
    Ok(code)
}

fn cmd_check(cli: &Cli, audit: Option<&Path>) -> CmdResult {
    let loaded = audit.map(load_run).transpose()?;
    let config = match (&cli.config, &loaded) {
        (None, Some(run)) => run.config.clone(),
        _ => load_config(cli, None)?,
    };
    let params = config.market();
    let grids = config.grids()?;
    let constants = constants_for(&params, &grids, config.nu);
    let no_match = check_no_match(&constants, &grids.time);
    let nonempty = check_nonempty(&constants);
    let uniqueness = check_uniqueness(&constants);
    if !cli.quiet {
        println!("{:<10} {:>14} {:>14}", "constant", "side A", "side B");
        for (name, a, b) in [
            ("k", constants.a.k, constants.b.k),
            ("K", constants.a.k_upper, constants.b.k_upper),
            ("Pi", constants.a.pi, constants.b.pi),
            ("M", constants.a.m, constants.b.m),
            ("C", constants.a.inputs.envelope, constants.b.inputs.envelope),
            ("mass", constants.a.mass_bound, constants.b.mass_bound),
        ] {
            println!("{name:<10} {a:>14.6e} {b:>14.6e}");
        }
        println!(
            "M2 = {:.6e}  M3 = {:.6e}  nu = {}",
            constants.m2, constants.m3, constants.nu
        );
        println!("no-match = {}", no_match.holds);
        println!("nonempty = {}", nonempty);
        println!(
            "uniqueness (i) = {} (lhs {:.4e})  (ii) = {} ({:.4e} vs {:.4e})",
            uniqueness.cond_i,
            uniqueness.cond_i_lhs,
            uniqueness.cond_ii,
            uniqueness.cond_ii_lhs,
            uniqueness.cond_ii_rhs
        );
    }
    let Some(run) = loaded else {
        return Ok(0);
    };
    let tol = AuditTolerances {
        tol: config.solver.tol,
        ..Default::default()
    };
    let report = audit_solution(&run.state, &constants, &tol);
    fs::create_dir_all(&cli.out).map_err(|e| Failure::from(Error::io(&cli.out, e)))?;
    let path = cli.out.join("audit.json");
    let body = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    fs::write(&path, body).map_err(|e| Failure::from(Error::io(&path, e)))?;
    let mut all = true;
    for c in &report {
        all &= c.pass;
        if !cli.quiet || !c.pass {
            println!(
                "{:<26} {:<4} worst {:>12.4e} limit {:>12.4e}",
                c.check_name,
                if c.pass { "ok" } else { "FAIL" },
                c.worst_value,
                c.limit
            );
        }
    }
    Ok(if all { 0 } else { EXIT_USAGE })
}

fn cmd_simulate(
    cli: &Cli,
    run_dir: &Path,
    agents: Option<usize>,
    replicates: Option<usize>,
    bins: Option<usize>,
    events: bool,
) -> CmdResult {
    let run = load_run(run_dir)?;
    let config = load_config(cli, Some(run_dir))?;
    let sim = &config.simulate;
    let agents = agents.unwrap_or(sim.agents_per_side);
    let replicates = replicates.unwrap_or(sim.replicates);
    let bins = bins.unwrap_or(sim.bins);
    if agents == 0 || replicates == 0 || bins == 0 {
        return Err(usage("agents, replicates and bins must be >= 1"));
    }
    let params = config.market();
    let sim_config = SimConfig {
        agents_per_side: agents,
        seed: config.seed,
        thresholds_a: Thresholds::new(run.state.v_a.clone(), sim.time_interpolation),
        thresholds_b: Thresholds::new(run.state.v_b.clone(), sim.time_interpolation),
        params: params.clone(),
        mode: sim.mode,
        scheme: sim.scheme,
        record_events: false,
    };
    let results = run_replicates(&sim_config, replicates)?;
    let report = compare_to_pde(&results, &run.state, &params, bins)?;
    let mut builder = ManifestBuilder::start("simulate", &config, &cli.out)?;
    let body = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    builder.write("comparison.json", body.as_bytes())?;
    if events {
        let logged = SimConfig {
            record_events: true,
            ..sim_config
        };
        let first = meanmatch::mc::simulate_market(&logged, 0)?;
        let mut buf = Vec::new();
        write_event_log(&mut buf, &first.events).map_err(|e| Failure::from(Error::io(&cli.out, e)))?;
        builder.write("events.csv", &buf)?;
    }
    builder.finish(None)?;
    let matches: usize = results.iter().map(|r| r.a.matched_count() + r.b.matched_count()).sum();
    if !cli.quiet {
        println!("replicates {replicates}  agents/side {agents}  matches {matches}");
        for s in &report.sides {
            println!(
                "side {}: max|dF| {:.4e}  within 3SE {:.3} ({}/{})  L1 {:.4e}",
                s.side.label(),
                s.max_abs_dev_f,
                s.fraction_within_3se,
                s.cells_within_3se,
                s.cells,
                s.l1_survival_distance
            );
        }
    }
    Ok(if report.passes(0.9) { 0 } else { EXIT_USAGE })
}

fn cmd_diagnose(cli: &Cli, run_dir: &Path) -> CmdResult {
    let run = load_run(run_dir)?;
    let config = load_config(cli, Some(run_dir))?;
    let manifest = export_figure_data(
        &run.state,
        &config.market(),
        &cli.out,
        &Provenance::new(config.hash()),
        &DEFAULT_BANDS,
    )?;
    if !cli.quiet {
        for f in &manifest.files {
            println!("{:<16} {:>6} rows  {}", f.name, f.rows, f.description);
        }
    }
    Ok(0)
}

fn dispatch(cli: &Cli) -> CmdResult {
    set_thread_cap()?;
    match &cli.command {
        Command::Solve => cmd_solve(cli),
        Command::Calibrate {
            data,
            family,
            domain_max,
            untruncated,
        } => cmd_calibrate(cli, data, *family, *domain_max, *untruncated),
        Command::Check { audit } => cmd_check(cli, audit.as_deref()),
        Command::Simulate {
            run,
            agents,
            replicates,
            bins,
            events,
        } => cmd_simulate(cli, run, *agents, *replicates, *bins, *events),
        Command::Diagnose { run } => cmd_diagnose(cli, run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
