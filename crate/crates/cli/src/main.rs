use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use twophase::config::RunConfig;
use twophase::constitutive::{low_solubility_check, validate_assumptions, validate_rock};
use twophase::diagnostics::{cauchy_decreasing, norm_ratios, successive_differences, sweep, PositivityMonitor, SweepAxis};
use twophase::output::{self, fmt_num, CsvWriter, RunWriter};
use twophase::solver::{Problem, RunOutput, Simulation};
use twophase::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "twophase", version, about = "Two-phase, two-component porous-media flow with gas dissolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    config: PathBuf,
    /// Output directory (overrides TWOPHASE_OUTPUT_ROOT and [output] directory).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Recorded in the outputs; the pipeline itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulation and write the time series and snapshots.
    Run(Common),
    /// Run and check positivity, saturation bounds, mass balance and the energy inequality.
    Verify(Common),
    /// Rerun the scenario along one regularization axis and tabulate the norms.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// eta, eps, dt or N.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; `full` is accepted on the N axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Export constitutive curves, global-pressure tables and test functions.
    Curves {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 401)]
        samples: usize,
    },
    /// Evaluate the low-solubility condition.
    CheckSolubility(Common),
    /// Check the structural assumptions on the constitutive set and rock fields.
    Validate(Common),
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn classify(e: Error) -> Failure {
    let code = match &e {
        Error::Config(_) | Error::Domain(_) => EXIT_CONFIG,
        Error::Io(_) => 1,
        _ => EXIT_SOLVER,
    };
    Failure { code, err: e.into() }
}

fn verification(msg: String) -> Failure {
    Failure { code: EXIT_VERIFY, err: anyhow::anyhow!(msg) }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: 1, err }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load(c: &Common) -> std::result::Result<RunConfig, Failure> {
    RunConfig::load(&c.config).map_err(classify)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.output.clone().unwrap_or_else(|| output::run_directory(cfg))
}

fn simulate(c: &Common, cfg: &RunConfig, pb: &Problem) -> std::result::Result<(PathBuf, RunOutput), Failure> {
    let dir = out_dir(c, cfg);
    let init = cfg.initial_state(&pb.mesh).map_err(classify)?;
    let sim = Simulation::new(pb, cfg.params.clone()).map_err(classify)?;
    let mut writer = RunWriter::create(&dir, cfg, pb, &init, c.seed).map_err(classify)?;
    let out = sim.run_with(init, |s, r| writer.step(s, r)).map_err(classify)?;
    writer.finish().map_err(classify)?;
    Ok((dir, out))
}

fn solver_failed(out: &RunOutput) -> Option<Failure> {
    out.failure
        .as_ref()
        .map(|f| Failure { code: EXIT_SOLVER, err: anyhow::anyhow!("step failed after {} steps: {f}", out.reports.len()) })
}

fn cmd_run(c: &Common) -> Outcome {
    let cfg = load(c)?;
    let pb = cfg.problem().map_err(classify)?;
    let (dir, out) = simulate(c, &cfg, &pb)?;
    let last = out.reports.last();
    println!("steps        {}", out.reports.len());
    if let Some(r) = last {
        println!("final time   {}", fmt_num(r.time));
        println!("S range      [{}, {}]", fmt_num(r.saturation_range.0), fmt_num(r.saturation_range.1));
        println!("p_g range    [{}, {}]", fmt_num(r.min_p_g), fmt_num(r.max_p_g));
    }
    println!("output       {}", dir.display());
    match solver_failed(&out) {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

struct Check {
    name: &'static str,
    value: f64,
    threshold: f64,
    pass: bool,
}

fn cmd_verify(c: &Common) -> Outcome {
    let cfg = load(c)?;
    let pb = cfg.problem().map_err(classify)?;
    let (dir, out) = simulate(c, &cfg, &pb)?;
    if let Some(f) = solver_failed(&out) {
        return Err(f);
    }
    let reps = &out.reports;
    let mut pos = PositivityMonitor::new(1e-8);
    for r in reps {
        pos.observe(&pb, r);
    }
    let min_pg = reps.iter().map(|r| r.min_p_g).fold(f64::INFINITY, f64::min);
    let min_s = reps.iter().map(|r| r.saturation_range.0).fold(f64::INFINITY, f64::min);
    let max_s = reps.iter().map(|r| r.saturation_range.1).fold(f64::NEG_INFINITY, f64::max);
    let clamps: usize = reps.iter().map(|r| r.clamp_events).sum();
    let defect = reps.iter().map(|r| r.mass.defect).fold(0.0, f64::max);
    let defect_bound = (10.0 * cfg.params.picard_tol).max(1e-8);
    let min_slack = reps.iter().map(|r| r.energy.slack).fold(f64::INFINITY, f64::min);
    let min_diss = reps.iter().flat_map(|r| r.energy.dissipation).fold(f64::INFINITY, f64::min);
    let checks = [
        Check { name: "min_pg", value: min_pg, threshold: -1e-8 * pb.p_scale, pass: pos.ok() },
        Check { name: "min_S", value: min_s, threshold: 0.0, pass: min_s >= 0.0 },
        Check { name: "max_S", value: max_s, threshold: 1.0, pass: max_s <= 1.0 },
        Check { name: "clamp_events", value: clamps as f64, threshold: 0.0, pass: clamps == 0 },
        Check { name: "max_mass_defect", value: defect, threshold: defect_bound, pass: defect <= defect_bound },
        Check {
            name: "min_energy_slack",
            value: min_slack,
            threshold: 0.0,
            pass: reps.iter().all(|r| r.energy.satisfied),
        },
        Check { name: "min_dissipation", value: min_diss, threshold: 0.0, pass: min_diss >= 0.0 || reps.is_empty() },
    ];
    let path = dir.join("verify.csv");
    let mut w = CsvWriter::create(&path, &cfg.hash, &[], &["check", "value", "threshold", "pass"]).map_err(classify)?;
    for k in &checks {
        w.row(&[k.name.into(), fmt_num(k.value), fmt_num(k.threshold), k.pass.to_string()]).map_err(classify)?;
        println!("{:<18} {:>24} {:>12}  {}", k.name, fmt_num(k.value), fmt_num(k.threshold), if k.pass { "pass" } else { "FAIL" });
    }
    w.finish().map_err(classify)?;
    println!("report: {}", path.display());
    let failed: Vec<&str> = checks.iter().filter(|k| !k.pass).map(|k| k.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(verification(format!("verification failed: {}", failed.join(", "))))
    }
}

fn cmd_sweep(c: &Common, axis: &str, values: &[String]) -> Outcome {
    let cfg = load(c)?;
    let axis = SweepAxis::parse(axis)
        .ok_or_else(|| Failure { code: EXIT_CONFIG, err: anyhow::anyhow!("unknown axis '{axis}' (eta, eps, dt, N)") })?;
    let pb = cfg.problem().map_err(classify)?;
    let full = pb.mesh.free_nodes().len() as f64;
    let vals = values
        .iter()
        .map(|v| match (v.trim(), axis) {
            ("full", SweepAxis::Modes) => Ok(full),
            (s, _) => s.parse::<f64>().ok().filter(|x| *x > 0.0).ok_or_else(|| Failure {
                code: EXIT_CONFIG,
                err: anyhow::anyhow!("sweep value '{s}' is not a positive number"),
            }),
        })
        .collect::<std::result::Result<Vec<f64>, Failure>>()?;
    let init = cfg.initial_state(&pb.mesh).map_err(classify)?;
    let rows = sweep(&pb, &cfg.params, axis, &vals, &init).map_err(classify)?;
    let ratios = norm_ratios(&rows);
    let finals: Vec<_> = rows.iter().filter_map(|r| r.final_state.as_ref()).collect();
    let diffs = if finals.len() == rows.len() { successive_differences(&pb, &finals) } else { Vec::new() };
    let dir = out_dir(c, &cfg);
    let path = dir.join(format!("sweep_{}.csv", axis.name()));
    output::write_sweep_table(&path, &cfg.hash, axis, &rows, &ratios, &diffs).map_err(classify)?;

    println!("{:>12} {:>14} {:>14} {:>14} {:>14}  status", axis.name(), "|grad p|^2", "|grad beta|^2", "|grad u|^2", "eta|grad pc|^2");
    for r in &rows {
        let [a, b, cc, d] = r.norm_integrals.map(fmt_num);
        println!("{:>12} {a:>14} {b:>14} {cc:>14} {d:>14}  {}", fmt_num(r.value), r.error.as_deref().unwrap_or("ok"));
    }
    let show = |r: Option<f64>| r.map_or("n/a".to_string(), fmt_num);
    println!("max/min ratios: {}", ratios.map(show).join(" "));
    if !diffs.is_empty() {
        println!("cauchy differences: {} (decreasing: {})", diffs.iter().map(|d| fmt_num(*d)).collect::<Vec<_>>().join(" "), cauchy_decreasing(&diffs));
    }
    println!("table: {}", path.display());
    match rows.iter().find(|r| r.error.is_some()) {
        Some(r) => Err(Failure {
            code: EXIT_SOLVER,
            err: anyhow::anyhow!("run at {}={} failed: {}", axis.name(), fmt_num(r.value), r.error.as_deref().unwrap_or("")),
        }),
        None => Ok(()),
    }
}

fn cmd_curves(c: &Common, samples: usize) -> Outcome {
    let cfg = load(c)?;
    let pb = cfg.problem().map_err(classify)?;
    let dir = out_dir(c, &cfg).join("curves");
    let paths = output::write_curves(&dir, &cfg.hash, &cfg, &pb, samples).map_err(classify)?;
    println!("wrote {} tables to {}", paths.len(), dir.display());
    Ok(())
}

fn rock_bounds(cfg: &RunConfig) -> std::result::Result<twophase::constitutive::RockBounds, Failure> {
    let mesh = cfg.build_mesh().map_err(classify)?;
    Ok(cfg.rock.bounds(&mesh.nodes, mesh.dim))
}

fn cmd_check_solubility(c: &Common) -> Outcome {
    let cfg = load(c)?;
    let bounds = rock_bounds(&cfg)?;
    let r = low_solubility_check(&bounds, &cfg.rock.fluid, &cfg.set, cfg.solubility_z).map_err(classify)?;
    println!("z                 {}", fmt_num(r.z));
    println!("prefactor         {}", fmt_num(r.prefactor));
    println!("density branch    {}", fmt_num(r.density_branch));
    println!("viscosity branch  {}", fmt_num(r.viscosity_branch));
    println!("required bound    {}", fmt_num(r.required_bound));
    println!("1/M_g             {}", fmt_num(r.one_over_mg));
    println!("c_D               {}", fmt_num(r.c_d));
    println!("{}", if r.pass { "pass" } else { "FAIL" });
    if r.pass {
        Ok(())
    } else {
        Err(verification(format!(
            "low-solubility condition fails: 1/M_g = {} does not exceed {}",
            fmt_num(r.one_over_mg),
            fmt_num(r.required_bound)
        )))
    }
}

fn cmd_validate(c: &Common) -> Outcome {
    let cfg = load(c)?;
    let mesh = cfg.build_mesh().map_err(classify)?;
    let mut report = validate_assumptions(&cfg.set, &cfg.rock.fluid, cfg.tables.validator_resolution).map_err(classify)?;
    report.violations.extend(validate_rock(&cfg.rock, &mesh.nodes, mesh.dim));
    if let Ok(s) = low_solubility_check(&cfg.rock.bounds(&mesh.nodes, mesh.dim), &cfg.rock.fluid, &cfg.set, cfg.solubility_z) {
        if !s.pass {
            report.violations.push(twophase::constitutive::Violation {
                assumption_id: "H9".into(),
                description: "low-solubility bound 1/M_g > required bound".into(),
                measured_value: s.one_over_mg,
                bound: s.required_bound,
            });
        }
    }
    let show = |h: Option<f64>| h.map_or("n/a".to_string(), fmt_num);
    println!("Hölder exponent of β⁻¹          {}", show(report.holder_beta_inverse));
    println!("Hölder exponent of (1-S)P̂       {}", show(report.holder_one_minus_s_phat));
    for v in &report.violations {
        println!("{}: {} (measured {}, bound {})", v.assumption_id, v.description, fmt_num(v.measured_value), fmt_num(v.bound));
    }
    if report.violations.is_empty() {
        println!("all assumptions hold");
        Ok(())
    } else {
        Err(verification(format!("{} assumption violation(s)", report.violations.len())))
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Verify(c) => cmd_verify(c),
        Command::Sweep { common, axis, values } => cmd_sweep(common, axis, values),
        Command::Curves { common, samples } => cmd_curves(common, *samples),
        Command::CheckSolubility(c) => cmd_check_solubility(c),
        Command::Validate(c) => cmd_validate(c),
    }
}

fn config_path(cli: &Cli) -> &Path {
    match &cli.command {
        Command::Run(c) | Command::Verify(c) | Command::CheckSolubility(c) | Command::Validate(c) => &c.config,
        Command::Sweep { common, .. } | Command::Curves { common, .. } => &common.config,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            let err = err.context(format!("{}", config_path(&cli).display()));
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
