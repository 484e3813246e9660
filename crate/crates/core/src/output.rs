//! CSV outputs. Every file starts with `# twophase <version> config_hash=<hex>`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::constitutive::secondary;
use crate::diagnostics::{SweepAxis, SweepRow};
use crate::error::{Error, Result};
use crate::global_pressure::TestFunctionTables;
use crate::solver::{Problem, State, StepReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable that relocates all run directories.
pub const OUTPUT_ROOT_ENV: &str = "TWOPHASE_OUTPUT_ROOT";

pub const TIME_SERIES_COLUMNS: [&str; 19] = [
    "step",
    "time",
    "dt_effective",
    "picard_iters",
    "min_pg",
    "max_pg",
    "min_S",
    "max_S",
    "water_mass",
    "gas_mass",
    "E_eps_total",
    "diss_l",
    "diss_g",
    "diss_u",
    "diss_eps",
    "diss_eta",
    "grad_p_norm",
    "grad_beta_norm",
    "mass_defect",
];

pub fn header(hash: &str) -> String {
    format!("# twophase {VERSION} config_hash={hash}")
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Shortest round-trip representation, so equal runs give equal bytes.
pub fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
    width: usize,
}

impl CsvWriter {
    /// Writes the header, any extra `# key=value` comments and the column row.
    pub fn create(path: &Path, hash: &str, comments: &[String], columns: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let f = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = CsvWriter { path: path.to_path_buf(), out: BufWriter::new(f), width: columns.len() };
        w.line(&header(hash))?;
        for c in comments {
            w.line(&format!("# {c}"))?;
        }
        w.line(&columns.join(","))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| io_err(&self.path, e))
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        debug_assert_eq!(cells.len(), self.width);
        self.line(&cells.join(","))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

pub fn time_series_row(rep: &StepReport) -> Vec<String> {
    let e = &rep.energy;
    let mut v = vec![rep.step.to_string()];
    v.extend([rep.time, rep.dt_effective].map(fmt_num));
    v.push(rep.picard_iterations.to_string());
    v.extend(
        [
            rep.min_p_g,
            rep.max_p_g,
            rep.saturation_range.0,
            rep.saturation_range.1,
            rep.mass.water_mass,
            rep.mass.gas_mass,
            e.e_total,
            e.dissipation[0],
            e.dissipation[1],
            e.dissipation[2],
            e.dissipation[3],
            e.dissipation[4],
            e.grad_p_norm,
            e.grad_beta_norm,
            rep.mass.defect,
        ]
        .map(fmt_num),
    );
    v
}

pub fn snapshot_columns(dim: usize) -> Vec<&'static str> {
    let mut c = vec!["x"];
    if dim == 2 {
        c.push("y");
    }
    c.extend(["p_l", "p_g", "S", "u", "rho_g", "p", "beta_S"]);
    c
}

pub fn write_snapshot(path: &Path, hash: &str, pb: &Problem, st: &State) -> Result<()> {
    let sec = secondary(&pb.set, &pb.rock.fluid, &pb.tables, &st.p_l.values, &st.p_g.values);
    let dim = pb.mesh.dim;
    let mut w = CsvWriter::create(path, hash, &[format!("time={}", fmt_num(st.time))], &snapshot_columns(dim))?;
    for (i, x) in pb.mesh.nodes.iter().enumerate() {
        let mut row = vec![fmt_num(x[0])];
        if dim == 2 {
            row.push(fmt_num(x[1]));
        }
        row.extend([st.p_l.values[i], st.p_g.values[i], sec.s[i], sec.u[i], sec.rho_g[i], sec.p[i], sec.beta_s[i]].map(fmt_num));
        w.row(&row)?;
    }
    w.finish()
}

pub const SWEEP_COLUMNS: [&str; 11] = [
    "value",
    "steps_completed",
    "int_grad_p",
    "int_grad_beta",
    "int_grad_u",
    "int_eta_grad_pc",
    "max_mass_defect",
    "energy_ok",
    "min_pg",
    "cauchy_diff",
    "status",
];

/// One row per value; `diffs[k]` is the distance from row k to row k+1.
/// Ratios go into trailing comments.
pub fn write_sweep_table(
    path: &Path,
    hash: &str,
    axis: SweepAxis,
    rows: &[SweepRow],
    ratios: &[Option<f64>; 4],
    diffs: &[f64],
) -> Result<()> {
    let mut comments = vec![format!("axis={}", axis.name())];
    let names = ["int_grad_p", "int_grad_beta", "int_grad_u", "int_eta_grad_pc"];
    for (n, r) in names.iter().zip(ratios) {
        comments.push(format!("ratio_{n}={}", r.map_or("nan".into(), fmt_num)));
    }
    let mut w = CsvWriter::create(path, hash, &comments, &SWEEP_COLUMNS)?;
    for (k, r) in rows.iter().enumerate() {
        let mut row = vec![fmt_num(r.value), r.steps_completed.to_string()];
        row.extend(r.norm_integrals.map(fmt_num));
        row.push(fmt_num(r.max_mass_defect));
        row.push(r.energy_ok.to_string());
        row.push(fmt_num(r.min_p_g));
        row.push(diffs.get(k).map_or(String::new(), |d| fmt_num(*d)));
        row.push(match &r.error {
            None => "ok".into(),
            Some(e) => format!("failed: {}", e.replace(',', ";")),
        });
        w.row(&row)?;
    }
    w.finish()
}

/// Two-column tables of the saturation curves, the global-pressure tables
/// and the p_g-curves with the test functions M^ε, N^ε. Returns the paths.
pub fn write_curves(dir: &Path, hash: &str, cfg: &RunConfig, pb: &Problem, samples: usize) -> Result<Vec<PathBuf>> {
    let set = &pb.set;
    let fluid = &pb.rock.fluid;
    let s_min = set.s_min;
    let n = samples.max(2);
    let s_grid: Vec<f64> = (0..n).map(|k| if k + 1 == n { 1.0 } else { s_min + (1.0 - s_min) * k as f64 / (n - 1) as f64 }).collect();
    let p_max = 10.0 * pb.p_scale;
    let p_grid: Vec<f64> = (0..n).map(|k| p_max * k as f64 / (n - 1) as f64).collect();
    let tf = TestFunctionTables::build(set, cfg.params.eps, p_max, 512)?;

    type Curve<'a> = (&'a str, &'a str, &'a [f64], Box<dyn Fn(f64) -> f64 + 'a>);
    let curves: Vec<Curve> = vec![
        ("p_c", "S", &s_grid, Box::new(|s| set.capillary.eval(s).map_or(f64::NAN, |v| v.0))),
        ("kr_l", "S", &s_grid, Box::new(|s| set.rel_perm(s).map_or(f64::NAN, |v| v.0))),
        ("kr_g", "S", &s_grid, Box::new(|s| set.rel_perm(s).map_or(f64::NAN, |v| v.1))),
        ("lambda_l", "S", &s_grid, Box::new(|s| set.mobilities(s, fluid).0)),
        ("lambda_g", "S", &s_grid, Box::new(|s| set.mobilities(s, fluid).1)),
        ("pbar", "S", &s_grid, Box::new(|s| pb.tables.pbar(s))),
        ("phat", "S", &s_grid, Box::new(|s| pb.tables.phat(s))),
        ("beta", "S", &s_grid, Box::new(|s| pb.tables.beta(s))),
        ("u", "p_g", &p_grid, Box::new(|p| set.henry_u(p).0)),
        ("rho_g", "p_g", &p_grid, Box::new(|p| set.gas_density(p).0)),
        ("M_eps", "p_g", &p_grid, Box::new(|p| tf.eval(p).0)),
        ("N_eps", "p_g", &p_grid, Box::new(|p| tf.eval(p).1)),
    ];
    let mut paths = Vec::new();
    for (name, arg, grid, f) in curves {
        let path = dir.join(format!("{name}.csv"));
        let mut w = CsvWriter::create(&path, hash, &[], &[arg, name])?;
        for &x in grid {
            w.row(&[fmt_num(x), fmt_num(f(x))])?;
        }
        w.finish()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Run directory: `$TWOPHASE_OUTPUT_ROOT/<name>` when the variable is set,
/// else `[output] directory`, else `output/<name>`.
pub fn run_directory(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(&cfg.output.name),
        _ => match &cfg.output.directory {
            Some(d) => PathBuf::from(d),
            None => PathBuf::from("output").join(&cfg.output.name),
        },
    }
}

/// Streams a run into `dir`: `timeseries.csv` plus snapshots at the
/// configured cadence (and always the initial and final states).
pub struct RunWriter<'a> {
    dir: PathBuf,
    hash: String,
    pb: &'a Problem,
    every: usize,
    series: CsvWriter,
    last: Option<(usize, State)>,
}

impl<'a> RunWriter<'a> {
    pub fn create(dir: &Path, cfg: &RunConfig, pb: &'a Problem, init: &State, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut comments = vec![format!("output=timeseries"), format!("n_nodes={}", pb.mesh.node_count())];
        if let Some(s) = seed {
            comments.push(format!("seed={s}"));
        }
        let series = CsvWriter::create(&dir.join("timeseries.csv"), &cfg.hash, &comments, &TIME_SERIES_COLUMNS)?;
        let w = RunWriter {
            dir: dir.to_path_buf(),
            hash: cfg.hash.clone(),
            pb,
            every: cfg.output.snapshot_every,
            series,
            last: None,
        };
        w.snapshot(0, init)?;
        Ok(w)
    }

    fn snapshot(&self, step: usize, st: &State) -> Result<()> {
        write_snapshot(&self.dir.join(format!("snapshot_{step:06}.csv")), &self.hash, self.pb, st)
    }

    pub fn step(&mut self, st: &State, rep: &StepReport) -> Result<()> {
        self.series.row(&time_series_row(rep))?;
        if self.every > 0 && rep.step % self.every == 0 {
            self.snapshot(rep.step, st)?;
            self.last = None;
        } else {
            self.last = Some((rep.step, st.clone()));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if let Some((k, st)) = &self.last {
            self.snapshot(*k, st)?;
        }
        self.series.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{RegularizationParams, Simulation};

    const CFG: &str = "\
[mesh]
dim = 1
lx = 1
nx = 10
dirichlet = left
[rock]
porosity = 0.2
permeability = 1
diffusion = 0.5
[fluid]
mu_l = 1
mu_g = 0.5
rho_l_std = 1
[capillary]
p_e = 1
[solubility]
c_h = 0.1
u_max = 1
[gas_density]
c_v = 1
rho_max = 2
[regularization]
dt = 0.1
n_steps = 3
[initial]
p_l = 0
p_g = 0.1 * smoothstep(0.5, 1, x)
[output]
snapshot_every = 2
";

    fn run_into(dir: &Path) -> Vec<String> {
        let cfg = RunConfig::parse(CFG, "t").unwrap();
        let pb = cfg.problem().unwrap();
        let init = cfg.initial_state(&pb.mesh).unwrap();
        let sim = Simulation::new(&pb, RegularizationParams { ..cfg.params.clone() }).unwrap();
        let mut w = RunWriter::create(dir, &cfg, &pb, &init, Some(7)).unwrap();
        sim.run_with(init, |s, r| w.step(s, r)).unwrap();
        w.finish().unwrap();
        let mut names: Vec<String> =
            std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        names
    }

    #[test]
    fn run_files_have_header_and_columns() {
        let d = tempfile::tempdir().unwrap();
        let names = run_into(d.path());
        assert_eq!(names, ["snapshot_000000.csv", "snapshot_000002.csv", "snapshot_000003.csv", "timeseries.csv"]);
        let ts = std::fs::read_to_string(d.path().join("timeseries.csv")).unwrap();
        let lines: Vec<&str> = ts.lines().collect();
        assert!(lines[0].starts_with("# twophase ") && lines[0].contains("config_hash="));
        assert!(lines.contains(&"# seed=7"));
        let cols = lines.iter().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(*cols, TIME_SERIES_COLUMNS.join(","));
        let data: Vec<&&str> = lines.iter().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(data.len(), 3);
        assert!(data.iter().all(|l| l.split(',').count() == 19));
        let snap = std::fs::read_to_string(d.path().join("snapshot_000002.csv")).unwrap();
        assert!(snap.lines().any(|l| l == "x,p_l,p_g,S,u,rho_g,p,beta_S"));
        assert_eq!(snap.lines().filter(|l| !l.starts_with('#')).count(), 12);
    }

    #[test]
    fn outputs_are_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_into(a.path());
        run_into(b.path());
        for f in ["timeseries.csv", "snapshot_000003.csv"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }
}
