//! Run configuration: a sectioned `key = value` format with a strict
//! schema. Every problem found while loading is reported with its line.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::constitutive::{
    validate_rock, CapillaryFamily, ConstitutiveSet, FluidProps, GasDensity, RelPermFamily, RockFluidParams, ScalarField,
    Solubility, TensorField, S_MIN_DEFAULT,
};
use crate::error::{ConfigIssue, Error, Result};
use crate::expr::Expr;
use crate::global_pressure::GlobalPressureTables;
use crate::mesh::{Mesh, Side};
use crate::solver::{Problem, Projection, RegularizationParams, SourceTerms, State};

const SCHEMA: &[(&str, &[&str])] = &[
    ("mesh", &["dim", "lx", "ly", "nx", "ny", "dirichlet"]),
    ("rock", &["porosity", "permeability", "permeability_xx", "permeability_yy", "permeability_xy", "diffusion"]),
    ("fluid", &["mu_l", "mu_g", "rho_l_std", "gravity"]),
    ("capillary", &["family", "p_e", "lambda"]),
    ("relperm", &["family", "n_l", "n_g", "floor"]),
    ("solubility", &["family", "c_h", "henry_constant", "molar_mass", "u_max", "u_min"]),
    ("gas_density", &["family", "c_v", "molar_mass", "temperature", "gas_constant", "theta", "rho_max"]),
    ("assumptions", &["a_l", "kr_m", "m_0", "m_g", "z", "s_min"]),
    (
        "regularization",
        &[
            "eta",
            "eps",
            "dt",
            "end_time",
            "n_steps",
            "projection",
            "picard_tol",
            "picard_max",
            "relaxation",
            "max_halvings",
            "stabilized",
        ],
    ),
    ("initial", &["p_l", "p_g", "p_scale"]),
    ("sources", &["injection", "production"]),
    ("output", &["name", "directory", "snapshot_every"]),
    ("tables", &["resolution", "tolerance", "validator_resolution"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct MeshSpec {
    pub dim: usize,
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    pub dirichlet: Vec<Side>,
}

impl MeshSpec {
    pub fn build(&self) -> Result<Mesh> {
        if self.dim == 1 {
            Mesh::build_interval(self.lx, self.nx, &self.dirichlet)
        } else {
            Mesh::build_rectangle(self.lx, self.ly, self.nx, self.ny, &self.dirichlet)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub name: String,
    pub directory: Option<String>,
    /// Snapshot every k steps; 0 writes only the initial and final fields.
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    pub resolution: usize,
    pub tolerance: f64,
    pub validator_resolution: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mesh: MeshSpec,
    pub rock: RockFluidParams,
    pub set: ConstitutiveSet,
    pub params: RegularizationParams,
    pub initial_p_l: Expr,
    pub initial_p_g: Expr,
    pub p_scale: f64,
    pub sources: SourceTerms,
    pub output: OutputSpec,
    pub tables: TableSpec,
    /// z of the low-solubility check when given explicitly.
    pub solubility_z: Option<f64>,
    /// sha256 of the configuration text, hex.
    pub hash: String,
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Sections {
    map: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
    issues: Vec<ConfigIssue>,
}

fn tokenize(text: &str) -> Sections {
    let mut map: BTreeMap<String, (usize, BTreeMap<String, Entry>)> = BTreeMap::new();
    let mut issues = Vec::new();
    let mut current: Option<String> = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split(['#', ';']).next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                issues.push(ConfigIssue::at(line, format!("malformed section header '{body}'")));
                continue;
            };
            let name = name.trim().to_string();
            if !SCHEMA.iter().any(|(s, _)| *s == name) {
                issues.push(ConfigIssue::at(line, format!("unknown section [{name}]")));
            }
            if map.contains_key(&name) {
                issues.push(ConfigIssue::at(line, format!("section [{name}] appears twice")));
            }
            map.entry(name.clone()).or_insert((line, BTreeMap::new()));
            current = Some(name);
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            issues.push(ConfigIssue::at(line, format!("expected 'key = value', got '{body}'")));
            continue;
        };
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        let Some(sec) = &current else {
            issues.push(ConfigIssue::at(line, format!("key '{key}' outside of any section")));
            continue;
        };
        if let Some((_, allowed)) = SCHEMA.iter().find(|(s, _)| s == sec) {
            if !allowed.contains(&key.as_str()) {
                issues.push(ConfigIssue::at(line, format!("unknown key '{key}' in [{sec}]")));
                continue;
            }
        }
        let section = &mut map.get_mut(sec).expect("section registered").1;
        if section.contains_key(&key) {
            issues.push(ConfigIssue::at(line, format!("duplicate key '{key}' in [{sec}]")));
            continue;
        }
        section.insert(key, Entry { value, line, used: false });
    }
    Sections { map, issues }
}

impl Sections {
    fn raw(&mut self, sec: &str, key: &str) -> Option<(String, usize)> {
        let e = self.map.get_mut(sec)?.1.get_mut(key)?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    fn has(&self, sec: &str, key: &str) -> bool {
        self.map.get(sec).is_some_and(|s| s.1.contains_key(key))
    }

    fn section_line(&self, sec: &str) -> Option<usize> {
        self.map.get(sec).map(|s| s.0)
    }

    fn missing(&mut self, sec: &str, key: &str) {
        let msg = format!("missing required key '{key}' in [{sec}]");
        let issue = match self.section_line(sec) {
            Some(l) => ConfigIssue::at(l, msg),
            None => ConfigIssue::global(msg),
        };
        self.issues.push(issue);
    }

    fn num_opt(&mut self, sec: &str, key: &str) -> Option<f64> {
        let (v, line) = self.raw(sec, key)?;
        match Expr::parse(&v) {
            Ok(e) if e.is_time_independent() && all_constant(&e) => {
                let x = e.eval(0.0, 0.0, 0.0);
                if x.is_finite() {
                    Some(x)
                } else {
                    self.issues.push(ConfigIssue::at(line, format!("{sec}.{key} is not finite")));
                    None
                }
            }
            Ok(_) => {
                self.issues.push(ConfigIssue::at(line, format!("{sec}.{key} must be a number, got '{v}'")));
                None
            }
            Err(e) => {
                self.issues.push(ConfigIssue::at(line, format!("{sec}.{key}: {e}")));
                None
            }
        }
    }

    fn num(&mut self, sec: &str, key: &str) -> f64 {
        if !self.has(sec, key) {
            self.missing(sec, key);
            return f64::NAN;
        }
        self.num_opt(sec, key).unwrap_or(f64::NAN)
    }

    fn num_or(&mut self, sec: &str, key: &str, default: f64) -> f64 {
        if self.has(sec, key) {
            self.num_opt(sec, key).unwrap_or(f64::NAN)
        } else {
            default
        }
    }

    fn positive(&mut self, sec: &str, key: &str, v: f64) -> f64 {
        if v.is_finite() && v <= 0.0 {
            let line = self.map.get(sec).and_then(|s| s.1.get(key)).map(|e| e.line);
            let msg = format!("{sec}.{key} must be positive, got {v}");
            self.issues.push(line.map_or(ConfigIssue::global(&msg), |l| ConfigIssue::at(l, &msg)));
        }
        v
    }

    fn count_or(&mut self, sec: &str, key: &str, default: usize) -> usize {
        let Some((v, line)) = self.raw(sec, key) else {
            return default;
        };
        match v.parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                self.issues.push(ConfigIssue::at(line, format!("{sec}.{key} must be a nonnegative integer, got '{v}'")));
                default
            }
        }
    }

    fn expr_opt(&mut self, sec: &str, key: &str) -> Option<Expr> {
        let (v, line) = self.raw(sec, key)?;
        match Expr::parse(&v) {
            Ok(e) => Some(e),
            Err(e) => {
                self.issues.push(ConfigIssue::at(line, format!("{sec}.{key}: {e}")));
                None
            }
        }
    }

    fn field(&mut self, sec: &str, key: &str) -> Option<ScalarField> {
        let e = self.expr_opt(sec, key)?;
        Some(match e.constant_value() {
            Some(v) => ScalarField::Constant(v),
            None if all_constant(&e) => ScalarField::Constant(e.eval(0.0, 0.0, 0.0)),
            None => ScalarField::Expr(e),
        })
    }

    fn word(&mut self, sec: &str, key: &str, default: &str) -> (String, Option<usize>) {
        match self.raw(sec, key) {
            Some((v, l)) => (v.to_ascii_lowercase(), Some(l)),
            None => (default.to_string(), None),
        }
    }

    fn bad(&mut self, line: Option<usize>, msg: String) {
        self.issues.push(line.map_or(ConfigIssue::global(&msg), |l| ConfigIssue::at(l, &msg)));
    }
}

fn all_constant(e: &Expr) -> bool {
    use crate::expr::Expr as E;
    match e {
        E::Num(_) => true,
        E::Var(_) => false,
        E::Neg(a) => all_constant(a),
        E::Bin(_, a, b) => all_constant(a) && all_constant(b),
        E::Call(_, args) => args.iter().all(all_constant),
    }
}

fn parse_projection(s: &str) -> Option<Projection> {
    let s = s.trim().to_ascii_lowercase();
    if s == "identity" {
        return Some(Projection::Identity);
    }
    let inner = s
        .strip_prefix("spectral:")
        .or_else(|| s.strip_prefix("spectral(").and_then(|r| r.strip_suffix(')')))?
        .trim();
    if inner == "full" {
        return Some(Projection::SpectralFull);
    }
    inner.parse::<usize>().ok().filter(|&n| n > 0).map(Projection::Spectral)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        Self::parse(&text, &stem)
    }

    /// Parses and validates `text`; `default_name` names the output
    /// directory when [output] gives none.
    pub fn parse(text: &str, default_name: &str) -> Result<RunConfig> {
        let mut s = tokenize(text);
        let hash = hex(&Sha256::digest(text.as_bytes()));

        // [mesh]
        let dim = s.count_or("mesh", "dim", 1);
        let dim_line = s.map.get("mesh").and_then(|m| m.1.get("dim")).map(|e| e.line);
        if dim != 1 && dim != 2 {
            s.bad(dim_line, format!("mesh.dim must be 1 or 2, got {dim}"));
        }
        let lx = s.num("mesh", "lx");
        let lx = s.positive("mesh", "lx", lx);
        if !s.has("mesh", "nx") {
            s.missing("mesh", "nx");
        }
        let nx = s.count_or("mesh", "nx", 0);
        let (ly, ny) = if dim == 2 {
            let ly = s.num("mesh", "ly");
            let ly = s.positive("mesh", "ly", ly);
            if !s.has("mesh", "ny") {
                s.missing("mesh", "ny");
            }
            (ly, s.count_or("mesh", "ny", 0))
        } else {
            for k in ["ly", "ny"] {
                if let Some((_, l)) = s.raw("mesh", k) {
                    s.bad(Some(l), format!("mesh.{k} only applies to dim = 2"));
                }
            }
            (0.0, 0)
        };
        let mut dirichlet = Vec::new();
        match s.raw("mesh", "dirichlet") {
            None => s.missing("mesh", "dirichlet"),
            Some((v, line)) => {
                for part in v.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
                    match Side::parse(part) {
                        Some(side) if dim == 1 && !matches!(side, Side::Left | Side::Right) => {
                            s.bad(Some(line), format!("side '{part}' does not exist in 1D"))
                        }
                        Some(side) => {
                            if !dirichlet.contains(&side) {
                                dirichlet.push(side)
                            }
                        }
                        None => s.bad(Some(line), format!("unknown boundary side '{part}'")),
                    }
                }
                if dirichlet.is_empty() {
                    s.bad(Some(line), "the Dirichlet boundary is empty; the model needs |Γ_D| > 0".into());
                }
            }
        }
        let mesh = MeshSpec { dim, lx, ly, nx, ny, dirichlet };

        // [rock]
        let porosity = match s.field("rock", "porosity") {
            Some(f) => f,
            None => {
                if !s.has("rock", "porosity") {
                    s.missing("rock", "porosity");
                }
                ScalarField::Constant(f64::NAN)
            }
        };
        let permeability = if s.has("rock", "permeability") {
            for k in ["permeability_xx", "permeability_yy", "permeability_xy"] {
                if let Some((_, l)) = s.raw("rock", k) {
                    s.bad(Some(l), format!("rock.{k} conflicts with rock.permeability"));
                }
            }
            TensorField::isotropic(s.field("rock", "permeability").unwrap_or(ScalarField::Constant(f64::NAN)))
        } else if s.has("rock", "permeability_xx") {
            let xx = s.field("rock", "permeability_xx").unwrap_or(ScalarField::Constant(f64::NAN));
            let yy = if s.has("rock", "permeability_yy") {
                s.field("rock", "permeability_yy").unwrap_or(ScalarField::Constant(f64::NAN))
            } else {
                xx.clone()
            };
            let xy = s.field("rock", "permeability_xy").unwrap_or(ScalarField::Constant(0.0));
            TensorField { xx, yy, xy }
        } else {
            s.missing("rock", "permeability");
            TensorField::isotropic(ScalarField::Constant(f64::NAN))
        };
        let diffusion = match s.field("rock", "diffusion") {
            Some(f) => f,
            None => {
                if !s.has("rock", "diffusion") {
                    s.missing("rock", "diffusion");
                }
                ScalarField::Constant(f64::NAN)
            }
        };

        // [fluid]
        let mu_l = s.num("fluid", "mu_l");
        let mu_l = s.positive("fluid", "mu_l", mu_l);
        let mu_g = s.num("fluid", "mu_g");
        let mu_g = s.positive("fluid", "mu_g", mu_g);
        let rho_l_std = s.num("fluid", "rho_l_std");
        let rho_l_std = s.positive("fluid", "rho_l_std", rho_l_std);
        let mut gravity = [0.0, 0.0];
        if let Some((v, line)) = s.raw("fluid", "gravity") {
            let parts: Vec<Option<f64>> = v.split(',').map(|p| p.trim().parse::<f64>().ok()).collect();
            match parts.as_slice() {
                [Some(a)] if dim == 1 => gravity[0] = *a,
                [Some(a), Some(b)] => gravity = [*a, *b],
                _ => s.bad(Some(line), format!("fluid.gravity must list {dim} number(s), got '{v}'")),
            }
            if dim == 1 && gravity[1] != 0.0 {
                s.bad(Some(line), "fluid.gravity has a y component in 1D".into());
            }
        }
        let rock = RockFluidParams {
            porosity,
            permeability,
            diffusion,
            fluid: FluidProps { mu_l, mu_g, rho_l_std },
            gravity,
        };

        // [capillary]
        let (fam, fam_line) = s.word("capillary", "family", "linear");
        let p_e = s.num("capillary", "p_e");
        let p_e = s.positive("capillary", "p_e", p_e);
        let capillary = match fam.as_str() {
            "linear" => CapillaryFamily::Linear { p_e },
            "brooks_corey" => {
                let lambda = s.num("capillary", "lambda");
                CapillaryFamily::BrooksCorey { p_e, lambda: s.positive("capillary", "lambda", lambda) }
            }
            other => {
                s.bad(fam_line, format!("unknown capillary family '{other}' (linear, brooks_corey)"));
                CapillaryFamily::Linear { p_e }
            }
        };

        // [relperm]
        let (fam, fam_line) = s.word("relperm", "family", "quadratic");
        let relperm = match fam.as_str() {
            "quadratic" => RelPermFamily::Quadratic,
            "power" => {
                let n_l = s.num("relperm", "n_l");
                let n_g = s.num("relperm", "n_g");
                let floor = s.num_or("relperm", "floor", 0.0);
                RelPermFamily::Power { n_l, n_g, floor }
            }
            other => {
                s.bad(fam_line, format!("unknown relperm family '{other}' (quadratic, power)"));
                RelPermFamily::Quadratic
            }
        };

        // [solubility]
        let (fam, fam_line) = s.word("solubility", "family", "henry_capped");
        if fam != "henry_capped" {
            s.bad(fam_line, format!("unknown solubility family '{fam}' (henry_capped)"));
        }
        let c_h = if s.has("solubility", "c_h") {
            s.num("solubility", "c_h")
        } else if s.has("solubility", "henry_constant") {
            s.num("solubility", "henry_constant") * s.num("solubility", "molar_mass")
        } else {
            s.missing("solubility", "c_h");
            f64::NAN
        };
        let c_h = s.positive("solubility", "c_h", c_h);
        let u_max = s.num("solubility", "u_max");
        let u_max = s.positive("solubility", "u_max", u_max);
        let u_min = s.num_or("solubility", "u_min", 0.1 * u_max);
        let u_min = s.positive("solubility", "u_min", u_min);
        let solubility = Solubility::HenryCapped { c_h, u_max, u_min };

        // [gas_density]
        let (fam, fam_line) = s.word("gas_density", "family", "linear_capped");
        let c_v = if s.has("gas_density", "c_v") {
            s.num("gas_density", "c_v")
        } else if s.has("gas_density", "molar_mass") {
            let m = s.num("gas_density", "molar_mass");
            let t = s.num("gas_density", "temperature");
            let r = s.num_or("gas_density", "gas_constant", 8.314);
            m / (r * t)
        } else {
            s.missing("gas_density", "c_v");
            f64::NAN
        };
        let c_v = s.positive("gas_density", "c_v", c_v);
        let rho_max = s.num("gas_density", "rho_max");
        let rho_max = s.positive("gas_density", "rho_max", rho_max);
        let gas_density = match fam.as_str() {
            "linear_capped" => GasDensity::LinearCapped { c_v, rho_max },
            "power_capped" => {
                let theta = s.num("gas_density", "theta");
                if theta.is_finite() && !(theta > 0.0 && theta <= 1.0) {
                    let l = s.map.get("gas_density").and_then(|m| m.1.get("theta")).map(|e| e.line);
                    s.bad(l, format!("gas_density.theta must lie in (0, 1], got {theta}"));
                }
                GasDensity::PowerCapped { c_v, theta, rho_max }
            }
            other => {
                s.bad(fam_line, format!("unknown gas density family '{other}' (linear_capped, power_capped)"));
                GasDensity::LinearCapped { c_v, rho_max }
            }
        };

        // [assumptions]
        let mut set = ConstitutiveSet {
            capillary,
            relperm,
            solubility,
            gas_density,
            a_l: 1.0,
            kr_m: 0.5,
            m_0: p_e,
            m_g: None,
            s_min: S_MIN_DEFAULT,
        };
        set.a_l = s.num_or("assumptions", "a_l", set.a_l);
        set.kr_m = s.num_or("assumptions", "kr_m", set.kr_m);
        set.m_0 = s.num_or("assumptions", "m_0", set.m_0);
        if s.has("assumptions", "m_g") {
            set.m_g = Some(s.num("assumptions", "m_g"));
        }
        set.s_min = s.num_or("assumptions", "s_min", set.s_min);
        let solubility_z = if s.has("assumptions", "z") { Some(s.num("assumptions", "z")) } else { None };

        // [regularization]
        let defaults = RegularizationParams::default();
        if !s.has("regularization", "n_steps") {
            s.missing("regularization", "n_steps");
        }
        let n_steps = s.count_or("regularization", "n_steps", 1).max(1);
        let dt = match (s.has("regularization", "dt"), s.has("regularization", "end_time")) {
            (true, false) => s.num("regularization", "dt"),
            (false, true) => s.num("regularization", "end_time") / n_steps as f64,
            (true, true) => {
                let l = s.raw("regularization", "end_time").map(|r| r.1);
                s.bad(l, "give either regularization.dt or regularization.end_time, not both".into());
                f64::NAN
            }
            (false, false) => {
                s.missing("regularization", "dt");
                f64::NAN
            }
        };
        let projection = match s.raw("regularization", "projection") {
            None => Projection::Identity,
            Some((v, l)) => parse_projection(&v).unwrap_or_else(|| {
                s.bad(Some(l), format!("projection must be identity, spectral:N or spectral:full, got '{v}'"));
                Projection::Identity
            }),
        };
        let stabilized = match s.raw("regularization", "stabilized") {
            None => true,
            Some((v, l)) => match v.as_str() {
                "true" | "yes" | "1" => true,
                "false" | "no" | "0" => false,
                _ => {
                    s.bad(Some(l), format!("regularization.stabilized must be true or false, got '{v}'"));
                    true
                }
            },
        };
        let params = RegularizationParams {
            eta: s.num_or("regularization", "eta", defaults.eta),
            eps: s.num_or("regularization", "eps", defaults.eps),
            dt,
            n_steps,
            projection,
            picard_tol: s.num_or("regularization", "picard_tol", defaults.picard_tol),
            picard_max: s.count_or("regularization", "picard_max", defaults.picard_max),
            relaxation: s.num_or("regularization", "relaxation", defaults.relaxation),
            max_halvings: s.count_or("regularization", "max_halvings", defaults.max_halvings),
            stabilized,
        };
        if dt.is_finite() {
            if let Err(e) = params.validate() {
                let l = s.section_line("regularization");
                s.bad(l, e.to_string());
            }
        }

        // [initial]
        let initial_p_l = s.expr_opt("initial", "p_l").unwrap_or_else(|| {
            if !s.has("initial", "p_l") {
                s.missing("initial", "p_l");
            }
            Expr::Num(f64::NAN)
        });
        let initial_p_g = s.expr_opt("initial", "p_g").unwrap_or_else(|| {
            if !s.has("initial", "p_g") {
                s.missing("initial", "p_g");
            }
            Expr::Num(f64::NAN)
        });
        let p_scale = s.num_or("initial", "p_scale", p_e);
        let p_scale = s.positive("initial", "p_scale", p_scale);

        // [sources]
        let sources = SourceTerms {
            injection: s.expr_opt("sources", "injection"),
            production: s.expr_opt("sources", "production"),
        };

        // [output]
        let name = s.raw("output", "name").map(|v| v.0).unwrap_or_else(|| default_name.to_string());
        let directory = s.raw("output", "directory").map(|v| v.0);
        let snapshot_every = s.count_or("output", "snapshot_every", 0);
        let output = OutputSpec { name, directory, snapshot_every };

        // [tables]
        let tables = TableSpec {
            resolution: s.count_or("tables", "resolution", 2048),
            tolerance: s.num_or("tables", "tolerance", 1e-8),
            validator_resolution: s.count_or("tables", "validator_resolution", 10_000),
        };

        let mut cfg = RunConfig {
            mesh,
            rock,
            set,
            params,
            initial_p_l,
            initial_p_g,
            p_scale,
            sources,
            output,
            tables,
            solubility_z,
            hash,
        };
        let mut issues = std::mem::take(&mut s.issues);
        if issues.is_empty() {
            issues.extend(cfg.semantic_checks(&s));
        }
        if !issues.is_empty() {
            issues.sort_by_key(|i| i.line.unwrap_or(usize::MAX));
            return Err(Error::Config(issues));
        }
        cfg.params.n_steps = n_steps;
        Ok(cfg)
    }

    /// Checks that need the mesh: H1/H2 on the rock fields and H7 on the
    /// initial gas pressure and the sources.
    fn semantic_checks(&self, s: &Sections) -> Vec<ConfigIssue> {
        let line = |sec: &str, key: &str| s.map.get(sec).and_then(|m| m.1.get(key)).map(|e| e.line);
        let at = |l: Option<usize>, msg: String| l.map_or(ConfigIssue::global(&msg), |l| ConfigIssue::at(l, &msg));
        let mut out = Vec::new();
        let mesh = match self.mesh.build() {
            Ok(m) => m,
            Err(e) => return vec![at(s.section_line("mesh"), e.to_string())],
        };
        for v in validate_rock(&self.rock, &mesh.nodes, mesh.dim) {
            out.push(at(s.section_line("rock"), format!("{}: {} (measured {:e}, bound {:e})", v.assumption_id, v.description, v.measured_value, v.bound)));
        }
        if let Some((i, p)) = mesh
            .nodes
            .iter()
            .enumerate()
            .map(|(i, p)| (i, self.initial_p_g.eval(p[0], p[1], 0.0)))
            .find(|(_, v)| !(*v >= 0.0))
        {
            let x = mesh.nodes[i];
            out.push(at(
                line("initial", "p_g"),
                format!("H7 requires p_g⁰ ≥ 0, but p_g⁰({}, {}) = {p}", x[0], x[1]),
            ));
        }
        if let Some((i, _)) = mesh
            .nodes
            .iter()
            .enumerate()
            .find(|(_, p)| !self.initial_p_l.eval(p[0], p[1], 0.0).is_finite())
        {
            out.push(at(line("initial", "p_l"), format!("p_l⁰ is not finite at node {i}")));
        }
        let end = self.params.end_time();
        for (key, e) in [("injection", &self.sources.injection), ("production", &self.sources.production)] {
            let Some(e) = e else { continue };
            'scan: for k in 0..=8 {
                let t = end * k as f64 / 8.0;
                for p in &mesh.nodes {
                    let v = e.eval(p[0], p[1], t);
                    if !(v >= 0.0) {
                        out.push(at(
                            line("sources", key),
                            format!("H7 requires {key} ≥ 0, but it is {v} at ({}, {}), t = {t}", p[0], p[1]),
                        ));
                        break 'scan;
                    }
                }
            }
        }
        out
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        self.mesh.build()
    }

    pub fn build_tables(&self) -> Result<GlobalPressureTables> {
        GlobalPressureTables::build(&self.set, &self.rock.fluid, self.tables.resolution, self.tables.tolerance)
    }

    pub fn problem(&self) -> Result<Problem> {
        let mesh = self.build_mesh()?;
        let tables = self.build_tables()?;
        Problem::new(mesh, self.set.clone(), self.rock.clone(), tables, self.sources.clone(), self.p_scale)
    }

    /// Nodal interpolants of the initial expressions.
    pub fn initial_state(&self, mesh: &Mesh) -> Result<State> {
        let pl = mesh.nodes.iter().map(|p| self.initial_p_l.eval(p[0], p[1], 0.0)).collect();
        let pg = mesh.nodes.iter().map(|p| self.initial_p_g.eval(p[0], p[1], 0.0)).collect();
        State::new(mesh, pl, pg, 0.0)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
