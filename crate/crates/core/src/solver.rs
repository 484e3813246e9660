//! Implicit Euler in time, a Picard (fixed-point) iteration per step on the
//! linearized, ε-regularized and optionally P_N-projected elliptic pair.
//!
//! Each Picard sweep solves the liquid equation for p_l with coefficients
//! frozen at the iterate, then the gas equation for p_g using the new p_l.
//! With `stabilized` set, both solves add B(x_new - x̄) to the left and
//! right sides, B being the derivative of the frozen terms (lumped storage
//! derivatives and the frozen flux operators); fixed points are unchanged.

use std::fmt;

use nalgebra::DMatrix;

use crate::constitutive::{low_solubility_check, secondary_point, ConstitutiveSet, RockFluidParams};
use crate::diagnostics::{self, EnergyReport, MassStep};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fem::{
    assemble_flux, assemble_load, assemble_mass, assemble_weighted_stiffness, lumped_weights, solve, Coefficient,
    FieldRole, FieldVector, Quadrature, SparseOperator,
};
use crate::global_pressure::{GlobalPressureTables, TestFunctionTables};
use crate::mesh::Mesh;
use crate::spectral::{compute_basis, EigenBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Identity,
    /// P_N onto the first N eigenvectors.
    Spectral(usize),
    /// P_N with every free-node mode.
    SpectralFull,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationParams {
    pub eta: f64,
    pub eps: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub projection: Projection,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub relaxation: f64,
    pub max_halvings: usize,
    /// Solve the stabilized form of the Picard map; false gives the plain
    /// frozen-coefficient map.
    pub stabilized: bool,
}

impl Default for RegularizationParams {
    fn default() -> Self {
        Self {
            eta: 1e-4,
            eps: 1e-6,
            dt: 1.0,
            n_steps: 1,
            projection: Projection::Identity,
            picard_tol: 1e-8,
            picard_max: 200,
            relaxation: 1.0,
            max_halvings: 5,
            stabilized: true,
        }
    }
}

impl RegularizationParams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            bad.push(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            bad.push(format!("eps must be >= 0, got {}", self.eps));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            bad.push(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.picard_tol > 0.0) {
            bad.push(format!("picard_tol must be > 0, got {}", self.picard_tol));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            bad.push(format!("relaxation must lie in (0, 1], got {}", self.relaxation));
        }
        if self.picard_max == 0 {
            bad.push("picard_max must be positive".into());
        }
        if let Projection::Spectral(0) = self.projection {
            bad.push("spectral projection needs N >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(bad.join("; ")))
        }
    }

    pub fn end_time(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub p_l: FieldVector,
    pub p_g: FieldVector,
    pub time: f64,
}

impl State {
    /// Nodal state with Dirichlet nodes set to 0.
    pub fn new(mesh: &Mesh, mut p_l: Vec<f64>, mut p_g: Vec<f64>, time: f64) -> Result<State> {
        let n = mesh.node_count();
        if p_l.len() != n || p_g.len() != n {
            return Err(Error::Domain(format!("state needs {n} nodal values per field")));
        }
        if let Some(i) = (0..n).find(|&i| !(p_l[i].is_finite() && p_g[i].is_finite())) {
            return Err(Error::Domain(format!("non-finite initial value at node {i}")));
        }
        for i in 0..n {
            if mesh.is_dirichlet(i) {
                p_l[i] = 0.0;
                p_g[i] = 0.0;
            }
        }
        Ok(State {
            p_l: FieldVector::new(p_l, FieldRole::Pressure),
            p_g: FieldVector::new(p_g, FieldRole::Pressure),
            time,
        })
    }

    pub fn zeros(mesh: &Mesh) -> State {
        State {
            p_l: FieldVector::zeros(mesh, FieldRole::Pressure),
            p_g: FieldVector::zeros(mesh, FieldRole::Pressure),
            time: 0.0,
        }
    }

    pub fn min_p_g(&self) -> f64 {
        self.p_g.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_p_g(&self) -> f64 {
        self.p_g.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Injection rate F_I and production rate F_P as expressions in (x, y, t).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceTerms {
    pub injection: Option<Expr>,
    pub production: Option<Expr>,
}

impl SourceTerms {
    /// Time averages over [t0, t1] at the quadrature points.
    pub fn averaged(&self, quad: &Quadrature, t0: f64, t1: f64) -> (Vec<f64>, Vec<f64>) {
        let avg = |e: &Option<Expr>| -> Vec<f64> {
            let Some(e) = e else {
                return vec![0.0; quad.len()];
            };
            if e.is_time_independent() {
                return quad.points.iter().map(|p| e.eval(p[0], p[1], t0)).collect();
            }
            let (tg, wg) = crate::numerics::gauss_legendre(3);
            quad.points
                .iter()
                .map(|p| {
                    tg.iter()
                        .zip(&wg)
                        .map(|(s, w)| 0.5 * w * e.eval(p[0], p[1], t0 + 0.5 * (t1 - t0) * (1.0 + s)))
                        .sum()
                })
                .collect()
        };
        (avg(&self.injection), avg(&self.production))
    }

    pub fn is_empty(&self) -> bool {
        self.injection.is_none() && self.production.is_none()
    }
}

/// Mesh, material data and everything derived from them that stays fixed
/// over a run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mesh: Mesh,
    pub quad: Quadrature,
    pub set: ConstitutiveSet,
    pub rock: RockFluidParams,
    pub tables: GlobalPressureTables,
    pub sources: SourceTerms,
    /// Characteristic pressure used for norms and positivity thresholds.
    pub p_scale: f64,
    pub c_d: f64,
    pub phi_q: Vec<f64>,
    pub k_q: Vec<[f64; 3]>,
    pub d_q: Vec<f64>,
    /// ∫Φφ_i.
    pub w_phi: Vec<f64>,
    /// Consistent unit mass and stiffness, for norms.
    pub mass: SparseOperator,
    pub laplace: SparseOperator,
}

impl Problem {
    pub fn new(
        mesh: Mesh,
        set: ConstitutiveSet,
        rock: RockFluidParams,
        tables: GlobalPressureTables,
        sources: SourceTerms,
        p_scale: f64,
    ) -> Result<Problem> {
        if !(p_scale > 0.0) {
            return Err(Error::Domain(format!("p_scale must be positive, got {p_scale}")));
        }
        let quad = Quadrature::new(&mesh, 2);
        let phi_q: Vec<f64> = quad.points.iter().map(|p| rock.porosity.eval(p[0], p[1])).collect();
        let k_q: Vec<[f64; 3]> = quad.points.iter().map(|p| rock.permeability.eval(p[0], p[1])).collect();
        let d_q: Vec<f64> = quad.points.iter().map(|p| rock.diffusion.eval(p[0], p[1])).collect();
        let w_phi = lumped_weights(&mesh, &quad, &phi_q);
        let ones = vec![1.0; quad.len()];
        let mass = assemble_mass(&mesh, &quad, &ones)?;
        let laplace = assemble_weighted_stiffness(&mesh, &quad, Coefficient::Scalar(&ones))?;
        let bounds = rock.bounds(&quad.points, mesh.dim);
        // c_D does not depend on z.
        let c_d = low_solubility_check(&bounds, &rock.fluid, &set, Some(1.0))?.c_d;
        Ok(Problem { mesh, quad, set, rock, tables, sources, p_scale, c_d, phi_q, k_q, d_q, w_phi, mass, laplace })
    }

    /// ‖v‖² = vᵀMv + ℓ² vᵀLv.
    pub fn norm_sq(&self, v: &[f64]) -> f64 {
        let l = self.mesh.length_scale();
        self.mass.form(v, v) + l * l * self.laplace.form(v, v)
    }

    fn kg(&self, q: usize) -> [f64; 2] {
        let k = self.k_q[q];
        let g = self.rock.gravity;
        [k[0] * g[0] + k[2] * g[1], k[2] * g[0] + k[1] * g[1]]
    }
}

fn k_apply(k: &[f64; 3], v: [f64; 2]) -> [f64; 2] {
    [k[0] * v[0] + k[2] * v[1], k[2] * v[0] + k[1] * v[1]]
}

fn scaled(a: f64, v: [f64; 2]) -> [f64; 2] {
    [a * v[0], a * v[1]]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Coefficients frozen at an iterate (p̄_l, p̄_g).
struct Frozen {
    // nodal
    s: Vec<f64>,
    r: Vec<f64>,
    c_w: Vec<f64>,
    c_g: Vec<f64>,
    c_gl: Vec<f64>,
    clamps: usize,
    pt_l: Vec<f64>,
    pt_g: Vec<f64>,
    // quadrature points
    s_q: Vec<f64>,
    lam_l: Vec<f64>,
    lam_g: Vec<f64>,
    rho_l_bar: Vec<f64>,
    r_bar_q: Vec<f64>,
    u_t: Vec<f64>,
    du_t: Vec<f64>,
    rho_t: Vec<f64>,
    rho_l_t: Vec<f64>,
    grad_ptg: Vec<[f64; 2]>,
    grad_ptl: Vec<[f64; 2]>,
}

/// Nodal weak-form contributions of one interval, each as a rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Balance {
    pub acc_w: Vec<f64>,
    pub acc_h: Vec<f64>,
    /// ∫F·∇φ_i of the non-gravity fluxes.
    pub flux_w: Vec<f64>,
    pub flux_h: Vec<f64>,
    /// ∫G·∇φ_i of the gravity terms (right-hand side).
    pub grav_w: Vec<f64>,
    pub grav_h: Vec<f64>,
    /// Source terms (right-hand side).
    pub src_w: Vec<f64>,
    pub src_h: Vec<f64>,
    /// Σ_e |element flux contribution| for both flux kinds.
    pub mag_w: Vec<f64>,
    pub mag_h: Vec<f64>,
    /// Mass in place at x divided by δt, for both equations.
    pub content_w: f64,
    pub content_h: f64,
}

impl Balance {
    pub fn residual_w(&self, i: usize) -> f64 {
        self.acc_w[i] + self.flux_w[i] - self.grav_w[i] - self.src_w[i]
    }

    pub fn residual_h(&self, i: usize) -> f64 {
        self.acc_h[i] + self.flux_h[i] - self.grav_h[i] - self.src_h[i]
    }
}

/// Per-step outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    pub dt_effective: f64,
    pub substeps: usize,
    pub picard_iterations: usize,
    pub final_update_norm: f64,
    pub min_p_g: f64,
    pub max_p_g: f64,
    pub saturation_range: (f64, f64),
    pub clamp_events: usize,
    pub energy: EnergyReport,
    pub mass: MassStep,
}

/// A step that could not be completed, with the two last Picard iterates
/// when the iteration stalled. No rule singles out one of them.
#[derive(Debug, Clone)]
pub struct StepFailure {
    pub time: f64,
    pub dt: f64,
    pub iterations: usize,
    pub last_update_norm: f64,
    pub last_defect: f64,
    pub reason: String,
    pub candidates: Option<(State, State)>,
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step from t={:.6e} with dt={:.3e} failed after {} Picard iterations (last update {:.3e}, mass defect {:.3e}): {}",
            self.time, self.dt, self.iterations, self.last_update_norm, self.last_defect, self.reason
        )?;
        if self.candidates.is_some() {
            write!(f, "; two candidate iterates retained")?;
        }
        Ok(())
    }
}

/// Outcome of one converged interval.
struct Interval {
    next: State,
    iterations: usize,
    update: f64,
    balance: Balance,
}

pub struct RunOutput {
    pub states: Vec<State>,
    pub reports: Vec<StepReport>,
    pub reconstruction: Reconstruction,
    pub failure: Option<Box<StepFailure>>,
}

/// Time levels of S and r_g = uS + ρ_g(1-S) for the piecewise-constant and
/// piecewise-linear reconstructions in time.
#[derive(Debug, Clone, Default)]
pub struct Reconstruction {
    pub times: Vec<f64>,
    pub s: Vec<Vec<f64>>,
    pub r_g: Vec<Vec<f64>>,
}

impl Reconstruction {
    fn push(&mut self, set: &ConstitutiveSet, rho_l_std: f64, st: &State) {
        let mut s = Vec::with_capacity(st.p_l.values.len());
        let mut r = Vec::with_capacity(st.p_l.values.len());
        for (&pl, &pg) in st.p_l.values.iter().zip(&st.p_g.values) {
            let sp = secondary_point(set, rho_l_std, pl, pg);
            s.push(sp.s);
            r.push(sp.u * sp.s + sp.rho_g * (1.0 - sp.s));
        }
        self.times.push(st.time);
        self.s.push(s);
        self.r_g.push(r);
    }

    fn level_after(&self, t: f64) -> usize {
        match self.times.iter().position(|&tn| tn >= t) {
            Some(k) => k,
            None => self.times.len() - 1,
        }
    }

    /// Value on (t_{n-1}, t_n] is the level-n value.
    pub fn piecewise_constant(&self, t: f64) -> (&[f64], &[f64]) {
        let k = self.level_after(t);
        (&self.s[k], &self.r_g[k])
    }

    pub fn piecewise_linear(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let k = self.level_after(t);
        if k == 0 {
            return (self.s[0].clone(), self.r_g[0].clone());
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let a = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (1.0 - a) * p + a * q).collect();
        (mix(&self.s[k - 1], &self.s[k]), mix(&self.r_g[k - 1], &self.r_g[k]))
    }
}

/// A sparse operator, optionally plus a rank-N term U Vᵀ.
enum Op {
    Sparse(SparseOperator),
    LowRank { a: SparseOperator, u: DMatrix<f64> },
}

/// A problem together with regularization parameters, the projection
/// basis and the test-function tables of the energy check.
pub struct Simulation<'a> {
    pub problem: &'a Problem,
    pub params: RegularizationParams,
    pub basis: Option<EigenBasis>,
    pub test_functions: TestFunctionTables,
    /// Φ and MΦ of the basis.
    modes: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn mode_pair(basis: &Option<EigenBasis>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    basis.as_ref().map(|b| {
        let phi = b.mode_matrix();
        let mut mphi = DMatrix::zeros(phi.nrows(), phi.ncols());
        for k in 0..phi.ncols() {
            let col: Vec<f64> = phi.column(k).iter().copied().collect();
            let m = b.mass.mul_vec(&col);
            for (r, v) in m.into_iter().enumerate() {
                mphi[(r, k)] = v;
            }
        }
        (phi, mphi)
    })
}

impl<'a> Simulation<'a> {
    pub fn new(problem: &'a Problem, params: RegularizationParams) -> Result<Self> {
        params.validate()?;
        let nf = problem.mesh.free_nodes().len();
        let basis = match params.projection {
            Projection::Identity => None,
            Projection::Spectral(n) => Some(compute_basis(&problem.mesh, &problem.quad, n.min(nf))?),
            Projection::SpectralFull => Some(compute_basis(&problem.mesh, &problem.quad, nf)?),
        };
        let test_functions = TestFunctionTables::build(&problem.set, params.eps, 10.0 * problem.p_scale, 512)?;
        let modes = mode_pair(&basis);
        Ok(Self { problem, params, basis, test_functions, modes })
    }

    /// Reuses an already computed basis.
    pub fn with_basis(problem: &'a Problem, params: RegularizationParams, basis: Option<EigenBasis>) -> Result<Self> {
        params.validate()?;
        let test_functions = TestFunctionTables::build(&problem.set, params.eps, 10.0 * problem.p_scale, 512)?;
        let modes = mode_pair(&basis);
        Ok(Self { problem, params, basis, test_functions, modes })
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        match &self.basis {
            Some(b) => b.project(v),
            None => v.to_vec(),
        }
    }

    fn freeze(&self, prev: &State, bar: &State) -> Frozen {
        let pb = self.problem;
        let (mesh, quad, set) = (&pb.mesh, &pb.quad, &pb.set);
        let eps = self.params.eps;
        let rho_std = pb.rock.fluid.rho_l_std;
        let n = mesh.node_count();
        let nq = quad.len();
        let mut f = Frozen {
            s: vec![0.0; n],
            r: vec![0.0; n],
            c_w: vec![0.0; n],
            c_g: vec![0.0; n],
            c_gl: vec![0.0; n],
            clamps: 0,
            pt_l: self.project(&bar.p_l.values),
            pt_g: self.project(&bar.p_g.values),
            s_q: Vec::with_capacity(nq),
            lam_l: Vec::with_capacity(nq),
            lam_g: Vec::with_capacity(nq),
            rho_l_bar: Vec::with_capacity(nq),
            r_bar_q: Vec::with_capacity(nq),
            u_t: Vec::with_capacity(nq),
            du_t: Vec::with_capacity(nq),
            rho_t: Vec::with_capacity(nq),
            rho_l_t: Vec::with_capacity(nq),
            grad_ptg: Vec::new(),
            grad_ptl: Vec::new(),
        };
        let _ = prev;
        for i in 0..n {
            let sp = secondary_point(set, rho_std, bar.p_l.values[i], bar.p_g.values[i]);
            let rho_e = sp.rho_g + eps;
            f.s[i] = sp.s;
            f.r[i] = sp.u * sp.s + rho_e * (1.0 - sp.s);
            f.c_w[i] = -sp.ds_dsigma;
            f.c_g[i] = (sp.du * sp.s + sp.drho_g * (1.0 - sp.s) + (sp.u - rho_e) * sp.ds_dsigma).max(0.0);
            f.c_gl[i] = -(sp.u - rho_e) * sp.ds_dsigma;
            f.clamps += sp.clamped as usize;
        }
        let pl_q = quad.interpolate(mesh, &bar.p_l.values);
        let pg_q = quad.interpolate(mesh, &bar.p_g.values);
        let ptg_q = quad.interpolate(mesh, &f.pt_g);
        f.grad_ptg = quad.gradient(mesh, &f.pt_g);
        f.grad_ptl = quad.gradient(mesh, &f.pt_l);
        for q in 0..nq {
            let sp = secondary_point(set, rho_std, pl_q[q], pg_q[q]);
            let (ll, lg) = set.mobilities(sp.s, &pb.rock.fluid);
            f.s_q.push(sp.s);
            f.lam_l.push(ll);
            f.lam_g.push(lg);
            f.rho_l_bar.push(sp.rho_l);
            f.r_bar_q.push(sp.u * sp.s + (sp.rho_g + eps) * (1.0 - sp.s));
            let (ut, dut) = set.henry_u(ptg_q[q]);
            let (rt, _) = set.gas_density(ptg_q[q]);
            f.u_t.push(ut);
            f.du_t.push(dut);
            f.rho_t.push(rt + eps);
            f.rho_l_t.push(rho_std + ut);
        }
        f
    }

    /// Non-principal flux vectors of the liquid equation (diffusion and η
    /// parts), and its gravity term.
    fn liquid_explicit(&self, f: &Frozen) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let pb = self.problem;
        let eta = self.params.eta;
        let nq = pb.quad.len();
        let mut flux = Vec::with_capacity(nq);
        let mut grav = Vec::with_capacity(nq);
        for q in 0..nq {
            let diff = scaled(-pb.phi_q[q] * f.s_q[q] / f.rho_l_t[q] * pb.d_q[q] * f.du_t[q], f.grad_ptg[q]);
            let et = scaled(-eta, sub(f.grad_ptg[q], f.grad_ptl[q]));
            flux.push(add(diff, et));
            grav.push(scaled(f.rho_l_bar[q] * f.lam_l[q], pb.kg(q)));
        }
        (flux, grav)
    }

    /// Gas-equation flux vectors that do not involve the unknown p_g, and
    /// its gravity term.
    fn gas_explicit(&self, f: &Frozen, p_l_new: &[f64]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let pb = self.problem;
        let (eta, eps) = (self.params.eta, self.params.eps);
        let rho_std = pb.rock.fluid.rho_l_std;
        let grad_pl = pb.quad.gradient(&pb.mesh, p_l_new);
        let nq = pb.quad.len();
        let mut flux = Vec::with_capacity(nq);
        let mut grav = Vec::with_capacity(nq);
        for q in 0..nq {
            let k = &pb.k_q[q];
            let liq = scaled(f.u_t[q] * (f.lam_l[q] + eps), k_apply(k, grad_pl[q]));
            let gas = scaled(f.rho_t[q] * f.lam_g[q], k_apply(k, f.grad_ptg[q]));
            let diff = scaled(pb.phi_q[q] * f.s_q[q] * rho_std / f.rho_l_t[q] * pb.d_q[q] * f.du_t[q], f.grad_ptg[q]);
            let et = scaled(eta * (f.rho_t[q] - f.u_t[q]), sub(f.grad_ptg[q], f.grad_ptl[q]));
            flux.push(add(add(liq, gas), add(diff, et)));
            let gc = f.rho_l_bar[q] * f.u_t[q] * f.lam_l[q] + f.rho_t[q] * f.rho_t[q] * f.lam_g[q];
            grav.push(scaled(gc, pb.kg(q)));
        }
        (flux, grav)
    }

    fn apply(&self, op: &Op, x: &[f64]) -> Vec<f64> {
        match op {
            Op::Sparse(a) => a.mul_vec(x),
            Op::LowRank { a, u } => {
                let (_, mphi) = self.modes.as_ref().expect("low-rank operator needs a basis");
                let c = mphi.transpose() * nalgebra::DVector::from_column_slice(x);
                let mut y = a.mul_vec(x);
                let uc = u * c;
                for (yi, v) in y.iter_mut().zip(uc.iter()) {
                    *yi += v;
                }
                y
            }
        }
    }

    /// Solves op x = rhs on the free nodes, x = 0 on Γ_D. The low-rank form
    /// goes through the Woodbury identity with one refinement step.
    fn solve_op(&self, op: &Op, rhs: &[f64]) -> Result<Vec<f64>> {
        let mesh = &self.problem.mesh;
        let mask = mesh.dirichlet_mask();
        match op {
            Op::Sparse(a) => solve(a, rhs, mask),
            Op::LowRank { a, u } => {
                let (_, mphi) = self.modes.as_ref().expect("low-rank operator needs a basis");
                let nm = u.ncols();
                let mut z = DMatrix::zeros(u.nrows(), nm);
                for k in 0..nm {
                    let col: Vec<f64> = u.column(k).iter().copied().collect();
                    let zk = solve(a, &col, mask)?;
                    z.set_column(k, &nalgebra::DVector::from_vec(zk));
                }
                let cap = DMatrix::identity(nm, nm) + mphi.transpose() * &z;
                let lu = cap.lu();
                let woodbury = |b: &[f64]| -> Result<Vec<f64>> {
                    let y = solve(a, b, mask)?;
                    let c = mphi.transpose() * nalgebra::DVector::from_column_slice(&y);
                    let w = lu
                        .solve(&c)
                        .ok_or_else(|| Error::LinearSolve("singular capacitance matrix in projected solve".into()))?;
                    let zw = &z * w;
                    Ok(y.iter().zip(zw.iter()).map(|(a, b)| a - b).collect())
                };
                let mut x = woodbury(rhs)?;
                let ax = self.apply(op, &x);
                let r: Vec<f64> = (0..rhs.len()).map(|i| if mask[i] { 0.0 } else { rhs[i] - ax[i] }).collect();
                let dx = woodbury(&r)?;
                for (xi, d) in x.iter_mut().zip(dx) {
                    *xi += d;
                }
                let res = self.relative_residual(op, &x, rhs);
                if !(res <= 1e-9) {
                    return Err(Error::LinearSolve(format!("projected solve residual {res:.3e} above 1e-9")));
                }
                Ok(x)
            }
        }
    }

    /// principal + diag + S·P where S is `stab` (sparse) and P the projector.
    fn system(&self, principal: SparseOperator, diag: &[f64], stab: Option<SparseOperator>) -> Op {
        let mut a = principal;
        a.add_diagonal(diag);
        match (stab, &self.modes) {
            (None, _) => Op::Sparse(a),
            (Some(s), None) => Op::Sparse(a.add_scaled(1.0, &s)),
            (Some(s), Some((phi, _))) => {
                let mut u = DMatrix::zeros(phi.nrows(), phi.ncols());
                for k in 0..phi.ncols() {
                    let col: Vec<f64> = phi.column(k).iter().copied().collect();
                    u.set_column(k, &nalgebra::DVector::from_vec(s.mul_vec(&col)));
                }
                Op::LowRank { a, u }
            }
        }
    }

    /// One application of the (stabilized) map T: (p̄_l, p̄_g) -> (p_l, p_g).
    pub fn picard_map(&self, prev: &State, iterate: &State, dt: f64) -> Result<State> {
        let (fi, fp) = self.problem.sources.averaged(&self.problem.quad, prev.time, prev.time + dt);
        self.picard_map_with(prev, iterate, dt, &fi, &fp).map(|(s, _)| s)
    }

    /// Also returns the relative residuals of the two linear solves.
    pub fn picard_map_with(&self, prev: &State, iterate: &State, dt: f64, fi: &[f64], fp: &[f64]) -> Result<(State, [f64; 2])> {
        let pb = self.problem;
        let (mesh, quad) = (&pb.mesh, &pb.quad);
        let (eta, eps) = (self.params.eta, self.params.eps);
        let n = mesh.node_count();
        let f = self.freeze(prev, iterate);
        let star = self.freeze_storage(prev);
        let stab = self.params.stabilized;

        // Liquid equation.
        let coef_l: Vec<[f64; 3]> =
            (0..quad.len()).map(|q| pb.k_q[q].map(|k| k * (f.lam_l[q] + eps))).collect();
        let a_l = assemble_weighted_stiffness(mesh, quad, Coefficient::Tensor(&coef_l))?;
        let (flux, grav) = self.liquid_explicit(&f);
        let (bf, _) = assemble_flux(mesh, quad, &flux);
        let (bg, _) = assemble_flux(mesh, quad, &grav);
        let src: Vec<f64> = (0..quad.len()).map(|q| fi[q] - f.s_q[q] * fp[q]).collect();
        let bs = assemble_load(mesh, quad, &src);
        let mut rhs: Vec<f64> = (0..n).map(|i| -pb.w_phi[i] * (f.s[i] - star.0[i]) / dt - bf[i] + bg[i] + bs[i]).collect();
        let op_l = if stab {
            let diag: Vec<f64> = (0..n).map(|i| pb.w_phi[i] * f.c_w[i] / dt).collect();
            let eta_l = pb.laplace.scaled(eta);
            let el = eta_l.mul_vec(&f.pt_l);
            for i in 0..n {
                rhs[i] += diag[i] * iterate.p_l.values[i] + el[i];
            }
            self.system(a_l, &diag, Some(eta_l))
        } else {
            Op::Sparse(a_l)
        };
        let p_l = self.solve_op(&op_l, &rhs)?;
        let res_l = self.relative_residual(&op_l, &p_l, &rhs);

        // Gas equation.
        let coef_g: Vec<f64> = f.rho_t.iter().map(|r| eps * r).collect();
        let a_g = assemble_weighted_stiffness(mesh, quad, Coefficient::Scalar(&coef_g))?;
        let (flux, grav) = self.gas_explicit(&f, &p_l);
        let (bf, _) = assemble_flux(mesh, quad, &flux);
        let (bg, _) = assemble_flux(mesh, quad, &grav);
        let src: Vec<f64> = (0..quad.len()).map(|q| -f.r_bar_q[q] * fp[q]).collect();
        let bs = assemble_load(mesh, quad, &src);
        let mut rhs: Vec<f64> = (0..n).map(|i| -pb.w_phi[i] * (f.r[i] - star.1[i]) / dt - bf[i] + bg[i] + bs[i]).collect();
        let op_g = if stab {
            let rho_std = pb.rock.fluid.rho_l_std;
            let diag: Vec<f64> = (0..n).map(|i| pb.w_phi[i] * f.c_g[i] / dt).collect();
            for i in 0..n {
                rhs[i] += diag[i] * iterate.p_g.values[i] - pb.w_phi[i] * f.c_gl[i] * (p_l[i] - iterate.p_l.values[i]) / dt;
            }
            let coef_s: Vec<[f64; 3]> = (0..quad.len())
                .map(|q| {
                    let k = pb.k_q[q];
                    let a = f.rho_t[q] * f.lam_g[q];
                    let b = pb.phi_q[q] * f.s_q[q] * rho_std / f.rho_l_t[q] * pb.d_q[q] * f.du_t[q]
                        + eta * (f.rho_t[q] - f.u_t[q]).max(0.0);
                    [a * k[0] + b, a * k[1] + b, a * k[2]]
                })
                .collect();
            let s_op = assemble_weighted_stiffness(mesh, quad, Coefficient::Tensor(&coef_s))?;
            let sp = s_op.mul_vec(&f.pt_g);
            for i in 0..n {
                rhs[i] += sp[i];
            }
            self.system(a_g, &diag, Some(s_op))
        } else {
            Op::Sparse(a_g)
        };
        let p_g = self.solve_op(&op_g, &rhs)?;
        let res_g = self.relative_residual(&op_g, &p_g, &rhs);

        let t = iterate.time;
        Ok((
            State {
                p_l: FieldVector::new(p_l, FieldRole::Pressure),
                p_g: FieldVector::new(p_g, FieldRole::Pressure),
                time: t,
            },
            [res_l, res_g],
        ))
    }

    fn relative_residual(&self, op: &Op, x: &[f64], rhs: &[f64]) -> f64 {
        let mask = self.problem.mesh.dirichlet_mask();
        let ax = self.apply(op, x);
        let (mut r, mut b) = (0.0, 0.0);
        for i in 0..rhs.len() {
            if !mask[i] {
                r += (ax[i] - rhs[i]).powi(2);
                b += rhs[i].powi(2);
            }
        }
        if b == 0.0 {
            r.sqrt()
        } else {
            (r / b).sqrt()
        }
    }

    /// Nodal (S*, r*) of an accepted level.
    fn freeze_storage(&self, st: &State) -> (Vec<f64>, Vec<f64>) {
        let pb = self.problem;
        let eps = self.params.eps;
        let mut s = Vec::with_capacity(st.p_l.values.len());
        let mut r = Vec::with_capacity(st.p_l.values.len());
        for (&pl, &pg) in st.p_l.values.iter().zip(&st.p_g.values) {
            let sp = secondary_point(&pb.set, pb.rock.fluid.rho_l_std, pl, pg);
            s.push(sp.s);
            r.push(sp.u * sp.s + (sp.rho_g + eps) * (1.0 - sp.s));
        }
        (s, r)
    }

    /// Weak-form contributions of the discrete system with all
    /// coefficients taken at `x`.
    pub fn balance(&self, prev: &State, x: &State, dt: f64, fi: &[f64], fp: &[f64]) -> Balance {
        let pb = self.problem;
        let (mesh, quad) = (&pb.mesh, &pb.quad);
        let eps = self.params.eps;
        let n = mesh.node_count();
        let f = self.freeze(prev, x);
        let star = self.freeze_storage(prev);
        let grad_pl = quad.gradient(mesh, &x.p_l.values);
        let grad_pg = quad.gradient(mesh, &x.p_g.values);

        let (mut flux_l, grav_l) = self.liquid_explicit(&f);
        let (mut flux_g, grav_g) = self.gas_explicit(&f, &x.p_l.values);
        for q in 0..quad.len() {
            let k = &pb.k_q[q];
            flux_l[q] = add(flux_l[q], scaled(f.lam_l[q] + eps, k_apply(k, grad_pl[q])));
            flux_g[q] = add(flux_g[q], scaled(eps * f.rho_t[q], grad_pg[q]));
        }
        let (flux_w, mw) = assemble_flux(mesh, quad, &flux_l);
        let (grav_w, gw) = assemble_flux(mesh, quad, &grav_l);
        let (flux_h, mh) = assemble_flux(mesh, quad, &flux_g);
        let (grav_h, gh) = assemble_flux(mesh, quad, &grav_g);
        let src_l: Vec<f64> = (0..quad.len()).map(|q| fi[q] - f.s_q[q] * fp[q]).collect();
        let src_g: Vec<f64> = (0..quad.len()).map(|q| -f.r_bar_q[q] * fp[q]).collect();
        // Mass changes below 1e-6 of the pore capacity per step are not
        // resolved relative to the content.
        let floor = 1e-6 * pb.w_phi.iter().sum::<f64>() / dt;
        let rho_ref = pb.set.gas_density.rho_max() + pb.set.solubility.u_max() + eps;
        Balance {
            acc_w: (0..n).map(|i| pb.w_phi[i] * (f.s[i] - star.0[i]) / dt).collect(),
            acc_h: (0..n).map(|i| pb.w_phi[i] * (f.r[i] - star.1[i]) / dt).collect(),
            flux_w,
            flux_h,
            grav_w,
            grav_h,
            src_w: assemble_load(mesh, quad, &src_l),
            src_h: assemble_load(mesh, quad, &src_g),
            mag_w: mw.iter().zip(&gw).map(|(a, b)| a + b).collect(),
            mag_h: mh.iter().zip(&gh).map(|(a, b)| a + b).collect(),
            content_w: (0..n).map(|i| pb.w_phi[i] * f.s[i]).sum::<f64>() / dt + floor,
            content_h: (0..n).map(|i| pb.w_phi[i] * f.r[i].abs()).sum::<f64>() / dt + floor * rho_ref,
        }
    }

    /// Physical regularized fluxes (Q^{w,η}, Q^{h,η}) at the quadrature points.
    pub fn regularized_fluxes(&self, state: &State) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let pb = self.problem;
        let (mesh, quad, set) = (&pb.mesh, &pb.quad, &pb.set);
        let eta = self.params.eta;
        let fl = pb.rock.fluid;
        let g = pb.rock.gravity;
        let pl = quad.interpolate(mesh, &state.p_l.values);
        let pg = quad.interpolate(mesh, &state.p_g.values);
        let gl = quad.gradient(mesh, &state.p_l.values);
        let gg = quad.gradient(mesh, &state.p_g.values);
        let mut qw = Vec::with_capacity(quad.len());
        let mut qh = Vec::with_capacity(quad.len());
        for q in 0..quad.len() {
            let sp = secondary_point(set, fl.rho_l_std, pl[q], pg[q]);
            let (ll, lg) = set.mobilities(sp.s, &fl);
            let k = &pb.k_q[q];
            let grad_u = scaled(sp.du, gg[q]);
            let dl = k_apply(k, sub(gl[q], scaled(sp.rho_l, g)));
            let dg = k_apply(k, sub(gg[q], scaled(sp.rho_g, g)));
            let dc = sub(gg[q], gl[q]);
            let diff = pb.phi_q[q] * sp.s / sp.rho_l * pb.d_q[q];
            qw.push(add(add(scaled(-ll, dl), scaled(diff, grad_u)), scaled(eta, dc)));
            qh.push(add(
                add(scaled(-sp.u * ll, dl), scaled(-sp.rho_g * lg, dg)),
                add(scaled(-diff * fl.rho_l_std, grad_u), scaled(-eta * (sp.rho_g - sp.u), dc)),
            ));
        }
        (qw, qh)
    }

    fn update_norm(&self, a: &State, b: &State) -> (f64, f64) {
        let pb = self.problem;
        let dl: Vec<f64> = a.p_l.values.iter().zip(&b.p_l.values).map(|(x, y)| x - y).collect();
        let dg: Vec<f64> = a.p_g.values.iter().zip(&b.p_g.values).map(|(x, y)| x - y).collect();
        let d = (pb.norm_sq(&dl) + pb.norm_sq(&dg)).sqrt();
        let r = (pb.norm_sq(&a.p_l.values) + pb.norm_sq(&a.p_g.values)).sqrt();
        let floor = 1e-6 * pb.p_scale * pb.mesh.measure().sqrt();
        (d, d / r.max(floor))
    }

    /// Picard iteration over one interval of length `dt`.
    fn solve_interval(&self, prev: &State, dt: f64) -> std::result::Result<Interval, StepFailure> {
        let tol = self.params.picard_tol;
        let (fi, fp) = self.problem.sources.averaged(&self.problem.quad, prev.time, prev.time + dt);
        let mut x = prev.clone();
        x.time = prev.time + dt;
        let mut omega = self.params.relaxation;
        let mut last_rel = f64::INFINITY;
        let mut last_defect = f64::NAN;
        let mut before = x.clone();
        let fail = |reason: String, it: usize, rel: f64, defect: f64, cand: Option<(State, State)>| StepFailure {
            time: prev.time,
            dt,
            iterations: it,
            last_update_norm: rel,
            last_defect: defect,
            reason,
            candidates: cand,
        };
        for it in 1..=self.params.picard_max {
            let (t, _) = self
                .picard_map_with(prev, &x, dt, &fi, &fp)
                .map_err(|e| fail(e.to_string(), it, last_rel, last_defect, None))?;
            let (_, rel) = self.update_norm(&t, &x);
            if !rel.is_finite() {
                return Err(fail("non-finite Picard iterate".into(), it, rel, last_defect, None));
            }
            if rel > 10.0 * last_rel && omega > 0.5 {
                omega = 0.5;
            }
            let mut next = t;
            if omega < 1.0 {
                for (a, b) in next.p_l.values.iter_mut().zip(&x.p_l.values) {
                    *a = b + omega * (*a - b);
                }
                for (a, b) in next.p_g.values.iter_mut().zip(&x.p_g.values) {
                    *a = b + omega * (*a - b);
                }
            }
            before = std::mem::replace(&mut x, next);
            last_rel = rel;
            if rel < tol {
                let balance = self.balance(prev, &x, dt, &fi, &fp);
                let defect = diagnostics::mass_defect(&self.problem.mesh, &balance);
                last_defect = defect;
                if defect < tol {
                    return Ok(Interval { next: x, iterations: it, update: rel, balance });
                }
            }
        }
        Err(fail(
            format!("Picard iteration did not reach tolerance {tol:.1e} in {} iterations", self.params.picard_max),
            self.params.picard_max,
            last_rel,
            last_defect,
            Some((before, x)),
        ))
    }

    fn advance(&self, prev: &State, dt: f64, depth: usize, out: &mut Vec<(State, State, f64, Interval)>) -> Result<()> {
        match self.solve_interval(prev, dt) {
            Ok(iv) => {
                out.push((prev.clone(), iv.next.clone(), dt, iv));
                Ok(())
            }
            Err(fail) if depth < self.params.max_halvings => {
                let _ = fail;
                self.advance(prev, 0.5 * dt, depth + 1, out)?;
                let mid = out.last().expect("substep recorded").1.clone();
                self.advance(&mid, 0.5 * dt, depth + 1, out)
            }
            Err(fail) => Err(Error::Step(Box::new(fail))),
        }
    }

    /// One nominal step of length δt, halving on failure.
    pub fn time_step(&self, prev: &State, step: usize) -> Result<(State, StepReport)> {
        let mut subs = Vec::new();
        self.advance(prev, self.params.dt, 0, &mut subs)?;
        let pb = self.problem;
        let next = subs.last().expect("at least one substep").1.clone();
        let mut energy = EnergyReport::default();
        let mut mass = MassStep::default();
        let mut iters = 0;
        let mut dt_eff = f64::INFINITY;
        for (a, b, dt, iv) in &subs {
            iters += iv.iterations;
            dt_eff = dt_eff.min(*dt);
            energy.accumulate(&diagnostics::energy_step_report(self, a, b, *dt, &iv.balance));
            mass.accumulate(&diagnostics::mass_step(self, b, *dt, &iv.balance));
        }
        energy.finish(self.params.dt);
        mass.finish(pb, &next, self.params.dt);
        let sec: Vec<_> = next
            .p_l
            .values
            .iter()
            .zip(&next.p_g.values)
            .map(|(&pl, &pg)| secondary_point(&pb.set, pb.rock.fluid.rho_l_std, pl, pg))
            .collect();
        let s_min = sec.iter().map(|s| s.s).fold(f64::INFINITY, f64::min);
        let s_max = sec.iter().map(|s| s.s).fold(f64::NEG_INFINITY, f64::max);
        let report = StepReport {
            step,
            time: next.time,
            dt_effective: dt_eff,
            substeps: subs.len(),
            picard_iterations: iters,
            final_update_norm: subs.last().map(|s| s.3.update).unwrap_or(0.0),
            min_p_g: next.min_p_g(),
            max_p_g: next.max_p_g(),
            saturation_range: (s_min, s_max),
            clamp_events: sec.iter().filter(|s| s.clamped).count(),
            energy,
            mass,
        };
        Ok((next, report))
    }

    /// Runs `n_steps` steps from `init`, calling `on_step` after each
    /// accepted step. A step failure ends the run; the steps taken so far
    /// are kept in the output.
    pub fn run_with<F>(&self, init: State, mut on_step: F) -> Result<RunOutput>
    where
        F: FnMut(&State, &StepReport) -> Result<()>,
    {
        let pb = self.problem;
        let mut recon = Reconstruction::default();
        recon.push(&pb.set, pb.rock.fluid.rho_l_std, &init);
        let mut states = vec![init];
        let mut reports = Vec::with_capacity(self.params.n_steps);
        let mut failure = None;
        for step in 1..=self.params.n_steps {
            let prev = states.last().expect("initial state present");
            match self.time_step(prev, step) {
                Ok((next, rep)) => {
                    on_step(&next, &rep)?;
                    recon.push(&pb.set, pb.rock.fluid.rho_l_std, &next);
                    states.push(next);
                    reports.push(rep);
                }
                Err(Error::Step(f)) => {
                    failure = Some(f);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(RunOutput { states, reports, reconstruction: recon, failure })
    }

    pub fn run(&self, init: State) -> Result<RunOutput> {
        self.run_with(init, |_, _| Ok(()))
    }
}

/// Problem assembled with the given tables resolution and verification
/// tolerance for the global-pressure tables.
pub fn build_tables(set: &ConstitutiveSet, rock: &RockFluidParams) -> Result<GlobalPressureTables> {
    GlobalPressureTables::build(set, &rock.fluid, 2048, 1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{FluidProps, ScalarField, TensorField};
    use crate::mesh::Side;

    fn rock(g: [f64; 2]) -> RockFluidParams {
        RockFluidParams {
            porosity: ScalarField::Constant(0.2),
            permeability: TensorField::isotropic(ScalarField::Constant(1.0)),
            diffusion: ScalarField::Constant(0.5),
            fluid: FluidProps { mu_l: 1.0, mu_g: 0.5, rho_l_std: 1.0 },
            gravity: g,
        }
    }

    fn set() -> ConstitutiveSet {
        ConstitutiveSet::default_family(1.0, 0.1, 1.0, 1.0, 2.0)
    }

    fn problem(n: usize, sources: SourceTerms, g: [f64; 2]) -> Problem {
        let mesh = Mesh::build_interval(1.0, n, &[Side::Left]).unwrap();
        let rk = rock(g);
        let tables = build_tables(&set(), &rk).unwrap();
        Problem::new(mesh, set(), rk, tables, sources, 1.0).unwrap()
    }

    fn bump_state(pb: &Problem, amp: f64) -> State {
        let pl = vec![0.0; pb.mesh.node_count()];
        let pg = pb.mesh.nodes.iter().map(|p| amp * crate::expr::smoothstep(0.3, 0.7, p[0])).collect();
        State::new(&pb.mesh, pl, pg, 0.0).unwrap()
    }

    fn params(dt: f64, n: usize) -> RegularizationParams {
        RegularizationParams { dt, n_steps: n, ..Default::default() }
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let pb = problem(16, SourceTerms::default(), [0.0, 0.0]);
        let sim = Simulation::new(&pb, params(0.1, 3)).unwrap();
        let z = State::zeros(&pb.mesh);
        let t = sim.picard_map(&z, &z, 0.1).unwrap();
        assert!(t.p_l.values.iter().chain(&t.p_g.values).all(|&v| v == 0.0));
        let out = sim.run(z).unwrap();
        assert!(out.failure.is_none());
        for s in &out.states {
            assert!(s.p_l.values.iter().chain(&s.p_g.values).all(|&v| v.abs() <= 1e-12));
        }
    }

    #[test]
    fn uniform_state_has_zero_fluxes() {
        let pb = problem(8, SourceTerms::default(), [0.0, 0.0]);
        let sim = Simulation::new(&pb, params(0.1, 1)).unwrap();
        let st = State {
            p_l: FieldVector::new(vec![0.3; 9], FieldRole::Pressure),
            p_g: FieldVector::new(vec![0.5; 9], FieldRole::Pressure),
            time: 0.0,
        };
        let (qw, qh) = sim.regularized_fluxes(&st);
        assert!(qw.iter().chain(&qh).all(|v| v[0].abs() < 1e-15 && v[1].abs() < 1e-15));
    }

    #[test]
    fn eta_zero_gives_physical_fluxes() {
        let pb = problem(8, SourceTerms::default(), [-1.0, 0.0]);
        let st = bump_state(&pb, 0.3);
        let mut p = params(0.1, 1);
        p.eta = 0.0;
        let sim0 = Simulation::new(&pb, p.clone()).unwrap();
        p.eta = 0.1;
        let sim1 = Simulation::new(&pb, p).unwrap();
        let (w0, h0) = sim0.regularized_fluxes(&st);
        let (w1, h1) = sim1.regularized_fluxes(&st);
        let gl = pb.quad.gradient(&pb.mesh, &st.p_l.values);
        let gg = pb.quad.gradient(&pb.mesh, &st.p_g.values);
        let pg = pb.quad.interpolate(&pb.mesh, &st.p_g.values);
        for q in 0..pb.quad.len() {
            let dc = gg[q][0] - gl[q][0];
            assert!((w1[q][0] - w0[q][0] - 0.1 * dc).abs() < 1e-14);
            let (u, _) = pb.set.henry_u(pg[q]);
            let (r, _) = pb.set.gas_density(pg[q]);
            assert!((h1[q][0] - h0[q][0] + 0.1 * (r - u) * dc).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_solves_meet_tolerance() {
        let pb = problem(20, SourceTerms::default(), [0.0, 0.0]);
        let sim = Simulation::new(&pb, params(0.2, 1)).unwrap();
        let st = bump_state(&pb, 0.2);
        let mut it = st.clone();
        it.time = 0.2;
        let (fi, fp) = pb.sources.averaged(&pb.quad, 0.0, 0.2);
        let (_, res) = sim.picard_map_with(&st, &it, 0.2, &fi, &fp).unwrap();
        assert!(res[0] <= 1e-10 && res[1] <= 1e-10, "{res:?}");
    }

    #[test]
    fn converged_step_is_a_fixed_point() {
        let pb = problem(20, SourceTerms::default(), [0.0, 0.0]);
        let sim = Simulation::new(&pb, params(0.2, 1)).unwrap();
        let st = bump_state(&pb, 0.2);
        let (next, rep) = sim.time_step(&st, 1).unwrap();
        assert!(rep.picard_iterations >= 1);
        let again = sim.picard_map(&st, &next, 0.2).unwrap();
        let (_, rel) = sim.update_norm(&again, &next);
        assert!(rel < 10.0 * sim.params.picard_tol, "{rel}");
    }

    #[test]
    fn spectral_full_matches_identity() {
        let pb = problem(16, SourceTerms::default(), [0.0, 0.0]);
        let st = bump_state(&pb, 0.2);
        let mut p = params(0.5, 2);
        p.picard_tol = 1e-10;
        let id = Simulation::new(&pb, p.clone()).unwrap().run(st.clone()).unwrap();
        p.projection = Projection::SpectralFull;
        let sp = Simulation::new(&pb, p).unwrap().run(st).unwrap();
        let (a, b) = (id.states.last().unwrap(), sp.states.last().unwrap());
        for (x, y) in a.p_g.values.iter().zip(&b.p_g.values).chain(a.p_l.values.iter().zip(&b.p_l.values)) {
            assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn injection_raises_water_mass() {
        let src = SourceTerms { injection: Some(Expr::parse("0.1 * smoothstep(0.6, 0.9, x)").unwrap()), production: None };
        let pb = problem(20, src, [0.0, 0.0]);
        let sim = Simulation::new(&pb, params(0.5, 3)).unwrap();
        let out = sim.run(bump_state(&pb, 0.2)).unwrap();
        assert!(out.failure.is_none());
        for r in &out.reports {
            assert!(r.mass.defect <= 1e-7);
            let expect = r.mass.water_source - r.mass.water_outflow;
            assert!((r.mass.water_change - expect).abs() <= 1e-6 * (expect.abs() + r.mass.water_source.abs()));
        }
    }

    #[test]
    fn time_reconstructions() {
        let pb = problem(10, SourceTerms::default(), [0.0, 0.0]);
        let sim = Simulation::new(&pb, params(0.5, 2)).unwrap();
        let out = sim.run(bump_state(&pb, 0.2)).unwrap();
        let rc = &out.reconstruction;
        assert_eq!(rc.times.len(), 3);
        let (s_c, _) = rc.piecewise_constant(0.25);
        assert_eq!(s_c, &rc.s[1][..]);
        let (s_l, _) = rc.piecewise_linear(0.25);
        for i in 0..s_l.len() {
            assert!((s_l[i] - 0.5 * (rc.s[0][i] + rc.s[1][i])).abs() < 1e-15);
        }
    }

    #[test]
    fn step_failure_reports_candidates() {
        let pb = problem(10, SourceTerms::default(), [0.0, 0.0]);
        let mut p = params(0.5, 1);
        p.picard_max = 1;
        p.max_halvings = 0;
        p.picard_tol = 1e-14;
        let sim = Simulation::new(&pb, p).unwrap();
        let err = sim.time_step(&bump_state(&pb, 0.2), 1).unwrap_err();
        match err {
            Error::Step(f) => assert!(f.candidates.is_some()),
            e => panic!("unexpected {e}"),
        }
    }
}
