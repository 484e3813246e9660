//! Energy and mass ledgers per step, parameter sweeps and convergence
//! checks over them.

use rayon::prelude::*;

use crate::constitutive::secondary_point;
use crate::error::Result;
use crate::global_pressure::{energy_density, identity_gradients, k_dot, QuadPointState};
use crate::mesh::Mesh;
use crate::solver::{Balance, Problem, Projection, RegularizationParams, Simulation, State, StepReport};
use crate::spectral::EigenBasis;

/// Discrete energy balance over one nominal step. Time-integrated
/// quantities are sums over substeps; rates refer to the final level.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyReport {
    /// Σ_i ∫Φφ_i (E^ε(x_i) - E^ε(x_i*)).
    pub delta_e: f64,
    /// Storage terms tested with (p_l - N^ε(p_g), M^ε(p_g)), times δt.
    pub acc_work: f64,
    /// Tested non-gravity fluxes, times δt.
    pub dissipation_work: f64,
    /// Tested gravity and source terms, times δt.
    pub budget: f64,
    /// ∫λ_l K∇p_l·∇p_l, ∫λ_g K∇p_g·∇p_g, c_D ∫|∇u|², ε∫|∇p_g|², η∫|∇(p_g-p_l)|².
    pub dissipation: [f64; 5],
    pub grad_p_norm: f64,
    pub grad_beta_norm: f64,
    /// Time integrals over the step of ‖∇p‖², ‖∇β(S)‖², ‖∇u‖² and η‖∇(p_g-p_l)‖².
    pub norm_integrals: [f64; 4],
    /// Σ_i ∫Φφ_i E^ε at the final level.
    pub e_total: f64,
    /// Σ_i ∫Φφ_i (|E^ε(x_i)| + |E^ε(x_i*)|), the roundoff scale of delta_e.
    pub e_abs: f64,
    /// budget + tolerance - delta_e - dissipation_work.
    pub slack: f64,
    pub satisfied: bool,
}

impl EnergyReport {
    pub fn accumulate(&mut self, sub: &EnergyReport) {
        self.delta_e += sub.delta_e;
        self.acc_work += sub.acc_work;
        self.dissipation_work += sub.dissipation_work;
        self.budget += sub.budget;
        self.e_abs += sub.e_abs;
        for k in 0..4 {
            self.norm_integrals[k] += sub.norm_integrals[k];
        }
        self.dissipation = sub.dissipation;
        self.grad_p_norm = sub.grad_p_norm;
        self.grad_beta_norm = sub.grad_beta_norm;
        self.e_total = sub.e_total;
    }

    pub fn finish(&mut self, _dt: f64) {
        let scale = self.delta_e.abs() + self.acc_work.abs() + self.dissipation_work.abs() + self.budget.abs();
        let tol = 1e-6 * scale + 64.0 * f64::EPSILON * self.e_abs;
        self.slack = self.budget + tol - self.delta_e - self.dissipation_work;
        self.satisfied = self.slack >= 0.0;
    }
}

pub fn energy_step_report(sim: &Simulation, prev: &State, next: &State, dt: f64, b: &Balance) -> EnergyReport {
    let pb = sim.problem;
    let tf = &sim.test_functions;
    let (mesh, quad, set) = (&pb.mesh, &pb.quad, &pb.set);
    let mut r = EnergyReport::default();
    for i in 0..mesh.node_count() {
        let (pl, pg) = (next.p_l.values[i], next.p_g.values[i]);
        let e1 = energy_density(set, tf, pl, pg);
        let e0 = energy_density(set, tf, prev.p_l.values[i], prev.p_g.values[i]);
        r.delta_e += pb.w_phi[i] * (e1 - e0);
        r.e_total += pb.w_phi[i] * e1;
        r.e_abs += pb.w_phi[i] * (e1.abs() + e0.abs());
        if mesh.is_dirichlet(i) {
            continue;
        }
        let (m, n) = tf.eval(pg);
        let phi = pl - n;
        r.acc_work += dt * (phi * b.acc_w[i] + m * b.acc_h[i]);
        r.dissipation_work += dt * (phi * b.flux_w[i] + m * b.flux_h[i]);
        r.budget += dt * (phi * (b.grav_w[i] + b.src_w[i]) + m * (b.grav_h[i] + b.src_h[i]));
    }

    let fl = &pb.rock.fluid;
    let pl = quad.interpolate(mesh, &next.p_l.values);
    let pg = quad.interpolate(mesh, &next.p_g.values);
    let gl = quad.gradient(mesh, &next.p_l.values);
    let gg = quad.gradient(mesh, &next.p_g.values);
    let (eta, eps) = (sim.params.eta, sim.params.eps);
    let mut gp2 = 0.0;
    let mut gb2 = 0.0;
    let mut gu2 = 0.0;
    for q in 0..quad.len() {
        let w = quad.weights[q];
        let k = pb.k_q[q];
        let qs = QuadPointState { k, p_l: pl[q], p_g: pg[q], grad_pl: gl[q], grad_pg: gg[q] };
        let ig = identity_gradients(set, fl, &qs);
        let du = set.henry_u(pg[q]).1;
        let dc = [gg[q][0] - gl[q][0], gg[q][1] - gl[q][1]];
        let sq = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
        r.dissipation[0] += w * ig.lambda_l * k_dot(&k, &gl[q], &gl[q]);
        r.dissipation[1] += w * ig.lambda_g * k_dot(&k, &gg[q], &gg[q]);
        r.dissipation[2] += w * pb.c_d * du * du * sq(gg[q]);
        r.dissipation[3] += w * eps * sq(gg[q]);
        r.dissipation[4] += w * eta * sq(dc);
        gu2 += w * du * du * sq(gg[q]);
        gp2 += w * sq(ig.grad_p);
        gb2 += w * sq(ig.grad_beta);
    }
    r.grad_p_norm = gp2.sqrt();
    r.grad_beta_norm = gb2.sqrt();
    r.norm_integrals = [dt * gp2, dt * gb2, dt * gu2, dt * r.dissipation[4]];
    r
}

/// Water and gas ledgers over one nominal step. Water amounts carry the
/// factor ρ_l,std.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MassStep {
    pub water_mass: f64,
    pub gas_mass: f64,
    pub water_change: f64,
    pub gas_change: f64,
    pub water_source: f64,
    pub gas_source: f64,
    /// Net flow out through the Dirichlet boundary.
    pub water_outflow: f64,
    pub gas_outflow: f64,
    /// Largest relative global defect of the substeps.
    pub defect: f64,
}

impl MassStep {
    pub fn accumulate(&mut self, sub: &MassStep) {
        self.water_change += sub.water_change;
        self.gas_change += sub.gas_change;
        self.water_source += sub.water_source;
        self.gas_source += sub.gas_source;
        self.water_outflow += sub.water_outflow;
        self.gas_outflow += sub.gas_outflow;
        self.defect = self.defect.max(sub.defect);
    }

    pub fn finish(&mut self, pb: &Problem, next: &State, _dt: f64) {
        let (w, g) = masses(pb, next);
        self.water_mass = w;
        self.gas_mass = g;
    }
}

/// (∫Φ ρ_l,std S, ∫Φ (uS + ρ_g(1-S))) with lumped weights.
pub fn masses(pb: &Problem, st: &State) -> (f64, f64) {
    let rho = pb.rock.fluid.rho_l_std;
    let (mut w, mut g) = (0.0, 0.0);
    for i in 0..pb.mesh.node_count() {
        let sp = secondary_point(&pb.set, rho, st.p_l.values[i], st.p_g.values[i]);
        w += pb.w_phi[i] * rho * sp.s;
        g += pb.w_phi[i] * (sp.u * sp.s + sp.rho_g * (1.0 - sp.s));
    }
    (w, g)
}

pub fn mass_step(sim: &Simulation, _next: &State, dt: f64, b: &Balance) -> MassStep {
    let pb = sim.problem;
    let mesh = &pb.mesh;
    let rho = pb.rock.fluid.rho_l_std;
    let mut m = MassStep::default();
    for i in 0..mesh.node_count() {
        m.water_change += dt * rho * b.acc_w[i];
        m.gas_change += dt * b.acc_h[i];
        m.water_source += dt * rho * b.src_w[i];
        m.gas_source += dt * b.src_h[i];
        if mesh.is_dirichlet(i) {
            m.water_outflow -= dt * rho * b.residual_w(i);
            m.gas_outflow -= dt * b.residual_h(i);
        }
    }
    m.defect = mass_defect(mesh, b);
    m
}

/// max over both equations of |Σ_free R_i| / (mass/δt + Σ|storage| + Σ|source| + Σ|element fluxes|).
pub fn mass_defect(mesh: &Mesh, b: &Balance) -> f64 {
    let one = |acc: &[f64], src: &[f64], mag: &[f64], floor: f64, res: &dyn Fn(usize) -> f64| {
        let mut num = 0.0;
        let mut den = floor;
        for i in 0..mesh.node_count() {
            den += acc[i].abs() + src[i].abs() + mag[i];
            if !mesh.is_dirichlet(i) {
                num += res(i);
            }
        }
        if num == 0.0 {
            0.0
        } else {
            num.abs() / den
        }
    };
    let w = one(&b.acc_w, &b.src_w, &b.mag_w, b.content_w, &|i| b.residual_w(i));
    let h = one(&b.acc_h, &b.src_h, &b.mag_h, b.content_h, &|i| b.residual_h(i));
    w.max(h)
}

/// Steps at which min p_g dropped below -tol·p_scale.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositivityMonitor {
    pub tolerance: f64,
    pub events: Vec<(usize, f64)>,
}

impl PositivityMonitor {
    pub fn new(tolerance: f64) -> Self {
        Self { tolerance, events: Vec::new() }
    }

    pub fn observe(&mut self, pb: &Problem, rep: &StepReport) {
        if rep.min_p_g < -self.tolerance * pb.p_scale {
            self.events.push((rep.step, rep.min_p_g));
        }
    }

    pub fn ok(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Eta,
    Eps,
    /// Time step; the step count follows from the fixed end time.
    Dt,
    /// Number of retained eigenmodes.
    Modes,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<SweepAxis> {
        Some(match s {
            "eta" => SweepAxis::Eta,
            "eps" => SweepAxis::Eps,
            "dt" => SweepAxis::Dt,
            "N" | "n" | "modes" => SweepAxis::Modes,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Eta => "eta",
            SweepAxis::Eps => "eps",
            SweepAxis::Dt => "dt",
            SweepAxis::Modes => "N",
        }
    }

    pub fn apply(&self, base: &RegularizationParams, value: f64) -> RegularizationParams {
        let mut p = base.clone();
        match self {
            SweepAxis::Eta => p.eta = value,
            SweepAxis::Eps => p.eps = value,
            SweepAxis::Dt => {
                let end = base.end_time();
                p.n_steps = (end / value).round().max(1.0) as usize;
                p.dt = end / p.n_steps as f64;
            }
            SweepAxis::Modes => p.projection = Projection::Spectral(value.round().max(1.0) as usize),
        }
        p
    }
}

/// Summary of one swept run.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub final_state: Option<State>,
    pub steps_completed: usize,
    /// ∫_0^T of ‖∇p‖², ‖∇β(S)‖², ‖∇u‖², η‖∇(p_g-p_l)‖².
    pub norm_integrals: [f64; 4],
    pub max_mass_defect: f64,
    pub energy_ok: bool,
    pub min_p_g: f64,
    pub error: Option<String>,
}

/// Runs one simulation per value in parallel. A full basis computed once
/// is truncated for the N axis.
pub fn sweep(pb: &Problem, base: &RegularizationParams, axis: SweepAxis, values: &[f64], init: &State) -> Result<Vec<SweepRow>> {
    let shared: Option<EigenBasis> = match (axis, base.projection) {
        (SweepAxis::Modes, _) => {
            let n_max = values.iter().map(|v| v.round() as usize).max().unwrap_or(1).min(pb.mesh.free_nodes().len());
            Some(crate::spectral::compute_basis(&pb.mesh, &pb.quad, n_max)?)
        }
        (_, Projection::Identity) => None,
        (_, Projection::Spectral(n)) => Some(crate::spectral::compute_basis(&pb.mesh, &pb.quad, n.min(pb.mesh.free_nodes().len()))?),
        (_, Projection::SpectralFull) => {
            Some(crate::spectral::compute_basis(&pb.mesh, &pb.quad, pb.mesh.free_nodes().len())?)
        }
    };
    let rows = values
        .par_iter()
        .map(|&v| {
            let params = axis.apply(base, v);
            let basis = match (&shared, axis) {
                (Some(b), SweepAxis::Modes) => Some(b.truncated(v.round().max(1.0) as usize)),
                (b, _) => b.clone(),
            };
            run_row(pb, params, basis, init, v)
        })
        .collect();
    Ok(rows)
}

fn run_row(pb: &Problem, params: RegularizationParams, basis: Option<EigenBasis>, init: &State, value: f64) -> SweepRow {
    let mut row = SweepRow {
        value,
        final_state: None,
        steps_completed: 0,
        norm_integrals: [0.0; 4],
        max_mass_defect: 0.0,
        energy_ok: true,
        min_p_g: f64::INFINITY,
        error: None,
    };
    let sim = match Simulation::with_basis(pb, params, basis) {
        Ok(s) => s,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    match sim.run(init.clone()) {
        Ok(out) => {
            for r in &out.reports {
                for k in 0..4 {
                    row.norm_integrals[k] += r.energy.norm_integrals[k];
                }
                row.max_mass_defect = row.max_mass_defect.max(r.mass.defect);
                row.energy_ok &= r.energy.satisfied;
                row.min_p_g = row.min_p_g.min(r.min_p_g);
            }
            row.steps_completed = out.reports.len();
            if let Some(f) = out.failure {
                row.error = Some(f.to_string());
            }
            row.final_state = out.states.last().cloned();
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// ‖x_{k+1} - x_k‖ for consecutive final states of a sweep, in the norm of
/// the problem (both fields).
pub fn successive_differences(pb: &Problem, states: &[&State]) -> Vec<f64> {
    states
        .windows(2)
        .map(|w| {
            let dl: Vec<f64> = w[0].p_l.values.iter().zip(&w[1].p_l.values).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = w[0].p_g.values.iter().zip(&w[1].p_g.values).map(|(a, b)| a - b).collect();
            (pb.norm_sq(&dl) + pb.norm_sq(&dg)).sqrt()
        })
        .collect()
}

/// max/min of each time-integrated norm over the rows; None for a norm
/// that vanishes in every row, infinity when it vanishes in some rows only.
pub fn norm_ratios(rows: &[SweepRow]) -> [Option<f64>; 4] {
    let mut out = [None; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let max = rows.iter().map(|r| r.norm_integrals[k]).fold(0.0f64, f64::max);
        let min = rows.iter().map(|r| r.norm_integrals[k]).fold(f64::INFINITY, f64::min);
        if max > 0.0 {
            *o = Some(if min > 0.0 { max / min } else { f64::INFINITY });
        }
    }
    out
}

/// True when every difference is below its predecessor.
pub fn cauchy_decreasing(diffs: &[f64]) -> bool {
    diffs.windows(2).all(|w| w[1] < w[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{ConstitutiveSet, FluidProps, RockFluidParams, ScalarField, TensorField};
    use crate::expr::smoothstep;
    use crate::mesh::Side;
    use crate::solver::{build_tables, SourceTerms};
    use proptest::prelude::*;

    fn problem(mesh: Mesh, g: [f64; 2]) -> Problem {
        let set = ConstitutiveSet::default_family(1.0, 0.1, 1.0, 1.0, 2.0);
        let rock = RockFluidParams {
            porosity: ScalarField::Constant(0.2),
            permeability: TensorField::isotropic(ScalarField::Constant(1.0)),
            diffusion: ScalarField::Constant(0.5),
            fluid: FluidProps { mu_l: 1.0, mu_g: 0.5, rho_l_std: 1.0 },
            gravity: g,
        };
        let tables = build_tables(&set, &rock).unwrap();
        Problem::new(mesh, set, rock, tables, SourceTerms::default(), 1.0).unwrap()
    }

    fn column(n: usize) -> Problem {
        problem(Mesh::build_interval(1.0, n, &[Side::Left]).unwrap(), [0.0, 0.0])
    }

    fn cap(pb: &Problem, amp: f64) -> State {
        let pg = pb.mesh.nodes.iter().map(|p| amp * smoothstep(0.5, 1.0, p[0])).collect();
        State::new(&pb.mesh, vec![0.0; pb.mesh.node_count()], pg, 0.0).unwrap()
    }

    fn params(dt: f64, n_steps: usize) -> RegularizationParams {
        RegularizationParams { dt, n_steps, ..Default::default() }
    }

    #[test]
    fn zero_state_ledger_is_zero() {
        let pb = column(10);
        let out = Simulation::new(&pb, params(0.1, 3)).unwrap().run(State::zeros(&pb.mesh)).unwrap();
        for r in &out.reports {
            let m = &r.mass;
            assert_eq!([m.water_change, m.gas_change, m.water_source, m.gas_outflow, m.defect, m.gas_mass], [0.0; 6]);
            assert!((m.water_mass - 0.2).abs() < 1e-14);
            assert_eq!(r.energy.dissipation, [0.0; 5]);
            assert!(r.energy.satisfied);
        }
    }

    #[test]
    fn hydrostatic_equilibrium_conserves_masses() {
        let mesh = Mesh::build_rectangle(1.0, 1.0, 6, 6, &[Side::Top]).unwrap();
        let pb = problem(mesh, [0.0, -1.0]);
        let pl = pb.mesh.nodes.iter().map(|p| 1.0 - p[1]).collect();
        let init = State::new(&pb.mesh, pl, vec![0.0; pb.mesh.node_count()], 0.0).unwrap();
        let (w0, g0) = masses(&pb, &init);
        let p = RegularizationParams { eta: 0.0, ..params(0.2, 5) };
        let eps = p.eps;
        let out = Simulation::new(&pb, p).unwrap().run(init.clone()).unwrap();
        assert!(out.failure.is_none());
        for r in &out.reports {
            assert!((r.mass.water_mass - w0).abs() <= 1e-10 * w0);
            assert!((r.mass.gas_mass - g0).abs() <= 1e-12);
            assert!(r.mass.water_outflow.abs() <= 1e-10);
        }
        // K(λ_l + ε) against Kλ_l ρ g tilts the column by O(ε); after that it is steady.
        let (first, last) = (&out.states[1], out.states.last().unwrap());
        for ((a, b), c) in last.p_l.values.iter().zip(&first.p_l.values).zip(&init.p_l.values) {
            assert!((a - b).abs() < 1e-12, "{a} {b}");
            assert!((a - c).abs() <= 10.0 * eps, "{a} {c}");
        }
    }

    #[test]
    fn defect_tightens_with_picard_tolerance() {
        let pb = column(30);
        let worst = |tol: f64| {
            let p = RegularizationParams { picard_tol: tol, ..params(0.2, 20) };
            let out = Simulation::new(&pb, p).unwrap().run(cap(&pb, 0.2)).unwrap();
            assert!(out.failure.is_none());
            out.reports.iter().map(|r| r.mass.defect).fold(0.0, f64::max)
        };
        let (loose, tight) = (worst(1e-5), worst(1e-9));
        assert!(loose <= 1e-4 && tight <= 1e-8, "{loose:e} {tight:e}");
        assert!(tight < loose, "{loose:e} {tight:e}");
    }

    #[test]
    fn dissolution_ledger_balances() {
        let pb = column(30);
        let out = Simulation::new(&pb, params(0.2, 20)).unwrap().run(cap(&pb, 0.2)).unwrap();
        let mut prev = masses(&pb, &out.states[0]);
        for r in &out.reports {
            let m = &r.mass;
            // No sources: all change leaves through Γ_D.
            assert!((m.water_change + m.water_outflow).abs() <= 1e-7 * (m.water_change.abs() + 1e-12));
            assert!((m.gas_change + m.gas_outflow).abs() <= 1e-7 * (m.gas_change.abs() + 1e-12));
            assert!(m.gas_mass <= prev.1 * (1.0 + 1e-12));
            prev = (m.water_mass, m.gas_mass);
        }
    }

    #[test]
    fn positivity_monitor_flags_negative_pressure() {
        let pb = column(10);
        let out = Simulation::new(&pb, params(0.1, 2)).unwrap().run(cap(&pb, 0.2)).unwrap();
        let mut mon = PositivityMonitor::new(1e-8);
        for r in &out.reports {
            mon.observe(&pb, r);
        }
        assert!(mon.ok());
        let mut bad = out.reports[1].clone();
        bad.min_p_g = -1e-6;
        mon.observe(&pb, &bad);
        assert_eq!(mon.events, vec![(2, -1e-6)]);
    }

    #[test]
    fn axis_parsing_and_application() {
        assert_eq!(SweepAxis::parse("N"), Some(SweepAxis::Modes));
        assert_eq!(SweepAxis::parse("dt"), Some(SweepAxis::Dt));
        assert_eq!(SweepAxis::parse("rho"), None);
        let base = params(0.2, 100);
        let p = SweepAxis::Dt.apply(&base, 0.8);
        assert_eq!((p.n_steps, p.dt), (25, 0.8));
        assert_eq!(SweepAxis::Modes.apply(&base, 16.0).projection, Projection::Spectral(16));
        assert_eq!(SweepAxis::Eta.apply(&base, 1e-3).eta, 1e-3);
    }

    fn row(n: [f64; 4]) -> SweepRow {
        SweepRow {
            value: 0.0,
            final_state: None,
            steps_completed: 1,
            norm_integrals: n,
            max_mass_defect: 0.0,
            energy_ok: true,
            min_p_g: 0.0,
            error: None,
        }
    }

    #[test]
    fn ratios_and_cauchy() {
        let rows = [row([1.0, 0.0, 2.0, 0.0]), row([4.0, 0.0, 1.0, 3.0])];
        assert_eq!(norm_ratios(&rows), [Some(4.0), None, Some(2.0), Some(f64::INFINITY)]);
        assert!(cauchy_decreasing(&[3.0, 1.0, 0.5]));
        assert!(!cauchy_decreasing(&[3.0, 3.0]));
        let pb = column(4);
        let a = State::zeros(&pb.mesh);
        let b = cap(&pb, 0.5);
        let d = successive_differences(&pb, &[&a, &b, &b]);
        assert_eq!(d[1], 0.0);
        assert!((d[0] - pb.norm_sq(&b.p_g.values).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn dissipation_nonnegative_and_energy_holds(amp in 0.01f64..0.5, lo in 0.0f64..0.6, g in -1.0f64..1.0) {
            let pb = problem(Mesh::build_interval(1.0, 16, &[Side::Left]).unwrap(), [g, 0.0]);
            let pg: Vec<f64> = pb.mesh.nodes.iter().map(|p| amp * smoothstep(lo, lo + 0.4, p[0])).collect();
            let init = State::new(&pb.mesh, vec![0.0; 17], pg, 0.0).unwrap();
            let out = Simulation::new(&pb, params(0.1, 3)).unwrap().run(init).unwrap();
            prop_assert!(out.failure.is_none());
            for r in &out.reports {
                prop_assert!(r.energy.dissipation.iter().all(|&d| d >= 0.0));
                prop_assert!(r.energy.satisfied, "slack {}", r.energy.slack);
                prop_assert!(r.mass.defect <= 1e-7);
            }
        }

        #[test]
        fn dt_axis_keeps_end_time(end in 0.5f64..50.0, k in 1usize..400) {
            let base = params(end / 100.0, 100);
            let p = SweepAxis::Dt.apply(&base, end / k as f64);
            prop_assert_eq!(p.n_steps, k);
            prop_assert!((p.end_time() - end).abs() <= 1e-12 * end);
        }
    }
}
