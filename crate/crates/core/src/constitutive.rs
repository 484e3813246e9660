//! Constitutive curve families, secondary variables, the low-solubility
//! check and a numeric scan of the structural assumptions on the curves.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::global_pressure::GlobalPressureTables;
use crate::numerics;

pub const S_MIN_DEFAULT: f64 = 1e-12;

/// Fraction of the cap value reached by the linear or power branch before
/// the exponential approach to the cap takes over.
const CAP_KNEE: f64 = 0.95;
const CAP_BAND: f64 = 1.0 - CAP_KNEE;

#[derive(Debug, Clone, PartialEq)]
pub enum CapillaryFamily {
    Linear { p_e: f64 },
    BrooksCorey { p_e: f64, lambda: f64 },
}

/// Result of inverting the capillary law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub s: f64,
    /// dS/dσ; zero in the one-phase region and on clamped values.
    pub ds_dsigma: f64,
    pub clamped: bool,
}

impl CapillaryFamily {
    fn check_s(s: f64) -> Result<()> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Domain(format!("capillary pressure needs S in (0, 1], got {s}")));
        }
        Ok(())
    }

    /// p_c(S) and p_c'(S).
    pub fn eval(&self, s: f64) -> Result<(f64, f64)> {
        Self::check_s(s)?;
        Ok(self.eval_unchecked(s))
    }

    pub(crate) fn eval_unchecked(&self, s: f64) -> (f64, f64) {
        match *self {
            CapillaryFamily::Linear { p_e } => (p_e * (1.0 - s), -p_e),
            CapillaryFamily::BrooksCorey { p_e, lambda } => {
                let a = s.powf(-1.0 / lambda);
                (p_e * (a - 1.0), -p_e / lambda * a / s)
            }
        }
    }

    /// p_c^{-1}(σ), extended by 1 for σ ≤ 0 and floored at `s_min`.
    pub fn inverse(&self, sigma: f64, s_min: f64) -> Inversion {
        if sigma <= 0.0 || sigma.is_nan() {
            return Inversion { s: 1.0, ds_dsigma: 0.0, clamped: false };
        }
        let (s, ds) = match *self {
            CapillaryFamily::Linear { p_e } => (1.0 - sigma / p_e, -1.0 / p_e),
            CapillaryFamily::BrooksCorey { p_e, lambda } => {
                let base = 1.0 + sigma / p_e;
                let s = base.powf(-lambda);
                (s, -lambda / p_e * s / base)
            }
        };
        if s < s_min || !s.is_finite() {
            Inversion { s: s_min, ds_dsigma: 0.0, clamped: true }
        } else {
            Inversion { s, ds_dsigma: ds, clamped: false }
        }
    }

    /// ∫_0^S p_c(s) ds, or `None` when it diverges.
    pub fn integral(&self, s: f64) -> Option<f64> {
        let s = s.clamp(0.0, 1.0);
        match *self {
            CapillaryFamily::Linear { p_e } => Some(p_e * (s - 0.5 * s * s)),
            CapillaryFamily::BrooksCorey { p_e, lambda } => {
                if lambda <= 1.0 {
                    return None;
                }
                let k = 1.0 - 1.0 / lambda;
                Some(p_e * (s.powf(k) / k - s))
            }
        }
    }

    /// M_{p_c} = ∫_0^1 p_c.
    pub fn total_integral(&self) -> Option<f64> {
        self.integral(1.0)
    }

    pub fn entry_pressure(&self) -> f64 {
        match *self {
            CapillaryFamily::Linear { p_e } | CapillaryFamily::BrooksCorey { p_e, .. } => p_e,
        }
    }

    /// Largest capillary pressure reachable without clamping.
    pub fn sigma_max(&self, s_min: f64) -> f64 {
        self.eval_unchecked(s_min).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RelPermFamily {
    Quadratic,
    /// kr_l = S^n_l + f·S, kr_g = (1-S)^n_g + f·(1-S).
    Power { n_l: f64, n_g: f64, floor: f64 },
}

impl RelPermFamily {
    pub fn eval(&self, s: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!("relative permeability needs S in [0, 1], got {s}")));
        }
        Ok(self.eval_unchecked(s))
    }

    pub(crate) fn eval_unchecked(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, 1.0);
        let g = 1.0 - s;
        match *self {
            RelPermFamily::Quadratic => (s * s, g * g),
            RelPermFamily::Power { n_l, n_g, floor } => (s.powf(n_l) + floor * s, g.powf(n_g) + floor * g),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Solubility {
    HenryCapped { c_h: f64, u_max: f64, u_min: f64 },
}

impl Solubility {
    /// û(σ) and û'(σ).
    pub fn eval(&self, sigma: f64) -> (f64, f64) {
        match *self {
            Solubility::HenryCapped { c_h, u_max, u_min } => {
                if sigma < 0.0 {
                    let e = (c_h * sigma / u_min).exp();
                    return (u_min * (c_h * sigma / u_min).exp_m1(), c_h * e);
                }
                let knee = CAP_KNEE * u_max / c_h;
                if sigma <= knee {
                    return (c_h * sigma, c_h);
                }
                let w = CAP_BAND * u_max / c_h;
                let e = (-(sigma - knee) / w).exp();
                (u_max - c_h * w * e, c_h * e)
            }
        }
    }

    pub fn u_max(&self) -> f64 {
        match *self {
            Solubility::HenryCapped { u_max, .. } => u_max,
        }
    }

    pub fn u_min(&self) -> f64 {
        match *self {
            Solubility::HenryCapped { u_min, .. } => u_min,
        }
    }

    /// sup û'.
    pub fn derivative_bound(&self) -> f64 {
        match *self {
            Solubility::HenryCapped { c_h, .. } => c_h,
        }
    }

    /// Pressure at which the cap transition begins.
    pub fn knee(&self) -> f64 {
        match *self {
            Solubility::HenryCapped { c_h, u_max, .. } => CAP_KNEE * u_max / c_h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GasDensity {
    LinearCapped { c_v: f64, rho_max: f64 },
    PowerCapped { c_v: f64, theta: f64, rho_max: f64 },
}

impl GasDensity {
    /// ρ̂_g(σ) and ρ̂_g'(σ).
    pub fn eval(&self, sigma: f64) -> (f64, f64) {
        if sigma <= 0.0 {
            return (0.0, 0.0);
        }
        let rho_max = self.rho_max();
        let knee = self.knee();
        if sigma <= knee {
            return match *self {
                GasDensity::LinearCapped { c_v, .. } => (c_v * sigma, c_v),
                GasDensity::PowerCapped { c_v, theta, .. } => {
                    let v = c_v * sigma.powf(theta);
                    (v, theta * v / sigma)
                }
            };
        }
        let amp = CAP_BAND * rho_max;
        let w = amp / self.knee_slope();
        let e = (-(sigma - knee) / w).exp();
        (rho_max - amp * e, amp / w * e)
    }

    pub fn rho_max(&self) -> f64 {
        match *self {
            GasDensity::LinearCapped { rho_max, .. } | GasDensity::PowerCapped { rho_max, .. } => rho_max,
        }
    }

    pub fn knee(&self) -> f64 {
        match *self {
            GasDensity::LinearCapped { c_v, rho_max } => CAP_KNEE * rho_max / c_v,
            GasDensity::PowerCapped { c_v, theta, rho_max } => (CAP_KNEE * rho_max / c_v).powf(1.0 / theta),
        }
    }

    fn knee_slope(&self) -> f64 {
        match *self {
            GasDensity::LinearCapped { c_v, .. } => c_v,
            GasDensity::PowerCapped { c_v, theta, .. } => c_v * theta * self.knee().powf(theta - 1.0),
        }
    }

    /// True when ∫_0 dσ/ρ̂_g converges.
    pub fn integrable_at_zero(&self) -> bool {
        matches!(self, GasDensity::PowerCapped { theta, .. } if *theta < 1.0)
    }

    /// σ with ρ̂_g(σ) = target, for 0 < target < ρ_M.
    pub fn inverse(&self, target: f64) -> f64 {
        let mut hi = self.knee().max(1e-300);
        while self.eval(hi).0 < target && hi < f64::MAX / 4.0 {
            hi *= 2.0;
        }
        numerics::bisect(|s| self.eval(s).0 - target, 0.0, hi, 0.0)
    }
}

/// Bundle of curve families and the structural constants that go with them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstitutiveSet {
    pub capillary: CapillaryFamily,
    pub relperm: RelPermFamily,
    pub solubility: Solubility,
    pub gas_density: GasDensity,
    /// Lower constant in a_l S² ≤ kr_l(S).
    pub a_l: f64,
    /// Lower bound for kr_l + kr_g.
    pub kr_m: f64,
    /// Lower bound for |p_c'|.
    pub m_0: f64,
    /// Solubility derivative bound; defaults to sup û' when unset.
    pub m_g: Option<f64>,
    pub s_min: f64,
}

impl ConstitutiveSet {
    /// Linear p_c, quadratic kr, capped Henry law and capped ideal gas.
    pub fn default_family(p_e: f64, c_h: f64, u_max: f64, c_v: f64, rho_max: f64) -> Self {
        Self {
            capillary: CapillaryFamily::Linear { p_e },
            relperm: RelPermFamily::Quadratic,
            solubility: Solubility::HenryCapped { c_h, u_max, u_min: 0.1 * u_max },
            gas_density: GasDensity::LinearCapped { c_v, rho_max },
            a_l: 1.0,
            kr_m: 0.5,
            m_0: p_e,
            m_g: None,
            s_min: S_MIN_DEFAULT,
        }
    }

    pub fn m_g(&self) -> f64 {
        self.m_g.unwrap_or_else(|| self.solubility.derivative_bound())
    }

    pub fn eval_capillary(&self, s: f64) -> Result<(f64, f64)> {
        self.capillary.eval(s)
    }

    pub fn inv_capillary(&self, sigma: f64) -> Inversion {
        self.capillary.inverse(sigma, self.s_min)
    }

    pub fn rel_perm(&self, s: f64) -> Result<(f64, f64)> {
        self.relperm.eval(s)
    }

    pub fn henry_u(&self, p_g: f64) -> (f64, f64) {
        self.solubility.eval(p_g)
    }

    pub fn gas_density(&self, p_g: f64) -> (f64, f64) {
        self.gas_density.eval(p_g)
    }

    /// Phase mobilities (λ_l, λ_g) at S.
    pub fn mobilities(&self, s: f64, fluid: &FluidProps) -> (f64, f64) {
        let (kl, kg) = self.relperm.eval_unchecked(s);
        (kl / fluid.mu_l, kg / fluid.mu_g)
    }

    /// z = min over [0, 1] of kr_g(S) + S.
    pub fn z_min(&self) -> f64 {
        let n = 10_000;
        let f = |s: f64| self.relperm.eval_unchecked(s).1 + s;
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for i in 0..=n {
            let s = i as f64 / n as f64;
            let v = f(s);
            if v < best {
                best = v;
                arg = s;
            }
        }
        // Golden-section polish inside the bracketing cell.
        let (mut a, mut b) = ((arg - 1.0 / n as f64).max(0.0), (arg + 1.0 / n as f64).min(1.0));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        best.min(f(0.5 * (a + b)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidProps {
    pub mu_l: f64,
    pub mu_g: f64,
    pub rho_l_std: f64,
}

/// A scalar coefficient given either as a constant or as an expression of
/// position.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarField {
    Constant(f64),
    Expr(Expr),
}

impl ScalarField {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            ScalarField::Constant(v) => *v,
            ScalarField::Expr(e) => e.eval(x, y, 0.0),
        }
    }
}

/// Symmetric 2x2 permeability tensor field; in 1D only `xx` is used.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub xx: ScalarField,
    pub yy: ScalarField,
    pub xy: ScalarField,
}

impl TensorField {
    pub fn isotropic(v: ScalarField) -> Self {
        Self { xx: v.clone(), yy: v, xy: ScalarField::Constant(0.0) }
    }

    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        [self.xx.eval(x, y), self.yy.eval(x, y), self.xy.eval(x, y)]
    }
}

/// Eigenvalues of a symmetric 2x2 tensor stored as [xx, yy, xy].
pub fn tensor_eigenvalues(k: [f64; 3]) -> (f64, f64) {
    let m = 0.5 * (k[0] + k[1]);
    let r = (0.25 * (k[0] - k[1]).powi(2) + k[2] * k[2]).sqrt();
    (m - r, m + r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RockFluidParams {
    pub porosity: ScalarField,
    pub permeability: TensorField,
    pub diffusion: ScalarField,
    pub fluid: FluidProps,
    pub gravity: [f64; 2],
}

/// Extremes of the rock fields sampled over a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RockBounds {
    pub phi_min: f64,
    pub phi_max: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub d_min: f64,
    pub phi_d_max: f64,
}

impl RockFluidParams {
    pub fn bounds(&self, points: &[[f64; 2]], dim: usize) -> RockBounds {
        let mut b = RockBounds {
            phi_min: f64::INFINITY,
            phi_max: f64::NEG_INFINITY,
            k_min: f64::INFINITY,
            k_max: f64::NEG_INFINITY,
            d_min: f64::INFINITY,
            phi_d_max: f64::NEG_INFINITY,
        };
        for p in points {
            let phi = self.porosity.eval(p[0], p[1]);
            let d = self.diffusion.eval(p[0], p[1]);
            let k = self.permeability.eval(p[0], p[1]);
            let (lo, hi) = if dim == 1 { (k[0], k[0]) } else { tensor_eigenvalues(k) };
            b.phi_min = b.phi_min.min(phi);
            b.phi_max = b.phi_max.max(phi);
            b.k_min = b.k_min.min(lo);
            b.k_max = b.k_max.max(hi);
            b.d_min = b.d_min.min(d);
            b.phi_d_max = b.phi_d_max.max(phi * d);
        }
        b
    }
}

/// Structural checks on the rock fields (porosity bounds, positive definite
/// permeability, positive diffusion).
pub fn validate_rock(rock: &RockFluidParams, points: &[[f64; 2]], dim: usize) -> Vec<Violation> {
    let b = rock.bounds(points, dim);
    let mut out = Vec::new();
    if !(b.phi_min > 0.0) {
        out.push(Violation::new("H1", "porosity must be bounded below by a positive constant", b.phi_min, 0.0));
    }
    if !(b.phi_max <= 1.0) {
        out.push(Violation::new("H1", "porosity must not exceed 1", b.phi_max, 1.0));
    }
    if !(b.d_min > 0.0) {
        out.push(Violation::new("H1", "diffusion coefficient must be positive", b.d_min, 0.0));
    }
    if !(b.k_min > 0.0) {
        out.push(Violation::new("H2", "permeability must be uniformly positive definite", b.k_min, 0.0));
    }
    let f = rock.fluid;
    if !(f.mu_l > 0.0 && f.mu_g > 0.0 && f.rho_l_std > 0.0) {
        out.push(Violation::new("H2", "viscosities and reference density must be positive", f.mu_l.min(f.mu_g).min(f.rho_l_std), 0.0));
    }
    out
}

/// Secondary quantities at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSecondary {
    pub s: f64,
    pub ds_dsigma: f64,
    pub clamped: bool,
    pub u: f64,
    pub du: f64,
    pub rho_g: f64,
    pub drho_g: f64,
    pub rho_l: f64,
}

pub fn secondary_point(set: &ConstitutiveSet, rho_l_std: f64, p_l: f64, p_g: f64) -> PointSecondary {
    let inv = set.inv_capillary(p_g - p_l);
    let (u, du) = set.henry_u(p_g);
    let (rho_g, drho_g) = set.gas_density(p_g);
    PointSecondary {
        s: inv.s,
        ds_dsigma: inv.ds_dsigma,
        clamped: inv.clamped,
        u,
        du,
        rho_g,
        drho_g,
        rho_l: rho_l_std + u,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryState {
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub rho_g: Vec<f64>,
    pub rho_l: Vec<f64>,
    pub p: Vec<f64>,
    pub beta_s: Vec<f64>,
    pub clamp_events: usize,
}

/// Nodal secondary variables; global pressure and β come from the tables.
pub fn secondary(
    set: &ConstitutiveSet,
    fluid: &FluidProps,
    tables: &GlobalPressureTables,
    p_l: &[f64],
    p_g: &[f64],
) -> SecondaryState {
    assert_eq!(p_l.len(), p_g.len(), "fields must live on the same mesh");
    let n = p_l.len();
    let mut out = SecondaryState {
        s: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        rho_g: Vec::with_capacity(n),
        rho_l: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
        beta_s: Vec::with_capacity(n),
        clamp_events: 0,
    };
    for i in 0..n {
        let sp = secondary_point(set, fluid.rho_l_std, p_l[i], p_g[i]);
        out.clamp_events += sp.clamped as usize;
        out.s.push(sp.s);
        out.u.push(sp.u);
        out.rho_g.push(sp.rho_g);
        out.rho_l.push(sp.rho_l);
        out.beta_s.push(tables.beta(sp.s));
    }
    out.p = crate::global_pressure::global_pressure(tables, p_l, &out.s);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolubilityReport {
    pub z: f64,
    pub c_d: f64,
    /// ΦD / (ρ_l^std k_m / μ_l).
    pub prefactor: f64,
    /// ρ_M / (ρ_l^std a_l z).
    pub density_branch: f64,
    /// √(μ_g/μ_l) / √(a_l z).
    pub viscosity_branch: f64,
    pub required_bound: f64,
    pub one_over_mg: f64,
    pub pass: bool,
}

/// Evaluates the low-solubility condition with worst-case rock values.
pub fn low_solubility_check(
    rock: &RockBounds,
    fluid: &FluidProps,
    set: &ConstitutiveSet,
    z_override: Option<f64>,
) -> Result<SolubilityReport> {
    let z = z_override.unwrap_or_else(|| set.z_min());
    if !(z > 0.0) {
        return Err(Error::config(format!("solubility check needs z > 0, got {z}")));
    }
    let rho = fluid.rho_l_std;
    let phi_d = rock.phi_d_max;
    let k_m = rock.k_min;
    let prefactor = phi_d / (rho * k_m / fluid.mu_l);
    let density_branch = set.gas_density.rho_max() / (rho * set.a_l * z);
    let viscosity_branch = (fluid.mu_g / fluid.mu_l).sqrt() / (set.a_l * z).sqrt();
    let required_bound = prefactor * density_branch.max(viscosity_branch);
    let one_over_mg = 1.0 / set.m_g();
    let c_d = phi_d * phi_d * fluid.mu_l / (rho * rho * k_m * set.a_l);
    Ok(SolubilityReport {
        z,
        c_d,
        prefactor,
        density_branch,
        viscosity_branch,
        required_bound,
        one_over_mg,
        pass: required_bound < one_over_mg,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub assumption_id: String,
    pub description: String,
    pub measured_value: f64,
    pub bound: f64,
}

impl Violation {
    fn new(id: &str, description: &str, measured_value: f64, bound: f64) -> Self {
        Self { assumption_id: id.into(), description: description.into(), measured_value, bound }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Fitted Hölder exponent of β^{-1}; informational.
    pub holder_beta_inverse: Option<f64>,
    /// Fitted Hölder exponent of (1-S)P̂(S); informational.
    pub holder_one_minus_s_phat: Option<f64>,
}

/// Least-squares slope of log ω(h) against log h, with ω the modulus of
/// continuity of the samples over dyadic shifts.
pub fn holder_fit(values: &[f64]) -> Option<f64> {
    let n = values.len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut shift = 1;
    while shift < n / 2 {
        let omega = (0..n - shift).map(|i| (values[i + shift] - values[i]).abs()).fold(0.0, f64::max);
        if omega > 0.0 {
            xs.push((shift as f64 / (n - 1) as f64).ln());
            ys.push(omega.ln());
        }
        shift *= 2;
    }
    if xs.len() < 2 {
        return None;
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// α(S) = -γ(S) p_c'(S), γ = √(λ_l λ_g / λ).
pub fn alpha(set: &ConstitutiveSet, fluid: &FluidProps, s: f64) -> f64 {
    // Below 1e-150 the singular factors overflow separately although
    // their product stays integrable; the neglected mass is negligible.
    let s = s.max(1e-150);
    let (ll, lg) = set.mobilities(s, fluid);
    let lam = ll + lg;
    let gamma = if lam > 0.0 { (ll * lg / lam).sqrt() } else { 0.0 };
    let dpc = set.capillary.eval_unchecked(s).1;
    let a = -gamma * dpc;
    if a.is_nan() {
        0.0
    } else {
        a
    }
}

/// Numeric scan of the curve assumptions on a uniform S grid.
pub fn validate_assumptions(set: &ConstitutiveSet, fluid: &FluidProps, grid_resolution: usize) -> Result<ValidationReport> {
    if grid_resolution < 100 {
        return Err(Error::Domain(format!("validator needs at least 100 grid points, got {grid_resolution}")));
    }
    let n = grid_resolution;
    let grid: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let mut v = Vec::new();
    let tiny = 1e-12;

    // Relative permeabilities.
    let kr: Vec<(f64, f64)> = grid.iter().map(|&s| set.relperm.eval_unchecked(s)).collect();
    if kr[0].0.abs() > tiny || kr[n].1.abs() > tiny {
        v.push(Violation::new("H3", "kr_l(0) and kr_g(1) must vanish", kr[0].0.abs().max(kr[n].1.abs()), 0.0));
    }
    let mut worst_mono = 0.0f64;
    for i in 0..n {
        worst_mono = worst_mono.max(kr[i].0 - kr[i + 1].0).max(kr[i + 1].1 - kr[i].1);
    }
    if worst_mono > tiny {
        v.push(Violation::new("H3", "kr_l nondecreasing and kr_g nonincreasing", worst_mono, 0.0));
    }
    let min_sum = kr.iter().map(|k| k.0 + k.1).fold(f64::INFINITY, f64::min);
    if min_sum < set.kr_m * (1.0 - 1e-12) {
        v.push(Violation::new("H3", "kr_l + kr_g must stay above kr_m", min_sum, set.kr_m));
    }
    let worst_al = grid
        .iter()
        .zip(&kr)
        .map(|(&s, k)| set.a_l * s * s - k.0)
        .fold(f64::NEG_INFINITY, f64::max);
    if worst_al > tiny {
        v.push(Violation::new("H3", "a_l S^2 must not exceed kr_l", worst_al, 0.0));
    }

    // Capillary pressure on (0, 1].
    let (pc1, _) = set.capillary.eval_unchecked(1.0);
    if pc1.abs() > tiny * set.capillary.entry_pressure() {
        v.push(Violation::new("H4", "p_c(1) must vanish", pc1, 0.0));
    }
    let min_slope = grid[1..]
        .iter()
        .map(|&s| -set.capillary.eval_unchecked(s).1)
        .fold(f64::INFINITY, f64::min);
    if min_slope < set.m_0 * (1.0 - 1e-12) {
        v.push(Violation::new("H4", "p_c' must stay below -M_0", -min_slope, -set.m_0));
    }
    let pc_int = numerics::integrate(|s| set.capillary.eval_unchecked(s).0, 0.0, 1.0, 1e-10, 1e-10, 4000);
    if !pc_int.converged {
        v.push(Violation::new("H4", "integral of p_c over (0, 1) must be finite", pc_int.value, f64::INFINITY));
    }

    // Solubility on a pressure range reaching well past the cap.
    let sol = &set.solubility;
    let p_top = 2.0 * sol.knee();
    let pg: Vec<f64> = (0..=n).map(|i| p_top * i as f64 / n as f64).collect();
    if sol.eval(0.0).0.abs() > 0.0 {
        v.push(Violation::new("H5", "u(0) must vanish", sol.eval(0.0).0, 0.0));
    }
    let mut u_prev = f64::NEG_INFINITY;
    let mut u_ok = true;
    let mut u_sup = 0.0f64;
    let mut du_sup = 0.0f64;
    let mut du_inf = f64::INFINITY;
    for &p in &pg {
        let (u, du) = sol.eval(p);
        u_ok &= u > u_prev;
        u_prev = u;
        u_sup = u_sup.max(u.abs());
        du_sup = du_sup.max(du);
        du_inf = du_inf.min(du);
    }
    if !u_ok || du_inf <= 0.0 {
        v.push(Violation::new("H5", "u must be strictly increasing", du_inf, 0.0));
    }
    if u_sup > sol.u_max() {
        v.push(Violation::new("H5", "|u| must stay below u_max", u_sup, sol.u_max()));
    }
    if du_sup > set.m_g() * (1.0 + 1e-12) {
        v.push(Violation::new("H5", "u' must stay below M_g", du_sup, set.m_g()));
    }
    let u_min_bound = fluid.rho_l_std * (1.0 - 1.0 / 2f64.sqrt());
    if sol.u_min() > u_min_bound || sol.u_min() <= 0.0 {
        v.push(Violation::new("H5", "extension bound u_min must lie in (0, rho_std(1 - 1/sqrt 2)]", sol.u_min(), u_min_bound));
    }
    let neg_inf = sol.eval(-1e3 * sol.knee()).0;
    if neg_inf < -sol.u_min() {
        v.push(Violation::new("H5", "negative-pressure extension must stay above -u_min", neg_inf, -sol.u_min()));
    }

    // Gas density.
    let gd = &set.gas_density;
    let p_top = 2.0 * gd.knee();
    let mut r_prev = 0.0;
    let mut r_ok = gd.eval(0.0).0 == 0.0 && gd.eval(-1.0).0 == 0.0;
    let mut r_sup = 0.0f64;
    for i in 1..=n {
        let p = p_top * i as f64 / n as f64;
        let (r, _) = gd.eval(p);
        r_ok &= r > r_prev;
        r_prev = r;
        r_sup = r_sup.max(r);
    }
    if !r_ok {
        v.push(Violation::new("H6", "gas density must vanish for p <= 0 and increase strictly", r_prev, 0.0));
    }
    if r_sup > gd.rho_max() {
        v.push(Violation::new("H6", "gas density must stay below rho_M", r_sup, gd.rho_max()));
    }
    if let GasDensity::PowerCapped { theta, .. } = gd {
        if *theta < 1.0 {
            v.push(Violation::new(
                "H6",
                "power_capped density has an unbounded derivative at 0 (integrable 1/rho traded for bounded rho')",
                f64::INFINITY,
                gd.knee_slope(),
            ));
        }
    }

    // α at the end points and inside.
    let alphas: Vec<f64> = grid.iter().map(|&s| alpha(set, fluid, s)).collect();
    let a_int = alphas[1..n].iter().cloned().fold(0.0, f64::max);
    let a_min_inside = alphas[1..n].iter().cloned().fold(f64::INFINITY, f64::min);
    // Approach to S = 0 along a dyadic sequence.
    let near_zero = (20..=40).map(|k| alpha(set, fluid, 2f64.powi(-k))).fold(0.0, f64::max);
    let a_one = alphas[n];
    let tol_a = 1e-3 * a_int.max(f64::MIN_POSITIVE);
    if near_zero > tol_a || !near_zero.is_finite() {
        v.push(Violation::new("H8", "alpha(0) must vanish", near_zero, tol_a));
    }
    if a_one.abs() > tol_a {
        v.push(Violation::new("H8", "alpha(1) must vanish", a_one, tol_a));
    }
    if !(a_min_inside > 0.0) {
        v.push(Violation::new("H8", "alpha must be positive inside (0, 1)", a_min_inside, 0.0));
    }

    // (1-S)P̂(S) bounded, plus Hölder fits.
    let (holder_beta_inverse, holder_phat) = match GlobalPressureTables::build(set, fluid, 1024.max(n.min(4096)), 1e-8) {
        Ok(t) => {
            let fphat: Vec<f64> = grid
                .iter()
                .map(|&s| (1.0 - s) * t.phat(s.max(set.s_min)))
                .collect();
            let sup = fphat.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if !sup.is_finite() {
                v.push(Violation::new("H9", "(1-S) P^(S) must be bounded", sup, f64::INFINITY));
            }
            let b1 = t.beta(1.0);
            let binv: Vec<f64> = (0..=n)
                .map(|i| t.beta_inverse(b1 * i as f64 / n as f64).unwrap_or(f64::NAN))
                .collect();
            let hb = if binv.iter().all(|x| x.is_finite()) { holder_fit(&binv) } else { None };
            (hb, holder_fit(&fphat))
        }
        Err(e) => {
            v.push(Violation::new("H8", &format!("global pressure tables could not be built: {e}"), f64::NAN, 0.0));
            (None, None)
        }
    };

    Ok(ValidationReport { violations: v, holder_beta_inverse, holder_one_minus_s_phat: holder_phat })
}
