//! Global pressure, the Kirchhoff transform β, the test functions M and N
//! with their ε-floored variants, and the energy functional.

use crate::constitutive::{alpha, ConstitutiveSet, FluidProps, GasDensity, Solubility};
use crate::error::{Error, Result};
use crate::numerics::{integrate, MonotoneTable};

/// Largest ratio between consecutive nodes in the geometric part of the grid.
const LOG_RATIO: f64 = 1.02;

/// Saturation grid: geometric from `s_min` until the cosine-clustered
/// nodes become finer than `LOG_RATIO`, cosine-clustered afterwards.
fn saturation_grid(resolution: usize, s_min: f64) -> Vec<f64> {
    let n = resolution;
    let cos_node = |i: usize| 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / n as f64).cos());
    let mut m = 1;
    while m < n / 2 && cos_node(m + 1) / cos_node(m) > LOG_RATIO {
        m += 1;
    }
    let first = cos_node(m);
    let mut g = Vec::new();
    if s_min < first {
        let steps = ((first / s_min).ln() / LOG_RATIO.ln()).ceil() as usize;
        let (a, b) = (s_min.ln(), first.ln());
        for k in 0..steps {
            g.push((a + (b - a) * k as f64 / steps as f64).exp());
        }
    }
    for i in m..=n {
        let s = cos_node(i);
        if s > s_min {
            g.push(s);
        }
    }
    *g.last_mut().expect("grid non-empty") = 1.0;
    g
}

#[derive(Debug, Clone)]
pub struct GlobalPressureTables {
    pbar: MonotoneTable,
    phat: MonotoneTable,
    beta: MonotoneTable,
    pub s_min: f64,
    pub quadrature_tol: f64,
    /// Largest midpoint deviation found while verifying the tables.
    pub verified_error: f64,
}

struct Integrand<'a> {
    set: &'a ConstitutiveSet,
    fluid: &'a FluidProps,
}

impl Integrand<'_> {
    fn fractions(&self, s: f64) -> (f64, f64, f64) {
        let (ll, lg) = self.set.mobilities(s, self.fluid);
        let lam = ll + lg;
        let dpc = self.set.capillary.eval_unchecked(s).1;
        (ll / lam, lg / lam, dpc)
    }

    /// dP̄/dS = (λ_g/λ) p_c'.
    fn pbar_slope(&self, s: f64) -> f64 {
        let (_, fg, dpc) = self.fractions(s);
        fg * dpc
    }

    /// dP̂/dS = -(λ_l/λ) p_c'.
    fn phat_slope(&self, s: f64) -> f64 {
        let (fl, _, dpc) = self.fractions(s);
        -fl * dpc
    }

    fn alpha(&self, s: f64) -> f64 {
        alpha(self.set, self.fluid, s)
    }
}

fn cumulative(
    name: &str,
    grid: &[f64],
    f: &dyn Fn(f64) -> f64,
    from_top: bool,
    abs_tol: f64,
) -> Result<Vec<f64>> {
    let n = grid.len();
    let mut seg = vec![0.0; n - 1];
    for k in 0..n - 1 {
        let (a, b) = (grid[k], grid[k + 1]);
        // s = a + (b - a) t^4 tames integrable endpoint singularities at S = 0.
        let r = if a == 0.0 {
            integrate(|t: f64| 4.0 * t.powi(3) * (b - a) * f(a + (b - a) * t.powi(4)), 0.0, 1.0, abs_tol, 1e-13, 400)
        } else {
            integrate(f, a, b, abs_tol, 1e-13, 400)
        };
        if !r.converged && r.error > 10.0 * abs_tol {
            return Err(Error::Build(format!(
                "quadrature of {name} did not converge on [{:.3e}, {:.3e}] (error estimate {:.3e})",
                grid[k],
                grid[k + 1],
                r.error
            )));
        }
        seg[k] = r.value;
    }
    let mut out = vec![0.0; n];
    if from_top {
        for k in (0..n - 1).rev() {
            out[k] = out[k + 1] + seg[k];
        }
    } else {
        for k in 1..n {
            out[k] = out[k - 1] + seg[k - 1];
        }
    }
    Ok(out)
}

impl GlobalPressureTables {
    pub fn build(set: &ConstitutiveSet, fluid: &FluidProps, resolution: usize, tol: f64) -> Result<Self> {
        if resolution < 256 {
            return Err(Error::Build(format!("table resolution must be at least 256, got {resolution}")));
        }
        let ig = Integrand { set, fluid };
        let grid = saturation_grid(resolution, set.s_min);
        let scale = set.capillary.entry_pressure();
        let abs_tol = 1e-3 * tol * scale / grid.len() as f64;

        // P̄(S) = ∫_S^1 -(dP̄/dS), P̂(S) = -∫_S^1 dP̂/dS.
        let pbar_f = |s: f64| -ig.pbar_slope(s);
        let phat_f = |s: f64| ig.phat_slope(s);
        let pbar_v = cumulative("P-bar", &grid, &pbar_f, true, abs_tol)?;
        let phat_v: Vec<f64> = cumulative("P-hat", &grid, &phat_f, true, abs_tol)?.into_iter().map(|v| -v).collect();
        let mut beta_grid = Vec::with_capacity(grid.len() + 1);
        beta_grid.push(0.0);
        beta_grid.extend_from_slice(&grid);
        let alpha_f = |s: f64| ig.alpha(s);
        let beta_v = cumulative("beta", &beta_grid, &alpha_f, false, abs_tol)?;

        let pbar_d: Vec<f64> = grid.iter().map(|&s| ig.pbar_slope(s)).collect();
        let phat_d: Vec<f64> = grid.iter().map(|&s| ig.phat_slope(s)).collect();
        let beta_d: Vec<f64> = beta_grid.iter().map(|&s| if s > 0.0 { ig.alpha(s) } else { f64::NAN }).collect();

        let mut tables = Self {
            pbar: MonotoneTable::new(grid.clone(), pbar_v, pbar_d),
            phat: MonotoneTable::new(grid.clone(), phat_v, phat_d),
            beta: MonotoneTable::new(beta_grid, beta_v, beta_d),
            s_min: set.s_min,
            quadrature_tol: tol,
            verified_error: 0.0,
        };

        // Midpoint verification against direct quadrature from the nearest node.
        let mut worst = 0.0f64;
        for k in 0..grid.len() - 1 {
            let mid = 0.5 * (grid[k] + grid[k + 1]);
            let to_top = integrate(pbar_f, mid, grid[k + 1], abs_tol, 1e-13, 400).value;
            let direct_pbar = tables.pbar.y()[k + 1] + to_top;
            let to_top_h = integrate(phat_f, mid, grid[k + 1], abs_tol, 1e-13, 400).value;
            let direct_phat = tables.phat.y()[k + 1] - to_top_h;
            let from_bot = integrate(alpha_f, grid[k], mid, abs_tol, 1e-13, 400).value;
            let direct_beta = tables.beta.y()[k + 1] + from_bot;
            let e = [
                (tables.pbar(mid) - direct_pbar).abs() / direct_pbar.abs().max(scale),
                (tables.phat(mid) - direct_phat).abs() / direct_phat.abs().max(scale),
                (tables.beta(mid) - direct_beta).abs() / direct_beta.abs().max(tables.beta(1.0).max(f64::MIN_POSITIVE)),
            ];
            worst = worst.max(e[0]).max(e[1]).max(e[2]);
        }
        tables.verified_error = worst;
        if !(worst <= tol) {
            return Err(Error::Build(format!(
                "table interpolation error {worst:.3e} exceeds tolerance {tol:.3e}; raise the resolution"
            )));
        }
        Ok(tables)
    }

    /// P̄(S); S below the table floor is treated as S_min.
    pub fn pbar(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return 0.0;
        }
        self.pbar.eval(s.max(self.s_min))
    }

    pub fn phat(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return 0.0;
        }
        self.phat.eval(s.max(self.s_min))
    }

    pub fn beta(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        self.beta.eval(s.min(1.0))
    }

    pub fn beta_inverse(&self, b: f64) -> Result<f64> {
        let top = self.beta(1.0);
        if !(0.0..=top).contains(&b) {
            return Err(Error::Domain(format!("beta_inverse needs b in [0, {top}], got {b}")));
        }
        if b == 0.0 {
            return Ok(0.0);
        }
        self.beta.inverse(b).ok_or_else(|| Error::Domain(format!("beta_inverse failed for {b}")))
    }

    /// Node values of the saturation grid, for export.
    pub fn grid(&self) -> &[f64] {
        self.pbar.x()
    }

    /// The constant C of the global-pressure bounds, from the tables.
    pub fn gp_bound_constant(&self) -> f64 {
        let mut c = 0.0f64;
        for &s in self.grid() {
            let pb = self.pbar(s);
            let ph = self.phat(s);
            c = c.max(ph.abs()).max(s * pb.abs()).max((1.0 - s) * ph.abs());
        }
        c
    }
}

/// p = p_l + P̄(S) nodewise.
pub fn global_pressure(tables: &GlobalPressureTables, p_l: &[f64], s: &[f64]) -> Vec<f64> {
    p_l.iter().zip(s).map(|(&pl, &s)| pl + tables.pbar(s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpBoundsReport {
    pub constant: f64,
    /// Smallest margin over all nodes and the four inequalities.
    pub min_slack: f64,
    pub violations: usize,
    pub one_phase_nodes: usize,
}

/// Nodewise check of p_g⁺ ≤ |p|+C, |S p_l| ≤ |p|+C, |(1-S) p_g| ≤ |p|+C and
/// p_l ≤ p ≤ max(p_l, p_g).
pub fn gp_bounds_check(set: &ConstitutiveSet, tables: &GlobalPressureTables, p_l: &[f64], p_g: &[f64]) -> GpBoundsReport {
    let c = tables.gp_bound_constant();
    let mut rep = GpBoundsReport { constant: c, min_slack: f64::INFINITY, violations: 0, one_phase_nodes: 0 };
    for (&pl, &pg) in p_l.iter().zip(p_g) {
        let inv = set.inv_capillary(pg - pl);
        let s = inv.s;
        let p = pl + tables.pbar(s);
        if s == 1.0 {
            rep.one_phase_nodes += 1;
            if p != pl {
                rep.violations += 1;
            }
        }
        let scale = 1e-12 * (p.abs() + pl.abs() + pg.abs() + c);
        let rhs = p.abs() + c;
        let slacks = [
            rhs - pg.max(0.0),
            rhs - (s * pl).abs(),
            rhs - ((1.0 - s) * pg).abs(),
            p - pl,
            pl.max(pg) - p,
        ];
        for sl in slacks {
            rep.min_slack = rep.min_slack.min(sl);
            if sl < -scale {
                rep.violations += 1;
            }
        }
    }
    rep
}

/// Values needed at one quadrature point for the fundamental identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPointState {
    /// Permeability [xx, yy, xy].
    pub k: [f64; 3],
    pub p_l: f64,
    pub p_g: f64,
    pub grad_pl: [f64; 2],
    pub grad_pg: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityGradients {
    pub lambda_l: f64,
    pub lambda_g: f64,
    pub grad_p: [f64; 2],
    pub grad_beta: [f64; 2],
}

pub fn k_dot(k: &[f64; 3], a: &[f64; 2], b: &[f64; 2]) -> f64 {
    a[0] * (k[0] * b[0] + k[2] * b[1]) + a[1] * (k[2] * b[0] + k[1] * b[1])
}

/// ∇p = (λ_l ∇p_l + λ_g ∇p_g)/λ and ∇β = -γ ∇(p_g - p_l); both reduce to
/// the one-phase values when λ_g = 0.
pub fn identity_gradients(set: &ConstitutiveSet, fluid: &FluidProps, q: &QuadPointState) -> IdentityGradients {
    let inv = set.inv_capillary(q.p_g - q.p_l);
    let (ll, lg) = set.mobilities(inv.s, fluid);
    let lam = ll + lg;
    let gamma = (ll * lg / lam).sqrt();
    let mut gp = [0.0; 2];
    let mut gb = [0.0; 2];
    let active = !inv.clamped && inv.s < 1.0;
    for d in 0..2 {
        gp[d] = (ll * q.grad_pl[d] + lg * q.grad_pg[d]) / lam;
        gb[d] = if active { -gamma * (q.grad_pg[d] - q.grad_pl[d]) } else { 0.0 };
    }
    IdentityGradients { lambda_l: ll, lambda_g: lg, grad_p: gp, grad_beta: gb }
}

/// Max relative residual of λ_l K∇p_l·∇p_l + λ_g K∇p_g·∇p_g = λ K∇p·∇p + K∇β·∇β.
pub fn fundamental_identity_residual(set: &ConstitutiveSet, fluid: &FluidProps, points: &[QuadPointState]) -> f64 {
    let mut worst = 0.0f64;
    for q in points {
        let g = identity_gradients(set, fluid, q);
        let lam = g.lambda_l + g.lambda_g;
        let a = g.lambda_l * k_dot(&q.k, &q.grad_pl, &q.grad_pl);
        let b = g.lambda_g * k_dot(&q.k, &q.grad_pg, &q.grad_pg);
        let c = lam * k_dot(&q.k, &g.grad_p, &g.grad_p);
        let d = k_dot(&q.k, &g.grad_beta, &g.grad_beta);
        let scale = a.abs() + b.abs() + c.abs() + d.abs();
        if scale > 0.0 {
            worst = worst.max((a + b - c - d).abs() / scale);
        }
    }
    worst
}

/// Tabulated M^ε(p) = ∫_0^{p⁺} dσ/(ρ̂_g+ε) and N^ε(p) = ∫_0^{p⁺} û/(ρ̂_g+ε).
#[derive(Debug, Clone)]
pub struct TestFunctionTables {
    pub eps: f64,
    m: MonotoneTable,
    n: MonotoneTable,
    pub p_max: f64,
}

impl TestFunctionTables {
    /// `eps = 0` gives the unregularized M, N and needs an integrable density.
    pub fn build(set: &ConstitutiveSet, eps: f64, p_max: f64, resolution: usize) -> Result<Self> {
        let gd = &set.gas_density;
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::Domain(format!("eps must be nonnegative, got {eps}")));
        }
        if eps == 0.0 && !gd.integrable_at_zero() {
            return Err(Error::Domain(
                "unregularized M and N need the power_capped density family with theta < 1".into(),
            ));
        }
        let sol: &Solubility = &set.solubility;
        let p_max = p_max.max(4.0 * gd.knee()).max(4.0 * sol.knee().min(1e300));
        // Below this pressure the integrands are essentially flat (or purely
        // singular for eps = 0).
        let p_lo = if eps > 0.0 && eps < gd.rho_max() {
            1e-3 * gd.inverse(eps)
        } else if eps > 0.0 {
            1e-3 * gd.knee()
        } else {
            1e-12 * p_max
        };
        let npts = resolution.max(64);
        let (a, b) = (p_lo.ln(), p_max.ln());
        let mut grid = vec![0.0];
        grid.extend((0..=npts).map(|k| (a + (b - a) * k as f64 / npts as f64).exp()));
        for kink in [gd.knee(), sol.knee()] {
            if kink > p_lo && kink < p_max {
                grid.push(kink);
            }
        }
        grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
        grid.dedup();

        let fm = |s: f64| 1.0 / (gd.eval(s).0 + eps);
        let fnn = |s: f64| sol.eval(s).0 / (gd.eval(s).0 + eps);
        let mut mv = vec![0.0; grid.len()];
        let mut nv = vec![0.0; grid.len()];
        for k in 1..grid.len() {
            let (lo, hi) = (grid[k - 1], grid[k]);
            let rm = integrate(fm, lo, hi, 0.0, 1e-13, 2000);
            let rn = integrate(fnn, lo, hi, 0.0, 1e-13, 2000);
            if !(rm.value.is_finite() && rn.value.is_finite()) {
                return Err(Error::Build(format!("test-function quadrature failed on [{lo:.3e}, {hi:.3e}]")));
            }
            mv[k] = mv[k - 1] + rm.value;
            nv[k] = nv[k - 1] + rn.value;
        }
        let md: Vec<f64> = grid.iter().map(|&s| if s == 0.0 && eps == 0.0 { f64::NAN } else { fm(s) }).collect();
        let nd: Vec<f64> = grid.iter().map(|&s| if s == 0.0 && eps == 0.0 { f64::NAN } else { fnn(s) }).collect();
        Ok(Self { eps, m: MonotoneTable::new(grid.clone(), mv, md), n: MonotoneTable::new(grid, nv, nd), p_max })
    }

    /// (M^ε(p), N^ε(p)); both vanish for p ≤ 0. Beyond the table the
    /// integrands are constant to working precision and the tables are
    /// continued linearly.
    pub fn eval(&self, p: f64) -> (f64, f64) {
        if p <= 0.0 {
            return (0.0, 0.0);
        }
        (self.m.eval(p), self.n.eval(p))
    }
}

/// Ĉ_g = max(∫_0^1 dσ/ρ̂_g, 1/ρ̂_g(1)); finite only for the power_capped family.
pub fn c_hat_g(gd: &GasDensity) -> Option<f64> {
    if !gd.integrable_at_zero() {
        return None;
    }
    let r = integrate(|s| 1.0 / gd.eval(s).0, 0.0, 1.0, 1e-12, 1e-12, 4000);
    Some(r.value.max(1.0 / gd.eval(1.0).0))
}

/// Constant C of E ≤ C(|p_g| + 1): max(u_max, ρ_M + ε) Ĉ_g.
pub fn energy_upper_constant(set: &ConstitutiveSet, eps: f64) -> Option<f64> {
    c_hat_g(&set.gas_density).map(|c| set.solubility.u_max().max(set.gas_density.rho_max() + eps) * c)
}

/// E^ε(p_l, p_g) = S[û M^ε - N^ε] + (1-S)[ρ̂_g^ε M^ε - p_g] - ∫_0^S p_c.
pub fn energy_density(set: &ConstitutiveSet, tf: &TestFunctionTables, p_l: f64, p_g: f64) -> f64 {
    let s = set.inv_capillary(p_g - p_l).s;
    let (u, _) = set.henry_u(p_g);
    let (rho, _) = set.gas_density(p_g);
    let (m, n) = tf.eval(p_g);
    let pc_int = set.capillary.integral(s).unwrap_or(f64::INFINITY);
    s * (u * m - n) + (1.0 - s) * ((rho + tf.eps) * m - p_g) - pc_int
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{CapillaryFamily, RelPermFamily};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fluid() -> FluidProps {
        FluidProps { mu_l: 1e-3, mu_g: 6e-6, rho_l_std: 1e3 }
    }

    fn set() -> ConstitutiveSet {
        ConstitutiveSet::default_family(2e6, 15.3e-9, 1.0, 7.94e-7, 10.0)
    }

    fn tables() -> GlobalPressureTables {
        GlobalPressureTables::build(&set(), &fluid(), 2048, 1e-8).unwrap()
    }

    #[test]
    fn end_values_and_identity() {
        let t = tables();
        assert_eq!(t.pbar(1.0), 0.0);
        assert_eq!(t.phat(1.0), 0.0);
        assert_eq!(t.beta(0.0), 0.0);
        let s = set();
        for i in 0..1000 {
            let sv = 1e-6 + (1.0 - 1e-6) * i as f64 / 999.0;
            let pc = s.capillary.eval(sv).unwrap().0;
            assert!((t.pbar(sv) - t.phat(sv) - pc).abs() < 1e-8 * 2e6, "S={sv}");
        }
        assert!(t.verified_error <= 1e-8);
    }

    #[test]
    fn beta_matches_oracle_and_inverts() {
        let t = tables();
        let s = set();
        let f = fluid();
        let oracle = quadrature::double_exponential::integrate(|x| alpha(&s, &f, x), 0.0, 1.0, 1e-12).integral;
        assert!(((t.beta(1.0) - oracle) / oracle).abs() < 1e-8);
        let b = t.beta(0.37);
        assert!((t.beta_inverse(b).unwrap() - 0.37).abs() < 1e-10);
        assert!(t.beta_inverse(-1.0).is_err());
        assert!(alpha(&s, &f, 0.0).abs() < 1e-12 && alpha(&s, &f, 1.0) == 0.0);
    }

    #[test]
    fn global_pressure_matches_oracle() {
        let t = tables();
        let s = set();
        let f = fluid();
        let p = global_pressure(&t, &[0.0, 5.0], &[0.5, 1.0]);
        let oracle = quadrature::double_exponential::integrate(
            |x| {
                let (ll, lg) = s.mobilities(x, &f);
                -(lg / (ll + lg)) * s.capillary.eval_unchecked(x).1
            },
            0.5,
            1.0,
            1e-12,
        )
        .integral;
        assert!(((p[0] - oracle) / oracle).abs() < 1e-8);
        assert_eq!(p[1], 5.0);
    }

    #[test]
    fn gp_bounds_on_random_states() {
        let t = tables();
        let s = set();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut pl = Vec::with_capacity(n);
        let mut pg = Vec::with_capacity(n);
        for _ in 0..n {
            let l: f64 = rng.random_range(-1e7..1e7);
            let sigma: f64 = rng.random_range(-2e6..1.999e6);
            pl.push(l);
            pg.push(l + sigma);
        }
        let rep = gp_bounds_check(&s, &t, &pl, &pg);
        assert_eq!(rep.violations, 0, "{rep:?}");
        assert!(rep.one_phase_nodes > 0);
        let zero = gp_bounds_check(&s, &t, &[0.0], &[0.0]);
        assert_eq!(zero.violations, 0);
        assert!((zero.min_slack - 0.0).abs() < 1e-9);
    }

    #[test]
    fn test_functions_closed_form_and_bounds() {
        let s = set();
        let eps = 1e-6;
        let tf = TestFunctionTables::build(&s, eps, 1e8, 2048).unwrap();
        assert_eq!(tf.eval(0.0), (0.0, 0.0));
        assert_eq!(tf.eval(-3.0), (0.0, 0.0));
        let c_v = 7.94e-7;
        for &p in &[1.0, 1e2, 1e4, 1e6, 1e7] {
            let exact = (1.0 + c_v * p / eps).ln() / c_v;
            let (m, n) = tf.eval(p);
            assert!(((m - exact) / exact).abs() < 1e-8, "p={p}");
            assert!(m <= p / eps && n <= s.solubility.u_max() * p / eps);
        }
        assert!(TestFunctionTables::build(&s, 0.0, 1e8, 512).is_err());
    }

    #[test]
    fn energy_at_origin() {
        let s = set();
        let tf = TestFunctionTables::build(&s, 1e-6, 1e8, 512).unwrap();
        assert!((energy_density(&s, &tf, 0.0, 0.0) + 1e6).abs() < 1e-6);
    }

    #[test]
    fn upper_constant_needs_integrable_density() {
        assert!(energy_upper_constant(&set(), 0.0).is_none());
        let mut s = set();
        s.gas_density = GasDensity::PowerCapped { c_v: 1e-3, theta: 0.5, rho_max: 10.0 };
        let c = c_hat_g(&s.gas_density).unwrap();
        assert!((c - 2000.0).abs() / 2000.0 < 1e-8);
    }

    #[test]
    fn fundamental_identity_cases() {
        let s = set();
        let f = fluid();
        let zero = QuadPointState { k: [1.0, 1.0, 0.0], p_l: 0.0, p_g: 1e6, grad_pl: [0.0; 2], grad_pg: [0.0; 2] };
        assert_eq!(fundamental_identity_residual(&s, &f, &[zero]), 0.0);
        let one_phase = QuadPointState { k: [2.0, 1.0, 0.3], p_l: 1.0, p_g: 0.0, grad_pl: [1.0, -2.0], grad_pg: [3.0, 0.5] };
        assert!(fundamental_identity_residual(&s, &f, &[one_phase]) < 1e-15);
        let g = identity_gradients(&s, &f, &one_phase);
        assert_eq!(g.grad_p, one_phase.grad_pl);
        assert_eq!(g.grad_beta, [0.0, 0.0]);
    }

    #[test]
    fn brooks_corey_tables_build() {
        let mut s = set();
        s.capillary = CapillaryFamily::BrooksCorey { p_e: 1e5, lambda: 2.0 };
        s.relperm = RelPermFamily::Power { n_l: 2.0, n_g: 2.0, floor: 0.1 };
        let t = GlobalPressureTables::build(&s, &fluid(), 2048, 1e-8).unwrap();
        assert!(t.pbar(0.01) > t.pbar(0.5));
    }

    proptest! {
        #[test]
        fn energy_lower_bound(p_l in -1e7f64..1e7, p_g in 0.0f64..1e7) {
            let s = set();
            let tf = TestFunctionTables::build(&s, 1e-6, 1e8, 512).unwrap();
            let m_pc = s.capillary.total_integral().unwrap();
            prop_assert!(energy_density(&s, &tf, p_l, p_g) >= -m_pc * (1.0 + 1e-12));
        }

        #[test]
        fn m_n_monotone_and_u_m_minus_n_nonnegative(a in 0.0f64..1e7, b in 0.0f64..1e7) {
            let s = set();
            let t1 = TestFunctionTables::build(&s, 1e-6, 1e8, 512).unwrap();
            let t2 = TestFunctionTables::build(&s, 1e-4, 1e8, 512).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (m_lo, n_lo) = t1.eval(lo);
            let (m_hi, n_hi) = t1.eval(hi);
            prop_assert!(m_lo <= m_hi && n_lo <= n_hi);
            let (m2, n2) = t2.eval(hi);
            prop_assert!(m2 <= m_hi * (1.0 + 1e-12) && n2 <= n_hi * (1.0 + 1e-12));
            let u = s.henry_u(hi).0;
            prop_assert!(u * m_hi - n_hi >= -1e-12 * (u * m_hi).abs());
        }

        #[test]
        fn identity_on_random_gradients(
            p_l in -1e6f64..1e6, sigma in 1.0f64..1.9e6,
            g in prop::array::uniform4(-1e3f64..1e3),
        ) {
            let s = set();
            let f = fluid();
            let q = QuadPointState {
                k: [3e-13, 1e-13, 5e-14],
                p_l,
                p_g: p_l + sigma,
                grad_pl: [g[0], g[1]],
                grad_pg: [g[2], g[3]],
            };
            prop_assert!(fundamental_identity_residual(&s, &f, &[q]) <= 1e-10);
        }
    }
}
