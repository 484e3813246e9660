//! Small numerical kernels shared by the curve tables: adaptive
//! Gauss–Kronrod quadrature, shape-preserving cubic Hermite tables and
//! scalar bisection.

use std::cmp::Ordering;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// One 15-point Kronrod panel. Returns (kronrod estimate, |K15 - G7|).
fn kronrod_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let fsum = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * fsum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * fsum;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureResult {
    pub value: f64,
    pub error: f64,
    pub converged: bool,
}

/// Globally adaptive G7/K15 quadrature on `[a, b]`.
///
/// Panels are bisected in order of decreasing error estimate until the
/// summed estimate falls below `max(abs_tol, rel_tol * |I|)` or the panel
/// budget is exhausted. Endpoints are never evaluated, so integrable
/// endpoint singularities are handled as long as the budget allows.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_panels: usize,
) -> QuadratureResult {
    if a == b {
        return QuadratureResult { value: 0.0, error: 0.0, converged: true };
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let (v, e) = kronrod_panel(&f, lo, hi);
    let mut panels = vec![(lo, hi, v, e)];
    let mut total = v;
    let mut err = e;
    while panels.len() < max_panels {
        let target = abs_tol.max(rel_tol * total.abs());
        if err <= target || !total.is_finite() {
            break;
        }
        // Split the worst panel.
        let (idx, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap_or(Ordering::Equal))
            .expect("non-empty");
        let (pa, pb, pv, pe) = panels.swap_remove(idx);
        let mid = 0.5 * (pa + pb);
        if mid <= pa || mid >= pb {
            // Panel at floating-point resolution; keep it and stop refining.
            panels.push((pa, pb, pv, pe));
            break;
        }
        let (v1, e1) = kronrod_panel(&f, pa, mid);
        let (v2, e2) = kronrod_panel(&f, mid, pb);
        total += v1 + v2 - pv;
        err += e1 + e2 - pe;
        panels.push((pa, mid, v1, e1));
        panels.push((mid, pb, v2, e2));
    }
    // Re-sum to limit drift from the running updates.
    let value: f64 = panels.iter().map(|p| p.2).sum();
    let error: f64 = panels.iter().map(|p| p.3).sum();
    let converged = value.is_finite() && error <= abs_tol.max(rel_tol * value.abs());
    QuadratureResult { value: sign * value, error, converged }
}

/// Bisection for a root of a monotone function bracketed by `[lo, hi]`.
/// `f(lo)` and `f(hi)` must have opposite signs (or one of them be zero).
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, x_tol: f64) -> f64 {
    let mut flo = f(lo);
    if flo == 0.0 {
        return lo;
    }
    let fhi = f(hi);
    if fhi == 0.0 {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= x_tol || mid <= lo.min(hi) || mid >= lo.max(hi) {
            return mid;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Monotone piecewise-cubic Hermite table.
///
/// Node derivatives are supplied by the caller (usually the exact integrand
/// of a cumulative integral) and then limited with the Fritsch–Carlson
/// conditions so that monotone data yields a monotone interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneTable {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl MonotoneTable {
    /// `x` strictly increasing; `slopes[i]` may be non-finite, in which case
    /// a one-sided secant is used.
    pub fn new(x: Vec<f64>, y: Vec<f64>, slopes: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len() && y.len() == slopes.len());
        let n = x.len();
        let secant: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / (x[k + 1] - x[k])).collect();
        let mut d: Vec<f64> = slopes
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if s.is_finite() {
                    s
                } else if i == 0 {
                    secant[0]
                } else if i == n - 1 {
                    secant[n - 2]
                } else {
                    0.5 * (secant[i - 1] + secant[i])
                }
            })
            .collect();
        for k in 0..n - 1 {
            let delta = secant[k];
            if delta == 0.0 {
                d[k] = 0.0;
                d[k + 1] = 0.0;
                continue;
            }
            // Slopes of the wrong sign would break monotonicity.
            if d[k].signum() != delta.signum() && d[k] != 0.0 {
                d[k] = 0.0;
            }
            if d[k + 1].signum() != delta.signum() && d[k + 1] != 0.0 {
                d[k + 1] = 0.0;
            }
            let a = d[k] / delta;
            let b = d[k + 1] / delta;
            let r2 = a * a + b * b;
            if r2 > 9.0 {
                let tau = 3.0 / r2.sqrt();
                d[k] = tau * a * delta;
                d[k + 1] = tau * b * delta;
            }
        }
        Self { x, y, d }
    }

    /// Builds from samples only, estimating slopes with the Fritsch–Butland
    /// harmonic mean (PCHIP).
    pub fn pchip(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        assert!(n >= 2);
        let h: Vec<f64> = (0..n - 1).map(|k| x[k + 1] - x[k]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            d[0] = delta[0];
            d[n - 1] = delta[n - 2];
        }
        Self::new(x, y, d)
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn first(&self) -> (f64, f64) {
        (self.x[0], self.y[0])
    }

    pub fn last(&self) -> (f64, f64) {
        let n = self.x.len();
        (self.x[n - 1], self.y[n - 1])
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.x.len();
        match self.x.binary_search_by(|v| v.partial_cmp(&t).unwrap_or(Ordering::Less)) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        }
    }

    /// Value and derivative; arguments outside the table are extrapolated
    /// linearly with the end slope.
    pub fn eval_with_slope(&self, t: f64) -> (f64, f64) {
        let n = self.x.len();
        if t <= self.x[0] {
            return (self.y[0] + self.d[0] * (t - self.x[0]), self.d[0]);
        }
        if t >= self.x[n - 1] {
            return (self.y[n - 1] + self.d[n - 1] * (t - self.x[n - 1]), self.d[n - 1]);
        }
        let k = self.segment(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (y0, y1, d0, d1) = (self.y[k], self.y[k + 1], self.d[k] * h, self.d[k + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let value = h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1;
        let dh00 = 6.0 * s2 - 6.0 * s;
        let dh10 = 3.0 * s2 - 4.0 * s + 1.0;
        let dh01 = -6.0 * s2 + 6.0 * s;
        let dh11 = 3.0 * s2 - 2.0 * s;
        let slope = (dh00 * y0 + dh10 * d0 + dh01 * y1 + dh11 * d1) / h;
        (value, slope)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_with_slope(t).0
    }

    /// Inverse of a nondecreasing table by bisection. `value` must lie in
    /// `[y_first, y_last]`.
    pub fn inverse(&self, value: f64) -> Option<f64> {
        let n = self.y.len();
        let (lo_y, hi_y) = (self.y[0], self.y[n - 1]);
        if !(value >= lo_y.min(hi_y) && value <= lo_y.max(hi_y)) {
            return None;
        }
        let increasing = hi_y >= lo_y;
        // Locate the bracketing segment on the node values first.
        let k = {
            let mut lo = 0usize;
            let mut hi = n - 1;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                let above = if increasing { self.y[mid] >= value } else { self.y[mid] <= value };
                if above {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            lo
        };
        let root = bisect(|t| self.eval(t) - value, self.x[k], self.x[k + 1], 0.0);
        Some(root)
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1] for 1 to 4 points.
pub fn gauss_legendre(points: usize) -> (Vec<f64>, Vec<f64>) {
    match points {
        1 => (vec![0.0], vec![2.0]),
        2 => {
            let a = 1.0 / 3f64.sqrt();
            (vec![-a, a], vec![1.0, 1.0])
        }
        3 => {
            let a = (3.0f64 / 5.0).sqrt();
            (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
        4 => {
            let a = (3.0 / 7.0 - 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
            let b = (3.0 / 7.0 + 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
            let wa = (18.0 + 30f64.sqrt()) / 36.0;
            let wb = (18.0 - 30f64.sqrt()) / 36.0;
            (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
        }
        _ => panic!("gauss_legendre supports 1..=4 points, got {points}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronrod_integrates_polynomials_and_singular_endpoints() {
        let r = integrate(|x| x.powi(5) - 3.0 * x, 0.0, 2.0, 1e-14, 1e-14, 100);
        assert!((r.value - (64.0 / 6.0 - 6.0)).abs() < 1e-12);
        let r = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10, 1e-10, 2000);
        assert!(r.converged);
        assert!((r.value - 2.0).abs() < 1e-9);
        let r = integrate(|x| x, 1.0, 0.0, 1e-14, 1e-14, 10);
        assert!((r.value + 0.5).abs() < 1e-15);
    }

    #[test]
    fn bisection_finds_root() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-15);
        assert!((r - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn monotone_table_is_monotone_and_invertible() {
        // Step-like data: a plain cubic spline would overshoot here.
        let x: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&t| if t < 5.0 { 0.0 } else { 1.0 }).collect();
        let tab = MonotoneTable::pchip(x, y);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let v = tab.eval(i as f64 * 0.01);
            assert!(v >= prev - 1e-15 && (-1e-15..=1.0 + 1e-15).contains(&v));
            prev = v;
        }
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let y: Vec<f64> = x.iter().map(|t| t * t * t + t).collect();
        let d: Vec<f64> = x.iter().map(|t| 3.0 * t * t + 1.0).collect();
        let tab = MonotoneTable::new(x, y, d);
        let t = tab.inverse(tab.eval(0.37)).unwrap();
        assert!((t - 0.37).abs() < 1e-13);
        assert!((tab.eval(0.37) - (0.37f64.powi(3) + 0.37)).abs() < 1e-7);
        assert!(tab.inverse(5.0).is_none());
    }

    #[test]
    fn gauss_rules_are_exact() {
        for n in 1..=4 {
            let (x, w) = gauss_legendre(n);
            let deg = 2 * n - 1;
            let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32 - 1)).sum();
            let exact = if (deg - 1) % 2 == 0 { 2.0 / deg as f64 } else { 0.0 };
            assert!((s - exact).abs() < 1e-14, "n={n}");
        }
    }
}
