//! P1 (interval) and Q1 (rectangle) assembly, sparse operators and the
//! linear solves used by each time step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::numerics::gauss_legendre;

/// Quadrature points, weights and shape data for every element, laid out
/// element by element (index `e * per_element + q`).
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub per_element: usize,
    pub nodes_per_element: usize,
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub shape: Vec<[f64; 4]>,
    pub grads: Vec<[[f64; 2]; 4]>,
}

impl Quadrature {
    /// Tensor Gauss rule with `order` points per direction.
    pub fn new(mesh: &Mesh, order: usize) -> Quadrature {
        let (xi, wi) = gauss_legendre(order);
        let npe = if mesh.dim == 1 { 2 } else { 4 };
        let per = if mesh.dim == 1 { order } else { order * order };
        let total = per * mesh.elements.len();
        let mut q = Quadrature {
            per_element: per,
            nodes_per_element: npe,
            points: Vec::with_capacity(total),
            weights: Vec::with_capacity(total),
            shape: Vec::with_capacity(total),
            grads: Vec::with_capacity(total),
        };
        for el in &mesh.elements {
            let p0 = mesh.nodes[el[0]];
            if mesh.dim == 1 {
                let h = mesh.nodes[el[1]][0] - p0[0];
                for k in 0..order {
                    let s = xi[k];
                    q.points.push([p0[0] + 0.5 * h * (1.0 + s), 0.0]);
                    q.weights.push(0.5 * h * wi[k]);
                    q.shape.push([0.5 * (1.0 - s), 0.5 * (1.0 + s), 0.0, 0.0]);
                    q.grads.push([[-1.0 / h, 0.0], [1.0 / h, 0.0], [0.0; 2], [0.0; 2]]);
                }
            } else {
                let p2 = mesh.nodes[el[2]];
                let (hx, hy) = (p2[0] - p0[0], p2[1] - p0[1]);
                for ky in 0..order {
                    for kx in 0..order {
                        let (s, t) = (xi[kx], xi[ky]);
                        q.points.push([p0[0] + 0.5 * hx * (1.0 + s), p0[1] + 0.5 * hy * (1.0 + t)]);
                        q.weights.push(0.25 * hx * hy * wi[kx] * wi[ky]);
                        let sg = [-1.0, 1.0, 1.0, -1.0];
                        let tg = [-1.0, -1.0, 1.0, 1.0];
                        let mut n = [0.0; 4];
                        let mut g = [[0.0; 2]; 4];
                        for a in 0..4 {
                            n[a] = 0.25 * (1.0 + sg[a] * s) * (1.0 + tg[a] * t);
                            g[a] = [
                                0.25 * sg[a] * (1.0 + tg[a] * t) * 2.0 / hx,
                                0.25 * tg[a] * (1.0 + sg[a] * s) * 2.0 / hy,
                            ];
                        }
                        q.shape.push(n);
                        q.grads.push(g);
                    }
                }
            }
        }
        q
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Values of a nodal field at every quadrature point.
    pub fn interpolate(&self, mesh: &Mesh, field: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (e, el) in mesh.elements.iter().enumerate() {
            for q in e * self.per_element..(e + 1) * self.per_element {
                out.push((0..self.nodes_per_element).map(|a| self.shape[q][a] * field[el[a]]).sum());
            }
        }
        out
    }

    /// Gradients of a nodal field at every quadrature point.
    pub fn gradient(&self, mesh: &Mesh, field: &[f64]) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.len());
        for (e, el) in mesh.elements.iter().enumerate() {
            for q in e * self.per_element..(e + 1) * self.per_element {
                let mut g = [0.0; 2];
                for a in 0..self.nodes_per_element {
                    g[0] += self.grads[q][a][0] * field[el[a]];
                    g[1] += self.grads[q][a][1] * field[el[a]];
                }
                out.push(g);
            }
        }
        out
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Per-quadrature-point diffusion coefficient.
#[derive(Debug, Clone, Copy)]
pub enum Coefficient<'a> {
    Scalar(&'a [f64]),
    /// Symmetric tensors stored as `[xx, yy, xy]`.
    Tensor(&'a [[f64; 3]]),
}

impl Coefficient<'_> {
    fn apply(&self, q: usize, g: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            Coefficient::Scalar(c) => {
                let c = c[q];
                c.is_finite().then_some([c * g[0], c * g[1]])
            }
            Coefficient::Tensor(k) => {
                let k = k[q];
                k.iter()
                    .all(|v| v.is_finite())
                    .then_some([k[0] * g[0] + k[2] * g[1], k[2] * g[0] + k[1] * g[1]])
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            Coefficient::Scalar(c) => c.len(),
            Coefficient::Tensor(k) => k.len(),
        }
    }
}

/// Compressed sparse row matrix. All operators on one mesh share the
/// node-adjacency pattern, so sums reduce to adding value arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub dimension: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub symmetric: bool,
}

impl SparseOperator {
    /// Zero operator with the adjacency pattern of `mesh`.
    pub fn zeros(mesh: &Mesh) -> SparseOperator {
        let n = mesh.node_count();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for el in &mesh.elements {
            for &a in el {
                rows[a].extend_from_slice(el);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        SparseOperator { dimension: n, row_ptr, col_idx, values: vec![0.0; nnz], symmetric: true }
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map(|k| self.values[k]).unwrap_or(0.0)
    }

    fn add_at(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j).expect("entry outside the mesh adjacency pattern");
        self.values[k] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dimension)
            .map(|i| (self.row_ptr[i]..self.row_ptr[i + 1]).map(|k| self.values[k] * x[self.col_idx[k]]).sum())
            .collect()
    }

    /// x·(A y)
    pub fn form(&self, x: &[f64], y: &[f64]) -> f64 {
        self.mul_vec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dimension).map(|i| self.values[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum()).collect()
    }

    /// `self + s * other`; both operators must come from the same mesh.
    pub fn add_scaled(&self, s: f64, other: &SparseOperator) -> SparseOperator {
        assert_eq!(self.col_idx, other.col_idx, "operators have different sparsity patterns");
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        out.symmetric = self.symmetric && other.symmetric;
        out
    }

    pub fn scaled(&self, s: f64) -> SparseOperator {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (i, &v) in d.iter().enumerate() {
            self.add_at(i, i, v);
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dimension {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                worst = worst.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dimension, self.dimension);
        for i in 0..self.dimension {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[k])] = self.values[k];
            }
        }
        m
    }

    /// Dense restriction to the listed rows and columns.
    pub fn restrict_dense(&self, idx: &[usize]) -> DMatrix<f64> {
        let mut pos = vec![usize::MAX; self.dimension];
        for (k, &i) in idx.iter().enumerate() {
            pos[i] = k;
        }
        let mut m = DMatrix::zeros(idx.len(), idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let c = pos[self.col_idx[k]];
                if c != usize::MAX {
                    m[(r, c)] = self.values[k];
                }
            }
        }
        m
    }
}

type LocalMatrix = [[f64; 4]; 4];

fn scatter(mesh: &Mesh, order: &[usize], locals: &[LocalMatrix], npe: usize) -> SparseOperator {
    let mut op = SparseOperator::zeros(mesh);
    for &e in order {
        let el = &mesh.elements[e];
        for a in 0..npe {
            for b in 0..npe {
                op.add_at(el[a], el[b], locals[e][a][b]);
            }
        }
    }
    op
}

fn check_len(quad: &Quadrature, n: usize, what: &str) -> Result<()> {
    if n != quad.len() {
        return Err(Error::Assembly(format!("{what} has {n} entries, expected {} quadrature points", quad.len())));
    }
    Ok(())
}

/// ∫ C∇φ_j·∇φ_i.
pub fn assemble_weighted_stiffness(mesh: &Mesh, quad: &Quadrature, coeff: Coefficient<'_>) -> Result<SparseOperator> {
    let order: Vec<usize> = (0..mesh.elements.len()).collect();
    stiffness_in_order(mesh, quad, coeff, &order)
}

pub(crate) fn stiffness_in_order(
    mesh: &Mesh,
    quad: &Quadrature,
    coeff: Coefficient<'_>,
    order: &[usize],
) -> Result<SparseOperator> {
    check_len(quad, coeff.len(), "stiffness coefficient")?;
    let npe = quad.nodes_per_element;
    let locals: Vec<LocalMatrix> = (0..mesh.elements.len())
        .into_par_iter()
        .map(|e| {
            let mut m = [[0.0; 4]; 4];
            for q in e * quad.per_element..(e + 1) * quad.per_element {
                let w = quad.weights[q];
                for b in 0..npe {
                    let Some(cg) = coeff.apply(q, quad.grads[q][b]) else {
                        return Err(Error::Assembly(format!(
                            "non-finite coefficient in element {e} at ({:.6}, {:.6})",
                            quad.points[q][0], quad.points[q][1]
                        )));
                    };
                    for a in 0..npe {
                        let ga = quad.grads[q][a];
                        m[a][b] += w * (ga[0] * cg[0] + ga[1] * cg[1]);
                    }
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    Ok(scatter(mesh, order, &locals, npe))
}

/// ∫ w φ_j φ_i (consistent mass).
pub fn assemble_mass(mesh: &Mesh, quad: &Quadrature, weight: &[f64]) -> Result<SparseOperator> {
    check_len(quad, weight.len(), "mass weight")?;
    let npe = quad.nodes_per_element;
    let locals: Vec<LocalMatrix> = (0..mesh.elements.len())
        .into_par_iter()
        .map(|e| {
            let mut m = [[0.0; 4]; 4];
            for q in e * quad.per_element..(e + 1) * quad.per_element {
                let c = weight[q];
                if !c.is_finite() {
                    return Err(Error::Assembly(format!("non-finite mass weight in element {e}")));
                }
                let n = quad.shape[q];
                for a in 0..npe {
                    for b in 0..npe {
                        m[a][b] += quad.weights[q] * c * n[a] * n[b];
                    }
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let order: Vec<usize> = (0..mesh.elements.len()).collect();
    Ok(scatter(mesh, &order, &locals, npe))
}

/// Lumped weights ∫ w φ_i (row sums of the consistent mass).
pub fn lumped_weights(mesh: &Mesh, quad: &Quadrature, weight: &[f64]) -> Vec<f64> {
    assemble_load(mesh, quad, weight)
}

/// ∫ f φ_i.
pub fn assemble_load(mesh: &Mesh, quad: &Quadrature, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.node_count()];
    for (e, el) in mesh.elements.iter().enumerate() {
        for q in e * quad.per_element..(e + 1) * quad.per_element {
            for a in 0..quad.nodes_per_element {
                out[el[a]] += quad.weights[q] * f[q] * quad.shape[q][a];
            }
        }
    }
    out
}

/// ∫ F·∇φ_i for a per-quadrature-point vector field F.
pub fn assemble_advective_rhs(mesh: &Mesh, quad: &Quadrature, vector_coeff: &[[f64; 2]]) -> Vec<f64> {
    assemble_flux(mesh, quad, vector_coeff).0
}

/// ∫ F·∇φ_i together with Σ_e |∫_e F·∇φ_i|, the scale used to normalize
/// residuals of flux balances.
pub fn assemble_flux(mesh: &Mesh, quad: &Quadrature, flux: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    let n = mesh.node_count();
    let (mut out, mut mag) = (vec![0.0; n], vec![0.0; n]);
    for (e, el) in mesh.elements.iter().enumerate() {
        for a in 0..quad.nodes_per_element {
            let mut c = 0.0;
            for q in e * quad.per_element..(e + 1) * quad.per_element {
                let g = quad.grads[q][a];
                c += quad.weights[q] * (flux[q][0] * g[0] + flux[q][1] * g[1]);
            }
            out[el[a]] += c;
            mag[el[a]] += c.abs();
        }
    }
    (out, mag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRole {
    Pressure,
    Concentration,
    Auxiliary,
}

/// Nodal values over a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVector {
    pub values: Vec<f64>,
    pub role: FieldRole,
}

impl FieldVector {
    pub fn new(values: Vec<f64>, role: FieldRole) -> Self {
        Self { values, role }
    }

    pub fn zeros(mesh: &Mesh, role: FieldRole) -> Self {
        Self { values: vec![0.0; mesh.node_count()], role }
    }
}

const SOLVE_TOL: f64 = 1e-10;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `op x = rhs` on the free nodes with x = 0 on Dirichlet nodes.
pub fn solve_field(op: &SparseOperator, rhs: &FieldVector, mesh: &Mesh) -> Result<FieldVector> {
    let x = solve(op, &rhs.values, mesh.dirichlet_mask())?;
    Ok(FieldVector::new(x, rhs.role))
}

/// Banded LU for interval meshes and nonsymmetric operators; Jacobi-PCG
/// for symmetric operators on rectangles. Rows of Dirichlet nodes are
/// eliminated and their values fixed to 0.
pub fn solve(op: &SparseOperator, rhs: &[f64], dirichlet: &[bool]) -> Result<Vec<f64>> {
    if rhs.len() != op.dimension || dirichlet.len() != op.dimension {
        return Err(Error::LinearSolve("dimension mismatch between operator, rhs and mesh".into()));
    }
    if let Some(i) = rhs.iter().position(|v| !v.is_finite()) {
        return Err(Error::LinearSolve(format!("non-finite right-hand side at node {i}")));
    }
    let free: Vec<usize> = (0..op.dimension).filter(|&i| !dirichlet[i]).collect();
    let mut pos = vec![usize::MAX; op.dimension];
    for (k, &i) in free.iter().enumerate() {
        pos[i] = k;
    }
    let b: Vec<f64> = free.iter().map(|&i| rhs[i]).collect();
    let bn = norm(&b);
    let mut x = vec![0.0; op.dimension];
    if bn == 0.0 {
        return Ok(x);
    }
    let mut bw = 0;
    for &i in &free {
        for k in op.row_ptr[i]..op.row_ptr[i + 1] {
            let c = pos[op.col_idx[k]];
            if c != usize::MAX {
                bw = bw.max(c.abs_diff(pos[i]));
            }
        }
    }
    let reduced_mul = |y: &[f64]| -> Vec<f64> {
        free.iter()
            .map(|&i| {
                (op.row_ptr[i]..op.row_ptr[i + 1])
                    .filter(|&k| pos[op.col_idx[k]] != usize::MAX)
                    .map(|k| op.values[k] * y[pos[op.col_idx[k]]])
                    .sum()
            })
            .collect()
    };
    let y = if bw <= 2 || !op.symmetric {
        banded_solve(op, &free, &pos, bw, &b, &reduced_mul)?
    } else {
        pcg(op, &free, &b, &reduced_mul)?
    };
    let r: Vec<f64> = reduced_mul(&y).iter().zip(&b).map(|(a, c)| c - a).collect();
    let rel = norm(&r) / bn;
    if !(rel <= SOLVE_TOL) {
        return Err(Error::LinearSolve(format!("relative residual {rel:.3e} exceeds {SOLVE_TOL:.0e}")));
    }
    for (k, &i) in free.iter().enumerate() {
        x[i] = y[k];
    }
    Ok(x)
}

fn banded_solve(
    op: &SparseOperator,
    free: &[usize],
    pos: &[usize],
    bw: usize,
    b: &[f64],
    mul: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let n = free.len();
    let width = 2 * bw + 1;
    // band[i][bw + j - i] holds A[i][j]
    let mut band = vec![0.0; n * width];
    for (r, &i) in free.iter().enumerate() {
        for k in op.row_ptr[i]..op.row_ptr[i + 1] {
            let c = pos[op.col_idx[k]];
            if c != usize::MAX {
                band[r * width + bw + c - r] = op.values[k];
            }
        }
    }
    for k in 0..n {
        let piv = band[k * width + bw];
        if !(piv.abs() > 0.0) || !piv.is_finite() {
            return Err(Error::LinearSolve(format!("zero pivot at reduced row {k} (global node {})", free[k])));
        }
        for i in k + 1..(k + bw + 1).min(n) {
            let f = band[i * width + bw + k - i] / piv;
            if f == 0.0 {
                continue;
            }
            band[i * width + bw + k - i] = f;
            for j in k + 1..(k + bw + 1).min(n) {
                band[i * width + bw + j - i] -= f * band[k * width + bw + j - k];
            }
        }
    }
    let lu_solve = |rhs: &[f64]| -> Vec<f64> {
        let mut y = rhs.to_vec();
        for i in 0..n {
            for k in i.saturating_sub(bw)..i {
                y[i] -= band[i * width + bw + k - i] * y[k];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..(i + bw + 1).min(n) {
                y[i] -= band[i * width + bw + j - i] * y[j];
            }
            y[i] /= band[i * width + bw];
        }
        y
    };
    let mut y = lu_solve(b);
    // one step of iterative refinement
    let r: Vec<f64> = mul(&y).iter().zip(b).map(|(a, c)| c - a).collect();
    let d = lu_solve(&r);
    y.iter_mut().zip(d).for_each(|(a, c)| *a += c);
    Ok(y)
}

fn pcg(op: &SparseOperator, free: &[usize], b: &[f64], mul: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let diag: Vec<f64> = free.iter().map(|&i| op.get(i, i)).collect();
    if let Some(k) = diag.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::LinearSolve(format!("nonpositive diagonal {:.3e} at node {}", diag[k], free[k])));
    }
    let bn = norm(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let max_iter = 20 * n + 100;
    for it in 0..max_iter {
        let ap = mul(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolve(format!(
                "conjugate gradient breakdown at iteration {it}: p·Ap = {pap:.3e} (operator not definite)"
            )));
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if norm(&r) <= 0.05 * SOLVE_TOL * bn {
            return Ok(x);
        }
        z = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::LinearSolve(format!(
        "conjugate gradient did not converge in {max_iter} iterations (residual {:.3e})",
        norm(&r) / bn
    )))
}

/// Dense LU solve with the same residual acceptance as [`solve`].
pub fn solve_dense(a: DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let bv = DVector::from_column_slice(b);
    let bn = bv.norm();
    if bn == 0.0 {
        return Ok(vec![0.0; b.len()]);
    }
    let lu = a.clone().lu();
    let mut x = lu.solve(&bv).ok_or_else(|| Error::LinearSolve("singular dense operator".into()))?;
    let r = &bv - &a * &x;
    if let Some(d) = lu.solve(&r) {
        x += d;
    }
    let rel = (&bv - &a * &x).norm() / bn;
    if !(rel <= SOLVE_TOL) {
        return Err(Error::LinearSolve(format!("dense relative residual {rel:.3e} exceeds {SOLVE_TOL:.0e}")));
    }
    Ok(x.iter().copied().collect())
}
