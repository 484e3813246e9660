//! Discrete mixed-BC Laplacian eigenpairs and the L²-orthogonal projector
//! onto the span of the first N of them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_weighted_stiffness, Coefficient, FieldVector, Quadrature, SparseOperator};
use crate::mesh::Mesh;

const RESIDUAL_TOL: f64 = 1e-11;
const MAX_ITER: usize = 400;

#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub eigenvalues: Vec<f64>,
    /// Nodal eigenvectors, zero on Dirichlet nodes, M-orthonormal.
    pub vectors: Vec<Vec<f64>>,
    pub mass: SparseOperator,
    pub free: Vec<usize>,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// True when the modes span every free-node function.
    pub fn is_complete(&self) -> bool {
        self.len() == self.free.len()
    }

    /// (v, p_i) for every mode.
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        let mv = self.mass.mul_vec(v);
        self.vectors.iter().map(|p| p.iter().zip(&mv).map(|(a, b)| a * b).sum()).collect()
    }

    /// P_N[v] = Σ (v, p_i) p_i.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let c = self.coefficients(v);
        let mut out = vec![0.0; v.len()];
        for (ci, p) in c.iter().zip(&self.vectors) {
            for (o, pv) in out.iter_mut().zip(p) {
                *o += ci * pv;
            }
        }
        out
    }

    pub fn project_field(&self, v: &FieldVector) -> FieldVector {
        FieldVector::new(self.project(&v.values), v.role)
    }

    /// The first `n` modes.
    pub fn truncated(&self, n: usize) -> EigenBasis {
        let n = n.min(self.len());
        EigenBasis {
            eigenvalues: self.eigenvalues[..n].to_vec(),
            vectors: self.vectors[..n].to_vec(),
            mass: self.mass.clone(),
            free: self.free.clone(),
        }
    }

    /// Nodal mode matrix Φ (nodes x modes).
    pub fn mode_matrix(&self) -> DMatrix<f64> {
        let n = self.mass.dimension;
        DMatrix::from_fn(n, self.len(), |r, k| self.vectors[k][r])
    }

    /// P_N restricted to the free nodes as a dense matrix.
    pub fn dense_projector(&self) -> DMatrix<f64> {
        let nf = self.free.len();
        let phi = DMatrix::from_fn(nf, self.len(), |r, k| self.vectors[k][self.free[r]]);
        let m = self.mass.restrict_dense(&self.free);
        &phi * (phi.transpose() * m)
    }
}

/// Pseudo-random start vector, fixed per mode so results are reproducible.
fn start_vector(nf: usize, k: usize) -> DVector<f64> {
    DVector::from_fn(nf, |i, _| {
        let x = ((i as f64 + 1.0) * 12.9898 + (k as f64 + 1.0) * 78.233).sin() * 43758.5453;
        x - x.floor() - 0.5
    })
}

/// First `n` eigenpairs of K v = λ M v on the free nodes by shifted inverse
/// iteration with M-deflation and Rayleigh-quotient shift updates.
pub fn compute_basis(mesh: &Mesh, quad: &Quadrature, n: usize) -> Result<EigenBasis> {
    let free = mesh.free_nodes();
    let nf = free.len();
    if n == 0 || n > nf {
        return Err(Error::Domain(format!("requested {n} eigenpairs, but there are {nf} free nodes")));
    }
    let ones = vec![1.0; quad.len()];
    let k_op = assemble_weighted_stiffness(mesh, quad, Coefficient::Scalar(&ones))?;
    let m_op = assemble_mass(mesh, quad, &ones)?;
    let kd = k_op.restrict_dense(&free);
    let md = m_op.restrict_dense(&free);

    let mut vals: Vec<f64> = Vec::with_capacity(n);
    let mut vecs: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut mvecs: Vec<DVector<f64>> = Vec::with_capacity(n);
    let deflate = |v: &mut DVector<f64>, vecs: &[DVector<f64>], mvecs: &[DVector<f64>]| {
        for _ in 0..2 {
            for (p, mp) in vecs.iter().zip(mvecs) {
                let c = mp.dot(v);
                v.axpy(-c, p, 1.0);
            }
        }
    };
    let m_normalize = |v: &mut DVector<f64>| {
        let nm = v.dot(&(&md * &*v)).sqrt();
        *v /= nm;
    };

    for k in 0..n {
        let mut v = start_vector(nf, k);
        deflate(&mut v, &vecs, &mvecs);
        m_normalize(&mut v);
        let mut sigma = vals.last().map(|&l| 0.98 * l).unwrap_or(0.0);
        let mut lambda = f64::NAN;
        let mut converged = false;
        for it in 0..MAX_ITER {
            let a = &kd - &md * sigma;
            let rhs = &md * &v;
            let Some(mut w) = a.lu().solve(&rhs) else {
                // Exactly singular shift: the shift is an eigenvalue.
                break;
            };
            deflate(&mut w, &vecs, &mvecs);
            m_normalize(&mut w);
            v = w;
            let kv = &kd * &v;
            lambda = v.dot(&kv);
            let res = (&kv - &md * &v * lambda).norm() / kv.norm();
            if res <= RESIDUAL_TOL {
                converged = true;
                break;
            }
            // Plain shifted iterations until the iterate has settled on the
            // lowest remaining mode, Rayleigh shifts afterwards.
            if res < 1e-4 && it >= 2 {
                sigma = lambda;
            }
        }
        if !converged {
            let kv = &kd * &v;
            lambda = v.dot(&kv);
            let res = (&kv - &md * &v * lambda).norm() / kv.norm();
            if !(res <= 1e-9) {
                return Err(Error::Domain(format!("eigenpair {k} did not converge (relative residual {res:.3e})")));
            }
        }
        let mv = &md * &v;
        vals.push(lambda);
        vecs.push(v);
        mvecs.push(mv);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    let nn = mesh.node_count();
    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &k in &order {
        eigenvalues.push(vals[k]);
        let mut full = vec![0.0; nn];
        for (r, &i) in free.iter().enumerate() {
            full[i] = vecs[k][r];
        }
        vectors.push(full);
    }
    Ok(EigenBasis { eigenvalues, vectors, mass: m_op, free })
}
