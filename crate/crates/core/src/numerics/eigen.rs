use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;
const SYMMETRY_REL_TOL: f64 = 1e-10;

/// Eigen-decomposition `S = Q diag(λ) Qᵀ` of a real symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Tensor,
    pub sweeps: usize,
}

impl SymmetricEigen {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let n = self.dim();
        let q = &self.eigenvectors;
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n)
                    .map(|k| q.get(i, k) * self.eigenvalues[k] * q.get(j, k))
                    .sum();
                out.set(i, j, s);
            }
        }
        out
    }

    /// Solves `f(S) x = b` where `f` acts on the eigenvalues.
    pub fn apply_spectral(&self, b: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.dim();
        let q = &self.eigenvectors;
        let mut coeff = vec![0.0; n];
        for (k, c) in coeff.iter_mut().enumerate() {
            let proj: f64 = (0..n).map(|i| q.get(i, k) * b[i]).sum();
            *c = f(self.eigenvalues[k]) * proj;
        }
        (0..n)
            .map(|i| (0..n).map(|k| q.get(i, k) * coeff[k]).sum())
            .collect()
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// The input is symmetrized as `(S + Sᵀ)/2` after checking that it is
/// symmetric to within `1e-10 · max|S_ij|`. Sweeps stop once the off-diagonal
/// Frobenius norm drops below `1e-12` times the diagonal norm.
pub fn eigh(s: &Tensor) -> Result<SymmetricEigen> {
    if !s.is_square() {
        return Err(Error::Dimension(format!(
            "eigh needs a square matrix, got shape {:?}",
            s.shape()
        )));
    }
    let n = s.shape()[0];
    let scale = s.max_abs();
    let mut a = s.data().to_vec();
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            if (x - y).abs() > SYMMETRY_REL_TOL * scale {
                return Err(Error::Validation(format!(
                    "matrix is not symmetric: |S[{i},{j}] - S[{j},{i}]| = {:.3e}",
                    (x - y).abs()
                )));
            }
            let m = 0.5 * (x + y);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let mut sweeps = 0;
    loop {
        let (off, on) = off_and_diag_norms(&a, n);
        if off <= JACOBI_REL_TOL * on || off == 0.0 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps; off-diagonal residual {off:.3e} (diagonal norm {on:.3e})"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, n, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + col] = v[r * n + src];
        }
    }
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors: Tensor::from_parts(vec![n, n], vecs),
        sweeps,
    })
}

fn off_and_diag_norms(a: &[f64], n: usize) -> (f64, f64) {
    let mut off = 0.0;
    let mut on = 0.0;
    for i in 0..n {
        on += a[i * n + i] * a[i * n + i];
        for j in (i + 1)..n {
            off += 2.0 * a[i * n + j] * a[i * n + j];
        }
    }
    (off.sqrt(), on.sqrt())
}

fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let g = 100.0 * apq.abs();
    // Already negligible against both diagonal entries.
    if app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
        a[p * n + q] = 0.0;
        a[q * n + p] = 0.0;
        return;
    }
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    a[p * n + p] = app - t * apq;
    a[q * n + q] = aqq + t * apq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        let np = c * akp - s * akq;
        let nq = s * akp + c * akq;
        a[k * n + p] = np;
        a[p * n + k] = np;
        a[k * n + q] = nq;
        a[q * n + k] = nq;
    }
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}
