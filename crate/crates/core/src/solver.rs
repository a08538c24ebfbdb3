//! Compressed sparse row matrices and a Jacobi-preconditioned conjugate
//! gradient solver for symmetric positive-definite systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a square matrix from `(row, col, value)` triplets listed in
    /// row-major order; duplicate entries within a row are summed.
    pub fn from_sorted_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut current_row = 0usize;
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(Error::Dimension(format!("entry ({r}, {c}) outside {n}x{n}")));
            }
            if r < current_row {
                return Err(Error::Dimension("triplets must be sorted by row".into()));
            }
            while current_row < r {
                current_row += 1;
                row_ptr[current_row] = col_idx.len();
            }
            let start = row_ptr[r];
            if let Some(k) = (start..col_idx.len()).find(|&k| col_idx[k] == c) {
                values[k] += v;
            } else {
                col_idx.push(c);
                values.push(v);
            }
        }
        while current_row < n {
            current_row += 1;
            row_ptr[current_row] = col_idx.len();
        }
        Ok(CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.col_idx[k] == i)
                    .map_or(0.0, |k| self.values[k])
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k]] += self.values[k];
            }
        }
        d
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Max-norm of `b - A x` at exit.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves `A x = b` from `x0` until `max|b - A x| <= tol`.
pub fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = a.dim();
    if b.len() != n || x0.is_some_and(|x| x.len() != n) {
        return Err(Error::Dimension("right-hand side length differs from matrix".into()));
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut ax = vec![0.0; n];
    a.mul_vec(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let mut residual = max_abs(&r);
    if residual <= tol {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            residual,
        });
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for it in 1..=max_iter {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NoConvergence {
                iterations: it,
                residual,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        residual = max_abs(&r);
        if residual <= tol {
            // confirm against the true residual; recurrence drift can mislead
            a.mul_vec(&x, &mut ax);
            for i in 0..n {
                r[i] = b[i] - ax[i];
            }
            residual = max_abs(&r);
            if residual <= tol {
                return Ok(CgOutcome {
                    x,
                    iterations: it,
                    residual,
                });
            }
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_sorted_triplets(n, &t).unwrap()
    }

    #[test]
    fn solves_poisson_1d() {
        let a = tridiag(20);
        let x_true: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; 20];
        a.mul_vec(&x_true, &mut b);
        let out = conjugate_gradient(&a, &b, None, 1e-12, 200).unwrap();
        for (x, t) in out.x.iter().zip(&x_true) {
            assert!((x - t).abs() < 1e-9);
        }
        assert!(out.residual <= 1e-12);
    }

    #[test]
    fn duplicates_are_summed() {
        let a = CsrMatrix::from_sorted_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 4.0)]).unwrap();
        assert_eq!(a.to_dense(), vec![vec![3.0, 0.0], vec![0.0, 4.0]]);
        assert_eq!(a.diagonal(), vec![3.0, 4.0]);
    }

    #[test]
    fn reports_non_convergence() {
        let a = tridiag(50);
        let b = vec![1.0; 50];
        match conjugate_gradient(&a, &b, None, 1e-14, 2) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
