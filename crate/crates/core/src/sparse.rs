//! Minimal linear algebra: triplet-assembled CSR matrices, a Jacobi
//! preconditioned conjugate gradient, and a dense LU for the small Newton
//! systems of the 1D solver.

use crate::error::{Error, Result};

/// Symmetric sparse matrix assembled from (row, col, value) triplets.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from triplets, summing duplicates. Entry order inside a row is
    /// ascending by column, so assembly is deterministic.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            per_row[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &mut per_row {
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = 0.0;
                while i < row.len() && row[i].0 == c {
                    v += row[i].1;
                    i += 1;
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[i] * x[self.col_idx[i]];
            }
            y[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[i] == r {
                    d[r] = self.values[i];
                }
            }
        }
        d
    }

    /// Max absolute asymmetry; zero for symmetrically assembled matrices.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[i];
                let mut mirrored = 0.0;
                for j in self.row_ptr[c]..self.row_ptr[c + 1] {
                    if self.col_idx[j] == r {
                        mirrored = self.values[j];
                    }
                }
                worst = worst.max((self.values[i] - mirrored).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n]; self.n];
        for r in 0..self.n {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                dense[r][self.col_idx[i]] = self.values[i];
            }
        }
        dense
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Options for [`conjugate_gradient`].
#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    /// Relative residual target (vs the right-hand side norm).
    pub rel_tol: f64,
    pub max_iters: usize,
    /// Project the constant vector out of b, x and every iterate; use for
    /// consistent pure-Neumann systems whose nullspace is the constant.
    pub project_constants: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            rel_tol: 1e-10,
            max_iters: 20_000,
            project_constants: false,
        }
    }
}

fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v {
        *x -= mean;
    }
}

/// Jacobi-preconditioned CG for symmetric positive (semi)definite systems.
/// Returns the solution and the iteration count; stagnation is an error.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], opts: &CgOptions) -> Result<(Vec<f64>, usize)> {
    let n = a.n;
    let mut rhs = b.to_vec();
    if opts.project_constants {
        remove_mean(&mut rhs);
    }
    let b_norm = dot(&rhs, &rhs).sqrt();
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let diag = a.diagonal();
    let precond: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = rhs.clone();
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(ri, pi)| ri * pi).collect();
    if opts.project_constants {
        remove_mean(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for iter in 0..opts.max_iters {
        if dot(&r, &r).sqrt() <= opts.rel_tol * b_norm {
            return Ok((x, iter));
        }
        a.matvec(&p, &mut ap);
        if opts.project_constants {
            remove_mean(&mut ap);
        }
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Darcy(format!(
                "CG breakdown at iteration {iter}: p'Ap = {pap:.3e} (matrix not SPD on the solve space)"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * precond[i];
        }
        if opts.project_constants {
            remove_mean(&mut z);
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Darcy(format!(
        "CG stagnated: residual {:.3e} of {:.3e} after {} iterations",
        dot(&r, &r).sqrt(),
        opts.rel_tol * b_norm,
        opts.max_iters
    )))
}

/// Dense LU solve with partial pivoting, for small Newton systems. On a
/// singular pivot the failing column index is reported.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> std::result::Result<Vec<f64>, usize> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-14 {
            return Err(col);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Ok(x)
}
