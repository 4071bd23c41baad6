//! Linear solvers for the damped normal equations `(H + D) x = b`, with `H`
//! stored as the lower triangle in compressed sparse column form.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

/// Which factorization backs the step computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolverKind {
    /// Sparse Cholesky, with a dense Cholesky below `DENSE_THRESHOLD` unknowns.
    #[default]
    SparseCholesky,
    /// Jacobi-preconditioned conjugate gradient.
    Pcg,
    /// Always dense Cholesky.
    Dense,
}

impl LinearSolverKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sparse-cholesky" | "cholesky" => Some(Self::SparseCholesky),
            "pcg" => Some(Self::Pcg),
            "dense" => Some(Self::Dense),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SparseCholesky => "sparse-cholesky",
            Self::Pcg => "pcg",
            Self::Dense => "dense",
        }
    }
}

/// Problems with fewer unknowns use the dense path.
pub const DENSE_THRESHOLD: usize = 1000;

/// Lower-triangular CSC pattern of a symmetric matrix with every diagonal
/// entry present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LowerPattern {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
}

impl LowerPattern {
    /// Builds the pattern from `(row, col)` entries; entries above the
    /// diagonal are mirrored.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut keys: Vec<u64> = entries
            .into_iter()
            .map(|(r, c)| {
                let (r, c) = if r >= c { (r, c) } else { (c, r) };
                ((c as u64) << 32) | r as u64
            })
            .chain((0..n).map(|i| ((i as u64) << 32) | i as u64))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(keys.len());
        for k in keys {
            let c = (k >> 32) as usize;
            col_ptr[c + 1] += 1;
            row_idx.push((k & 0xffff_ffff) as usize);
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self { n, col_ptr, row_idx }
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Storage index of entry `(row, col)` with `row >= col`.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let (lo, hi) = (self.col_ptr[col], self.col_ptr[col + 1]);
        self.row_idx[lo..hi].binary_search(&row).ok().map(|k| lo + k)
    }

    pub fn diagonal_position(&self, i: usize) -> usize {
        // Rows are sorted and the diagonal is the smallest row of its column.
        self.col_ptr[i]
    }

    /// `y = A x` for the symmetric matrix with lower triangle `values`.
    pub fn sym_mul(&self, values: &[f64], x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[k];
                let a = values[k];
                y[r] += a * x[c];
                if r != c {
                    y[c] += a * x[r];
                }
            }
        }
    }

    pub fn to_dense(&self, values: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[k];
                m[(r, c)] = values[k];
                m[(c, r)] = values[k];
            }
        }
        m
    }
}

/// Solves `A x = b` for symmetric positive definite `A`. Reuses the symbolic
/// sparse factorization across calls with the same pattern.
pub struct LinearSolver {
    kind: LinearSolverKind,
    symbolic: Option<SymbolicLlt<usize>>,
}

impl LinearSolver {
    pub fn new(kind: LinearSolverKind) -> Self {
        Self { kind, symbolic: None }
    }

    pub fn solve(&mut self, pattern: &LowerPattern, values: &[f64], b: &[f64]) -> Option<Vec<f64>> {
        let x = match self.kind {
            LinearSolverKind::Dense => dense_solve(pattern, values, b),
            LinearSolverKind::SparseCholesky if pattern.n < DENSE_THRESHOLD => dense_solve(pattern, values, b),
            LinearSolverKind::SparseCholesky => self.sparse_solve(pattern, values, b),
            LinearSolverKind::Pcg => pcg_solve(pattern, values, b, 1e-12, 10 * pattern.n.max(100)),
        }?;
        x.iter().all(|v| v.is_finite()).then_some(x)
    }

    fn sparse_solve(&mut self, pattern: &LowerPattern, values: &[f64], b: &[f64]) -> Option<Vec<f64>> {
        let n = pattern.n;
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &pattern.col_ptr, None, &pattern.row_idx);
        if self.symbolic.is_none() {
            self.symbolic = Some(SymbolicLlt::try_new(sym, Side::Lower).ok()?);
        }
        let symbolic = self.symbolic.clone()?;
        let m = SparseColMatRef::new(sym, values);
        let llt = Llt::try_new_with_symbolic(symbolic, m, Side::Lower).ok()?;
        let mut rhs = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
        llt.solve_in_place(rhs.as_mut());
        Some((0..n).map(|i| rhs[(i, 0)]).collect())
    }
}

fn dense_solve(pattern: &LowerPattern, values: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let chol = pattern.to_dense(values).cholesky()?;
    Some(chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec())
}

/// Jacobi-preconditioned conjugate gradient.
pub fn pcg_solve(pattern: &LowerPattern, values: &[f64], b: &[f64], tol: f64, max_iter: usize) -> Option<Vec<f64>> {
    let n = pattern.n;
    let inv_diag: Vec<f64> = (0..n)
        .map(|i| {
            let d = values[pattern.diagonal_position(i)];
            if d > 0.0 {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Some(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        pattern.sym_mul(values, &p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return None;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * b_norm {
            return Some(x);
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
    Some(x)
}
