//! Sparse linear solves used by the Newton and Poisson steps.
//!
//! Thin wrapper over faer's sparse LU. Systems are assembled as triplets;
//! the symbolic factorization can be reused across Newton iterations since
//! the sparsity pattern is fixed by the grid.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinSolveError {
    #[error("failed to assemble sparse matrix: {0}")]
    Assembly(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("solution contains non-finite entries")]
    NonFinite,
}

/// Triplet accumulator for an `n x n` sparse system.
pub struct TripletSystem {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletSystem {
    pub fn new(n: usize) -> Self {
        TripletSystem {
            n,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        TripletSystem {
            n,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n && col < self.n);
        self.entries.push((row, col, val));
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn build(&self) -> Result<SparseColMat<usize, f64>, LinSolveError> {
        let trips: Vec<Triplet<usize, usize, f64>> = self
            .entries
            .iter()
            .map(|&(r, c, v)| Triplet::new(r, c, v))
            .collect();
        SparseColMat::try_new_from_triplets(self.n, self.n, &trips)
            .map_err(|e| LinSolveError::Assembly(format!("{e:?}")))
    }
}

/// LU solver with a reusable symbolic factorization.
pub struct SparseLu {
    symbolic: SymbolicLu<usize>,
    lu: Lu<usize, f64>,
    n: usize,
}

impl SparseLu {
    pub fn new(sys: &TripletSystem) -> Result<Self, LinSolveError> {
        let a = sys.build()?;
        let symbolic = SymbolicLu::try_new(a.symbolic())
            .map_err(|e| LinSolveError::Factorization(format!("{e:?}")))?;
        let lu = Lu::try_new_with_symbolic(symbolic.clone(), a.as_ref())
            .map_err(|e| LinSolveError::Factorization(format!("{e:?}")))?;
        Ok(SparseLu {
            symbolic,
            lu,
            n: sys.n,
        })
    }

    /// Refactorize with new values on the same sparsity pattern.
    pub fn refactor(&mut self, sys: &TripletSystem) -> Result<(), LinSolveError> {
        let a = sys.build()?;
        self.lu = Lu::try_new_with_symbolic(self.symbolic.clone(), a.as_ref())
            .map_err(|e| LinSolveError::Factorization(format!("{e:?}")))?;
        Ok(())
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, LinSolveError> {
        assert_eq!(rhs.len(), self.n);
        let b = Mat::from_fn(self.n, 1, |i, _| rhs[i]);
        let x = self.lu.solve(&b);
        let out: Vec<f64> = (0..self.n).map(|i| x[(i, 0)]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(LinSolveError::NonFinite);
        }
        Ok(out)
    }
}

/// One-shot solve.
pub fn solve_once(sys: &TripletSystem, rhs: &[f64]) -> Result<Vec<f64>, LinSolveError> {
    SparseLu::new(sys)?.solve(rhs)
}

/// Solves the bordered system
/// `[A, w; w^T, 0] [x; mu] = [b; 0]`
/// which pins the weighted mean `w . x = 0` of an otherwise singular
/// (Neumann-type) operator `A`, absorbing any component of `b` along the
/// left null vector into the multiplier `mu`.
pub fn solve_mean_constrained(
    sys: &TripletSystem,
    weights: &[f64],
    rhs: &[f64],
) -> Result<(Vec<f64>, f64), LinSolveError> {
    let n = sys.n;
    assert_eq!(weights.len(), n);
    assert_eq!(rhs.len(), n);
    let mut bordered = TripletSystem::with_capacity(n + 1, sys.entries.len() + 2 * n);
    for &(r, c, v) in &sys.entries {
        bordered.push(r, c, v);
    }
    for i in 0..n {
        if weights[i] != 0.0 {
            bordered.push(i, n, weights[i]);
            bordered.push(n, i, weights[i]);
        }
    }
    let mut b = rhs.to_vec();
    b.push(0.0);
    let mut x = solve_once(&bordered, &b)?;
    let mu = x.pop().expect("bordered solution has n+1 entries");
    Ok((x, mu))
}

/// Solves `[A, c; e_pin^T, 0] [x; mu] = [b; 0]` for a singular Neumann-type
/// `A` whose null vector is the constants: `mu` absorbs the inconsistent
/// component of `b` along the column `c`, and the gauge is fixed by pinning
/// `x[pin] = 0` instead of a dense mean row, which keeps the fill-in of the
/// sparse factorization bounded. Shift `x` afterwards to whatever mean the
/// application wants.
pub fn solve_gauge_pinned(
    sys: &TripletSystem,
    column: &[f64],
    rhs: &[f64],
    pin: usize,
) -> Result<(Vec<f64>, f64), LinSolveError> {
    let n = sys.n;
    assert_eq!(column.len(), n);
    assert_eq!(rhs.len(), n);
    assert!(pin < n);
    let mut bordered = TripletSystem::with_capacity(n + 1, sys.entries.len() + n + 1);
    for &(r, c, v) in &sys.entries {
        bordered.push(r, c, v);
    }
    for (i, &ci) in column.iter().enumerate() {
        if ci != 0.0 {
            bordered.push(i, n, ci);
        }
    }
    bordered.push(n, pin, 1.0);
    let mut b = rhs.to_vec();
    b.push(0.0);
    let mut x = solve_once(&bordered, &b)?;
    let mu = x.pop().expect("bordered solution has n+1 entries");
    Ok((x, mu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_small_system() {
        // [[2, 1], [1, 3]] x = [5, 10] -> x = [1, 3]
        let mut sys = TripletSystem::new(2);
        sys.push(0, 0, 2.0);
        sys.push(0, 1, 1.0);
        sys.push(1, 0, 1.0);
        sys.push(1, 1, 3.0);
        let x = solve_once(&sys, &[5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn refactor_reuses_pattern() {
        let mut sys = TripletSystem::new(3);
        for i in 0..3 {
            sys.push(i, i, 2.0);
        }
        sys.push(0, 1, 1.0);
        let mut lu = SparseLu::new(&sys).unwrap();
        let x = lu.solve(&[1.0, 1.0, 1.0]).unwrap();
        assert!((x[2] - 0.5).abs() < 1e-12);

        let mut sys2 = TripletSystem::new(3);
        for i in 0..3 {
            sys2.push(i, i, 4.0);
        }
        sys2.push(0, 1, 1.0);
        lu.refactor(&sys2).unwrap();
        let y = lu.solve(&[4.0, 4.0, 4.0]).unwrap();
        assert!((y[2] - 1.0).abs() < 1e-12);
        assert!((y[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mean_constrained_laplacian() {
        // 1-D periodic Laplacian is singular; the bordered solve picks the
        // zero-mean solution of -x'' = f with a zero-mean f.
        let n = 16;
        let mut sys = TripletSystem::new(n);
        for i in 0..n {
            sys.push(i, i, 2.0);
            sys.push(i, (i + 1) % n, -1.0);
            sys.push(i, (i + n - 1) % n, -1.0);
        }
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let f: Vec<f64> = (0..n).map(|i| (i as f64 * h).cos() * h * h).collect();
        let w = vec![1.0; n];
        let (x, mu) = solve_mean_constrained(&sys, &w, &f).unwrap();
        assert!(mu.abs() < 1e-12);
        let mean: f64 = x.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-12);
        // Solution approximates cos(t) (eigenvalue h^2-accurate).
        let err: f64 = (0..n)
            .map(|i| (x[i] - (i as f64 * h).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max deviation {err}");
    }
}
