//! Compressed-row sparse matrices and a Jacobi-preconditioned conjugate
//! gradient solver for the symmetric positive definite systems of both
//! solvers.
//!
//! All reductions are sequential so identical inputs give bit-identical
//! iterates.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("assembly error: entry ({row}, {col}) differs from its transpose by {diff:e}")]
    Asymmetric { row: usize, col: usize, diff: f64 },
    #[error("assembly error: diagonal entry {row} is {value:e} (must be positive)")]
    NonPositiveDiagonal { row: usize, value: f64 },
    #[error("assembly error: index ({row}, {col}) out of range for dimension {n}")]
    OutOfRange { row: usize, col: usize, n: usize },
    #[error("dimension mismatch: matrix {matrix}, vector {vector}")]
    DimensionMismatch { matrix: usize, vector: usize },
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("conjugate gradient breakdown (pᵀAp = {0:e}); matrix is not positive definite")]
    Breakdown(f64),
}

/// Sparse matrix in compressed row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    symmetric: bool,
}

/// Collects `(row, col, value)` contributions; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        self.entries.push((row, col, value));
    }

    /// Adds the symmetric two-point coupling `t (x_a − x_b)` to rows `a`, `b`.
    pub fn add_coupling(&mut self, a: usize, b: usize, t: f64) {
        self.add(a, a, t);
        self.add(b, b, t);
        self.add(a, b, -t);
        self.add(b, a, -t);
    }

    /// Builds the matrix. Contributions to one entry are summed in sorted
    /// order, so the result does not depend on insertion order. With
    /// `symmetric`, symmetry (1e−13 relative) and a positive diagonal are
    /// checked.
    pub fn build(mut self, symmetric: bool) -> Result<CsrMatrix, SolveError> {
        let n = self.n;
        if let Some(&(row, col, _)) = self.entries.iter().find(|e| e.0 >= n || e.1 >= n) {
            return Err(SolveError::OutOfRange { row, col, n });
        }
        self.entries
            .sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let m = CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
            symmetric,
        };
        if symmetric {
            m.check_spd_structure()?;
        }
        Ok(m)
    }
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
            symmetric: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_symmetric_flagged(&self) -> bool {
        self.symmetric
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[s..e].binary_search(&j) {
            Ok(k) => self.vals[s + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *yi = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec(x, &mut y);
        y
    }

    /// `max |A_ij − A_ji|`
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `A + diag(d)`
    pub fn add_diagonal(&self, d: &[f64]) -> Result<CsrMatrix, SolveError> {
        let mut b = TripletBuilder::new(self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                b.add(i, j, v);
            }
            if d[i] != 0.0 {
                b.add(i, i, d[i]);
            }
        }
        b.build(self.symmetric)
    }

    /// Dense copy (row-major), for small systems and tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    fn check_spd_structure(&self) -> Result<(), SolveError> {
        for i in 0..self.n {
            let d = self.get(i, i);
            if !(d > 0.0) {
                return Err(SolveError::NonPositiveDiagonal { row: i, value: d });
            }
        }
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if j <= i {
                    continue;
                }
                let w = self.get(j, i);
                let scale = v.abs().max(w.abs()).max(f64::MIN_POSITIVE);
                if (v - w).abs() > 1e-13 * scale {
                    return Err(SolveError::Asymmetric {
                        row: i,
                        col: j,
                        diff: (v - w).abs(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative residual target `‖Ax − b‖ / ‖b‖`.
    pub tol: f64,
    /// Iteration cap; `None` means `20 √n`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: None,
        }
    }
}

impl SolverOptions {
    pub fn max_iter_for(&self, n: usize) -> usize {
        self.max_iter
            .unwrap_or_else(|| ((20.0 * (n as f64).sqrt()).ceil() as usize).max(50))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for SPD `A` by Jacobi-preconditioned CG, starting from
/// `x0` (zero if absent). Returns immediately when `x0` already meets the
/// tolerance.
pub fn solve_spd(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: SolverOptions,
) -> Result<Solution, SolveError> {
    let n = a.dim();
    if b.len() != n {
        return Err(SolveError::DimensionMismatch {
            matrix: n,
            vector: b.len(),
        });
    }
    if let Some(x0) = x0 {
        if x0.len() != n {
            return Err(SolveError::DimensionMismatch {
                matrix: n,
                vector: x0.len(),
            });
        }
    }
    if !a.symmetric {
        a.check_spd_structure()?;
    }
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(Solution {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut x = x0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    let mut r = a.apply(&x);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut res = dot(&r, &r).sqrt() / bnorm;
    if res <= opts.tol {
        return Ok(Solution {
            x,
            iterations: 0,
            residual: res,
        });
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let max_iter = opts.max_iter_for(n);
    for it in 1..=max_iter {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SolveError::Breakdown(pap));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = dot(&r, &r).sqrt() / bnorm;
        if res <= opts.tol {
            return Ok(Solution {
                x,
                iterations: it,
                residual: res,
            });
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
    Err(SolveError::NotConverged {
        iterations: max_iter,
        residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Gaussian elimination with partial pivoting, used as an oracle.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
                .unwrap();
            a.swap(k, p);
            b.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> CsrMatrix {
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.add(i, i, rng.random_range(0.1..1.0));
            for _ in 0..3 {
                let j = rng.random_range(0..n);
                if j != i {
                    b.add_coupling(i, j, rng.random_range(0.0..2.0));
                }
            }
        }
        b.build(true).unwrap()
    }

    #[test]
    fn identity_returns_rhs() {
        let a = CsrMatrix::identity(5);
        let b = vec![1.0, -2.0, 3.5, 0.0, 7.0];
        let s = solve_spd(&a, &b, None, SolverOptions::default()).unwrap();
        assert_eq!(s.x, b);
    }

    #[test]
    fn two_by_two() {
        let mut t = TripletBuilder::new(2);
        t.add(0, 0, 2.0);
        t.add(0, 1, -1.0);
        t.add(1, 0, -1.0);
        t.add(1, 1, 2.0);
        let a = t.build(true).unwrap();
        let s = solve_spd(&a, &[1.0, 1.0], None, SolverOptions::default()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = CsrMatrix::identity(3);
        let s = solve_spd(&a, &[0.0; 3], Some(&[1.0, 2.0, 3.0]), SolverOptions::default()).unwrap();
        assert_eq!(s.x, vec![0.0; 3]);
    }

    #[test]
    fn poisson_1d_matches_dense_oracle() {
        // 64 cells on (0,1), Dirichlet 0 at x=0 and 1 at x=1 via half-cell links
        let n = 64;
        let h = 1.0 / n as f64;
        let mut t = TripletBuilder::new(n);
        let mut rhs = vec![0.0; n];
        for i in 0..n - 1 {
            t.add_coupling(i, i + 1, 1.0 / h);
        }
        t.add(0, 0, 2.0 / h);
        t.add(n - 1, n - 1, 2.0 / h);
        rhs[n - 1] = 2.0 / h;
        let a = t.build(true).unwrap();
        let s = solve_spd(&a, &rhs, None, SolverOptions::default()).unwrap();
        let oracle = dense_solve(a.to_dense(), rhs.clone());
        for i in 0..n {
            let exact = (i as f64 + 0.5) * h;
            assert!((s.x[i] - oracle[i]).abs() <= 1e-10);
            assert!((oracle[i] - exact).abs() <= 1e-10);
        }
    }

    #[test]
    fn asymmetry_detected() {
        let mut t = TripletBuilder::new(2);
        t.add(0, 0, 2.0);
        t.add(0, 1, -1.0);
        t.add(1, 0, -0.5);
        t.add(1, 1, 2.0);
        assert!(matches!(t.build(true), Err(SolveError::Asymmetric { .. })));
        let mut t = TripletBuilder::new(2);
        t.add(0, 0, 1.0);
        assert!(matches!(
            t.build(true),
            Err(SolveError::NonPositiveDiagonal { row: 1, .. })
        ));
    }

    #[test]
    fn non_convergence_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(&mut rng, 50);
        let b: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let err = solve_spd(
            &a,
            &b,
            None,
            SolverOptions {
                tol: 1e-14,
                max_iter: Some(2),
            },
        )
        .unwrap_err();
        assert!(matches!(err, SolveError::NotConverged { iterations: 2, .. }));
    }

    #[test]
    fn random_spd_systems_meet_residual_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(2..80);
            let a = random_spd(&mut rng, n);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let opts = SolverOptions {
                tol: 1e-10,
                max_iter: None,
            };
            let s = solve_spd(&a, &b, None, opts).unwrap();
            let ax = a.apply(&s.x);
            let r: f64 = ax.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(r / bn <= 1e-10);
        }
    }

    #[test]
    fn reproducible_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(&mut rng, 40);
        let b: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s1 = solve_spd(&a, &b, None, SolverOptions::default()).unwrap();
        let s2 = solve_spd(&a, &b, None, SolverOptions::default()).unwrap();
        assert_eq!(s1, s2);
    }

    proptest! {
        #[test]
        fn assembly_is_insertion_order_independent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let mut entries = Vec::new();
            for _ in 0..40 {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                entries.push((i, j, rng.random_range(0.0..1.0)));
            }
            let mut fwd = TripletBuilder::new(n);
            let mut rev = TripletBuilder::new(n);
            for i in 0..n {
                fwd.add(i, i, 1.0);
            }
            for &(i, j, t) in &entries {
                fwd.add_coupling(i, j, t);
                fwd.add(i, i, 0.1);
            }
            for &(i, j, t) in entries.iter().rev() {
                rev.add(i, i, 0.1);
                rev.add_coupling(i, j, t);
            }
            for i in (0..n).rev() {
                rev.add(i, i, 1.0);
            }
            prop_assert_eq!(fwd.build(true).unwrap(), rev.build(true).unwrap());
        }
    }
}
