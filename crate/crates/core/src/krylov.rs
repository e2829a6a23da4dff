//! Matrix-free GMRES over abstract linear operators, plus a dense
//! materialization / Gaussian-elimination path used to cross-validate the
//! iterative solves.

use nalgebra::{DMatrix, DVector};

/// Default cap on the dimension accepted by [`dense_materialize`].
pub const DENSE_MATERIALIZE_CAP: usize = 10_000;

/// An abstract square linear operator `v -> A v`.
///
/// `apply` must be deterministic for fixed captured data and reentrant, so
/// callers may evaluate columns concurrently.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>, KrylovError>;
}

/// Wraps a closure as a [`LinearOperator`].
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>, KrylovError> {
        Ok((self.f)(v))
    }
}

/// Dense matrix viewed as a [`LinearOperator`].
pub struct MatrixOperator<'a> {
    matrix: &'a DMatrix<f64>,
}

impl<'a> MatrixOperator<'a> {
    pub fn new(matrix: &'a DMatrix<f64>) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols(), "operator must be square");
        Self { matrix }
    }
}

impl LinearOperator for MatrixOperator<'_> {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>, KrylovError> {
        Ok(self.matrix * v)
    }
}

#[derive(Debug, Clone)]
pub struct GmresConfig {
    /// Convergence threshold on the relative residual `||b - A x|| / ||b||`.
    pub rel_tol: f64,
    /// Maximum number of Arnoldi steps (total, across restarts).
    pub max_iters: usize,
    /// Restart length; `None` runs full (unrestarted) GMRES.
    pub restart: Option<usize>,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iters: 200,
            restart: None,
        }
    }
}

impl GmresConfig {
    pub fn new(rel_tol: f64, max_iters: usize) -> Self {
        Self {
            rel_tol,
            max_iters,
            restart: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmresResult {
    pub solution: DVector<f64>,
    /// Relative residual history, one entry per iteration including the
    /// initial residual at iteration 0. Non-increasing for full GMRES.
    pub residual_norms: Vec<f64>,
    /// Number of Arnoldi steps performed.
    pub iterations: usize,
    pub converged: bool,
}

impl GmresResult {
    pub fn final_relres(&self) -> f64 {
        *self.residual_norms.last().unwrap_or(&0.0)
    }
}

#[derive(Debug)]
pub enum KrylovError {
    /// Operator or right-hand side produced a NaN/Inf entry.
    NonFinite { context: &'static str },
    /// Gaussian elimination hit a pivot below the singularity threshold.
    SingularMatrix { column: usize },
    DimensionMismatch { expected: usize, got: usize },
    /// Materialization request above the configured cap.
    DimensionCap { dim: usize, cap: usize },
    /// Failure inside a matrix-free operator evaluation.
    Operator(Box<dyn std::error::Error + Send + Sync>),
}

impl std::fmt::Display for KrylovError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KrylovError::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
            KrylovError::SingularMatrix { column } => {
                write!(f, "numerically singular matrix (pivot column {column})")
            }
            KrylovError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            KrylovError::DimensionCap { dim, cap } => {
                write!(f, "operator dimension {dim} exceeds dense cap {cap}")
            }
            KrylovError::Operator(e) => write!(f, "operator evaluation failed: {e}"),
        }
    }
}

impl std::error::Error for KrylovError {}

fn check_finite(v: &DVector<f64>, context: &'static str) -> Result<(), KrylovError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(KrylovError::NonFinite { context })
    }
}

/// Solves `A x = b` by GMRES with modified Gram-Schmidt and Givens rotations.
///
/// Each iterate minimizes the residual over the current Krylov subspace. A
/// zero right-hand side returns `x0` immediately with `converged = true`,
/// which is the warm-start-already-exact case. Arnoldi breakdown is treated
/// as convergence when the implied residual is below tolerance, otherwise the
/// result carries `converged = false`.
pub fn gmres_solve(
    op: &dyn LinearOperator,
    rhs: &DVector<f64>,
    x0: &DVector<f64>,
    cfg: &GmresConfig,
) -> Result<GmresResult, KrylovError> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(KrylovError::DimensionMismatch {
            expected: n,
            got: rhs.len(),
        });
    }
    if x0.len() != n {
        return Err(KrylovError::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    check_finite(rhs, "gmres right-hand side")?;

    let b_norm = rhs.norm();
    if b_norm == 0.0 {
        return Ok(GmresResult {
            solution: x0.clone(),
            residual_norms: vec![0.0],
            iterations: 0,
            converged: true,
        });
    }

    let mut x = x0.clone();
    let mut residual_norms = Vec::new();
    let mut total_iters = 0usize;
    let cycle_len = cfg.restart.unwrap_or(cfg.max_iters).max(1);

    loop {
        let ax = op.apply(&x)?;
        check_finite(&ax, "gmres operator output")?;
        let r0 = rhs - &ax;
        let r0_norm = r0.norm();
        let relres0 = r0_norm / b_norm;
        residual_norms.push(relres0);

        if relres0 <= cfg.rel_tol {
            return Ok(GmresResult {
                solution: x,
                residual_norms,
                iterations: total_iters,
                converged: true,
            });
        }
        if total_iters >= cfg.max_iters {
            return Ok(GmresResult {
                solution: x,
                residual_norms,
                iterations: total_iters,
                converged: false,
            });
        }

        let m = cycle_len.min(cfg.max_iters - total_iters).min(n);

        // Arnoldi basis and the Hessenberg system, updated by Givens
        // rotations so the projected residual is available per step.
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m + 1);
        basis.push(&r0 / r0_norm);
        let mut h = DMatrix::<f64>::zeros(m + 1, m);
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = DVector::<f64>::zeros(m + 1);
        g[0] = r0_norm;

        let mut k = 0usize;
        let mut breakdown = false;
        while k < m {
            let w_raw = op.apply(&basis[k])?;
            check_finite(&w_raw, "gmres operator output")?;
            let mut w = w_raw;
            let w_scale = w.norm();

            for (j, vj) in basis.iter().enumerate().take(k + 1) {
                let hjk = vj.dot(&w);
                h[(j, k)] = hjk;
                w.axpy(-hjk, vj, 1.0);
            }
            let w_norm = w.norm();
            h[(k + 1, k)] = w_norm;

            // Apply accumulated rotations to the new column.
            for j in 0..k {
                let t = cs[j] * h[(j, k)] + sn[j] * h[(j + 1, k)];
                h[(j + 1, k)] = -sn[j] * h[(j, k)] + cs[j] * h[(j + 1, k)];
                h[(j, k)] = t;
            }
            let (c, s) = givens(h[(k, k)], h[(k + 1, k)]);
            cs[k] = c;
            sn[k] = s;
            h[(k, k)] = c * h[(k, k)] + s * h[(k + 1, k)];
            h[(k + 1, k)] = 0.0;
            let gt = c * g[k];
            g[k + 1] = -s * g[k];
            g[k] = gt;

            total_iters += 1;
            k += 1;
            let implied = g[k].abs() / b_norm;
            residual_norms.push(implied);

            if w_norm <= 1e-14 * w_scale.max(1.0) {
                breakdown = true;
                break;
            }
            if implied <= cfg.rel_tol || total_iters >= cfg.max_iters {
                break;
            }
            basis.push(&w / w_norm);
        }

        // Back-substitute H y = g over the first k columns and update x.
        if k > 0 {
            let mut y = DVector::<f64>::zeros(k);
            for i in (0..k).rev() {
                let mut sum = g[i];
                for j in (i + 1)..k {
                    sum -= h[(i, j)] * y[j];
                }
                y[i] = if h[(i, i)].abs() > f64::MIN_POSITIVE {
                    sum / h[(i, i)]
                } else {
                    0.0
                };
            }
            for (j, vj) in basis.iter().enumerate().take(k) {
                x.axpy(y[j], vj, 1.0);
            }
        }

        let implied = residual_norms.last().copied().unwrap_or(1.0);
        let done_ok = implied <= cfg.rel_tol;
        if done_ok || breakdown || total_iters >= cfg.max_iters {
            return Ok(GmresResult {
                solution: x,
                residual_norms,
                iterations: total_iters,
                converged: done_ok,
            });
        }
        // Otherwise restart from the updated iterate.
    }
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let r = a.hypot(b);
        (a / r, b / r)
    }
}

/// Forms the dense matrix of `op` column by column, `A e_k = op(e_k)`.
pub fn dense_materialize(op: &dyn LinearOperator) -> Result<DMatrix<f64>, KrylovError> {
    dense_materialize_capped(op, DENSE_MATERIALIZE_CAP)
}

pub fn dense_materialize_capped(
    op: &dyn LinearOperator,
    cap: usize,
) -> Result<DMatrix<f64>, KrylovError> {
    let n = op.dim();
    if n > cap {
        return Err(KrylovError::DimensionCap { dim: n, cap });
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut e = DVector::<f64>::zeros(n);
    for k in 0..n {
        e[k] = 1.0;
        let col = op.apply(&e)?;
        if col.len() != n {
            return Err(KrylovError::DimensionMismatch {
                expected: n,
                got: col.len(),
            });
        }
        a.set_column(k, &col);
        e[k] = 0.0;
    }
    Ok(a)
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
///
/// A pivot below `1e-12` times the largest row sum of the input matrix is
/// reported as [`KrylovError::SingularMatrix`]; this error path is load
/// bearing for detecting rank-deficient KKT systems, so it must not be
/// silently regularized.
pub fn dense_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, KrylovError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(KrylovError::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    if b.len() != n {
        return Err(KrylovError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }

    let max_row_norm = (0..n)
        .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let pivot_floor = 1e-12 * max_row_norm;

    let mut m = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = m[(col, col)].abs();
        for row in (col + 1)..n {
            let v = m[(row, col)].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val <= pivot_floor || pivot_val == 0.0 {
            return Err(KrylovError::SingularMatrix { column: col });
        }
        if pivot_row != col {
            m.swap_rows(pivot_row, col);
            x.swap_rows(pivot_row, col);
        }
        let pivot = m[(col, col)];
        for row in (col + 1)..n {
            let factor = m[(row, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            m[(row, col)] = 0.0;
            for j in (col + 1)..n {
                m[(row, j)] -= factor * m[(col, j)];
            }
            x[row] -= factor * x[col];
        }
    }

    for row in (0..n).rev() {
        let mut sum = x[row];
        for j in (row + 1)..n {
            sum -= m[(row, j)] * x[j];
        }
        x[row] = sum / m[(row, row)];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_op(n: usize) -> FnOperator<impl Fn(&DVector<f64>) -> DVector<f64>> {
        FnOperator::new(n, |v: &DVector<f64>| v.clone())
    }

    #[test]
    fn gmres_identity_one_iteration() {
        let op = identity_op(3);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x0 = DVector::zeros(3);
        let r = gmres_solve(&op, &b, &x0, &GmresConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!((&r.solution - &b).norm() < 1e-12);
    }

    #[test]
    fn gmres_diagonal_solve() {
        let diag = [1.0, 2.0, 4.0];
        let op = FnOperator::new(3, move |v: &DVector<f64>| {
            DVector::from_iterator(3, v.iter().zip(diag.iter()).map(|(x, d)| x * d))
        });
        let b = DVector::from_vec(vec![1.0, 2.0, 4.0]);
        let x0 = DVector::zeros(3);
        let r = gmres_solve(&op, &b, &x0, &GmresConfig::default()).unwrap();
        assert!(r.converged);
        for xi in r.solution.iter() {
            assert!((xi - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gmres_zero_rhs_returns_x0() {
        let op = identity_op(4);
        let b = DVector::zeros(4);
        let x0 = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let r = gmres_solve(&op, &b, &x0, &GmresConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.solution, x0);
    }

    #[test]
    fn gmres_nonfinite_operator_errors() {
        let op = FnOperator::new(2, |_v: &DVector<f64>| {
            DVector::from_vec(vec![f64::NAN, 0.0])
        });
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let x0 = DVector::zeros(2);
        let err = gmres_solve(&op, &b, &x0, &GmresConfig::default()).unwrap_err();
        assert!(matches!(err, KrylovError::NonFinite { .. }));
    }

    #[test]
    fn gmres_residual_history_non_increasing() {
        // Non-symmetric but well-conditioned test matrix.
        let n = 12;
        let mut a = DMatrix::<f64>::identity(n, n) * 3.0;
        for i in 0..n - 1 {
            a[(i, i + 1)] = 1.0;
            a[(i + 1, i)] = -0.5;
        }
        let b = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin() + 1.5);
        let op = MatrixOperator::new(&a);
        let r = gmres_solve(&op, &b, &DVector::zeros(n), &GmresConfig::default()).unwrap();
        assert!(r.converged);
        for w in r.residual_norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-14, "residuals increased: {:?}", w);
        }
    }

    #[test]
    fn gmres_restarted_still_converges() {
        let n = 20;
        let mut a = DMatrix::<f64>::identity(n, n) * 4.0;
        for i in 0..n - 1 {
            a[(i + 1, i)] = 1.0;
        }
        let b = DVector::from_fn(n, |i, _| 1.0 + i as f64);
        let op = MatrixOperator::new(&a);
        let cfg = GmresConfig {
            rel_tol: 1e-10,
            max_iters: 400,
            restart: Some(5),
        };
        let r = gmres_solve(&op, &b, &DVector::zeros(n), &cfg).unwrap();
        assert!(r.converged);
        let res = (&a * &r.solution - &b).norm() / b.norm();
        assert!(res < 1e-9, "true residual {res}");
    }

    #[test]
    fn materialize_identity() {
        let op = identity_op(2);
        let a = dense_materialize(&op).unwrap();
        assert_eq!(a, DMatrix::identity(2, 2));
    }

    #[test]
    fn materialize_swap_operator() {
        let op = FnOperator::new(2, |v: &DVector<f64>| DVector::from_vec(vec![v[1], v[0]]));
        let a = dense_materialize(&op).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn materialize_respects_cap() {
        let op = identity_op(8);
        let err = dense_materialize_capped(&op, 4).unwrap_err();
        assert!(matches!(err, KrylovError::DimensionCap { dim: 8, cap: 4 }));
    }

    #[test]
    fn dense_solve_identity() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DVector::from_vec(vec![4.0, 5.0, 6.0]);
        let x = dense_solve(&a, &b).unwrap();
        assert!((&x - &b).norm() < 1e-14);
    }

    #[test]
    fn dense_solve_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = DVector::from_vec(vec![2.0, 1.0]);
        let x = dense_solve(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert!((x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn dense_solve_reports_rank_deficiency() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let err = dense_solve(&a, &b).unwrap_err();
        assert!(matches!(err, KrylovError::SingularMatrix { .. }));
    }

    #[test]
    fn gmres_matches_dense_solve_on_random_symmetric() {
        // Fixed-seed random symmetric system, cross-validated against the
        // elimination oracle.
        let n = 5;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = next();
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            a[(i, i)] += 3.0;
        }
        let b = DVector::from_fn(n, |_, _| next());
        let op = MatrixOperator::new(&a);
        let x_gmres = gmres_solve(&op, &b, &DVector::zeros(n), &GmresConfig::default())
            .unwrap()
            .solution;
        let x_dense = dense_solve(&a, &b).unwrap();
        assert!((&x_gmres - &x_dense).norm() <= 1e-10 * x_dense.norm().max(1.0));
    }

    #[test]
    fn finite_termination_at_full_dimension() {
        let n = 50;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = ((i * 31 + j * 17) % 23) as f64 / 23.0;
            }
            a[(i, i)] += 5.0;
        }
        let b = DVector::from_fn(n, |i, _| ((i * 7 % 11) as f64) - 5.0);
        let op = MatrixOperator::new(&a);
        let cfg = GmresConfig {
            rel_tol: 1e-12,
            max_iters: n,
            restart: None,
        };
        let r = gmres_solve(&op, &b, &DVector::zeros(n), &cfg).unwrap();
        assert!(r.final_relres() <= 1e-10);
    }
}
