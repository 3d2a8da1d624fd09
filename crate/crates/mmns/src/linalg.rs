use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> SparseMatrix {
        triplets.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_offsets = vec![0usize; n_rows + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (i, j, v) in triplets {
            debug_assert!(i < n_rows && j < n_cols);
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(j);
                values.push(v);
                last = Some((i, j));
            }
            row_offsets[i + 1] = col_indices.len();
        }
        for i in 0..n_rows {
            if row_offsets[i + 1] < row_offsets[i] {
                row_offsets[i + 1] = row_offsets[i];
            }
        }
        SparseMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn identity(n: usize) -> SparseMatrix {
        SparseMatrix {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    pub fn row_mut(&mut self, i: usize) -> (&[usize], &mut [f64]) {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[span.clone()], &mut self.values[span])
    }

    /// Zero every stored value, keeping the sparsity pattern.
    pub fn zero_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Add `v` to the stored entry (i, j); the entry must be in the pattern.
    pub fn add_entry(&mut self, i: usize, j: usize, v: f64) {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        let cols = &self.col_indices[span.clone()];
        match cols.binary_search(&j) {
            Ok(pos) => self.values[span.start + pos] += v,
            Err(_) => panic!("entry ({i}, {j}) is not in the sparsity pattern"),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols, "matvec dimension mismatch");
        assert_eq!(y.len(), self.n_rows, "matvec dimension mismatch");
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    /// Replace row i by the identity row (requires the diagonal in the
    /// pattern).
    pub fn set_identity_row(&mut self, i: usize) {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        let cols = &self.col_indices[span.clone()];
        let pos = cols
            .binary_search(&i)
            .unwrap_or_else(|_| panic!("diagonal ({i}, {i}) missing from the sparsity pattern"));
        for v in &mut self.values[span.clone()] {
            *v = 0.0;
        }
        self.values[span.start + pos] = 1.0;
    }
}

/// Impose Dirichlet values on a linear system. Constrained rows become
/// identity rows with the value on the right-hand side; with `symmetric`
/// the columns are eliminated as well (moving the known values to the
/// right-hand side), which preserves symmetry for CG.
pub fn apply_dirichlet(
    a: &mut SparseMatrix,
    b: &mut [f64],
    constraints: &[(usize, f64)],
    symmetric: bool,
) {
    let mut bc: Vec<Option<f64>> = vec![None; a.n_rows];
    for &(dof, value) in constraints {
        bc[dof] = Some(value);
    }
    if symmetric {
        for i in 0..a.n_rows {
            if bc[i].is_some() {
                continue;
            }
            let span = a.row_offsets[i]..a.row_offsets[i + 1];
            for idx in span {
                let j = a.col_indices[idx];
                if let Some(g) = bc[j] {
                    b[i] -= a.values[idx] * g;
                    a.values[idx] = 0.0;
                }
            }
        }
    }
    for (dof, value) in bc.iter().enumerate() {
        if let Some(g) = value {
            a.set_identity_row(dof);
            b[dof] = *g;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot dimension mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len(), "axpy dimension mismatch");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cg,
    BiCgStab,
    Gmres(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    Jacobi,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSpec {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

impl SolverSpec {
    pub fn cg(rtol: f64) -> Self {
        SolverSpec {
            method: Method::Cg,
            rtol,
            atol: 1e-14,
            max_iter: 20_000,
            preconditioner: Preconditioner::Jacobi,
        }
    }

    pub fn bicgstab(rtol: f64) -> Self {
        SolverSpec {
            method: Method::BiCgStab,
            rtol,
            atol: 1e-14,
            max_iter: 20_000,
            preconditioner: Preconditioner::Jacobi,
        }
    }

    pub fn gmres(rtol: f64) -> Self {
        SolverSpec {
            method: Method::Gmres(50),
            rtol,
            atol: 1e-14,
            max_iter: 20_000,
            preconditioner: Preconditioner::Jacobi,
        }
    }
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec::cg(1e-10)
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    fn new(a: &SparseMatrix, enabled: bool) -> Jacobi {
        let inv_diag = if enabled {
            a.diagonal()
                .iter()
                .map(|&d| if d.abs() > f64::MIN_POSITIVE { 1.0 / d } else { 1.0 })
                .collect()
        } else {
            vec![1.0; a.n_rows]
        };
        Jacobi { inv_diag }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.inv_diag).map(|(x, d)| x * d).collect()
    }
}

/// Solve A x = b iteratively. The returned solution satisfies
/// ||b - A x|| <= max(rtol ||b||, atol); otherwise a non-convergence error
/// carrying the residual history is returned.
pub fn solve(
    a: &SparseMatrix,
    b: &[f64],
    spec: &SolverSpec,
    x0: Option<&[f64]>,
) -> Result<SolveResult> {
    if a.n_rows != a.n_cols {
        return Err(Error::InvalidArgument(format!(
            "solver needs a square matrix, got {}x{}",
            a.n_rows, a.n_cols
        )));
    }
    if b.len() != a.n_rows {
        return Err(Error::InvalidArgument(format!(
            "right-hand side length {} does not match matrix dimension {}",
            b.len(),
            a.n_rows
        )));
    }
    if let Some(x0) = x0 {
        if x0.len() != a.n_cols {
            return Err(Error::InvalidArgument(
                "initial guess length does not match matrix dimension".into(),
            ));
        }
    }
    let tol = (spec.rtol * norm2(b)).max(spec.atol);
    match spec.method {
        Method::Cg => cg(a, b, spec, x0, tol),
        Method::BiCgStab => bicgstab(a, b, spec, x0, tol),
        Method::Gmres(m) => gmres(a, b, spec, x0, tol, m.max(1)),
    }
}

fn diverged(method: &str, iterations: usize, history: Vec<f64>) -> Error {
    Error::SolverDiverged {
        method: method.into(),
        iterations,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    }
}

fn cg(
    a: &SparseMatrix,
    b: &[f64],
    spec: &SolverSpec,
    x0: Option<&[f64]>,
    tol: f64,
) -> Result<SolveResult> {
    let n = a.n_rows;
    let precond = Jacobi::new(a, spec.preconditioner == Preconditioner::Jacobi);
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    let mut r = b.to_vec();
    let mut ax = vec![0.0; n];
    a.matvec_into(&x, &mut ax);
    for i in 0..n {
        r[i] -= ax[i];
    }
    let mut history = vec![norm2(&r)];
    if history[0] <= tol {
        return Ok(SolveResult {
            x,
            iterations: 0,
            residual: history[0],
        });
    }
    let mut z = precond.apply(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for iter in 1..=spec.max_iter {
        a.matvec_into(&p, &mut ax);
        let pap = dot(&p, &ax);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(diverged("CG", iter, history));
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ax, &mut r);
        let rnorm = norm2(&r);
        history.push(rnorm);
        if rnorm <= tol {
            return Ok(SolveResult {
                x,
                iterations: iter,
                residual: rnorm,
            });
        }
        z = precond.apply(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(diverged("CG", spec.max_iter, history))
}

fn bicgstab(
    a: &SparseMatrix,
    b: &[f64],
    spec: &SolverSpec,
    x0: Option<&[f64]>,
    tol: f64,
) -> Result<SolveResult> {
    let n = a.n_rows;
    let precond = Jacobi::new(a, spec.preconditioner == Preconditioner::Jacobi);
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    let mut r = b.to_vec();
    let mut tmp = vec![0.0; n];
    a.matvec_into(&x, &mut tmp);
    for i in 0..n {
        r[i] -= tmp[i];
    }
    let mut history = vec![norm2(&r)];
    if history[0] <= tol {
        return Ok(SolveResult {
            x,
            iterations: 0,
            residual: history[0],
        });
    }
    let mut r_hat = r.clone();
    let mut rho_prev = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut residual_at_restart = history[0];
    let mut stalled_restarts = 0;
    for iter in 1..=spec.max_iter {
        // A vanishing rho, rv, or omega is a Lanczos breakdown, not
        // divergence; restart with a fresh shadow residual from the current
        // iterate, giving up only when restarts stop making progress.
        let mut breakdown = false;
        let rho = dot(&r_hat, &r);
        if !rho.is_finite() {
            return Err(diverged("BiCGStab", iter, history));
        }
        breakdown |= rho.abs() < f64::MIN_POSITIVE;
        if !breakdown {
            let beta = (rho / rho_prev) * (alpha / omega);
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            let p_hat = precond.apply(&p);
            a.matvec_into(&p_hat, &mut v);
            let rv = dot(&r_hat, &v);
            if !rv.is_finite() {
                return Err(diverged("BiCGStab", iter, history));
            }
            if rv.abs() < f64::MIN_POSITIVE {
                breakdown = true;
            } else {
                alpha = rho / rv;
                let mut s = r.clone();
                axpy(-alpha, &v, &mut s);
                let snorm = norm2(&s);
                if snorm <= tol {
                    axpy(alpha, &p_hat, &mut x);
                    history.push(snorm);
                    return Ok(SolveResult {
                        x,
                        iterations: iter,
                        residual: snorm,
                    });
                }
                let s_hat = precond.apply(&s);
                a.matvec_into(&s_hat, &mut tmp);
                let tt = dot(&tmp, &tmp);
                if !tt.is_finite() {
                    return Err(diverged("BiCGStab", iter, history));
                }
                omega = if tt < f64::MIN_POSITIVE {
                    0.0
                } else {
                    dot(&tmp, &s) / tt
                };
                axpy(alpha, &p_hat, &mut x);
                if omega.abs() < f64::MIN_POSITIVE {
                    breakdown = true;
                } else {
                    axpy(omega, &s_hat, &mut x);
                    for i in 0..n {
                        r[i] = s[i] - omega * tmp[i];
                    }
                    let rnorm = norm2(&r);
                    history.push(rnorm);
                    if rnorm <= tol {
                        return Ok(SolveResult {
                            x,
                            iterations: iter,
                            residual: rnorm,
                        });
                    }
                    rho_prev = rho;
                }
            }
        }
        if breakdown {
            a.matvec_into(&x, &mut tmp);
            for i in 0..n {
                r[i] = b[i] - tmp[i];
            }
            let rnorm = norm2(&r);
            history.push(rnorm);
            if rnorm <= tol {
                return Ok(SolveResult {
                    x,
                    iterations: iter,
                    residual: rnorm,
                });
            }
            if rnorm < 0.9 * residual_at_restart {
                stalled_restarts = 0;
            } else {
                stalled_restarts += 1;
                if stalled_restarts > 2 {
                    return Err(diverged("BiCGStab", iter, history));
                }
            }
            residual_at_restart = rnorm;
            r_hat.copy_from_slice(&r);
            rho_prev = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|z| *z = 0.0);
            p.iter_mut().for_each(|z| *z = 0.0);
        }
    }
    Err(diverged("BiCGStab", spec.max_iter, history))
}

fn gmres(
    a: &SparseMatrix,
    b: &[f64],
    spec: &SolverSpec,
    x0: Option<&[f64]>,
    tol: f64,
    m: usize,
) -> Result<SolveResult> {
    let n = a.n_rows;
    let precond = Jacobi::new(a, spec.preconditioner == Preconditioner::Jacobi);
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    let mut history = Vec::new();
    let mut total_iters = 0usize;
    loop {
        let mut r = b.to_vec();
        let ax = a.matvec(&x);
        for i in 0..n {
            r[i] -= ax[i];
        }
        let beta = norm2(&r);
        history.push(beta);
        if beta <= tol {
            return Ok(SolveResult {
                x,
                iterations: total_iters,
                residual: beta,
            });
        }
        if total_iters >= spec.max_iter {
            return Err(diverged("GMRES", total_iters, history));
        }

        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;

        for j in 0..m {
            let z = precond.apply(&basis[j]);
            let mut w = a.matvec(&z);
            for i in 0..=j {
                let hij = dot(&w, &basis[i]);
                h[i][j] = hij;
                axpy(-hij, &basis[i], &mut w);
            }
            let wnorm = norm2(&w);
            h[j + 1][j] = wnorm;
            total_iters += 1;
            k_used = j + 1;

            for i in 0..j {
                let temp = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = temp;
            }
            let denom = (h[j][j] * h[j][j] + h[j + 1][j] * h[j + 1][j]).sqrt();
            if denom < f64::MIN_POSITIVE {
                return Err(diverged("GMRES", total_iters, history));
            }
            cs[j] = h[j][j] / denom;
            sn[j] = h[j + 1][j] / denom;
            h[j][j] = denom;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            let res = g[j + 1].abs();
            history.push(res);

            let lucky = wnorm < f64::MIN_POSITIVE;
            if res <= tol || total_iters >= spec.max_iter || lucky {
                break;
            }
            basis.push(w.iter().map(|v| v / wnorm).collect());
        }

        let mut y = vec![0.0f64; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in (i + 1)..k_used {
                acc -= h[i][j] * y[j];
            }
            y[i] = acc / h[i][i];
        }
        let mut update = vec![0.0f64; n];
        for (j, yj) in y.iter().enumerate() {
            axpy(*yj, &basis[j], &mut update);
        }
        let update = precond.apply(&update);
        for i in 0..n {
            x[i] += update[i];
        }
    }
}

pub fn write_matrix_market(a: &SparseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("%%MatrixMarket matrix coordinate real general\n");
    out.push_str(&format!("{} {} {}\n", a.n_rows, a.n_cols, a.nnz()));
    for i in 0..a.n_rows {
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            out.push_str(&format!("{} {} {}\n", i + 1, j + 1, v));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_market(path: impl AsRef<Path>) -> Result<SparseMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing MatrixMarket header"))?;
    if !header.starts_with("%%MatrixMarket matrix coordinate real general") {
        return Err(Error::parse(path, 1, "unsupported MatrixMarket header"));
    }
    let mut dims = None;
    let mut triplets = Vec::new();
    for (lineno, raw) in lines {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if dims.is_none() {
            if fields.len() != 3 {
                return Err(Error::parse(path, lineno, "expected `rows cols nnz`"));
            }
            let r: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad row count"))?;
            let c: usize = fields[1]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad column count"))?;
            dims = Some((r, c));
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno, "expected `i j value`"));
        }
        let i: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, lineno, "bad row index"))?;
        let j: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, lineno, "bad column index"))?;
        let v: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, "bad value"))?;
        let (r, c) = dims.unwrap();
        if i == 0 || j == 0 || i > r || j > c {
            return Err(Error::parse(path, lineno, "index out of range"));
        }
        triplets.push((i - 1, j - 1, v));
    }
    let (r, c) = dims.ok_or_else(|| Error::parse(path, 1, "missing size line"))?;
    Ok(SparseMatrix::from_triplets(r, c, triplets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let d = a[col][col];
            for row in (col + 1)..n {
                let f = a[row][col] / d;
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in (row + 1)..n {
                acc -= a[row][k] * x[k];
            }
            x[row] = acc / a[row][row];
        }
        x
    }

    fn from_dense(a: &[Vec<f64>]) -> SparseMatrix {
        let mut triplets = Vec::new();
        for (i, row) in a.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        SparseMatrix::from_triplets(a.len(), a[0].len(), triplets)
    }

    struct Lcg(u64);
    impl Lcg {
        fn next(&mut self) -> f64 {
            self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (self.0 >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn identity_solves_immediately() {
        let a = SparseMatrix::identity(5);
        let b = vec![1.0, -2.0, 3.0, 0.5, 0.0];
        for spec in [
            SolverSpec::cg(1e-12),
            SolverSpec::bicgstab(1e-12),
            SolverSpec::gmres(1e-12),
        ] {
            let r = solve(&a, &b, &spec, None).unwrap();
            assert!(r.iterations <= 1, "{:?} took {}", spec.method, r.iterations);
            for (got, want) in r.x.iter().zip(&b) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cg_two_by_two() {
        let a = from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let r = solve(&a, &[1.0, 2.0], &SolverSpec::cg(1e-13), None).unwrap();
        assert_abs_diff_eq!(r.x[0], 1.0 / 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.x[1], 7.0 / 11.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_matrix_reports_divergence() {
        let a = from_dense(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let err = solve(&a, &[1.0, 1.0], &SolverSpec::cg(1e-12), None).unwrap_err();
        match err {
            Error::SolverDiverged { ref history, .. } => assert!(!history.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn vector_kernels() {
        let a = SparseMatrix::identity(3);
        let x = vec![1.0, 2.0, 3.0];
        assert_eq!(a.matvec(&x), x);
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_abs_diff_eq!(norm2(&[3.0, 4.0]), 5.0, epsilon = 1e-15);
        let mut y = vec![1.0, 1.0];
        axpy(2.0, &[1.0, -1.0], &mut y);
        assert_eq!(y, vec![3.0, -1.0]);
    }

    #[test]
    fn cg_matches_dense_oracle_on_random_spd() {
        let n = 60;
        let mut rng = Lcg(42);
        let mut m = vec![vec![0.0; n]; n];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.next() - 0.5;
            }
        }
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    acc += m[k][i] * m[k][j];
                }
                a[i][j] = acc;
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.next() - 0.5).collect();
        let sparse = from_dense(&a);
        let got = solve(&sparse, &b, &SolverSpec::cg(1e-11), None).unwrap();
        let want = dense_solve(a, b);
        for (g, w) in got.x.iter().zip(&want) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-8);
        }
    }

    #[test]
    fn bicgstab_and_gmres_match_dense_oracle_on_nonsymmetric() {
        let n = 40;
        let mut rng = Lcg(7);
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = if i == j {
                    4.0 + rng.next()
                } else {
                    (rng.next() - 0.5) / n as f64 * 4.0
                };
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.next() - 0.5).collect();
        let sparse = from_dense(&a);
        let want = dense_solve(a, b.clone());
        for spec in [SolverSpec::bicgstab(1e-12), SolverSpec::gmres(1e-12)] {
            let got = solve(&sparse, &b, &spec, None).unwrap();
            for (g, w) in got.x.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn preconditioning_does_not_change_the_answer() {
        let a = from_dense(&[
            vec![10.0, 1.0, 0.0],
            vec![1.0, 20.0, 2.0],
            vec![0.0, 2.0, 30.0],
        ]);
        let b = vec![1.0, 2.0, 3.0];
        let mut plain = SolverSpec::cg(1e-13);
        plain.preconditioner = Preconditioner::None;
        let x1 = solve(&a, &b, &plain, None).unwrap().x;
        let x2 = solve(&a, &b, &SolverSpec::cg(1e-13), None).unwrap().x;
        for (p, q) in x1.iter().zip(&x2) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-10);
        }
    }

    #[test]
    fn warm_start_from_solution_takes_no_iterations() {
        let a = from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let b = [1.0, 2.0];
        let first = solve(&a, &b, &SolverSpec::cg(1e-12), None).unwrap();
        let again = solve(&a, &b, &SolverSpec::cg(1e-10), Some(&first.x)).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn pattern_reuse_with_add_entry() {
        let mut a = SparseMatrix::from_triplets(
            2,
            2,
            vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 1, 4.0)],
        );
        a.zero_values();
        assert_eq!(a.get(0, 1), 0.0);
        a.add_entry(0, 1, 5.0);
        a.add_entry(0, 1, 1.0);
        assert_eq!(a.get(0, 1), 6.0);
        assert_eq!(a.nnz(), 4);
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.5), (1, 1, 1.0)]);
        assert_eq!(a.get(0, 0), 3.5);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn dirichlet_identity_and_symmetric_elimination() {
        let base = from_dense(&[
            vec![2.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 2.0],
        ]);
        let mut a = base.clone();
        let mut b = vec![0.0, 0.0, 0.0];
        apply_dirichlet(&mut a, &mut b, &[(0, 1.0)], false);
        assert_eq!(a.get(0, 0), 1.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(b[0], 1.0);
        assert_eq!(a.get(1, 0), -1.0);

        let mut a = base;
        let mut b = vec![0.0, 0.0, 0.0];
        apply_dirichlet(&mut a, &mut b, &[(0, 1.0)], true);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(b[1], 1.0);
        let r = solve(&a, &b, &SolverSpec::cg(1e-13), None).unwrap();
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.x[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.x[2], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn matrix_market_round_trip() {
        let dir = std::env::temp_dir().join("mmns_linalg");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fixture.mtx");
        let a = from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        write_matrix_market(&a, &path).unwrap();
        let back = read_matrix_market(&path).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = SparseMatrix::from_triplets(2, 3, vec![(0, 0, 1.0)]);
        assert!(solve(&a, &[1.0, 2.0], &SolverSpec::default(), None).is_err());
        let b = SparseMatrix::identity(2);
        assert!(solve(&b, &[1.0, 2.0, 3.0], &SolverSpec::default(), None).is_err());
    }
}
