//! Symmetric eigendecomposition.
//!
//! Small matrices go through cyclic Jacobi rotations; above
//! [`JACOBI_MAX_DIM`] the solver switches to Householder tridiagonalization
//! with implicit QL, which is an order of magnitude faster at the sizes the
//! activation subspaces reach. Both paths are deterministic.

use super::matrix::{gemm, DenseMatrix, Transpose};
use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues sorted non-increasing.
///
/// Column `i` of `vectors` is the unit eigenvector for `values[i]`, with its
/// largest-magnitude entry made positive.
#[derive(Clone, Debug)]
pub struct EigenResult {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenMethod {
    /// Jacobi up to [`JACOBI_MAX_DIM`], tridiagonal QL beyond.
    Auto,
    Jacobi,
    TridiagonalQl,
}

/// Largest dimension handled by Jacobi under [`EigenMethod::Auto`].
pub const JACOBI_MAX_DIM: usize = 128;

#[derive(Clone, Copy, Debug)]
pub struct EigenOptions {
    pub method: EigenMethod,
    /// Jacobi stops when the off-diagonal Frobenius norm falls below
    /// `tolerance * ||A||_F`.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// QL iteration cap per eigenvalue.
    pub max_ql_iterations: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            method: EigenMethod::Auto,
            tolerance: 1e-12,
            max_sweeps: 100,
            max_ql_iterations: 60,
        }
    }
}

/// Maximum tolerated `|A - Aᵀ|` entry, relative to `max(1, |A|_max)`.
const SYMMETRY_TOL: f64 = 1e-9;

pub fn sym_eig(a: &DenseMatrix) -> Result<EigenResult> {
    sym_eig_with(a, EigenOptions::default())
}

pub fn sym_eig_with(a: &DenseMatrix, opts: EigenOptions) -> Result<EigenResult> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(Error::NotSquare {
            op: "sym_eig",
            rows,
            cols,
        });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("sym_eig input"));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "sym_eig input is not symmetric (max deviation {asym:e})"
        )));
    }
    let n = rows;
    let mut m = DenseMatrix::from_fn(n, n, |r, c| 0.5 * (a.get(r, c) + a.get(c, r)));
    let use_jacobi = match opts.method {
        EigenMethod::Jacobi => true,
        EigenMethod::TridiagonalQl => false,
        EigenMethod::Auto => n <= JACOBI_MAX_DIM,
    };

    // rows of `vt` are the eigenvectors
    let (diag, vt) = if use_jacobi {
        let mut vt = DenseMatrix::identity(n);
        let scale = m.frobenius();
        if n > 1 && scale > 0.0 {
            jacobi_sweeps(&mut m, &mut vt, scale, opts)?;
        }
        ((0..n).map(|i| m.get(i, i)).collect::<Vec<_>>(), vt)
    } else {
        let (d, w) = super::tridiag::tridiagonal_ql(m.data(), n, opts.max_ql_iterations)?;
        (d, DenseMatrix::new(n, n, w)?)
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));

    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut v = vt.row(src).to_vec();
        canonical_sign(&mut v);
        vectors.set_column(col, &v);
    }
    Ok(EigenResult { values, vectors })
}

fn off_diagonal_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for p in 0..n {
        let row = m.row(p);
        for v in &row[p + 1..] {
            s += v * v;
        }
    }
    (2.0 * s).sqrt()
}

fn jacobi_sweeps(
    m: &mut DenseMatrix,
    vt: &mut DenseMatrix,
    scale: f64,
    opts: EigenOptions,
) -> Result<()> {
    let n = m.rows();
    let target = opts.tolerance * scale;
    for sweep in 0..opts.max_sweeps {
        let off = off_diagonal_norm(m);
        if off <= target {
            return Ok(());
        }
        // Entries below this are left alone in the current sweep; they
        // contribute at most `target` to the off-diagonal norm in total.
        let skip = target / (n as f64);
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= skip {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                if sweep > 3 && app.abs() + 100.0 * apq.abs() == app.abs()
                    && aqq.abs() + 100.0 * apq.abs() == aqq.abs()
                {
                    m.set(p, q, 0.0);
                    m.set(q, p, 0.0);
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate_rows(m.data_mut(), n, p, q, c, s);
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                // mirror the updated rows into the columns
                for k in 0..n {
                    if k != p && k != q {
                        let vp = m.get(p, k);
                        let vq = m.get(q, k);
                        m.set(k, p, vp);
                        m.set(k, q, vq);
                    }
                }
                rotate_rows(vt.data_mut(), n, p, q, c, s);
            }
        }
    }
    let residual = off_diagonal_norm(m);
    if residual <= target {
        Ok(())
    } else {
        Err(Error::NoConvergence {
            sweeps: opts.max_sweeps,
            residual,
        })
    }
}

/// Applies `(x, y) -> (c x - s y, s x + c y)` to rows `p < q` of an `n`-column buffer.
#[inline]
fn rotate_rows(data: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = data.split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Flips `v` so its largest-magnitude entry is positive (first one on ties).
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0.0;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenstructure of the uncentered second-moment matrix `X·Xᵀ/N` of a
/// `d x N` sample matrix.
///
/// `values` holds all `min(d, N)` eigenvalues, non-increasing and clamped at
/// zero. `vectors` (`d x m`) holds only the eigenvectors whose eigenvalue
/// exceeds `floor * values[0]`; the remaining directions are treated as
/// numerically zero.
#[derive(Clone, Debug)]
pub struct SubspaceSpectrum {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

/// Default relative eigenvalue floor below which directions count as zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

pub fn second_moment_spectrum(x: &DenseMatrix, floor: f64) -> Result<SubspaceSpectrum> {
    let (d, n) = x.shape();
    if n == 0 || d == 0 {
        return Err(Error::Degenerate("activation matrix has no entries"));
    }
    if x.max_abs() == 0.0 {
        return Err(Error::Degenerate("activation matrix is identically zero"));
    }
    let inv_n = 1.0 / n as f64;
    if d <= n {
        let mut c = gemm(x, Transpose::No, x, Transpose::Yes)?;
        c.scale(inv_n);
        let eig = sym_eig(&c)?;
        let values = clamp_nonneg(eig.values);
        let keep = count_above_floor(&values, floor);
        Ok(SubspaceSpectrum {
            vectors: eig.vectors.leading_columns(keep),
            values,
        })
    } else {
        // Same nonzero spectrum through the N x N Gram matrix; left singular
        // vectors are recovered as X v / sqrt(N lambda).
        let mut g = gemm(x, Transpose::Yes, x, Transpose::No)?;
        g.scale(inv_n);
        let eig = sym_eig(&g)?;
        let values = clamp_nonneg(eig.values);
        let keep = count_above_floor(&values, floor);
        let right = eig.vectors.leading_columns(keep);
        let mut left = super::matmul(x, &right)?;
        for j in 0..keep {
            let norm = (n as f64 * values[j]).sqrt();
            for i in 0..d {
                let v = left.get(i, j) / norm;
                left.set(i, j, v);
            }
        }
        // restore exact orthonormality lost in the back-mapping
        let mut vectors = super::orthonormalize(&left, 1e-6);
        for j in 0..vectors.cols() {
            let mut col = vectors.column(j);
            canonical_sign(&mut col);
            vectors.set_column(j, &col);
        }
        Ok(SubspaceSpectrum { values, vectors })
    }
}

fn clamp_nonneg(mut values: Vec<f64>) -> Vec<f64> {
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    values
}

fn count_above_floor(values: &[f64], floor: f64) -> usize {
    let lead = values.first().copied().unwrap_or(0.0);
    values.iter().take_while(|&&v| v > floor * lead && v > 0.0).count()
}
