//! Orthonormal bases, captured-variance thresholding and complement projection.

use super::matrix::{gemm, DenseMatrix, Transpose};
use crate::error::{Error, Result};

/// Tolerance on `|MᵀM - I|_max` for a basis to count as orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Slack on the captured-variance comparison so that a threshold hit exactly
/// in real arithmetic is not missed by rounding.
const CAPTURE_SLACK: f64 = 1e-12;

/// Smallest `r >= 1` whose leading eigenvalues capture at least `eps_th` of
/// the total spectrum.
pub fn captured_dim(eigenvalues: &[f64], eps_th: f64) -> Result<usize> {
    if !(eps_th > 0.0 && eps_th <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_th must lie in (0, 1], got {eps_th}"
        )));
    }
    if eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "captured_dim needs finite non-negative eigenvalues".into(),
        ));
    }
    if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidArgument(
            "captured_dim needs a non-increasing spectrum".into(),
        ));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("spectrum sums to zero"));
    }
    let mut cum = 0.0;
    for (i, v) in eigenvalues.iter().enumerate() {
        cum += v;
        if cum / total >= eps_th - CAPTURE_SLACK {
            return Ok(i + 1);
        }
    }
    Ok(eigenvalues.len())
}

/// Largest entry of `|MᵀM - I|`.
pub fn gram_deviation(m: &DenseMatrix) -> f64 {
    if m.cols() == 0 {
        return 0.0;
    }
    let g = gemm(m, Transpose::Yes, m, Transpose::No).expect("gram of a matrix is square");
    let mut dev: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((g.get(i, j) - target).abs());
        }
    }
    dev
}

fn check_orthonormal(m: &DenseMatrix) -> Result<()> {
    let deviation = gram_deviation(m);
    if deviation > ORTHONORMAL_TOL || !deviation.is_finite() {
        return Err(Error::NotOrthonormal { deviation });
    }
    Ok(())
}

/// `G·(I - M·Mᵀ)`: removes from every row of `g` its component in span(M).
pub fn project_complement(g: &DenseMatrix, m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.rows() != g.cols() {
        return Err(Error::Shape {
            op: "project_complement",
            left: g.shape(),
            right: m.shape(),
        });
    }
    check_orthonormal(m)?;
    Ok(low_rank_complement(g, m))
}

fn low_rank_complement(g: &DenseMatrix, m: &DenseMatrix) -> DenseMatrix {
    if m.cols() == 0 {
        return g.clone();
    }
    let gm = gemm(g, Transpose::No, m, Transpose::No).expect("shapes checked");
    let inside = gemm(&gm, Transpose::No, m, Transpose::Yes).expect("shapes checked");
    let mut out = g.clone();
    for (o, v) in out.data_mut().iter_mut().zip(inside.data()) {
        *o -= v;
    }
    out
}

#[derive(Clone, Debug)]
enum Strategy {
    Identity,
    Zero,
    LowRank(DenseMatrix),
    /// Precomputed `I - M·Mᵀ`, cheaper once the basis covers over half the space.
    Dense(DenseMatrix),
}

/// A validated complement projector for repeated use during training.
#[derive(Clone, Debug)]
pub struct Projector {
    dim: usize,
    rank: usize,
    strategy: Strategy,
}

impl Projector {
    pub fn new(m: &DenseMatrix) -> Result<Self> {
        check_orthonormal(m)?;
        let dim = m.rows();
        let rank = m.cols();
        let strategy = if rank == 0 {
            Strategy::Identity
        } else if rank >= dim {
            Strategy::Zero
        } else if 2 * rank > dim {
            let mmt = gemm(m, Transpose::No, m, Transpose::Yes)?;
            let mut p = DenseMatrix::identity(dim);
            for (o, v) in p.data_mut().iter_mut().zip(mmt.data()) {
                *o -= v;
            }
            Strategy::Dense(p)
        } else {
            Strategy::LowRank(m.clone())
        };
        Ok(Self {
            dim,
            rank,
            strategy,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            rank: 0,
            strategy: Strategy::Identity,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn apply(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        if g.cols() != self.dim {
            return Err(Error::Shape {
                op: "projector",
                left: g.shape(),
                right: (self.dim, self.rank),
            });
        }
        Ok(match &self.strategy {
            Strategy::Identity => g.clone(),
            Strategy::Zero => DenseMatrix::zeros(g.rows(), g.cols()),
            Strategy::LowRank(m) => low_rank_complement(g, m),
            Strategy::Dense(p) => gemm(g, Transpose::No, p, Transpose::No)?,
        })
    }

    /// `(I - M·Mᵀ)·x` for a `dim x B` matrix. Projecting the inputs of a
    /// layer this way yields the same projected gradient `δ·((I - MMᵀ)X)ᵀ`
    /// and is cheaper when the batch is narrower than the layer.
    pub fn apply_columns(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.dim {
            return Err(Error::Shape {
                op: "projector",
                left: x.shape(),
                right: (self.dim, self.rank),
            });
        }
        Ok(match &self.strategy {
            Strategy::Identity => x.clone(),
            Strategy::Zero => DenseMatrix::zeros(x.rows(), x.cols()),
            Strategy::LowRank(m) => {
                let coeff = gemm(m, Transpose::Yes, x, Transpose::No)?;
                let inside = gemm(m, Transpose::No, &coeff, Transpose::No)?;
                x.sub(&inside)?
            }
            // P is symmetric
            Strategy::Dense(p) => gemm(p, Transpose::No, x, Transpose::No)?,
        })
    }
}

/// Gram-Schmidt (two passes) over the columns of `v`; columns whose residual
/// norm drops below `tol` are discarded.
pub fn orthonormalize(v: &DenseMatrix, tol: f64) -> DenseMatrix {
    extend_orthonormal(&DenseMatrix::zeros(v.rows(), 0), v, tol)
}

/// Appends to orthonormal `base` the directions of `v` not already in its
/// span. Columns of `base` are returned unchanged.
pub fn extend_orthonormal(base: &DenseMatrix, v: &DenseMatrix, tol: f64) -> DenseMatrix {
    let d = base.rows();
    debug_assert_eq!(d, v.rows());
    let mut basis: Vec<Vec<f64>> = (0..base.cols()).map(|j| base.column(j)).collect();
    let kept_from = basis.len();
    for j in 0..v.cols() {
        let mut w = v.column(j);
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = b.iter().zip(&w).map(|(x, y)| x * y).sum();
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= dot * bi;
                }
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm >= tol && norm.is_finite() {
            w.iter_mut().for_each(|x| *x /= norm);
            basis.push(w);
        }
    }
    let mut out = DenseMatrix::zeros(d, basis.len());
    for (j, b) in basis.iter().enumerate() {
        out.set_column(j, b);
    }
    if kept_from > 0 {
        // base columns must survive bit-for-bit
        debug_assert!((0..kept_from).all(|j| out.column(j) == base.column(j)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_projection_matches_row_projection() {
        let q = orthonormalize(&DenseMatrix::from_fn(6, 5, |r, c| ((r * 5 + c) as f64 * 1.3).sin()), 1e-9);
        let x = DenseMatrix::from_fn(6, 3, |r, c| (r as f64 - c as f64) * 0.4 + 0.1);
        for rank in 0..=6usize {
            let m = if rank == 6 { DenseMatrix::identity(6) } else { q.leading_columns(rank) };
            let p = Projector::new(&m).unwrap();
            let by_cols = p.apply_columns(&x).unwrap();
            let by_rows = p.apply(&x.transpose()).unwrap().transpose();
            assert!(by_cols.sub(&by_rows).unwrap().max_abs() < 1e-14, "rank {rank}");
        }
    }

    fn e(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn captured_dim_examples() {
        assert_eq!(captured_dim(&[4.0, 3.0, 2.0, 1.0], 0.7).unwrap(), 2);
        assert_eq!(captured_dim(&[4.0, 3.0, 2.0, 1.0], 1.0).unwrap(), 4);
        assert_eq!(captured_dim(&[1.0, 0.0, 0.0], 0.9).unwrap(), 1);
    }

    #[test]
    fn captured_dim_errors() {
        assert!(matches!(
            captured_dim(&[0.0, 0.0], 0.9),
            Err(Error::Degenerate(_))
        ));
        assert!(captured_dim(&[1.0, 2.0], 0.9).is_err());
        assert!(captured_dim(&[1.0], 0.0).is_err());
        assert!(captured_dim(&[1.0], 1.5).is_err());
        assert!(captured_dim(&[1.0, -0.5], 0.5).is_err());
    }

    #[test]
    fn empty_basis_leaves_gradient() {
        let g = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let m = DenseMatrix::zeros(3, 0);
        assert_eq!(project_complement(&g, &m).unwrap(), g);
    }

    #[test]
    fn full_basis_annihilates() {
        let g = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, -4.0]]);
        let p = project_complement(&g, &DenseMatrix::identity(2)).unwrap();
        assert!(p.max_abs() == 0.0);
        let proj = Projector::new(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(proj.apply(&g).unwrap(), DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn axis_projection() {
        let g = DenseMatrix::from_rows(&[[1.0, 2.0]]);
        let m = DenseMatrix::from_columns(2, &[e(0, 2)]).unwrap();
        assert_eq!(project_complement(&g, &m).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn non_orthonormal_basis_reports_deviation() {
        let g = DenseMatrix::from_rows(&[[1.0, 2.0]]);
        let m = DenseMatrix::from_columns(2, &[vec![2.0, 0.0]]).unwrap();
        match project_complement(&g, &m) {
            Err(Error::NotOrthonormal { deviation }) => assert!((deviation - 3.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn basis_row_mismatch() {
        let g = DenseMatrix::zeros(1, 3);
        let m = DenseMatrix::identity(2);
        assert!(matches!(project_complement(&g, &m), Err(Error::Shape { .. })));
    }

    #[test]
    fn duplicate_column_dropped() {
        let v = DenseMatrix::from_columns(3, &[e(0, 3), e(0, 3)]).unwrap();
        let q = orthonormalize(&v, 1e-10);
        assert_eq!(q, DenseMatrix::from_columns(3, &[e(0, 3)]).unwrap());
    }

    #[test]
    fn orthonormal_input_kept() {
        let v = DenseMatrix::from_columns(3, &[e(0, 3), e(1, 3)]).unwrap();
        assert_eq!(orthonormalize(&v, 1e-10), v);
    }

    #[test]
    fn extension_keeps_base_columns() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let base = DenseMatrix::from_columns(3, &[vec![h, h, 0.0]]).unwrap();
        let v = DenseMatrix::from_columns(3, &[e(0, 3), e(2, 3)]).unwrap();
        let out = extend_orthonormal(&base, &v, 1e-10);
        assert_eq!(out.cols(), 3);
        assert_eq!(out.column(0), base.column(0));
        assert!(gram_deviation(&out) < 1e-14);
    }

    #[test]
    fn projector_strategies_agree() {
        // rank 1 of 3 uses the low-rank path, rank 2 of 3 the dense path
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let m1 = DenseMatrix::from_columns(3, &[vec![h, h, 0.0]]).unwrap();
        let m2 = extend_orthonormal(&m1, &DenseMatrix::from_columns(3, &[e(2, 3)]).unwrap(), 1e-10);
        let g = DenseMatrix::from_rows(&[[1.0, -2.0, 0.5], [0.3, 0.0, 4.0]]);
        for m in [&m1, &m2] {
            let a = Projector::new(m).unwrap().apply(&g).unwrap();
            let b = project_complement(&g, m).unwrap();
            assert!(a.sub(&b).unwrap().max_abs() < 1e-14);
        }
    }
}
