//! Gradient Projection Memory.
//!
//! After each task the memory stores, per layer, an orthonormal basis of the
//! subspace spanned by that layer's input activations (bias coordinate
//! included). Later tasks only update weights inside the orthogonal
//! complement, so `ΔW·x = 0` for every stored direction `x`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{
    captured_dim, extend_orthonormal, gemm, gram_deviation, second_moment_spectrum, DenseMatrix,
    Projector, Transpose, EIGEN_FLOOR, ORTHONORMAL_TOL,
};
use crate::net::{MlpModel, Mode};
use crate::tasks::LabeledDataset;

/// How many residual directions a new task contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdCriterion {
    /// Old-basis energy plus appended residual energy must reach `eps_th` of
    /// the new task's total activation energy.
    Joint,
    /// `eps_th` applied to the residual spectrum on its own.
    ResidualOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpmMemory {
    pub bases: Vec<DenseMatrix>,
    /// Captured-variance threshold per layer.
    pub eps_th: Vec<f64>,
    pub n_samples: usize,
    pub criterion: ThresholdCriterion,
    /// Relative eigenvalue floor below which directions count as zero.
    pub eigen_floor: f64,
}

impl GpmMemory {
    /// Empty memory for layers with the given input widths (bias included).
    pub fn new(layer_input_dims: &[usize], eps_th: f64, n_samples: usize) -> Result<Self> {
        Self::with_thresholds(layer_input_dims, vec![eps_th; layer_input_dims.len()], n_samples)
    }

    pub fn with_thresholds(layer_input_dims: &[usize], eps_th: Vec<f64>, n_samples: usize) -> Result<Self> {
        if eps_th.len() != layer_input_dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} thresholds for {} layers",
                eps_th.len(),
                layer_input_dims.len()
            )));
        }
        if let Some(e) = eps_th.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::InvalidArgument(format!("eps_th must lie in (0, 1], got {e}")));
        }
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be positive".into()));
        }
        Ok(Self {
            bases: layer_input_dims.iter().map(|&d| DenseMatrix::zeros(d, 0)).collect(),
            eps_th,
            n_samples,
            criterion: ThresholdCriterion::Joint,
            eigen_floor: EIGEN_FLOOR,
        })
    }

    pub fn projection_bases(&self) -> &[DenseMatrix] {
        &self.bases
    }

    pub fn projectors(&self) -> Result<Vec<Projector>> {
        self.bases.iter().map(Projector::new).collect()
    }

    pub fn basis_dimensions(&self) -> Vec<usize> {
        self.bases.iter().map(DenseMatrix::cols).collect()
    }

    pub fn is_saturated(&self, layer: usize) -> bool {
        let b = &self.bases[layer];
        b.cols() >= b.rows()
    }

    /// Grows every layer's basis with one task's activations.
    pub fn update(&mut self, activations: &[DenseMatrix]) -> Result<()> {
        if activations.len() != self.bases.len() {
            return Err(Error::InvalidArgument(format!(
                "{} activation matrices for {} layers",
                activations.len(),
                self.bases.len()
            )));
        }
        let mut next = Vec::with_capacity(self.bases.len());
        for ((m, x), &eps) in self.bases.iter().zip(activations).zip(&self.eps_th) {
            next.push(update_basis_with(m, x, eps, self.criterion, self.eigen_floor)?);
        }
        self.bases = next;
        Ok(())
    }

    /// Samples this task's activations from `train` and folds them in;
    /// returns the sampled activation matrices.
    pub fn absorb_task<R: Rng + ?Sized>(
        &mut self,
        model: &MlpModel,
        train: &LabeledDataset,
        rng: &mut R,
    ) -> Result<Vec<DenseMatrix>> {
        let acts = collect_all_activations(model, train, self.n_samples, rng)?;
        self.update(&acts)?;
        Ok(acts)
    }
}

/// Up to `n_samples` distinct indices out of `n`, ascending.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, n_samples: usize, rng: &mut R) -> Vec<usize> {
    if n_samples >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, n_samples).into_vec();
    idx.sort_unstable();
    idx
}

/// Eval-mode inputs of every layer (bias row included) for up to
/// `n_samples` training points drawn without replacement.
pub fn collect_all_activations<R: Rng + ?Sized>(
    model: &MlpModel,
    dataset: &LabeledDataset,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<DenseMatrix>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("collect_activations"));
    }
    let idx = sample_indices(dataset.len(), n_samples, rng);
    let x = dataset.inputs.select_columns(&idx);
    Ok(model.forward_batch(&x, Mode::Eval, None)?.inputs)
}

/// Input activations `X^l` (`(d_l + 1) x n`) of a single layer.
pub fn collect_activations<R: Rng + ?Sized>(
    model: &MlpModel,
    dataset: &LabeledDataset,
    layer: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<DenseMatrix> {
    if layer >= model.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {} layers",
            model.layers.len()
        )));
    }
    let mut all = collect_all_activations(model, dataset, n_samples, rng)?;
    Ok(all.swap_remove(layer))
}

/// Leading eigenvectors of `X·Xᵀ/N` capturing `eps_th` of the variance.
pub fn init_basis(x: &DenseMatrix, eps_th: f64) -> Result<DenseMatrix> {
    init_basis_with(x, eps_th, EIGEN_FLOOR)
}

fn init_basis_with(x: &DenseMatrix, eps_th: f64, floor: f64) -> Result<DenseMatrix> {
    let spectrum = second_moment_spectrum(x, floor)?;
    let r = captured_dim(&spectrum.values, eps_th)?.min(spectrum.vectors.cols());
    let m = spectrum.vectors.leading_columns(r);
    Ok(if eps_th >= 1.0 { complete_span(m, x) } else { m })
}

/// Relative column norm below which a residual counts as already spanned.
const SPAN_TOL: f64 = 1e-10;

/// Extends `m` until every column of `x` lies in its span up to rounding,
/// worst-covered column first.
fn complete_span(mut m: DenseMatrix, x: &DenseMatrix) -> DenseMatrix {
    let scale = (0..x.cols())
        .map(|j| x.column(j).iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max)
        .sqrt();
    let tol = SPAN_TOL * scale;
    while m.cols() < m.rows() {
        let residual = match gemm(&m, Transpose::Yes, x, Transpose::No)
            .and_then(|c| gemm(&m, Transpose::No, &c, Transpose::No))
            .and_then(|inside| x.sub(&inside))
        {
            Ok(r) => r,
            Err(_) => break,
        };
        let mut norms: Vec<(usize, f64)> = (0..residual.cols())
            .map(|j| (j, residual.column(j).iter().map(|v| v * v).sum::<f64>().sqrt()))
            .filter(|&(_, n)| n > tol)
            .collect();
        if norms.is_empty() {
            break;
        }
        norms.sort_by(|a, b| b.1.total_cmp(&a.1));
        let before = m.cols();
        let picks: Vec<usize> = norms.iter().map(|&(j, _)| j).collect();
        let mut cand = DenseMatrix::zeros(x.rows(), picks.len());
        for (c, &j) in picks.iter().enumerate() {
            cand.set_column(c, &residual.column(j));
        }
        m = extend_orthonormal(&m, &cand, tol);
        if m.cols() > m.rows() {
            m = m.leading_columns(m.rows());
        }
        if m.cols() == before {
            break;
        }
    }
    m
}

/// Extends `m_old` with the residual directions of `x` not yet covered.
pub fn update_basis(m_old: &DenseMatrix, x: &DenseMatrix, eps_th: f64) -> Result<DenseMatrix> {
    update_basis_with(m_old, x, eps_th, ThresholdCriterion::Joint, EIGEN_FLOOR)
}

pub fn update_basis_with(
    m_old: &DenseMatrix,
    x: &DenseMatrix,
    eps_th: f64,
    criterion: ThresholdCriterion,
    floor: f64,
) -> Result<DenseMatrix> {
    if m_old.rows() != x.rows() {
        return Err(Error::Shape {
            op: "update_basis",
            left: m_old.shape(),
            right: x.shape(),
        });
    }
    if !(eps_th > 0.0 && eps_th <= 1.0) {
        return Err(Error::InvalidArgument(format!("eps_th must lie in (0, 1], got {eps_th}")));
    }
    if m_old.cols() == 0 {
        return init_basis_with(x, eps_th, floor);
    }
    let deviation = gram_deviation(m_old);
    if deviation > ORTHONORMAL_TOL {
        return Err(Error::NotOrthonormal { deviation });
    }
    let total = x.frobenius_sq();
    if total == 0.0 || x.cols() == 0 {
        return Err(Error::Degenerate("activation matrix is identically zero"));
    }
    if m_old.cols() >= m_old.rows() {
        return Ok(m_old.clone());
    }

    let coeff = gemm(m_old, Transpose::Yes, x, Transpose::No)?;
    let inside = gemm(m_old, Transpose::No, &coeff, Transpose::No)?;
    let residual = x.sub(&inside)?;
    let n = x.cols() as f64;
    // residual energy at the level of rounding noise relative to X means
    // nothing new to add
    let zero_level = floor * total / n;
    if residual.frobenius_sq() / n <= zero_level {
        return Ok(if eps_th >= 1.0 { complete_span(m_old.clone(), x) } else { m_old.clone() });
    }
    let spectrum = second_moment_spectrum(&residual, floor)?;
    let usable = spectrum
        .values
        .iter()
        .take(spectrum.vectors.cols())
        .take_while(|&&v| v > zero_level)
        .count();

    let take = match criterion {
        ThresholdCriterion::Joint => {
            let captured_old = total - residual.frobenius_sq();
            let need = (eps_th - 1e-12) * total;
            let mut have = captured_old;
            let mut r = 0;
            while have < need && r < usable {
                have += n * spectrum.values[r];
                r += 1;
            }
            r
        }
        ThresholdCriterion::ResidualOnly => {
            if usable == 0 {
                0
            } else {
                captured_dim(&spectrum.values, eps_th)?.min(usable)
            }
        }
    };
    let m = if take == 0 {
        m_old.clone()
    } else {
        let room = m_old.rows() - m_old.cols();
        let fresh = spectrum.vectors.leading_columns(take.min(room));
        extend_orthonormal(m_old, &fresh, 1e-6)
    };
    Ok(if eps_th >= 1.0 { complete_span(m, x) } else { m })
}
