use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::kwinner::{select_winners, WinnerCount};
use crate::error::{Error, Result};
use crate::linalg::{gemm, DenseMatrix, Projector, Transpose};

/// One affine layer. The last weight column multiplies the constant-1 input
/// coordinate and acts as the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub weights: DenseMatrix,
}

impl LayerState {
    pub fn input_dim(&self) -> usize {
        self.weights.cols() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Retain masks for one forward pass, one entry per hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub enum RetainMasks {
    /// Same mask for every sample of the batch.
    Shared(Vec<Vec<bool>>),
    /// `per_sample[b][layer]`.
    PerSample(Vec<Vec<Vec<bool>>>),
}

impl RetainMasks {
    fn layer_mask(&self, layer: usize, sample: usize) -> &[bool] {
        match self {
            RetainMasks::Shared(m) => &m[layer],
            RetainMasks::PerSample(m) => &m[sample][layer],
        }
    }
}

/// Single-head multilayer perceptron: k-winner hidden layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<LayerState>,
    /// One entry per hidden layer.
    pub winners: Vec<WinnerCount>,
}

/// Everything a batched forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input of every layer, `(d_l + 1) x B`, last row all ones.
    pub inputs: Vec<DenseMatrix>,
    /// `C x B`.
    pub logits: DenseMatrix,
}

impl ForwardPass {
    /// Winner indices of each hidden layer for sample `b`.
    pub fn winners(&self, b: usize) -> Vec<Vec<usize>> {
        self.inputs[1..]
            .iter()
            .map(|a| (0..a.rows() - 1).filter(|&j| a.get(j, b) > 0.0).collect())
            .collect()
    }

    pub fn batch_size(&self) -> usize {
        self.logits.cols()
    }
}

impl MlpModel {
    /// He-normal weights, biases uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        outputs: usize,
        winners: Vec<WinnerCount>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(input_dim, hidden, outputs, winners)?;
        for layer in &mut model.layers {
            let fan_in = layer.input_dim();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let cols = layer.weights.cols();
            for r in 0..layer.weights.rows() {
                let row = layer.weights.row_mut(r);
                for v in &mut row[..cols - 1] {
                    *v = normal.sample(rng);
                }
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for r in 0..layer.weights.rows() {
                layer.weights.set(r, cols - 1, rng.gen_range(-bound..bound));
            }
        }
        Ok(model)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], outputs: usize, winners: Vec<WinnerCount>) -> Result<Self> {
        if winners.len() != hidden.len() {
            return Err(Error::InvalidArgument(format!(
                "{} winner counts for {} hidden layers",
                winners.len(),
                hidden.len()
            )));
        }
        if input_dim == 0 || outputs == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        for (w, k) in hidden.iter().zip(&winners) {
            if let WinnerCount::Top(k) = k {
                if *k == 0 || k > w {
                    return Err(Error::InvalidArgument(format!(
                        "winner count {k} invalid for width {w}"
                    )));
                }
            }
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        let layers = dims
            .windows(2)
            .map(|w| LayerState {
                weights: DenseMatrix::zeros(w[1], w[0] + 1),
            })
            .collect();
        Ok(Self { layers, winners })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(LayerState::output_dim)
            .collect()
    }

    /// Input width of every layer, bias coordinate included.
    pub fn layer_input_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weights.cols()).collect()
    }

    /// Batched forward pass over the columns of `x` (`d_0 x B`).
    ///
    /// Masks are honoured only in [`Mode::Train`].
    pub fn forward_batch(&self, x: &DenseMatrix, mode: Mode, masks: Option<&RetainMasks>) -> Result<ForwardPass> {
        if x.rows() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                left: x.shape(),
                right: self.layers[0].weights.shape(),
            });
        }
        let masks = if mode == Mode::Train { masks } else { None };
        let batch = x.cols();
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(with_bias_row(x));
        let mut scratch = Vec::new();
        let mut column = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = gemm(&layer.weights, Transpose::No, &inputs[l], Transpose::No)?;
            if l + 1 == self.layers.len() {
                if !z.is_finite() {
                    return Err(Error::NonFinite("forward logits"));
                }
                return Ok(ForwardPass { inputs, logits: z });
            }
            let width = z.rows();
            let k = self.winners[l].resolve(width);
            let mut a = DenseMatrix::zeros(width + 1, batch);
            for b in 0..batch {
                column.clear();
                column.extend((0..width).map(|j| z.get(j, b)));
                let mask = masks.map(|m| m.layer_mask(l, b));
                for j in select_winners(&column, k, mask, &mut scratch) {
                    a.set(j, b, column[j]);
                }
            }
            a.row_mut(width).iter_mut().for_each(|v| *v = 1.0);
            inputs.push(a);
        }
        unreachable!("loop returns at the output layer")
    }

    /// Single-sample forward: logits, per-layer inputs (bias included) and
    /// per-hidden-layer winner sets.
    pub fn forward(
        &self,
        x: &[f64],
        mode: Mode,
        masks: Option<&[Vec<bool>]>,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<usize>>)> {
        let col = DenseMatrix::new(x.len(), 1, x.to_vec())?;
        let masks = masks.map(|m| RetainMasks::Shared(m.to_vec()));
        let pass = self.forward_batch(&col, mode, masks.as_ref())?;
        let winners = pass.winners(0);
        let inputs = pass.inputs.iter().map(|a| a.column(0)).collect();
        Ok((pass.logits.column(0), inputs, winners))
    }

    /// Mean softmax cross-entropy over the batch and its weight gradients.
    pub fn loss_and_grads(
        &self,
        x: &DenseMatrix,
        labels: &[usize],
        masks: Option<&RetainMasks>,
    ) -> Result<(f64, Vec<DenseMatrix>)> {
        let pass = self.forward_batch(x, Mode::Train, masks)?;
        let (loss, grads) = self.backward(&pass, labels)?;
        Ok((loss, grads))
    }

    /// Backpropagation through a recorded forward pass.
    pub fn backward(&self, pass: &ForwardPass, labels: &[usize]) -> Result<(f64, Vec<DenseMatrix>)> {
        self.backward_projected(pass, labels, None)
    }

    /// Backpropagation whose weight gradients come out already multiplied
    /// by the layer's complement projector when one is given.
    pub fn backward_projected(
        &self,
        pass: &ForwardPass,
        labels: &[usize],
        projectors: Option<&[Projector]>,
    ) -> Result<(f64, Vec<DenseMatrix>)> {
        let batch = pass.batch_size();
        if batch == 0 {
            return Err(Error::EmptyDataset("loss_and_grads"));
        }
        if labels.len() != batch {
            return Err(Error::Shape {
                op: "loss_and_grads",
                left: (batch, 1),
                right: (labels.len(), 1),
            });
        }
        let classes = self.output_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        if let Some(p) = projectors {
            if p.len() != self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} projectors for {} layers",
                    p.len(),
                    self.layers.len()
                )));
            }
        }
        let (loss, mut delta) = softmax_cross_entropy(&pass.logits, labels);

        let mut grads = vec![DenseMatrix::zeros(0, 0); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            grads[l] = match projectors.map(|p| &p[l]) {
                None => gemm(&delta, Transpose::No, &pass.inputs[l], Transpose::Yes)?,
                Some(p) if batch < delta.rows() => {
                    let projected = p.apply_columns(&pass.inputs[l])?;
                    gemm(&delta, Transpose::No, &projected, Transpose::Yes)?
                }
                Some(p) => p.apply(&gemm(&delta, Transpose::No, &pass.inputs[l], Transpose::Yes)?)?,
            };
            if l == 0 {
                break;
            }
            let upstream = gemm(&self.layers[l].weights, Transpose::Yes, &delta, Transpose::No)?;
            let act = &pass.inputs[l];
            let width = act.rows() - 1;
            let mut next = DenseMatrix::zeros(width, batch);
            for j in 0..width {
                let up = upstream.row(j);
                let a = act.row(j);
                for ((d, u), v) in next.row_mut(j).iter_mut().zip(up).zip(a) {
                    // gradient flows only through winners, which are exactly the nonzeros
                    if *v > 0.0 {
                        *d = *u;
                    }
                }
            }
            delta = next;
        }
        Ok((loss, grads))
    }

    /// `W <- W - lr * P(grad)`; `P` is the complement projector of the layer
    /// when one is supplied.
    pub fn sgd_step(&mut self, grads: &[DenseMatrix], lr: f64, projectors: Option<&[Projector]>) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} layers",
                grads.len(),
                self.layers.len()
            )));
        }
        if let Some(p) = projectors {
            if p.len() != self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} projectors for {} layers",
                    p.len(),
                    self.layers.len()
                )));
            }
        }
        for (l, (layer, g)) in self.layers.iter_mut().zip(grads).enumerate() {
            if g.shape() != layer.weights.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: layer.weights.shape(),
                    right: g.shape(),
                });
            }
            match projectors.map(|p| &p[l]) {
                Some(p) => {
                    let projected = p.apply(g)?;
                    layer.weights.axpy_assign(lr, &projected)?;
                }
                None => layer.weights.axpy_assign(lr, g)?,
            }
        }
        Ok(())
    }

    /// Predicted class for each column of `x`.
    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        let pass = self.forward_batch(x, Mode::Eval, None)?;
        Ok((0..pass.logits.cols())
            .map(|b| argmax((0..pass.logits.rows()).map(|c| pass.logits.get(c, b))))
            .collect())
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn with_bias_row(x: &DenseMatrix) -> DenseMatrix {
    let mut a = DenseMatrix::zeros(x.rows() + 1, x.cols());
    a.data_mut()[..x.data().len()].copy_from_slice(x.data());
    a.row_mut(x.rows()).iter_mut().for_each(|v| *v = 1.0);
    a
}

/// Mean loss and `(softmax - onehot) / B`.
fn softmax_cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> (f64, DenseMatrix) {
    let (classes, batch) = logits.shape();
    let mut delta = DenseMatrix::zeros(classes, batch);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (b, &y) in labels.iter().enumerate() {
        let max = (0..classes).map(|c| logits.get(c, b)).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..classes).map(|c| (logits.get(c, b) - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - logits.get(y, b);
        for c in 0..classes {
            let p = (logits.get(c, b) - log_sum).exp();
            let target = if c == y { 1.0 } else { 0.0 };
            delta.set(c, b, (p - target) * inv_b);
        }
    }
    (loss * inv_b, delta)
}
