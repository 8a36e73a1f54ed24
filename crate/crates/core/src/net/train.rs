use rand::seq::SliceRandom;
use rand::Rng;

use super::dropout::DropoutState;
use super::mlp::{MlpModel, Mode, RetainMasks};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Projector};

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Whether a dropout mask is drawn once per mini-batch or once per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskGranularity {
    Batch,
    Sample,
}

#[derive(Clone, Debug, Default)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Sources of randomness used while training one task.
pub struct TrainRngs<'a, S: Rng + ?Sized, M: Rng + ?Sized> {
    pub shuffle: &'a mut S,
    pub masks: &'a mut M,
}

/// Mini-batch SGD over one task. Gradients are projected by `projectors`
/// when given; winner counters in `dropout` are updated from every training
/// forward pass; retention probabilities stay frozen.
pub fn train_task<S: Rng + ?Sized, M: Rng + ?Sized>(
    model: &mut MlpModel,
    inputs: &DenseMatrix,
    labels: &[usize],
    sgd: &SgdConfig,
    projectors: Option<&[Projector]>,
    dropout: &mut DropoutState,
    granularity: MaskGranularity,
    rngs: TrainRngs<'_, S, M>,
) -> Result<TrainStats> {
    sgd.validate()?;
    let n = inputs.cols();
    if n == 0 {
        return Err(Error::EmptyDataset("train_task"));
    }
    if labels.len() != n {
        return Err(Error::Shape {
            op: "train_task",
            left: inputs.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = TrainStats::default();
    let mut batch_labels = Vec::with_capacity(sgd.batch_size);
    for _ in 0..sgd.epochs {
        order.shuffle(rngs.shuffle);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(sgd.batch_size) {
            let x = inputs.select_columns(chunk);
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let masks = if dropout.is_active() {
                Some(match granularity {
                    MaskGranularity::Batch => RetainMasks::Shared(dropout.sample_retain_mask(rngs.masks)),
                    MaskGranularity::Sample => RetainMasks::PerSample(
                        (0..chunk.len())
                            .map(|_| dropout.sample_retain_mask(rngs.masks))
                            .collect(),
                    ),
                })
            } else {
                None
            };
            let pass = model.forward_batch(&x, Mode::Train, masks.as_ref())?;
            count_winners(dropout, &pass.inputs[1..]);
            let (loss, grads) = model.backward_projected(&pass, &batch_labels, projectors)?;
            model.sgd_step(&grads, sgd.learning_rate, None)?;
            epoch_loss += loss * chunk.len() as f64;
            stats.steps += 1;
        }
        stats.epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(stats)
}

/// One count per sample for every neuron with a nonzero (winning) activation.
fn count_winners(dropout: &mut DropoutState, hidden_inputs: &[DenseMatrix]) {
    for (counters, act) in dropout.counters.iter_mut().zip(hidden_inputs) {
        for (j, c) in counters.iter_mut().enumerate() {
            *c += act.row(j).iter().filter(|&&v| v > 0.0).count() as u64;
        }
    }
}
