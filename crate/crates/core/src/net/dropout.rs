//! Between-task heterogeneous dropout.
//!
//! Every hidden neuron carries a counter of how often it won the k-winner
//! selection during training. At each task boundary the retention
//! probability of neuron `j` becomes `exp(-alpha * b_j / max_i b_i)`, so
//! heavily used neurons are dropped more often while the next task trains.
//! A retain mask entry of `true` means the neuron is kept.

use rand::Rng;

/// How retention probabilities are derived from the counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutKind {
    None,
    Heterogeneous,
    /// Uniform retention equal to the per-layer mean of the heterogeneous
    /// probabilities: same expected dropout rate, no preference.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutState {
    pub kind: DropoutKind,
    pub alpha: f64,
    /// Per hidden layer, per neuron: number of winning training samples.
    pub counters: Vec<Vec<u64>>,
    /// Per hidden layer, per neuron: retention probability in `[0, 1]`.
    pub retention: Vec<Vec<f64>>,
}

impl DropoutState {
    pub fn new(kind: DropoutKind, alpha: f64, widths: &[usize]) -> Self {
        Self {
            kind,
            alpha,
            counters: widths.iter().map(|&w| vec![0; w]).collect(),
            retention: widths.iter().map(|&w| vec![1.0; w]).collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.counters.iter().map(Vec::len).collect()
    }

    /// Adds one count per winning neuron of a single sample.
    pub fn update_counters(&mut self, winners: &[Vec<usize>]) {
        for (layer, idx) in self.counters.iter_mut().zip(winners) {
            for &j in idx {
                layer[j] += 1;
            }
        }
    }

    /// Recomputes retention from the accumulated counters. Call only at task
    /// boundaries.
    pub fn refresh_retention(&mut self) {
        for (p, b) in self.retention.iter_mut().zip(&self.counters) {
            let hetero = retention_from_counts(b, self.alpha);
            *p = match self.kind {
                DropoutKind::None => vec![1.0; b.len()],
                DropoutKind::Heterogeneous => hetero,
                DropoutKind::Random => {
                    let mean = hetero.iter().sum::<f64>() / hetero.len().max(1) as f64;
                    vec![mean; b.len()]
                }
            };
        }
    }

    /// Whether any neuron can currently be dropped.
    pub fn is_active(&self) -> bool {
        self.retention.iter().flatten().any(|&p| p < 1.0)
    }

    /// Independent Bernoulli(p_j) draw per neuron.
    pub fn sample_retain_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<bool>> {
        self.retention
            .iter()
            .map(|layer| layer.iter().map(|&p| rng.gen::<f64>() < p).collect())
            .collect()
    }
}

/// `exp(-alpha * b_j / max b)`, or all ones when every counter is zero.
pub fn retention_from_counts(counts: &[u64], alpha: f64) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 || alpha == 0.0 {
        return vec![1.0; counts.len()];
    }
    counts
        .iter()
        .map(|&b| (-(b as f64 / max as f64) * alpha).exp())
        .collect()
}
