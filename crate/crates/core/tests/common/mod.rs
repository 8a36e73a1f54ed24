#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparse_gpm::linalg::DenseMatrix;
use sparse_gpm::net::{
    train_task, DropoutKind, DropoutState, MaskGranularity, MlpModel, Mode, RetainMasks, SgdConfig, TrainRngs,
    WinnerCount,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Relative error with a small absolute floor so entries that are zero up
/// to rounding do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Nonzero pattern and winner sets of every hidden layer.
fn activation_pattern(model: &MlpModel, x: &DenseMatrix, masks: &RetainMasks) -> (Vec<Vec<bool>>, Vec<Vec<Vec<usize>>>) {
    let pass = model.forward_batch(x, Mode::Train, Some(masks)).unwrap();
    let support = pass.inputs[1..]
        .iter()
        .map(|a| a.data().iter().map(|&v| v != 0.0).collect())
        .collect();
    let winners = (0..pass.batch_size()).map(|b| pass.winners(b)).collect();
    (support, winners)
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Entries whose perturbation moved a ReLU or winner boundary.
    pub skipped: usize,
    pub worst: f64,
}

/// Central differences of the mean loss against the analytic gradient of
/// every weight, masks held fixed.
pub fn fd_check(model: &MlpModel, x: &DenseMatrix, labels: &[usize], masks: &RetainMasks) -> FdReport {
    let (_, grads) = model.loss_and_grads(x, labels, Some(masks)).unwrap();
    let base = activation_pattern(model, x, masks);
    let mut report = FdReport::default();
    for l in 0..model.layers.len() {
        let (rows, cols) = (model.layers[l].weights.rows(), model.layers[l].weights.cols());
        for r in 0..rows {
            for c in 0..cols {
                let w = model.layers[l].weights.get(r, c);
                let mut plus = model.clone();
                plus.layers[l].weights.set(r, c, w + FD_STEP);
                let mut minus = model.clone();
                minus.layers[l].weights.set(r, c, w - FD_STEP);
                if activation_pattern(&plus, x, masks) != base || activation_pattern(&minus, x, masks) != base {
                    report.skipped += 1;
                    continue;
                }
                let lp = plus.loss_and_grads(x, labels, Some(masks)).unwrap().0;
                let lm = minus.loss_and_grads(x, labels, Some(masks)).unwrap().0;
                let fd = (lp - lm) / (2.0 * FD_STEP);
                report.worst = report.worst.max(rel_err(fd, grads[l].get(r, c)));
                report.checked += 1;
            }
        }
    }
    report
}

/// Small random model with sparse hidden layers and a random batch with
/// per-sample retain masks.
pub fn random_case<R: Rng>(rng: &mut R) -> (MlpModel, DenseMatrix, Vec<usize>, RetainMasks) {
    let input = rng.gen_range(2..6);
    let hidden: Vec<usize> = (0..2).map(|_| rng.gen_range(4..10)).collect();
    let classes = rng.gen_range(2..5);
    let winners = hidden.iter().map(|&h| WinnerCount::Top(rng.gen_range(1..h))).collect();
    let model = MlpModel::new(input, &hidden, classes, winners, rng).unwrap();
    let batch = rng.gen_range(1..6);
    let x = DenseMatrix::from_fn(input, batch, |_, _| rng.gen_range(-2.0..2.0));
    let labels = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let masks = RetainMasks::PerSample(
        (0..batch)
            .map(|_| hidden.iter().map(|&h| (0..h).map(|_| rng.gen_bool(0.7)).collect()).collect())
            .collect(),
    );
    (model, x, labels, masks)
}

/// Solves the normal equations `(MᵀM)c = Mᵀg` by Gaussian elimination.
pub fn least_squares_residual(g: &[f64], m: &DenseMatrix) -> Vec<f64> {
    let r = m.cols();
    let d = m.rows();
    let mut a = vec![vec![0.0; r + 1]; r];
    for i in 0..r {
        for j in 0..r {
            a[i][j] = (0..d).map(|k| m.get(k, i) * m.get(k, j)).sum();
        }
        a[i][r] = (0..d).map(|k| m.get(k, i) * g[k]).sum();
    }
    for col in 0..r {
        let piv = (col..r).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        for row in 0..r {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=r {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let c: Vec<f64> = (0..r).map(|i| a[i][r] / a[i][i]).collect();
    (0..d)
        .map(|k| g[k] - (0..r).map(|i| m.get(k, i) * c[i]).sum::<f64>())
        .collect()
}

/// Plain-loop MLP: ReLU hidden layers, linear output, softmax cross-entropy.
pub struct Plain {
    /// `w[l][o][i]`, bias in the last input slot.
    pub w: Vec<Vec<Vec<f64>>>,
}

impl Plain {
    pub fn from_model(m: &MlpModel) -> Self {
        Self {
            w: m.layers
                .iter()
                .map(|l| (0..l.weights.rows()).map(|r| l.weights.row(r).to_vec()).collect())
                .collect(),
        }
    }

    pub fn step(&mut self, xs: &[Vec<f64>], ys: &[usize], lr: f64) {
        let layers = self.w.len();
        let mut grads: Vec<Vec<Vec<f64>>> = self.w.iter().map(|l| vec![vec![0.0; l[0].len()]; l.len()]).collect();
        for (x, &y) in xs.iter().zip(ys) {
            let mut acts = vec![x.clone()];
            for l in 0..layers {
                let input = &acts[l];
                let out: Vec<f64> = self.w[l]
                    .iter()
                    .map(|row| {
                        let z = row[..input.len()].iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + row[input.len()];
                        if l + 1 < layers { z.max(0.0) } else { z }
                    })
                    .collect();
                acts.push(out);
            }
            let logits = &acts[layers];
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            let mut delta: Vec<f64> = exps.iter().map(|e| e / s).collect();
            delta[y] -= 1.0;
            for v in &mut delta {
                *v /= xs.len() as f64;
            }
            for l in (0..layers).rev() {
                let input = &acts[l];
                for (o, &dv) in delta.iter().enumerate() {
                    for (i, &a) in input.iter().enumerate() {
                        grads[l][o][i] += dv * a;
                    }
                    grads[l][o][input.len()] += dv;
                }
                if l == 0 {
                    break;
                }
                delta = (0..input.len())
                    .map(|i| {
                        if input[i] > 0.0 {
                            delta.iter().enumerate().map(|(o, &dv)| self.w[l][o][i] * dv).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        for (wl, gl) in self.w.iter_mut().zip(&grads) {
            for (wr, gr) in wl.iter_mut().zip(gl) {
                for (w, g) in wr.iter_mut().zip(gr) {
                    *w -= lr * g;
                }
            }
        }
    }
}


/// Largest weight difference between the library trainer and the plain
/// loops after a few epochs of dense SGD on random data.
pub fn dense_training_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpModel::new(3, &[7, 5], 4, vec![WinnerCount::Dense; 2], &mut rng).unwrap();
    let mut plain = Plain::from_model(&model);
    let n = 23;
    let inputs = DenseMatrix::from_fn(3, n, |_, _| rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let sgd = SgdConfig {
        learning_rate: 0.1,
        epochs: 4,
        batch_size: 5,
    };
    let mut dropout = DropoutState::new(DropoutKind::None, 0.0, &model.hidden_widths());
    let mut shuffle = ChaCha8Rng::seed_from_u64(5);
    let mut masks = ChaCha8Rng::seed_from_u64(6);
    train_task(
        &mut model,
        &inputs,
        &labels,
        &sgd,
        None,
        &mut dropout,
        MaskGranularity::Batch,
        TrainRngs {
            shuffle: &mut shuffle,
            masks: &mut masks,
        },
    )
    .unwrap();

    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..sgd.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(sgd.batch_size) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs.column(i)).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            plain.step(&xs, &ys, sgd.learning_rate);
        }
    }
    let mut gap = 0.0f64;
    for (layer, pw) in model.layers.iter().zip(&plain.w) {
        for (r, row) in pw.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                gap = gap.max((layer.weights.get(r, c) - v).abs());
            }
        }
    }
    gap
}

