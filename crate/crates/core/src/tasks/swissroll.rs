use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledDataset, Split, Task, TaskStream};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Two interleaved spirals cut into `tasks` consecutive angular arcs.
///
/// Class 0 sits at `r(θ)(cos θ, sin θ)` with `r(θ) = θ / θ_max`, class 1 at
/// the same radius rotated by π. Task `t` draws θ uniformly from the `t`-th of
/// `tasks` equal arcs of `[theta_min, theta_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwissRollConfig {
    pub tasks: usize,
    /// Training points per class per task; validation and test get half that, rounded up.
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub seed: u64,
}

impl Default for SwissRollConfig {
    fn default() -> Self {
        Self {
            tasks: 50,
            n_per_class: 100,
            noise_sigma: 0.015,
            theta_min: 1.5 * PI,
            theta_max: 4.5 * PI,
            seed: 0,
        }
    }
}

impl SwissRollConfig {
    /// Angular arc `[lo, hi)` of task `t` (0-based).
    pub fn arc(&self, t: usize) -> (f64, f64) {
        let width = (self.theta_max - self.theta_min) / self.tasks as f64;
        let lo = self.theta_min + width * t as f64;
        let hi = if t + 1 == self.tasks {
            self.theta_max
        } else {
            self.theta_min + width * (t + 1) as f64
        };
        (lo, hi)
    }
}

pub fn gen_swiss_roll(cfg: &SwissRollConfig) -> Result<TaskStream> {
    if cfg.tasks == 0 {
        return Err(Error::InvalidArgument("swiss roll needs at least one task".into()));
    }
    if cfg.n_per_class < 4 {
        return Err(Error::InvalidArgument("swiss roll needs n_per_class >= 4".into()));
    }
    if !(cfg.noise_sigma >= 0.0) || !(cfg.theta_max > cfg.theta_min) || cfg.theta_min < 0.0 {
        return Err(Error::InvalidArgument("invalid swiss roll geometry".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma > 0"));
    let held_out = cfg.n_per_class.div_ceil(2);

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let arc = cfg.arc(t);
        let mut make = |n: usize, split: Split| {
            let mut cols = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(2 * n);
            for class in 0..2 {
                for _ in 0..n {
                    let theta = rng.gen_range(arc.0..arc.1);
                    let mut p = spiral_point(theta, class, cfg.theta_max);
                    if let Some(noise) = &noise {
                        for v in &mut p {
                            *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
                        }
                    }
                    cols.push(p.to_vec());
                    labels.push(class);
                }
            }
            let inputs = DenseMatrix::from_columns(2, &cols).expect("two coordinates per point");
            LabeledDataset::new(inputs, labels, split)
        };
        let train = make(cfg.n_per_class, Split::Train)?;
        let val = make(held_out, Split::Val)?;
        let test = make(held_out, Split::Test)?;
        tasks.push(Task {
            train,
            val,
            test,
            permutation: None,
        });
    }
    TaskStream::new(tasks, 2)
}

/// Noise-free point of `class` at angle `theta`.
pub fn spiral_point(theta: f64, class: usize, theta_max: f64) -> [f64; 2] {
    let r = theta / theta_max;
    let phase = if class == 0 { theta } else { theta + PI };
    [r * phase.cos(), r * phase.sin()]
}

/// Writes every point as `x1,x2,label,task,split` with 1-based task numbers.
pub fn write_swiss_roll_csv<W: Write>(stream: &TaskStream, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x1", "x2", "label", "task", "split"])?;
    for (t, task) in stream.tasks.iter().enumerate() {
        for ds in [&task.train, &task.val, &task.test] {
            for i in 0..ds.len() {
                w.write_record([
                    ds.inputs.get(0, i).to_string(),
                    ds.inputs.get(1, i).to_string(),
                    ds.labels[i].to_string(),
                    (t + 1).to_string(),
                    ds.split.as_str().to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
