use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, RngState};
use super::config::{Benchmark, ExperimentConfig};
use crate::error::{Error, Result};
use crate::gpm::GpmMemory;
use crate::linalg::DenseMatrix;
use crate::metrics::{evaluate, summarize, write_metrics_csv, AccuracyMatrix, Summary};
use crate::net::{train_task, DropoutState, MlpModel, TrainRngs};
use crate::tasks::{gen_swiss_roll, permuted_mnist_stream, MnistData, TaskStream};

const DATA_SALT: u64 = 0x5eed_da7a_0000_0001;
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_MASKS: u64 = 2;
const STREAM_GPM: u64 = 3;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Task stream of a run; the data seed is derived from the run seed.
pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    let data_seed = seed ^ DATA_SALT;
    match cfg.benchmark {
        Benchmark::Swissroll => gen_swiss_roll(&cfg.swiss_roll(data_seed)),
        Benchmark::PermutedMnist => {
            let mnist = MnistData::load(&cfg.data_dir, &cfg.mnist_files())?;
            permuted_mnist_stream(&mnist, &cfg.permuted_mnist(data_seed))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    /// 1-based.
    pub task: usize,
    pub epoch_losses: Vec<f64>,
    /// Test accuracy on tasks `1..=task`.
    pub accuracies: Vec<f64>,
    pub basis_dims: Vec<usize>,
}

/// One continual-learning run, advanced a task at a time.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub stream: TaskStream,
    pub model: MlpModel,
    pub memory: GpmMemory,
    pub dropout: DropoutState,
    pub accuracy: AccuracyMatrix,
    pub log: String,
    pub completed: usize,
    /// Activations sampled for the memory at the end of the last task.
    pub last_activations: Vec<DenseMatrix>,
    shuffle_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    gpm_rng: ChaCha8Rng,
}

impl Session {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let stream = build_stream(cfg, seed)?;
        Self::with_stream(cfg, seed, stream)
    }

    /// Fresh session over an already built stream.
    pub fn with_stream(cfg: &ExperimentConfig, seed: u64, stream: TaskStream) -> Result<Self> {
        cfg.validate()?;
        if stream.len() != cfg.tasks {
            return Err(Error::Config(format!(
                "stream has {} tasks, config asks for {}",
                stream.len(),
                cfg.tasks
            )));
        }
        let mut init = seeded(seed, STREAM_INIT);
        let model = MlpModel::new(stream.input_dim(), &cfg.hidden, stream.class_count, cfg.winners(), &mut init)?;
        let mut memory = GpmMemory::with_thresholds(&model.layer_input_dims(), cfg.eps_th.clone(), cfg.n_samples)?;
        memory.criterion = cfg.criterion();
        memory.eigen_floor = cfg.eigen_floor;
        let dropout = DropoutState::new(cfg.dropout_kind(), cfg.alpha, &model.hidden_widths());
        Ok(Self {
            cfg: cfg.with_seed(seed),
            seed,
            stream,
            model,
            memory,
            dropout,
            accuracy: AccuracyMatrix::new(),
            log: String::new(),
            completed: 0,
            last_activations: Vec::new(),
            shuffle_rng: seeded(seed, STREAM_SHUFFLE),
            mask_rng: seeded(seed, STREAM_MASKS),
            gpm_rng: seeded(seed, STREAM_GPM),
        })
    }

    /// Session positioned right after the checkpointed task.
    pub fn resume(cfg: &ExperimentConfig, seed: u64, ckpt: Checkpoint) -> Result<Self> {
        let mut s = Self::new(cfg, seed)?;
        s.restore(ckpt)?;
        Ok(s)
    }

    fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        if ckpt.config_hash != self.cfg.config_hash() {
            return Err(Error::Config(format!(
                "checkpoint was written by config {} but this config hashes to {}",
                ckpt.config_hash,
                self.cfg.config_hash()
            )));
        }
        if ckpt.total_tasks != self.cfg.tasks || ckpt.rngs.len() != 3 {
            return Err(Error::Config("checkpoint does not belong to this experiment".into()));
        }
        if ckpt.rngs[0].seed != seeded(self.seed, STREAM_SHUFFLE).get_seed() {
            return Err(Error::Config(format!("checkpoint was written with a seed other than {}", self.seed)));
        }
        if ckpt.model.layer_input_dims() != self.model.layer_input_dims() {
            return Err(Error::Config("checkpoint model shape differs from the config".into()));
        }
        self.shuffle_rng = ckpt.rngs[0].restore();
        self.mask_rng = ckpt.rngs[1].restore();
        self.gpm_rng = ckpt.rngs[2].restore();
        self.model = ckpt.model;
        self.memory = ckpt.memory;
        self.dropout = ckpt.dropout;
        self.accuracy = ckpt.accuracy;
        self.log = ckpt.log;
        self.completed = ckpt.completed;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.completed == self.cfg.tasks
    }

    /// Trains the next task, evaluates every seen task, then updates the
    /// memory and the dropout retention.
    pub fn step(&mut self) -> Result<TaskReport> {
        if self.is_done() {
            return Err(Error::InvalidArgument("all tasks already trained".into()));
        }
        let t = self.completed;
        let projectors = if self.cfg.use_gpm && t > 0 {
            Some(self.memory.projectors()?)
        } else {
            None
        };
        let task = &self.stream.tasks[t];
        let stats = train_task(
            &mut self.model,
            &task.train.inputs,
            &task.train.labels,
            &self.cfg.sgd(),
            projectors.as_deref(),
            &mut self.dropout,
            self.cfg.granularity(),
            TrainRngs {
                shuffle: &mut self.shuffle_rng,
                masks: &mut self.mask_rng,
            },
        )?;
        if stats.epoch_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        let accuracies = self.stream.tasks[..=t]
            .iter()
            .map(|task| evaluate(&self.model, &task.test))
            .collect::<Result<Vec<_>>>()?;
        self.accuracy.push_row(accuracies.clone())?;
        if self.cfg.use_gpm {
            self.last_activations = self.memory.absorb_task(&self.model, &self.stream.tasks[t].train, &mut self.gpm_rng)?;
        }
        self.dropout.refresh_retention();
        self.completed += 1;

        let report = TaskReport {
            task: t + 1,
            epoch_losses: stats.epoch_losses,
            accuracies,
            basis_dims: self.memory.basis_dimensions(),
        };
        let first = report.epoch_losses.first().copied().unwrap_or(f64::NAN);
        let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
        let accs: Vec<String> = report.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        writeln!(
            self.log,
            "task {}/{} loss {first:.6} -> {last:.6} acc [{}] basis {:?}",
            report.task,
            self.cfg.tasks,
            accs.join(" "),
            report.basis_dims
        )
        .expect("string write");
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            memory: self.memory.clone(),
            dropout: self.dropout.clone(),
            rngs: vec![
                RngState::capture(&self.shuffle_rng),
                RngState::capture(&self.mask_rng),
                RngState::capture(&self.gpm_rng),
            ],
            completed: self.completed,
            total_tasks: self.cfg.tasks,
            config_hash: self.cfg.config_hash(),
            accuracy: self.accuracy.clone(),
            log: self.log.clone(),
        }
    }

    pub fn summary(&self) -> Result<Summary> {
        summarize(&self.accuracy)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.cfg.run_dir(self.seed)
    }

    /// Rewrites every artifact of the run directory for the current state.
    pub fn write_artifacts(&self) -> Result<()> {
        let dir = self.run_dir();
        write_atomic(&dir.join("config_echo.toml"), self.cfg.to_toml().as_bytes())?;
        let mut buf = Vec::new();
        self.accuracy.write_csv(self.cfg.tasks, &mut buf)?;
        write_atomic(&dir.join("accuracy_matrix.csv"), &buf)?;
        if self.completed > 0 {
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &self.cfg.run_id(self.seed), &self.summary()?, self.seed, &self.cfg.config_hash())?;
            write_atomic(&dir.join("metrics.csv"), &buf)?;
            save_checkpoint(&self.checkpoint(), &checkpoint_path(&dir, self.completed))?;
        }
        write_atomic(&dir.join("log.txt"), self.log.as_bytes())
    }
}

pub fn checkpoint_path(run_dir: &Path, task: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("task_{task}.ckpt"))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many completed tasks.
    pub stop_after: Option<usize>,
    /// Print per-task progress to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub accuracy: AccuracyMatrix,
    pub summary: Summary,
    pub completed: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<RunOutcome> {
    let started = Instant::now();
    let mut session = match &opts.resume {
        Some(path) => Session::resume(cfg, seed, load_checkpoint(path)?)?,
        None => Session::new(cfg, seed)?,
    };
    session.write_artifacts()?;
    let stop = opts.stop_after.unwrap_or(cfg.tasks).min(cfg.tasks);
    while session.completed < stop {
        session.step()?;
        session.write_artifacts()?;
        if opts.verbose {
            eprintln!(
                "[{} {:.1}s] {}",
                session.cfg.run_id(seed),
                started.elapsed().as_secs_f64(),
                session.log.lines().last().unwrap_or("")
            );
        }
    }
    Ok(RunOutcome {
        dir: session.run_dir(),
        summary: session.summary()?,
        accuracy: session.accuracy,
        completed: session.completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            "benchmark = \"swissroll\"\ntasks = 3\nhidden = [12, 12]\nk = 4\nalpha = 1.0\n\
             dropout = \"heterogeneous\"\nepochs = 3\nswiss_n_per_class = 10\nn_samples = 16",
        )
        .unwrap()
    }

    #[test]
    fn single_task_fills_one_entry() {
        let cfg = ExperimentConfig { tasks: 1, ..tiny() };
        let mut s = Session::new(&cfg, 0).unwrap();
        let r = s.step().unwrap();
        assert_eq!(r.accuracies.len(), 1);
        assert!(s.is_done());
        assert_eq!(s.summary().unwrap().backward_transfer, None);
        assert!(s.step().is_err());
    }

    #[test]
    fn retention_frozen_until_boundary() {
        let mut s = Session::new(&tiny(), 1).unwrap();
        assert!(!s.dropout.is_active());
        s.step().unwrap();
        assert!(s.dropout.is_active());
        assert!(s.memory.basis_dimensions().iter().all(|&d| d > 0));
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let cfg = tiny();
        let mut full = Session::new(&cfg, 2).unwrap();
        while !full.is_done() {
            full.step().unwrap();
        }
        let mut first = Session::new(&cfg, 2).unwrap();
        first.step().unwrap();
        let mut resumed = Session::resume(&cfg, 2, first.checkpoint()).unwrap();
        while !resumed.is_done() {
            resumed.step().unwrap();
        }
        assert_eq!(resumed.accuracy, full.accuracy);
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.log, full.log);
    }

    #[test]
    fn resume_rejects_other_seed_or_config() {
        let cfg = tiny();
        let mut s = Session::new(&cfg, 2).unwrap();
        s.step().unwrap();
        assert!(Session::resume(&cfg, 3, s.checkpoint()).is_err());
        let other = ExperimentConfig { learning_rate: 0.5, ..cfg };
        assert!(Session::resume(&other, 2, s.checkpoint()).is_err());
    }
}
