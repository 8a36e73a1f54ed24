use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gpm::ThresholdCriterion;
use crate::linalg::EIGEN_FLOOR;
use crate::net::{DropoutKind, MaskGranularity, SgdConfig, WinnerCount};
use crate::tasks::{MnistFiles, PermutedMnistConfig, SwissRollConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Swissroll,
    PermutedMnist,
}

/// `"dense"`, one `k` for every hidden layer, or one per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSetting {
    Word(String),
    All(usize),
    PerLayer(Vec<usize>),
}

/// A number or `"auto"` (`24 / k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Word(String),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsSetting {
    All(f64),
    PerLayer(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSetting {
    None,
    Heterogeneous,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularitySetting {
    Batch,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionSetting {
    Joint,
    Residual,
}

/// Config file as written by the user; omitted keys take benchmark defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    benchmark: Option<Benchmark>,
    tasks: Option<usize>,
    hidden: Option<Vec<usize>>,
    k: Option<KSetting>,
    alpha: Option<AlphaSetting>,
    dropout: Option<DropoutSetting>,
    mask_granularity: Option<GranularitySetting>,
    use_gpm: Option<bool>,
    eps_th: Option<EpsSetting>,
    gpm_criterion: Option<CriterionSetting>,
    eigen_floor: Option<f64>,
    n_samples: Option<usize>,
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seeds: Option<Vec<u64>>,
    data_dir: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    swiss_n_per_class: Option<usize>,
    swiss_noise: Option<f64>,
    swiss_theta_min: Option<f64>,
    swiss_theta_max: Option<f64>,
    train_per_task: Option<usize>,
    mnist_val_per_task: Option<usize>,
    mnist_test_per_task: Option<usize>,
    mnist_val_holdout: Option<usize>,
    mnist_train_images: Option<String>,
    mnist_train_labels: Option<String>,
    mnist_test_images: Option<String>,
    mnist_test_labels: Option<String>,
}

/// Fully resolved experiment settings. Serializing it yields a config file
/// that reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub benchmark: Benchmark,
    pub tasks: usize,
    pub hidden: Vec<usize>,
    pub k: KSetting,
    pub alpha: f64,
    pub dropout: DropoutSetting,
    pub mask_granularity: GranularitySetting,
    pub use_gpm: bool,
    pub eps_th: Vec<f64>,
    pub gpm_criterion: CriterionSetting,
    pub eigen_floor: f64,
    pub n_samples: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub swiss_n_per_class: usize,
    pub swiss_noise: f64,
    pub swiss_theta_min: f64,
    pub swiss_theta_max: f64,
    pub train_per_task: usize,
    pub mnist_val_per_task: usize,
    pub mnist_test_per_task: usize,
    pub mnist_val_holdout: usize,
    pub mnist_train_images: String,
    pub mnist_train_labels: String,
    pub mnist_test_images: String,
    pub mnist_test_labels: String,
}

fn parse_k(k: &KSetting, layers: usize) -> Result<Vec<WinnerCount>> {
    let out = match k {
        KSetting::Word(w) if w == "dense" => vec![WinnerCount::Dense; layers],
        KSetting::Word(w) => return Err(Error::Config(format!("k must be \"dense\" or a count, got {w:?}"))),
        KSetting::All(k) => vec![WinnerCount::Top(*k); layers],
        KSetting::PerLayer(ks) => {
            if ks.len() != layers {
                return Err(Error::Config(format!("k lists {} values for {layers} hidden layers", ks.len())));
            }
            ks.iter().map(|&k| WinnerCount::Top(k)).collect()
        }
    };
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Self::resolve(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let benchmark = raw
            .benchmark
            .ok_or_else(|| Error::Config("missing key `benchmark`".into()))?;
        let swiss = benchmark == Benchmark::Swissroll;
        let hidden = raw.hidden.unwrap_or_else(|| if swiss { vec![256, 256] } else { vec![512, 512] });
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config("hidden must list at least one positive width".into()));
        }
        let k = raw.k.unwrap_or_else(|| KSetting::Word("dense".into()));
        let winners = parse_k(&k, hidden.len())?;
        for (w, (&width, l)) in winners.iter().zip(hidden.iter().zip(1..)) {
            if let WinnerCount::Top(k) = w {
                if *k == 0 || *k > width {
                    return Err(Error::Config(format!("k = {k} invalid for hidden layer {l} of width {width}")));
                }
            }
        }
        let alpha = match raw.alpha.unwrap_or(AlphaSetting::Value(0.0)) {
            AlphaSetting::Value(a) => a,
            AlphaSetting::Word(w) if w == "auto" => {
                let ks: Vec<usize> = winners
                    .iter()
                    .filter_map(|w| match w {
                        WinnerCount::Top(k) => Some(*k),
                        WinnerCount::Dense => None,
                    })
                    .collect();
                if ks.len() != winners.len() {
                    return Err(Error::Config("alpha = \"auto\" requires k-winner activations in every hidden layer".into()));
                }
                if ks.iter().any(|&k| k != ks[0]) {
                    return Err(Error::Config("alpha = \"auto\" requires the same k in every layer".into()));
                }
                24.0 / ks[0] as f64
            }
            AlphaSetting::Word(w) => return Err(Error::Config(format!("alpha must be a number or \"auto\", got {w:?}"))),
        };
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
        }
        let layers = hidden.len() + 1;
        let eps_th = match raw.eps_th.unwrap_or(EpsSetting::All(0.99)) {
            EpsSetting::All(e) => vec![e; layers],
            EpsSetting::PerLayer(v) if v.len() == layers => v,
            EpsSetting::PerLayer(v) => {
                return Err(Error::Config(format!("eps_th lists {} values for {layers} layers", v.len())))
            }
        };
        if let Some(e) = eps_th.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::Config(format!("eps_th must lie in (0, 1], got {e}")));
        }
        let dropout = raw.dropout.unwrap_or(DropoutSetting::None);
        let use_gpm = raw.use_gpm.unwrap_or(true);
        let name = raw.name.unwrap_or_else(|| default_name(use_gpm, &winners, dropout, alpha));
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name {name:?} is not usable as a directory name")));
        }
        let seeds = raw.seeds.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let files = MnistFiles::default();
        let cfg = Self {
            name,
            benchmark,
            tasks: raw.tasks.unwrap_or(if swiss { 50 } else { 10 }),
            hidden,
            k,
            alpha,
            dropout,
            mask_granularity: raw.mask_granularity.unwrap_or(GranularitySetting::Batch),
            use_gpm,
            eps_th,
            gpm_criterion: raw.gpm_criterion.unwrap_or(CriterionSetting::Joint),
            eigen_floor: raw.eigen_floor.unwrap_or(EIGEN_FLOOR),
            n_samples: raw.n_samples.unwrap_or(512),
            learning_rate: raw.learning_rate.unwrap_or(0.01),
            epochs: raw.epochs.unwrap_or(if swiss { 200 } else { 5 }),
            batch_size: raw.batch_size.unwrap_or(if swiss { 32 } else { 64 }),
            seeds,
            data_dir: raw.data_dir.unwrap_or_else(|| PathBuf::from("data/mnist")),
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
            swiss_n_per_class: raw.swiss_n_per_class.unwrap_or(100),
            swiss_noise: raw.swiss_noise.unwrap_or(0.015),
            swiss_theta_min: raw.swiss_theta_min.unwrap_or(1.5 * std::f64::consts::PI),
            swiss_theta_max: raw.swiss_theta_max.unwrap_or(4.5 * std::f64::consts::PI),
            train_per_task: raw.train_per_task.unwrap_or(2000),
            mnist_val_per_task: raw.mnist_val_per_task.unwrap_or(1000),
            mnist_test_per_task: raw.mnist_test_per_task.unwrap_or(2000),
            mnist_val_holdout: raw.mnist_val_holdout.unwrap_or(5000),
            mnist_train_images: raw.mnist_train_images.unwrap_or(files.train_images),
            mnist_train_labels: raw.mnist_train_labels.unwrap_or(files.train_labels),
            mnist_test_images: raw.mnist_test_images.unwrap_or(files.test_images),
            mnist_test_labels: raw.mnist_test_labels.unwrap_or(files.test_labels),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if !(self.eigen_floor >= 0.0 && self.eigen_floor < 1.0) {
            return Err(Error::Config("eigen_floor must lie in [0, 1)".into()));
        }
        self.sgd().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.benchmark == Benchmark::Swissroll {
            if self.swiss_n_per_class < 4 {
                return Err(Error::Config("swiss_n_per_class must be at least 4".into()));
            }
            if !(self.swiss_noise >= 0.0) || !(self.swiss_theta_max > self.swiss_theta_min) || self.swiss_theta_min < 0.0 {
                return Err(Error::Config("invalid swiss roll geometry".into()));
            }
        }
        Ok(())
    }

    pub fn winners(&self) -> Vec<WinnerCount> {
        parse_k(&self.k, self.hidden.len()).expect("validated on load")
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }

    pub fn dropout_kind(&self) -> DropoutKind {
        match self.dropout {
            DropoutSetting::None => DropoutKind::None,
            DropoutSetting::Heterogeneous => DropoutKind::Heterogeneous,
            DropoutSetting::Random => DropoutKind::Random,
        }
    }

    pub fn granularity(&self) -> MaskGranularity {
        match self.mask_granularity {
            GranularitySetting::Batch => MaskGranularity::Batch,
            GranularitySetting::Sample => MaskGranularity::Sample,
        }
    }

    pub fn criterion(&self) -> ThresholdCriterion {
        match self.gpm_criterion {
            CriterionSetting::Joint => ThresholdCriterion::Joint,
            CriterionSetting::Residual => ThresholdCriterion::ResidualOnly,
        }
    }

    pub fn swiss_roll(&self, seed: u64) -> SwissRollConfig {
        SwissRollConfig {
            tasks: self.tasks,
            n_per_class: self.swiss_n_per_class,
            noise_sigma: self.swiss_noise,
            theta_min: self.swiss_theta_min,
            theta_max: self.swiss_theta_max,
            seed,
        }
    }

    pub fn permuted_mnist(&self, seed: u64) -> PermutedMnistConfig {
        PermutedMnistConfig {
            tasks: self.tasks,
            train_per_task: self.train_per_task,
            val_per_task: self.mnist_val_per_task,
            test_per_task: self.mnist_test_per_task,
            val_holdout: self.mnist_val_holdout,
            seed,
        }
    }

    pub fn mnist_files(&self) -> MnistFiles {
        MnistFiles {
            train_images: self.mnist_train_images.clone(),
            train_labels: self.mnist_train_labels.clone(),
            test_images: self.mnist_test_images.clone(),
            test_labels: self.mnist_test_labels.clone(),
        }
    }

    /// The same config restricted to one seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seeds: vec![seed],
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Hex SHA-256 prefix of everything that affects results except the
    /// seed and the file locations.
    pub fn config_hash(&self) -> String {
        let canonical = Self {
            seeds: Vec::new(),
            data_dir: PathBuf::new(),
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-seed{seed}", self.name)
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(self.run_id(seed))
    }
}

fn default_name(use_gpm: bool, winners: &[WinnerCount], dropout: DropoutSetting, alpha: f64) -> String {
    let mut parts = vec![if use_gpm { "gpm" } else { "sgd" }];
    if winners.iter().any(|w| w.is_sparse()) {
        parts.push("k");
    }
    if alpha > 0.0 {
        match dropout {
            DropoutSetting::Heterogeneous => parts.push("hd"),
            DropoutSetting::Random => parts.push("rd"),
            DropoutSetting::None => {}
        }
    }
    parts.join("+")
}
