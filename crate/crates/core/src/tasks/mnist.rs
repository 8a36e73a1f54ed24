use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::idx::{load_idx_file, IdxData, IdxKind};
use super::{LabeledDataset, Split, Task, TaskStream};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// File names of the four MNIST IDX files inside a data directory. A `.gz`
/// suffix is tried automatically when the plain name is missing.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistFiles {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for MnistFiles {
    fn default() -> Self {
        Self {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

/// Raw MNIST bytes; pixels stay `u8` until a subset is materialized.
#[derive(Clone, Debug)]
pub struct MnistData {
    pub pixels_per_image: usize,
    pub train_pixels: Vec<u8>,
    pub train_labels: Vec<u8>,
    pub test_pixels: Vec<u8>,
    pub test_labels: Vec<u8>,
}

fn resolve(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (also tried .gz)"),
    ))
}

fn expect_kind(d: &IdxData, kind: IdxKind, name: &str) -> Result<()> {
    if d.kind != kind {
        return Err(Error::InvalidArgument(format!("{name}: expected {kind:?} IDX file")));
    }
    Ok(())
}

impl MnistData {
    pub fn load(dir: &Path, files: &MnistFiles) -> Result<Self> {
        let tri = load_idx_file(&resolve(dir, &files.train_images)?)?;
        let trl = load_idx_file(&resolve(dir, &files.train_labels)?)?;
        let tei = load_idx_file(&resolve(dir, &files.test_images)?)?;
        let tel = load_idx_file(&resolve(dir, &files.test_labels)?)?;
        expect_kind(&tri, IdxKind::Images, &files.train_images)?;
        expect_kind(&tei, IdxKind::Images, &files.test_images)?;
        expect_kind(&trl, IdxKind::Labels, &files.train_labels)?;
        expect_kind(&tel, IdxKind::Labels, &files.test_labels)?;
        if tri.count() != trl.count() || tei.count() != tel.count() || tri.item_len() != tei.item_len() {
            return Err(Error::InvalidArgument("MNIST image/label files disagree in size".into()));
        }
        Ok(Self {
            pixels_per_image: tri.item_len(),
            train_pixels: tri.raw,
            train_labels: trl.raw,
            test_pixels: tei.raw,
            test_labels: tel.raw,
        })
    }

    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    fn image<'a>(&self, pixels: &'a [u8], i: usize) -> &'a [u8] {
        &pixels[i * self.pixels_per_image..(i + 1) * self.pixels_per_image]
    }

    /// Builds a dataset from the chosen images, each permuted by `perm`.
    fn materialize(&self, test: bool, idx: &[usize], perm: &[usize], split: Split) -> LabeledDataset {
        let (pixels, labels) = if test {
            (&self.test_pixels, &self.test_labels)
        } else {
            (&self.train_pixels, &self.train_labels)
        };
        let d = self.pixels_per_image;
        let n = idx.len();
        let mut m = DenseMatrix::zeros(d, n);
        for (col, &i) in idx.iter().enumerate() {
            let img = self.image(pixels, i);
            for (row, &src) in perm.iter().enumerate() {
                m.data_mut()[row * n + col] = img[src] as f64 / 255.0;
            }
        }
        let labels = idx.iter().map(|&i| labels[i] as usize).collect();
        LabeledDataset::new(m, labels, split).expect("one label per column")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutedMnistConfig {
    pub tasks: usize,
    pub train_per_task: usize,
    /// Images taken, in order, from the validation split for every task.
    pub val_per_task: usize,
    /// Images taken, in order, from the test set for every task.
    pub test_per_task: usize,
    /// The last `val_holdout` training images form the validation split.
    pub val_holdout: usize,
    pub seed: u64,
}

impl Default for PermutedMnistConfig {
    fn default() -> Self {
        Self {
            tasks: 10,
            train_per_task: 2000,
            val_per_task: 1000,
            test_per_task: 2000,
            val_holdout: 5000,
            seed: 0,
        }
    }
}

const CLASSES: usize = 10;

/// Task 1 is plain MNIST; every later task applies its own fixed random
/// pixel permutation. Training images are subsampled per task, stratified by
/// class; validation and test images are the same for every task.
pub fn permuted_mnist_stream(mnist: &MnistData, cfg: &PermutedMnistConfig) -> Result<TaskStream> {
    if cfg.tasks == 0 {
        return Err(Error::InvalidArgument("permuted MNIST needs at least one task".into()));
    }
    if cfg.val_holdout >= mnist.train_len() {
        return Err(Error::InvalidArgument("validation holdout swallows the training set".into()));
    }
    let pool_len = mnist.train_len() - cfg.val_holdout;
    if cfg.train_per_task == 0 || cfg.train_per_task > pool_len {
        return Err(Error::InvalidArgument(format!(
            "train_per_task must lie in 1..={pool_len}"
        )));
    }
    if cfg.val_per_task == 0 || cfg.val_per_task > cfg.val_holdout || cfg.test_per_task == 0 || cfg.test_per_task > mnist.test_len() {
        return Err(Error::InvalidArgument("val/test sizes exceed their splits".into()));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for i in 0..pool_len {
        by_class[mnist.train_labels[i] as usize].push(i);
    }
    let val_idx: Vec<usize> = (pool_len..pool_len + cfg.val_per_task).collect();
    let test_idx: Vec<usize> = (0..cfg.test_per_task).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = mnist.pixels_per_image;
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut perm: Vec<usize> = (0..d).collect();
        if t > 0 {
            perm.shuffle(&mut rng);
        }
        let train_idx = stratified_sample(&by_class, cfg.train_per_task, &mut rng)?;
        tasks.push(Task {
            train: mnist.materialize(false, &train_idx, &perm, Split::Train),
            val: mnist.materialize(false, &val_idx, &perm, Split::Val),
            test: mnist.materialize(true, &test_idx, &perm, Split::Test),
            permutation: Some(perm),
        });
    }
    TaskStream::new(tasks, CLASSES)
}

/// `total / C` images per class, the remainder going to the lowest classes;
/// returned indices are sorted.
fn stratified_sample(by_class: &[Vec<usize>], total: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let c = by_class.len();
    let mut out = Vec::with_capacity(total);
    for (k, pool) in by_class.iter().enumerate() {
        let quota = total / c + usize::from(k < total % c);
        if quota > pool.len() {
            return Err(Error::InvalidArgument(format!(
                "class {k} has only {} images, {quota} requested",
                pool.len()
            )));
        }
        out.extend(pool.choose_multiple(rng, quota).copied());
    }
    out.sort_unstable();
    Ok(out)
}

/// Permuted copy: `out[i] = image[perm[i]]`.
pub fn apply_permutation(image: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&p| image[p]).collect()
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 30 fake 2x2 images in 10 classes plus a 10 image test set.
    fn fake() -> MnistData {
        let train_labels: Vec<u8> = (0..30).map(|i| (i % 10) as u8).collect();
        let train_pixels: Vec<u8> = (0..30 * 4).map(|i| (i * 7 % 256) as u8).collect();
        let test_labels: Vec<u8> = (0..10).map(|i| i as u8).collect();
        let test_pixels: Vec<u8> = (0..40).map(|i| (i * 3 % 256) as u8).collect();
        MnistData {
            pixels_per_image: 4,
            train_pixels,
            train_labels,
            test_pixels,
            test_labels,
        }
    }

    fn cfg() -> PermutedMnistConfig {
        PermutedMnistConfig {
            tasks: 3,
            train_per_task: 10,
            val_per_task: 5,
            test_per_task: 10,
            val_holdout: 10,
            seed: 4,
        }
    }

    #[test]
    fn first_task_is_unpermuted() {
        let m = fake();
        let s = permuted_mnist_stream(&m, &cfg()).unwrap();
        let t0 = &s.tasks[0];
        assert_eq!(t0.permutation.as_deref(), Some(&[0, 1, 2, 3][..]));
        for i in 0..t0.test.len() {
            let orig: Vec<f64> = m.image(&m.test_pixels, i).iter().map(|&b| b as f64 / 255.0).collect();
            assert_eq!(t0.test.sample(i), orig);
        }
    }

    #[test]
    fn inverse_permutation_recovers_originals() {
        let s = permuted_mnist_stream(&fake(), &cfg()).unwrap();
        let base = &s.tasks[0].test;
        for task in &s.tasks[1..] {
            let inv = invert_permutation(task.permutation.as_ref().unwrap());
            for i in 0..task.test.len() {
                assert_eq!(apply_permutation(&task.test.sample(i), &inv), base.sample(i));
            }
        }
    }

    #[test]
    fn permutation_preserves_histogram() {
        let s = permuted_mnist_stream(&fake(), &cfg()).unwrap();
        let mut a = s.tasks[0].val.sample(2);
        let mut b = s.tasks[2].val.sample(2);
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_and_disjoint() {
        let m = fake();
        let s = permuted_mnist_stream(&m, &cfg()).unwrap();
        for task in &s.tasks {
            assert!(task.train.class_counts(10).iter().all(|&c| c == 1));
            assert_eq!(task.val.len(), 5);
        }
    }

    #[test]
    fn deterministic_streams() {
        let m = fake();
        assert_eq!(
            permuted_mnist_stream(&m, &cfg()).unwrap(),
            permuted_mnist_stream(&m, &cfg()).unwrap()
        );
    }

    #[test]
    fn oversized_requests_rejected() {
        let m = fake();
        let too_many = PermutedMnistConfig { train_per_task: 25, ..cfg() };
        assert!(permuted_mnist_stream(&m, &too_many).is_err());
    }
}
