//! Binary checkpoint: `GPMC`, u32 LE version, then five u64-length-prefixed
//! sections (model, gpm, dropout, rng, progress). Floats are f64 LE and all
//! counts u64 LE.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::gpm::{GpmMemory, ThresholdCriterion};
use crate::linalg::DenseMatrix;
use crate::metrics::AccuracyMatrix;
use crate::net::{DropoutKind, DropoutState, LayerState, MlpModel, WinnerCount};

pub const MAGIC: &[u8; 4] = b"GPMC";
pub const VERSION: u32 = 1;
const SECTIONS: [&str; 5] = ["model", "gpm", "dropout", "rng", "progress"];

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub memory: GpmMemory,
    pub dropout: DropoutState,
    pub rngs: Vec<RngState>,
    /// Tasks fully processed, including the end-of-task updates.
    pub completed: usize,
    pub total_tasks: usize,
    pub config_hash: String,
    pub accuracy: AccuracyMatrix,
    pub log: String,
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.0.extend_from_slice(b);
    }
    fn matrix(&mut self, m: &DenseMatrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.base + self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} available",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A count bounded by the bytes left, so corrupt lengths fail cleanly
    /// instead of triggering huge allocations.
    fn count(&mut self, what: &str, elem_size: usize) -> Result<usize> {
        let start = self.pos;
        let v = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if elem_size > 0 && v > left / elem_size as u64 {
            self.pos = start;
            return Err(self.err(format!("{what} = {v} exceeds the remaining {left} bytes")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.count(what, 1)?;
        self.take(n, what)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let b = self.bytes(what)?;
        String::from_utf8(b.to_vec()).map_err(|_| {
            self.pos = start;
            self.err(format!("{what} is not valid UTF-8"))
        })
    }

    fn matrix(&mut self, what: &str) -> Result<DenseMatrix> {
        let rows = self.count(what, 0)?;
        let cols = self.count(what, 0)?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| self.err(format!("{what} of {rows}x{cols} exceeds the remaining bytes")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64(what)?);
        }
        DenseMatrix::new(rows, cols, data)
    }

    fn finish(&self, section: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!(
                "{} unread bytes at the end of section {section}",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn encode_model(m: &MlpModel) -> Vec<u8> {
    let mut e = Enc::default();
    e.usize(m.layers.len());
    for l in &m.layers {
        e.matrix(&l.weights);
    }
    e.usize(m.winners.len());
    for w in &m.winners {
        e.usize(match w {
            WinnerCount::Dense => 0,
            WinnerCount::Top(k) => *k,
        });
    }
    e.0
}

fn decode_model(d: &mut Dec) -> Result<MlpModel> {
    let n = d.count("layer count", 16)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        layers.push(LayerState {
            weights: d.matrix("layer weights")?,
        });
    }
    let nw = d.count("winner count", 8)?;
    let mut winners = Vec::with_capacity(nw);
    for _ in 0..nw {
        winners.push(match d.u64("winner k")? {
            0 => WinnerCount::Dense,
            k => WinnerCount::Top(k as usize),
        });
    }
    if n == 0 || nw + 1 != n {
        return Err(d.err(format!("{n} layers with {nw} hidden activations")));
    }
    for w in layers.windows(2) {
        if w[0].weights.rows() + 1 != w[1].weights.cols() {
            return Err(d.err("consecutive layer shapes do not chain"));
        }
    }
    Ok(MlpModel { layers, winners })
}

fn encode_gpm(g: &GpmMemory) -> Vec<u8> {
    let mut e = Enc::default();
    e.usize(g.n_samples);
    e.u64(match g.criterion {
        ThresholdCriterion::Joint => 0,
        ThresholdCriterion::ResidualOnly => 1,
    });
    e.f64(g.eigen_floor);
    e.usize(g.bases.len());
    for (b, &eps) in g.bases.iter().zip(&g.eps_th) {
        e.f64(eps);
        e.matrix(b);
    }
    e.0
}

fn decode_gpm(d: &mut Dec) -> Result<GpmMemory> {
    let n_samples = d.u64("n_samples")? as usize;
    let criterion = match d.u64("criterion")? {
        0 => ThresholdCriterion::Joint,
        1 => ThresholdCriterion::ResidualOnly,
        other => return Err(d.err(format!("unknown threshold criterion {other}"))),
    };
    let eigen_floor = d.f64("eigen_floor")?;
    let n = d.count("basis count", 24)?;
    let mut bases = Vec::with_capacity(n);
    let mut eps_th = Vec::with_capacity(n);
    for _ in 0..n {
        eps_th.push(d.f64("eps_th")?);
        bases.push(d.matrix("basis")?);
    }
    Ok(GpmMemory {
        bases,
        eps_th,
        n_samples,
        criterion,
        eigen_floor,
    })
}

fn encode_dropout(s: &DropoutState) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(match s.kind {
        DropoutKind::None => 0,
        DropoutKind::Heterogeneous => 1,
        DropoutKind::Random => 2,
    });
    e.f64(s.alpha);
    e.usize(s.counters.len());
    for (c, p) in s.counters.iter().zip(&s.retention) {
        e.usize(c.len());
        for &v in c {
            e.u64(v);
        }
        for &v in p {
            e.f64(v);
        }
    }
    e.0
}

fn decode_dropout(d: &mut Dec) -> Result<DropoutState> {
    let kind = match d.u64("dropout kind")? {
        0 => DropoutKind::None,
        1 => DropoutKind::Heterogeneous,
        2 => DropoutKind::Random,
        other => return Err(d.err(format!("unknown dropout kind {other}"))),
    };
    let alpha = d.f64("alpha")?;
    let n = d.count("dropout layer count", 8)?;
    let mut counters = Vec::with_capacity(n);
    let mut retention = Vec::with_capacity(n);
    for _ in 0..n {
        let w = d.count("layer width", 16)?;
        let mut c = Vec::with_capacity(w);
        for _ in 0..w {
            c.push(d.u64("counter")?);
        }
        let mut p = Vec::with_capacity(w);
        for _ in 0..w {
            p.push(d.f64("retention")?);
        }
        counters.push(c);
        retention.push(p);
    }
    Ok(DropoutState {
        kind,
        alpha,
        counters,
        retention,
    })
}

fn encode_rngs(rngs: &[RngState]) -> Vec<u8> {
    let mut e = Enc::default();
    e.usize(rngs.len());
    for r in rngs {
        e.0.extend_from_slice(&r.seed);
        e.u64(r.stream);
        e.u64(r.word_pos as u64);
        e.u64((r.word_pos >> 64) as u64);
    }
    e.0
}

fn decode_rngs(d: &mut Dec) -> Result<Vec<RngState>> {
    let n = d.count("rng count", 56)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let seed: [u8; 32] = d.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = d.u64("rng stream")?;
        let lo = d.u64("rng position")? as u128;
        let hi = d.u64("rng position")? as u128;
        out.push(RngState {
            seed,
            stream,
            word_pos: lo | (hi << 64),
        });
    }
    Ok(out)
}

fn encode_progress(c: &Checkpoint) -> Vec<u8> {
    let mut e = Enc::default();
    e.usize(c.completed);
    e.usize(c.total_tasks);
    e.bytes(c.config_hash.as_bytes());
    e.usize(c.accuracy.tasks());
    for row in c.accuracy.rows() {
        for &v in row {
            e.f64(v);
        }
    }
    e.bytes(c.log.as_bytes());
    e.0
}

fn decode_progress(d: &mut Dec) -> Result<(usize, usize, String, AccuracyMatrix, String)> {
    let completed = d.u64("completed")? as usize;
    let total = d.u64("total tasks")? as usize;
    let hash = d.string("config hash")?;
    let rows_n = d.count("accuracy rows", 8)?;
    let mut rows = Vec::with_capacity(rows_n);
    for t in 0..rows_n {
        let mut row = Vec::with_capacity(t + 1);
        for _ in 0..=t {
            row.push(d.f64("accuracy")?);
        }
        rows.push(row);
    }
    let start = d.pos;
    let accuracy = AccuracyMatrix::from_rows(rows).map_err(|e| {
        d.pos = start;
        d.err(e.to_string())
    })?;
    let log = d.string("log")?;
    if completed > total || accuracy.tasks() != completed {
        return Err(d.err(format!(
            "{completed} completed of {total} tasks with {} accuracy rows",
            accuracy.tasks()
        )));
    }
    Ok((completed, total, hash, accuracy, log))
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for section in [
        encode_model(&c.model),
        encode_gpm(&c.memory),
        encode_dropout(&c.dropout),
        encode_rngs(&c.rngs),
        encode_progress(c),
    ] {
        out.extend_from_slice(&(section.len() as u64).to_le_bytes());
        out.extend_from_slice(&section);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut top = Dec::new(bytes, 0);
    if top.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: "bad magic, expected \"GPMC\"".into(),
        });
    }
    let version = u32::from_le_bytes(top.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let mut sections = Vec::with_capacity(SECTIONS.len());
    for name in SECTIONS {
        let len = top.count(&format!("{name} section length"), 1)?;
        let base = top.pos;
        sections.push((name, Dec::new(top.take(len, name)?, base)));
    }
    if top.pos != bytes.len() {
        return Err(top.err("trailing bytes after the last section"));
    }
    let mut it = sections.into_iter();
    let mut next = || it.next().expect("five sections");

    let (name, mut d) = next();
    let model = decode_model(&mut d)?;
    d.finish(name)?;
    let (name, mut d) = next();
    let memory = decode_gpm(&mut d)?;
    d.finish(name)?;
    let (name, mut d) = next();
    let dropout = decode_dropout(&mut d)?;
    d.finish(name)?;
    let (name, mut d) = next();
    let rngs = decode_rngs(&mut d)?;
    d.finish(name)?;
    let (name, mut d) = next();
    let (completed, total_tasks, config_hash, accuracy, log) = decode_progress(&mut d)?;
    d.finish(name)?;

    let dims = model.layer_input_dims();
    if memory.bases.len() != dims.len() || memory.bases.iter().zip(&dims).any(|(b, &d)| b.rows() != d) {
        return Err(Error::Checkpoint {
            offset: 8,
            msg: "GPM bases do not match the model's layer widths".into(),
        });
    }
    if dropout.widths() != model.hidden_widths() {
        return Err(Error::Checkpoint {
            offset: 8,
            msg: "dropout state does not match the model's hidden widths".into(),
        });
    }
    Ok(Checkpoint {
        model,
        memory,
        dropout,
        rngs,
        completed,
        total_tasks,
        config_hash,
        accuracy,
        log,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(c))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MlpModel::new(2, &[5, 4], 2, vec![WinnerCount::Top(2), WinnerCount::Dense], &mut rng).unwrap();
        let mut memory = GpmMemory::new(&model.layer_input_dims(), 0.97, 64).unwrap();
        memory.bases[0] = DenseMatrix::from_columns(3, &[[1.0, 0.0, 0.0]]).unwrap();
        let mut dropout = DropoutState::new(DropoutKind::Heterogeneous, 1.5, &model.hidden_widths());
        dropout.counters[0] = vec![4, 0, 1, 9, 2];
        dropout.refresh_retention();
        rng.next_u64();
        Checkpoint {
            model,
            memory,
            dropout,
            rngs: vec![RngState::capture(&rng), RngState::capture(&ChaCha8Rng::seed_from_u64(1))],
            completed: 2,
            total_tasks: 5,
            config_hash: "deadbeef".into(),
            accuracy: AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.25, 0.75]]).unwrap(),
            log: "task 1\ntask 2\n".into(),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = encode_checkpoint(&c);
        assert_eq!(&bytes[..4], b"GPMC");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), c);
    }

    #[test]
    fn restored_rng_continues_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        a.next_u64();
        a.next_u32();
        let mut b = RngState::capture(&a).restore();
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn every_truncation_fails_with_offset() {
        let bytes = encode_checkpoint(&sample());
        for cut in [0, 3, 7, 8, 15, 40, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut, "cut {cut} offset {offset}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode_checkpoint(&sample());
        bytes.push(0);
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn corrupt_length_is_rejected() {
        let mut bytes = encode_checkpoint(&sample());
        // first field of the model section: the layer count
        bytes[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        match decode_checkpoint(&bytes) {
            Err(Error::Checkpoint { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/task_2.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        assert!(!path.with_extension("ckpt.tmp").exists());
    }
}
