use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, write_atomic, Checkpoint};
use super::config::ExperimentConfig;
use super::runner::{build_stream, checkpoint_path};
use crate::error::{Error, Result};
use crate::gpm::{collect_all_activations, init_basis};
use crate::linalg::DenseMatrix;
use crate::metrics::{
    activation_stats, captured_variance_curve, center_rows, jsd, write_jsd_csv, write_variance_curve_csv, JsdRow,
};
use crate::tasks::TaskStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeMode {
    Variance,
    Jsd,
    Dims,
}

impl AnalyzeMode {
    pub fn file_name(self) -> &'static str {
        match self {
            AnalyzeMode::Variance => "variance_curve.csv",
            AnalyzeMode::Jsd => "jsd.csv",
            AnalyzeMode::Dims => "dims.csv",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalyzeOptions {
    pub mode: AnalyzeMode,
    /// Defaults to `config_echo.toml` of the checkpoint's run directory.
    pub config: Option<PathBuf>,
    /// Defaults to `<mode>.csv` inside the run directory.
    pub out: Option<PathBuf>,
    /// 1-based task whose training data is analyzed; defaults to the last
    /// completed task.
    pub task: Option<usize>,
    pub eps: Vec<f64>,
    pub components: usize,
    /// Mean-center activations before the dims and variance analyses.
    pub centered: bool,
}

impl AnalyzeOptions {
    pub fn new(mode: AnalyzeMode) -> Self {
        Self {
            mode,
            config: None,
            out: None,
            task: None,
            eps: vec![0.90, 0.95, 0.99],
            components: 50,
            centered: false,
        }
    }
}

/// `<run>/checkpoints/task_t.ckpt` -> `<run>`.
fn run_dir_of(ckpt: &Path) -> PathBuf {
    ckpt.parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

struct Context {
    cfg: ExperimentConfig,
    seed: u64,
    stream: TaskStream,
    ckpt: Checkpoint,
}

fn context(ckpt_path: &Path, opts: &AnalyzeOptions) -> Result<Context> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let cfg_path = opts
        .config
        .clone()
        .unwrap_or_else(|| run_dir_of(ckpt_path).join("config_echo.toml"));
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let seed = cfg.seeds[0];
    let stream = build_stream(&cfg, seed)?;
    let dims = ckpt.model.layer_input_dims();
    if dims[0] != stream.input_dim() + 1 || ckpt.model.output_dim() != stream.class_count {
        return Err(Error::Shape {
            op: "analyze",
            left: (dims[0] - 1, ckpt.model.output_dim()),
            right: (stream.input_dim(), stream.class_count),
        });
    }
    Ok(Context { cfg, seed, stream, ckpt })
}

fn pick_task(ctx: &Context, requested: Option<usize>) -> Result<usize> {
    let t = requested.unwrap_or(ctx.ckpt.completed.max(1));
    if t == 0 || t > ctx.stream.len() {
        return Err(Error::InvalidArgument(format!("task {t} outside 1..={}", ctx.stream.len())));
    }
    Ok(t - 1)
}

/// Outputs of every hidden layer on a task's training data, bias row
/// included, exactly as the memory would store them unless centered.
fn hidden_activations(ctx: &Context, task: usize, centered: bool) -> Result<Vec<DenseMatrix>> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    rng.set_stream(7);
    let mut acts = collect_all_activations(&ctx.ckpt.model, &ctx.stream.tasks[task].train, ctx.cfg.n_samples, &mut rng)?;
    acts.remove(0);
    if centered {
        acts = acts.iter().map(center_rows).collect();
    }
    Ok(acts)
}

/// Basis dimension per hidden layer and threshold.
pub fn dims_table(ckpt_path: &Path, opts: &AnalyzeOptions) -> Result<Vec<(usize, f64, usize)>> {
    let ctx = context(ckpt_path, opts)?;
    let task = pick_task(&ctx, opts.task)?;
    let acts = hidden_activations(&ctx, task, opts.centered)?;
    let mut out = Vec::new();
    for (l, x) in acts.iter().enumerate() {
        for &eps in &opts.eps {
            out.push((l + 1, eps, init_basis(x, eps)?.cols()));
        }
    }
    Ok(out)
}

/// JSD between the winner pmf of task 1 (model after task 1, task-1
/// validation set) and that of the checkpoint's last task.
pub fn jsd_rows(ckpt_path: &Path, opts: &AnalyzeOptions) -> Result<Vec<JsdRow>> {
    let ctx = context(ckpt_path, opts)?;
    if ctx.ckpt.completed < 2 {
        return Err(Error::InvalidArgument("jsd needs a checkpoint taken after at least two tasks".into()));
    }
    let first = load_checkpoint(&checkpoint_path(&run_dir_of(ckpt_path), 1))?;
    let task = pick_task(&ctx, opts.task)?;
    let q1 = activation_stats(&first.model, &ctx.stream.tasks[0].val)?;
    let q2 = activation_stats(&ctx.ckpt.model, &ctx.stream.tasks[task].val)?;
    q1.q.iter()
        .zip(&q2.q)
        .enumerate()
        .map(|(l, (a, b))| {
            Ok(JsdRow {
                alpha: ctx.cfg.alpha,
                layer: l + 1,
                seed: ctx.seed,
                jsd_nats: jsd(a, b)?,
            })
        })
        .collect()
}

pub fn variance_curves(ckpt_path: &Path, opts: &AnalyzeOptions) -> Result<Vec<(String, usize, Vec<f64>)>> {
    let ctx = context(ckpt_path, opts)?;
    let task = pick_task(&ctx, opts.task)?;
    hidden_activations(&ctx, task, opts.centered)?
        .iter()
        .enumerate()
        .map(|(l, x)| Ok((ctx.cfg.name.clone(), l + 1, captured_variance_curve(x, opts.components)?)))
        .collect()
}

/// Runs one analysis over one or more checkpoints and writes a single CSV;
/// returns the output path.
pub fn analyze(ckpts: &[PathBuf], opts: &AnalyzeOptions) -> Result<PathBuf> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::InvalidArgument("analyze needs at least one checkpoint".into()))?;
    let mut buf = Vec::new();
    match opts.mode {
        AnalyzeMode::Dims => {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["model", "layer", "eps_th", "dim"])?;
            for ckpt in ckpts {
                let dims = dims_table(ckpt, opts)?;
                let name = model_name(ckpt, opts)?;
                for (l, eps, dim) in dims {
                    w.write_record([name.clone(), l.to_string(), eps.to_string(), dim.to_string()])?;
                }
            }
            w.flush().map_err(|e| Error::io("<csv>", e))?;
        }
        AnalyzeMode::Jsd => {
            let mut rows = Vec::new();
            for ckpt in ckpts {
                rows.extend(jsd_rows(ckpt, opts)?);
            }
            write_jsd_csv(&mut buf, &rows)?;
        }
        AnalyzeMode::Variance => {
            let mut curves = Vec::new();
            for ckpt in ckpts {
                curves.extend(variance_curves(ckpt, opts)?);
            }
            write_variance_curve_csv(&mut buf, &curves)?;
        }
    }
    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| run_dir_of(first).join(opts.mode.file_name()));
    write_atomic(&out, &buf)?;
    Ok(out)
}

fn model_name(ckpt: &Path, opts: &AnalyzeOptions) -> Result<String> {
    let cfg_path = opts
        .config
        .clone()
        .unwrap_or_else(|| run_dir_of(ckpt).join("config_echo.toml"));
    Ok(ExperimentConfig::load(&cfg_path)?.name)
}
