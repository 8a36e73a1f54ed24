use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sparse_gpm::cli::{
    analyze, compare_runs, run_experiment, write_atomic, write_comparison_csv, AnalyzeMode, AnalyzeOptions,
    ExperimentConfig, RunOptions,
};
use sparse_gpm::tasks::{gen_swiss_roll, write_swiss_roll_csv, SwissRollConfig};
use sparse_gpm::{Error, Result};

#[derive(Parser)]
#[command(name = "sparse-gpm", version, about = "Continual learning with gradient projection memory, k-winner sparsity and heterogeneous dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model over a task stream and write the run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by the same config and seed.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many tasks are complete.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Aggregate metrics.csv of several run directories per variant.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Subspace and overlap analyses of trained checkpoints.
    Analyze {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Config of the run; defaults to the run directory's config_echo.toml.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// 1-based task whose data is analyzed.
        #[arg(long)]
        task: Option<usize>,
        /// Thresholds for dims mode.
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.95,0.99")]
        eps: Vec<f64>,
        /// Number of components in variance mode.
        #[arg(long, default_value_t = 50)]
        components: usize,
        /// Use mean-centered covariances instead of raw second moments.
        #[arg(long)]
        centered: bool,
    },
    /// Write a continual Swiss Roll stream as CSV.
    GenSwissroll {
        #[arg(long = "t")]
        tasks: usize,
        #[arg(long)]
        out: PathBuf,
        /// Training points per class and task.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.015)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Variance,
    Jsd,
    Dims,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            resume,
            stop_after,
            quiet,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = match seed {
                Some(s) => vec![s],
                None => cfg.seeds.clone(),
            };
            if resume.is_some() && seeds.len() != 1 {
                return Err(Error::InvalidArgument("--resume needs a single seed; pass --seed".into()));
            }
            for s in seeds {
                let opts = RunOptions {
                    resume: resume.clone(),
                    stop_after,
                    verbose: !quiet,
                };
                let out = run_experiment(&cfg, s, &opts)?;
                let bt = out
                    .summary
                    .backward_transfer
                    .map(|b| format!("{b:.4}"))
                    .unwrap_or_else(|| "n/a".into());
                println!(
                    "{}\tavg_accuracy={:.4}\tbt={bt}\ttasks={}",
                    out.dir.display(),
                    out.summary.avg_accuracy,
                    out.completed
                );
            }
        }
        Command::Compare { dirs, out } => {
            let rows = compare_runs(&dirs)?;
            let mut buf = Vec::new();
            write_comparison_csv(&mut buf, &rows)?;
            match out {
                Some(path) => write_atomic(&path, &buf)?,
                None => print!("{}", String::from_utf8_lossy(&buf)),
            }
        }
        Command::Analyze {
            ckpt,
            mode,
            config,
            out,
            task,
            eps,
            components,
            centered,
        } => {
            let mode = match mode {
                Mode::Variance => AnalyzeMode::Variance,
                Mode::Jsd => AnalyzeMode::Jsd,
                Mode::Dims => AnalyzeMode::Dims,
            };
            let opts = AnalyzeOptions {
                config,
                out,
                task,
                eps,
                components,
                centered,
                ..AnalyzeOptions::new(mode)
            };
            println!("{}", analyze(&ckpt, &opts)?.display());
        }
        Command::GenSwissroll {
            tasks,
            out,
            n,
            noise,
            seed,
        } => {
            let stream = gen_swiss_roll(&SwissRollConfig {
                tasks,
                n_per_class: n,
                noise_sigma: noise,
                seed,
                ..SwissRollConfig::default()
            })?;
            let mut buf = Vec::new();
            write_swiss_roll_csv(&stream, &mut buf)?;
            write_atomic(&out, &buf)?;
        }
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let head = text.split("Usage:").next().unwrap_or_default();
            eprintln!("ERROR\tusage\t{}", one_line(head.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR\t{}\t{}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
