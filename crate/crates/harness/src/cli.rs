//! Argument handling for the `prodial` binary. Kept in the library so the
//! exit-code contract can be tested without spawning processes.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use prodial_core::analysis::layer_sweep;
use prodial_core::checkpoint::{write_atomic, Checkpoint};
use prodial_core::gradcheck::{run_suite, DEFAULT_H};
use prodial_core::{Error, Matrix, Result};

use crate::ablation::{ablate_fig4, write_csv};
use crate::config::ExperimentConfig;
use crate::train::{config_param_count, train, write_outputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "prodial", version, about = "Diagonal-centric projector fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare projectors of two checkpoints.
    Analyze {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also store every recovered transform, in the report and as CSV.
        #[arg(long)]
        full_matrices: bool,
    },
    /// Print the trainable-parameter count a config implies.
    Count {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train the four transform configurations on one teacher.
    #[command(name = "ablate-fig4")]
    AblateFig4 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Teacher, optimizer and schedule settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// `12345 (0.01M)`
pub fn format_count(n: usize) -> String {
    format!("{n} ({:.2}M)", n as f64 / 1e6)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train { config, seed, out: dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = dir {
                cfg.output_dir = d;
            }
            let run = train(&cfg)?;
            write_outputs(&cfg.output_dir, &run)?;
            let m = &run.metrics;
            writeln!(
                out,
                "trainable {} of {}; final loss {:.6e}{}; wrote {}",
                m.trainable_params,
                m.total_params,
                m.final_eval.loss,
                m.final_eval
                    .accuracy
                    .map(|a| format!(", accuracy {a:.4}"))
                    .unwrap_or_default(),
                cfg.output_dir.display()
            )?;
        }
        Command::Analyze {
            pretrained,
            finetuned,
            out: path,
            full_matrices,
        } => {
            let pre = Checkpoint::load(&pretrained)?;
            let fine = Checkpoint::load(&finetuned)?;
            let report = layer_sweep(&pre, &fine, full_matrices)?;
            let mut json = serde_json::to_vec_pretty(&report)
                .map_err(|e| Error::Format(format!("report serialisation: {e}")))?;
            json.push(b'\n');
            ensure_parent(&path)?;
            write_atomic(&path, &json)?;
            if full_matrices {
                for r in &report.reports {
                    let t = r.t_det.as_ref().expect("kept");
                    write_atomic(&matrix_csv_path(&path, &r.layer_id), &matrix_csv(t)?)?;
                }
            }
            writeln!(
                out,
                "{} projectors, mean dominance ratio {:.4}, min {:.4}",
                report.aggregate.count, report.aggregate.mean_dominance_ratio, report.aggregate.min_dominance_ratio
            )?;
        }
        Command::Count { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            writeln!(out, "{}", format_count(config_param_count(&cfg)))?;
        }
        Command::Gradcheck { seed, tol } => {
            let results = run_suite(seed, DEFAULT_H)?;
            let mut worst = 0.0_f64;
            for r in &results {
                writeln!(out, "{:<28} {:.3e}", r.name, r.max_rel_err)?;
                worst = worst.max(r.max_rel_err);
            }
            let ok = worst <= tol;
            writeln!(
                out,
                "max relative error {worst:.3e} over {} cases (tol {tol:e}): {}",
                results.len(),
                if ok { "pass" } else { "FAIL" }
            )?;
            if !ok {
                return Ok(EXIT_NUMERICAL);
            }
        }
        Command::AblateFig4 { seed, out: path, config } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            cfg.seed = seed;
            let rows = ablate_fig4(&cfg)?;
            write_csv(&path, &rows)?;
            for r in &rows {
                writeln!(out, "{:<13} params {:>5}  test loss {:.4e}", r.config, r.params, r.test_loss)?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// `report.json` + `blocks.0.w_in` -> `report.blocks.0.w_in.csv`
fn matrix_csv_path(report: &Path, layer: &str) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.{layer}.csv"))
}

fn matrix_csv(m: &Matrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
}
