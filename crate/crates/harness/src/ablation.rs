//! Four ways of training a transform on a frozen projector, compared on
//! one teacher.

use std::path::Path;

use prodial_core::adapters::{AdapterSpec, Family};
use prodial_core::analysis::report_for;
use prodial_core::checkpoint::write_atomic;
use prodial_core::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::tasks::{derive_seed, gen_teacher_task, TeacherTask};
use crate::train::{fit_projector, teacher_eval, ProjectorFit, TEACHER_TENSOR};

/// Row labels, in run order.
pub const CONFIGS: [&str; 4] = ["full_t", "diag_centric", "diag_only", "offdiag_only"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub config: String,
    pub params: usize,
    pub final_train_loss: f64,
    pub test_loss: f64,
    pub rel_frobenius: f64,
    /// Of `pinv(W) W'` after training.
    pub dominance_ratio: f64,
}

fn build(index: usize, spec: &AdapterSpec, task: &TeacherTask, seed: u64) -> Result<ProjectorFit> {
    let w = task.w.clone();
    Ok(match index {
        0 => ProjectorFit::full_t(w),
        1 => {
            let spec = AdapterSpec {
                family: Family::Prodial,
                ..spec.clone()
            };
            ProjectorFit::from_spec(&spec, w, seed)?
        }
        2 => ProjectorFit::diag_only(w),
        _ => ProjectorFit::offdiag_only(w),
    })
}

fn run_one(cfg: &ExperimentConfig, task: &TeacherTask, index: usize) -> Result<AblationRow> {
    let seed = cfg.seed ^ index as u64;
    let mut fit = build(index, &cfg.spec, task, derive_seed(seed, 5))?;
    let trace = fit_projector(&mut fit, task, cfg.optimizer, &cfg.schedule, derive_seed(seed, 6))?;
    let eval = teacher_eval(&fit, task)?;
    let report = report_for(TEACHER_TENSOR, &task.w, &fit.effective()?, false)?;
    Ok(AblationRow {
        seed: cfg.seed,
        config: CONFIGS[index].to_string(),
        params: fit.trainable_count(),
        final_train_loss: *trace.last().expect("steps >= 1"),
        test_loss: eval.loss,
        rel_frobenius: eval.rel_frobenius.expect("teacher eval"),
        dominance_ratio: report.metrics.dominance_ratio,
    })
}

/// Trains the four configurations on the teacher from `cfg.teacher` and
/// `cfg.seed`. Configuration `i` draws its own randomness from
/// `seed ^ i`; the four runs go on separate threads.
pub fn ablate_fig4(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let task = gen_teacher_task(cfg.seed, &cfg.teacher)?;
    let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..CONFIGS.len())
            .map(|i| {
                let task = &task;
                s.spawn(move || run_one(cfg, task, i))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("ablation thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

pub fn to_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
}

pub fn write_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, &to_csv(rows)?)
}
