//! Recovering the transform between pretrained and fine-tuned weights and
//! measuring how close it is to a diagonal matrix.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::{matmul, pinv_with_rank, Matrix};

/// Tensor-name suffixes treated as projectors by [`layer_sweep`].
pub const PROJECTOR_SUFFIXES: [&str; 3] = [".w_in", ".w_out", ".w_proj"];

/// `pinv(w) * w_prime` together with whether `w` lacked full column rank.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformEstimate {
    pub t: Matrix,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Solves `w T = w_prime` in the least-squares, minimum-norm sense.
pub fn t_det(w: &Matrix, w_prime: &Matrix) -> Result<TransformEstimate> {
    if w.shape() != w_prime.shape() {
        return Err(Error::Shape(format!(
            "t_det: w is {}x{}, w' is {}x{}",
            w.rows(),
            w.cols(),
            w_prime.rows(),
            w_prime.cols()
        )));
    }
    let (p, rank) = pinv_with_rank(w)?;
    Ok(TransformEstimate {
        t: matmul(&p, w_prime)?,
        rank,
        rank_deficient: rank < w.cols(),
    })
}

/// L1 masses of `|T - I|` split by position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityDistance {
    pub diag_l1: f64,
    pub offdiag_l1: f64,
}

/// Diagonal-dominance summary of a square transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceMetrics {
    pub diag_mean: f64,
    pub diag_abs_mean: f64,
    pub offdiag_l1_mass: f64,
    pub identity_distance: IdentityDistance,
    /// Diagonal L1 mass over total L1 mass; 0 for the zero matrix.
    pub dominance_ratio: f64,
}

pub fn dominance_metrics(t: &Matrix) -> Result<DominanceMetrics> {
    let n = t.rows();
    if t.cols() != n || n == 0 {
        return Err(Error::Contract(format!(
            "dominance metrics need a non-empty square matrix, got {}x{}",
            t.rows(),
            t.cols()
        )));
    }
    let (mut diag_sum, mut diag_l1, mut off_l1) = (0.0, 0.0, 0.0);
    let (mut id_diag, mut id_off) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = t.get(i, j);
            if i == j {
                diag_sum += v;
                diag_l1 += v.abs();
                id_diag += (v - 1.0).abs();
            } else {
                off_l1 += v.abs();
                id_off += v.abs();
            }
        }
    }
    let total = diag_l1 + off_l1;
    Ok(DominanceMetrics {
        diag_mean: diag_sum / n as f64,
        diag_abs_mean: diag_l1 / n as f64,
        offdiag_l1_mass: off_l1,
        identity_distance: IdentityDistance {
            diag_l1: id_diag,
            offdiag_l1: id_off,
        },
        dominance_ratio: if total > 0.0 { diag_l1 / total } else { 0.0 },
    })
}

/// Per-projector result of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub layer_id: String,
    pub d_in: usize,
    pub rank_deficient: bool,
    #[serde(flatten)]
    pub metrics: DominanceMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_det: Option<Matrix>,
}

/// Means of the per-projector metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub count: usize,
    pub mean_dominance_ratio: f64,
    pub min_dominance_ratio: f64,
    pub mean_diag_mean: f64,
    pub mean_offdiag_l1_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub reports: Vec<TransformReport>,
    pub aggregate: SweepAggregate,
}

pub fn is_projector_name(name: &str) -> bool {
    PROJECTOR_SUFFIXES.iter().any(|s| name.ends_with(s))
}

pub fn report_for(layer_id: &str, w: &Matrix, w_prime: &Matrix, keep_matrix: bool) -> Result<TransformReport> {
    let est = t_det(w, w_prime)?;
    Ok(TransformReport {
        layer_id: layer_id.to_string(),
        d_in: w.cols(),
        rank_deficient: est.rank_deficient,
        metrics: dominance_metrics(&est.t)?,
        t_det: keep_matrix.then_some(est.t),
    })
}

/// One report per projector found in both checkpoints, in the pretrained
/// checkpoint's order. Any missing or misshapen projector is an error; all
/// of them are listed.
pub fn layer_sweep(pretrained: &Checkpoint, finetuned: &Checkpoint, keep_matrices: bool) -> Result<SweepReport> {
    let mut problems = Vec::new();
    let mut pairs = Vec::new();
    for (name, w) in pretrained.tensors.iter().filter(|(n, _)| is_projector_name(n)) {
        match finetuned.get(name) {
            None => problems.push(format!("{name} missing from fine-tuned checkpoint")),
            Some(wp) if wp.shape() != w.shape() => problems.push(format!(
                "{name}: pretrained {}x{}, fine-tuned {}x{}",
                w.rows(),
                w.cols(),
                wp.rows(),
                wp.cols()
            )),
            Some(wp) => pairs.push((name, w, wp)),
        }
    }
    for name in finetuned.names().filter(|n| is_projector_name(n)) {
        if pretrained.get(name).is_none() {
            problems.push(format!("{name} missing from pretrained checkpoint"));
        }
    }
    if pairs.is_empty() && problems.is_empty() {
        problems.push("no projector tensors found".into());
    }
    if !problems.is_empty() {
        return Err(Error::Format(problems.join("; ")));
    }
    let reports = pairs
        .into_iter()
        .map(|(name, w, wp)| report_for(name, w, wp, keep_matrices))
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&TransformReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let aggregate = SweepAggregate {
        count: reports.len(),
        mean_dominance_ratio: mean(|r| r.metrics.dominance_ratio),
        min_dominance_ratio: reports
            .iter()
            .map(|r| r.metrics.dominance_ratio)
            .fold(f64::INFINITY, f64::min),
        mean_diag_mean: mean(|r| r.metrics.diag_mean),
        mean_offdiag_l1_mass: mean(|r| r.metrics.offdiag_l1_mass),
    };
    Ok(SweepReport { reports, aggregate })
}
