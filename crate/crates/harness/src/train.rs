//! Training loops for both tasks and the files a run leaves behind.

use std::path::Path;

use prodial_core::adapters::{AdaptedModel, AdapterSpec, Family, ProjAdapter, Projector, Target};
use prodial_core::autodiff::{Graph, Var};
use prodial_core::checkpoint::{write_atomic, Checkpoint};
use prodial_core::mamba::{flatten_tokens, model_forward, Model, ModelDims};
use prodial_core::{Error, Matrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OptimizerConfig, ScheduleConfig, TaskKind};
use crate::optim::{lr_at, AdamW};
use crate::tasks::{derive_seed, gen_seq_task, gen_teacher_task, SeqExample, TeacherTask, Variant};

/// Name of the single projector in teacher checkpoints.
pub const TEACHER_TENSOR: &str = "layer0.w_proj";

/// How the frozen projector of a teacher run is adapted.
#[derive(Clone, Debug, PartialEq)]
pub enum FitKind {
    Adapter(ProjAdapter),
    /// `w` itself is trained.
    Dense(Matrix),
    Frozen,
    /// `W T`, `T` dense and initialised to the identity.
    FullT(Matrix),
    /// `W diag(v)`, `v` initialised to ones.
    DiagOnly(Matrix),
    /// `W (I + O * (1 - I))`; only off-diagonal entries of `O` matter.
    OffDiagOnly(Matrix),
}

/// A frozen projector with its trainable part.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorFit {
    pub w: Matrix,
    pub kind: FitKind,
}

fn off_diag_mask(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

impl ProjectorFit {
    pub fn from_spec(spec: &AdapterSpec, w: Matrix, seed: u64) -> Result<Self> {
        let kind = match spec.family {
            Family::Prodial | Family::Lora | Family::Dora => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                FitKind::Adapter(ProjAdapter::init(spec, Projector::In, w.clone(), &mut rng)?)
            }
            Family::FullFt => FitKind::Dense(w.clone()),
            Family::Frozen => FitKind::Frozen,
            Family::Bitfit => {
                return Err(Error::Config("bitfit has no tensors to train on a bare projector".into()))
            }
        };
        Ok(Self { w, kind })
    }

    pub fn full_t(w: Matrix) -> Self {
        let n = w.cols();
        Self {
            w,
            kind: FitKind::FullT(Matrix::identity(n)),
        }
    }

    pub fn diag_only(w: Matrix) -> Self {
        let n = w.cols();
        Self {
            w,
            kind: FitKind::DiagOnly(Matrix::ones(1, n)),
        }
    }

    pub fn offdiag_only(w: Matrix) -> Self {
        let n = w.cols();
        Self {
            w,
            kind: FitKind::OffDiagOnly(Matrix::zeros(n, n)),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        match &self.kind {
            FitKind::Adapter(a) => a.params().into_iter().map(|(n, _)| n).collect(),
            FitKind::Dense(_) => vec!["w"],
            FitKind::Frozen => vec![],
            FitKind::FullT(_) => vec!["t"],
            FitKind::DiagOnly(_) => vec!["v"],
            FitKind::OffDiagOnly(_) => vec!["o"],
        }
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        match (&self.kind, name) {
            (FitKind::Adapter(a), _) => a.params().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m),
            (FitKind::Dense(m), "w")
            | (FitKind::FullT(m), "t")
            | (FitKind::DiagOnly(m), "v")
            | (FitKind::OffDiagOnly(m), "o") => Some(m),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        match (&mut self.kind, name) {
            (FitKind::Adapter(a), _) => a.param_mut(name),
            (FitKind::Dense(m), "w")
            | (FitKind::FullT(m), "t")
            | (FitKind::DiagOnly(m), "v")
            | (FitKind::OffDiagOnly(m), "o") => Some(m),
            _ => None,
        }
    }

    /// Free parameters; masked diagonal entries do not count.
    pub fn trainable_count(&self) -> usize {
        match &self.kind {
            FitKind::Adapter(a) => a.param_count(),
            FitKind::Dense(m) | FitKind::FullT(m) | FitKind::DiagOnly(m) => m.len(),
            FitKind::Frozen => 0,
            FitKind::OffDiagOnly(m) => m.len() - m.rows(),
        }
    }

    /// Records the effective weight; returns it and the trainable leaves in
    /// [`names`](Self::names) order.
    pub fn graph(&self, g: &mut Graph) -> Result<(Var, Vec<Var>)> {
        match &self.kind {
            FitKind::Adapter(a) => {
                let (leaves, eff) = a.graph(g, true)?;
                Ok((eff, leaves))
            }
            FitKind::Frozen => Ok((g.constant(self.w.clone()), vec![])),
            FitKind::Dense(m) => {
                let v = g.param(m.clone());
                Ok((v, vec![v]))
            }
            FitKind::FullT(t) => {
                let w = g.constant(self.w.clone());
                let t = g.param(t.clone());
                Ok((g.matmul(w, t)?, vec![t]))
            }
            FitKind::DiagOnly(v) => {
                let w = g.constant(self.w.clone());
                let v = g.param(v.clone());
                Ok((g.col_scale(w, v)?, vec![v]))
            }
            FitKind::OffDiagOnly(o) => {
                let n = o.rows();
                let w = g.constant(self.w.clone());
                let ov = g.param(o.clone());
                let mask = g.constant(off_diag_mask(n));
                let eye = g.constant(Matrix::identity(n));
                let off = g.hadamard(ov, mask)?;
                let t = g.add(eye, off)?;
                Ok((g.matmul(w, t)?, vec![ov]))
            }
        }
    }

    /// The dense weight the fit currently represents.
    pub fn effective(&self) -> Result<Matrix> {
        match &self.kind {
            FitKind::Adapter(a) => a.effective(),
            FitKind::Frozen => Ok(self.w.clone()),
            FitKind::Dense(m) => Ok(m.clone()),
            _ => {
                let mut g = Graph::new();
                let (eff, _) = self.graph(&mut g)?;
                Ok(g.value(eff).clone())
            }
        }
    }
}

/// Closed-form trainable count of a teacher run.
pub fn teacher_param_count(spec: &AdapterSpec, d_out: usize, d_in: usize) -> usize {
    match spec.family {
        Family::Prodial => d_in * d_in / spec.r_b_in + d_out + spec.r_eps * (d_in + d_out),
        Family::Lora => spec.rank * (d_in + d_out),
        Family::Dora => spec.rank * (d_in + d_out) + d_in,
        Family::FullFt => d_out * d_in,
        Family::Frozen | Family::Bitfit => 0,
    }
}

/// Trainable count a config implies, before anything is built.
pub fn config_param_count(cfg: &ExperimentConfig) -> usize {
    match cfg.task {
        TaskKind::TeacherRegression => teacher_param_count(&cfg.spec, cfg.teacher.d_out, cfg.teacher.d_in),
        TaskKind::SeqTransfer => prodial_core::adapters::param_count(&cfg.spec, &cfg.model),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// `||W' - W*||_F / ||W*||_F` for teacher runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_frobenius: Option<f64>,
}

/// Everything a run reports. Wall time is deliberately absent so that
/// repeated runs produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task: String,
    pub family: String,
    pub target: String,
    pub seed: u64,
    pub steps: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
    /// Before fine-tuning.
    pub baseline: EvalMetrics,
    #[serde(rename = "final")]
    pub final_eval: EvalMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<EvalMetrics>,
    pub loss_trace: Vec<f64>,
}

/// Metrics plus the starting and merged final weights.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub initial: Checkpoint,
    pub final_ckpt: Checkpoint,
}

fn check_loss(loss: f64, step: usize, dump: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("loss is {loss} at step {step}; {}", dump())))
    }
}

/// Largest magnitude per tensor, for failure reports.
fn tensor_dump<'a>(items: impl Iterator<Item = (String, &'a Matrix)>) -> String {
    items
        .map(|(n, m)| format!("{n}: max|x| = {:e}", m.max_abs()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j))
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        (0..batch).map(|_| rng.gen_range(0..n)).collect()
    }
}

fn mse(pred: &Matrix, y: &Matrix) -> Result<f64> {
    let d = pred.sub(y)?;
    Ok(d.data().iter().map(|x| x * x).sum::<f64>() / d.len() as f64)
}

/// Test-set MSE and relative weight error of the current fit.
pub fn teacher_eval(fit: &ProjectorFit, task: &TeacherTask) -> Result<EvalMetrics> {
    let w = fit.effective()?;
    let pred = prodial_core::linalg::matmul(&task.test_u, &w.transpose())?;
    Ok(EvalMetrics {
        loss: mse(&pred, &task.test_y)?,
        accuracy: None,
        rel_frobenius: Some(w.sub(&task.w_star)?.frobenius() / task.w_star.frobenius()),
    })
}

/// MSE fit of `fit` to the teacher's training pairs. A fit with nothing to
/// train records the full training loss at every step.
pub fn fit_projector(
    fit: &mut ProjectorFit,
    task: &TeacherTask,
    opt: OptimizerConfig,
    schedule: &ScheduleConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let names = fit.names();
    let n = task.train_u.rows();
    if names.is_empty() {
        let pred = prodial_core::linalg::matmul(&task.train_u, &fit.w.transpose())?;
        let loss = mse(&pred, &task.train_y)?;
        check_loss(loss, 0, String::new)?;
        return Ok(vec![loss; schedule.steps]);
    }
    let shapes: Vec<_> = names.iter().map(|n| fit.param(n).expect("listed").shape()).collect();
    let mut adam = AdamW::new(opt, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let idx = batch_indices(&mut rng, n, schedule.batch_size);
        let (u, y) = if idx.len() == n {
            (task.train_u.clone(), task.train_y.clone())
        } else {
            (gather_rows(&task.train_u, &idx), gather_rows(&task.train_y, &idx))
        };
        let mut g = Graph::new();
        let (eff, leaves) = fit.graph(&mut g)?;
        let uv = g.constant(u);
        let yv = g.constant(y);
        let pred = g.matmul_nt(uv, eff)?;
        let loss = g.squared_error(pred, yv)?;
        let lv = g.scalar(loss);
        check_loss(lv, step, || {
            tensor_dump(names.iter().map(|n| (n.to_string(), fit.param(n).expect("listed"))))
        })?;
        trace.push(lv);
        let grads = g.backward(loss)?;
        let gs: Vec<Matrix> = leaves
            .iter()
            .zip(&shapes)
            .map(|(v, &(r, c))| grads.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(r, c)))
            .collect();
        let refs: Vec<&Matrix> = gs.iter().collect();
        adam.begin_step(&refs)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        let lr = lr_at(schedule, opt.lr, step);
        for (i, name) in names.iter().enumerate() {
            adam.update(i, fit.param_mut(name).expect("listed"), &gs[i], lr)?;
        }
    }
    Ok(trace)
}

/// Mean cross-entropy and accuracy of `logits_of` over `data`.
pub fn classify_eval(
    data: &[SeqExample],
    logits_of: impl Fn(&[Vec<usize>]) -> Result<Matrix>,
) -> Result<EvalMetrics> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in data.chunks(256) {
        let toks: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let logits = logits_of(&toks)?;
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let mut g = Graph::new();
        let lv = g.constant(logits.clone());
        let ce = g.softmax_cross_entropy(lv, &labels)?;
        loss += g.scalar(ce) * chunk.len() as f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("classes > 0");
            correct += usize::from(best == label);
        }
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: Some(correct as f64 / n),
        rel_frobenius: None,
    })
}

/// Cross-entropy training of `model` on `data`. A model with nothing to
/// train records the full training loss at every step.
pub fn fit_classifier(
    model: &mut AdaptedModel,
    data: &[SeqExample],
    opt: OptimizerConfig,
    schedule: &ScheduleConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let names = model.trainable_names();
    let vocab = model.base.dims().vocab;
    if names.is_empty() {
        let m = &*model;
        let loss = classify_eval(data, |t| m.forward(t))?.loss;
        check_loss(loss, 0, String::new)?;
        return Ok(vec![loss; schedule.steps]);
    }
    let shapes: Vec<_> = names.iter().map(|n| model.param(n).expect("listed").shape()).collect();
    let mut adam = AdamW::new(opt, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let idx = batch_indices(&mut rng, data.len(), schedule.batch_size);
        let toks: Vec<Vec<usize>> = idx.iter().map(|&i| data[i].tokens.clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
        let (flat, seq_len) = flatten_tokens(&toks, vocab)?;
        let mut g = Graph::new();
        let (logits, leaves) = model.forward_graph(&mut g, &flat, seq_len)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let lv = g.scalar(loss);
        check_loss(lv, step, || {
            tensor_dump(names.iter().map(|n| (n.clone(), model.param(n).expect("listed"))))
        })?;
        trace.push(lv);
        let grads = g.backward(loss)?;
        let gs: Vec<Matrix> = leaves
            .iter()
            .zip(&shapes)
            .map(|(v, &(r, c))| grads.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(r, c)))
            .collect();
        let refs: Vec<&Matrix> = gs.iter().collect();
        adam.begin_step(&refs)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        let lr = lr_at(schedule, opt.lr, step);
        for (i, name) in names.iter().enumerate() {
            adam.update(i, model.param_mut(name).expect("listed"), &gs[i], lr)?;
        }
    }
    Ok(trace)
}

fn pretrain_spec() -> AdapterSpec {
    AdapterSpec {
        family: Family::FullFt,
        target: Target::All,
        ..AdapterSpec::default()
    }
}

/// Randomly initialised model fully trained on the base variant.
pub fn pretrain(cfg: &ExperimentConfig, data: &[SeqExample]) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let base = Model::init(cfg.model, &mut rng)?;
    let mut model = AdaptedModel::new(base, pretrain_spec(), 0)?;
    let schedule = ScheduleConfig {
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        ..cfg.schedule
    };
    let opt = OptimizerConfig {
        lr: cfg.pretrain.lr,
        ..cfg.optimizer
    };
    fit_classifier(&mut model, data, opt, &schedule, derive_seed(cfg.seed, 4))?;
    Ok(model.base)
}

fn load_pretrained(path: &Path, dims: ModelDims) -> Result<Model> {
    Checkpoint::load(path)?.to_model(dims)
}

/// Fine-tunes `base` on the shifted variant under the config's spec.
pub fn finetune_seq(cfg: &ExperimentConfig, base: Model) -> Result<RunOutput> {
    let shifted = gen_seq_task(cfg.seed, &cfg.seq, cfg.model.vocab, cfg.model.classes, Variant::Shifted)?;
    let base_data = gen_seq_task(cfg.seed, &cfg.seq, cfg.model.vocab, cfg.model.classes, Variant::Base)?;
    let pretrain_eval = classify_eval(&base_data.test, |t| model_forward(&base, t))?;
    let baseline = classify_eval(&shifted.test, |t| model_forward(&base, t))?;
    let initial = Checkpoint::from_model(&base, cfg.to_json(), cfg.seed, 0);

    let mut model = AdaptedModel::new(base, cfg.spec.clone(), derive_seed(cfg.seed, 5))?;
    let trainable = model.trainable_count();
    let expected = config_param_count(cfg);
    if trainable != expected {
        return Err(Error::Contract(format!(
            "built {trainable} trainable parameters, closed form says {expected}"
        )));
    }
    let trace = fit_classifier(&mut model, &shifted.train, cfg.optimizer, &cfg.schedule, derive_seed(cfg.seed, 6))?;
    let merged = model.merge()?;
    let final_eval = classify_eval(&shifted.test, |t| model_forward(&merged, t))?;
    let total = cfg.model.total_params();
    let metrics = RunMetrics {
        task: cfg.task.to_string(),
        family: cfg.spec.family.to_string(),
        target: cfg.spec.target.to_string(),
        seed: cfg.seed,
        steps: cfg.schedule.steps,
        trainable_params: trainable,
        total_params: total,
        trainable_fraction: trainable as f64 / total as f64,
        baseline,
        final_eval,
        pretrain: Some(pretrain_eval),
        loss_trace: trace,
    };
    let final_ckpt = Checkpoint::from_model(&merged, cfg.to_json(), cfg.seed, cfg.schedule.steps as u64);
    Ok(RunOutput {
        metrics,
        initial,
        final_ckpt,
    })
}

fn projector_checkpoint(w: &Matrix, cfg: &ExperimentConfig, step: u64) -> Checkpoint {
    let mut c = Checkpoint::new(cfg.to_json(), cfg.seed, step);
    c.push(TEACHER_TENSOR, w.clone());
    c
}

/// Fits one projector to the teacher the config describes.
pub fn train_teacher(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let task = gen_teacher_task(cfg.seed, &cfg.teacher)?;
    let mut fit = ProjectorFit::from_spec(&cfg.spec, task.w.clone(), derive_seed(cfg.seed, 5))?;
    let trainable = fit.trainable_count();
    let expected = config_param_count(cfg);
    if trainable != expected {
        return Err(Error::Contract(format!(
            "built {trainable} trainable parameters, closed form says {expected}"
        )));
    }
    let baseline = teacher_eval(&fit, &task)?;
    let trace = fit_projector(&mut fit, &task, cfg.optimizer, &cfg.schedule, derive_seed(cfg.seed, 6))?;
    let final_eval = teacher_eval(&fit, &task)?;
    let merged = fit.effective()?;
    let total = task.w.len();
    let metrics = RunMetrics {
        task: cfg.task.to_string(),
        family: cfg.spec.family.to_string(),
        target: Projector::In.local_name().into(),
        seed: cfg.seed,
        steps: cfg.schedule.steps,
        trainable_params: trainable,
        total_params: total,
        trainable_fraction: trainable as f64 / total as f64,
        baseline,
        final_eval,
        pretrain: None,
        loss_trace: trace,
    };
    Ok(RunOutput {
        metrics,
        initial: projector_checkpoint(&task.w, cfg, 0),
        final_ckpt: projector_checkpoint(&merged, cfg, cfg.schedule.steps as u64),
    })
}

/// Runs the task the config names. Sequence runs pretrain first unless a
/// checkpoint is given.
pub fn train(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.task {
        TaskKind::TeacherRegression => train_teacher(cfg),
        TaskKind::SeqTransfer => {
            let base = match &cfg.pretrain.checkpoint {
                Some(path) => load_pretrained(path, cfg.model)?,
                None => {
                    let data =
                        gen_seq_task(cfg.seed, &cfg.seq, cfg.model.vocab, cfg.model.classes, Variant::Base)?;
                    pretrain(cfg, &data.train)?
                }
            };
            finetune_seq(cfg, base)
        }
    }
}

pub const METRICS_FILE: &str = "metrics.json";
pub const INITIAL_FILE: &str = "initial.pdlb";
pub const FINAL_FILE: &str = "final.pdlb";

/// Writes metrics and both checkpoints into `dir`, each atomically.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(&out.metrics)
        .map_err(|e| Error::Format(format!("metrics serialisation: {e}")))?;
    json.push(b'\n');
    write_atomic(&dir.join(METRICS_FILE), &json)?;
    out.initial.save(&dir.join(INITIAL_FILE))?;
    out.final_ckpt.save(&dir.join(FINAL_FILE))
}
