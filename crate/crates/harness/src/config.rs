//! Experiment configuration: a flat `key = value` file with dotted keys.
//!
//! ```text
//! # comments run to the end of the line
//! task = seq_transfer
//! seed = 3
//! model.d_model = 32
//! spec.family = prodial
//! ```
//!
//! Every key has a default, so an empty file is a valid config. Unknown or
//! repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use prodial_core::adapters::{AdapterSpec, Family, Target};
use prodial_core::mamba::{BlockDims, ModelDims};
use prodial_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    TeacherRegression,
    SeqTransfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    DiagDominant,
    OffdiagHeavy,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $s,)+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`",
                        stringify!($ty)
                    ))),
                }
            }
        }
    };
}

keyword_enum!(TaskKind {
    TeacherRegression => "teacher_regression",
    SeqTransfer => "seq_transfer",
});
keyword_enum!(Structure {
    DiagDominant => "diag_dominant",
    OffdiagHeavy => "offdiag_heavy",
    Full => "full",
});
keyword_enum!(ScheduleKind {
    Constant => "constant",
    Cosine => "cosine",
});

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            warmup: 0,
            batch_size: 256,
            kind: ScheduleKind::Constant,
        }
    }
}

/// Shape of the synthetic single-projector regression problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub structure: Structure,
    /// Number of diagonal blocks in the target transform.
    pub blocks: usize,
    /// Half-width of the uniform diagonal deviation.
    pub diag_scale: f64,
    /// Std of the within-block off-diagonal entries.
    pub offdiag_std: f64,
    pub eps_rank: usize,
    /// `||eps||_F / ||W||_F` of the low-rank term.
    pub eps_scale: f64,
    pub noise_std: f64,
    pub samples: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_out: 32,
            structure: Structure::DiagDominant,
            blocks: 4,
            diag_scale: 0.3,
            offdiag_std: 0.01,
            eps_rank: 2,
            eps_scale: 0.05,
            noise_std: 0.05,
            samples: 2000,
        }
    }
}

/// The marker-and-payload classification task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeqConfig {
    pub seq_len: usize,
    /// Payload tokens per sequence.
    pub payload: usize,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            seq_len: 32,
            payload: 1,
            train_size: 2000,
            test_size: 500,
        }
    }
}

/// Full fine-tuning on the base variant that produces the starting model.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Load this checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 3e-3,
            batch_size: 32,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelDims,
    pub spec: AdapterSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub teacher: TeacherConfig,
    pub seq: SeqConfig,
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::TeacherRegression,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelDims {
                block: BlockDims {
                    d_model: 32,
                    d_inner: 64,
                    n_state: 8,
                    dt_rank: 4,
                    conv_k: 4,
                },
                layers: 2,
                vocab: 16,
                classes: 4,
            },
            spec: AdapterSpec {
                family: Family::Prodial,
                target: Target::Both,
                r_b_in: 4,
                r_b_out: 4,
                r_eps: 4,
                rank: 4,
                alpha: 8.0,
                train_head: false,
            },
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            teacher: TeacherConfig::default(),
            seq: SeqConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for `{key}`: expected true or false"))),
    }
}

/// Every key the file format accepts, in canonical order.
pub const KEYS: [&str; 45] = [
    "task",
    "seed",
    "output_dir",
    "model.d_model",
    "model.d_inner",
    "model.n_state",
    "model.dt_rank",
    "model.conv_k",
    "model.layers",
    "model.vocab",
    "model.classes",
    "spec.family",
    "spec.target",
    "spec.r_b_in",
    "spec.r_b_out",
    "spec.r_eps",
    "spec.rank",
    "spec.alpha",
    "spec.train_head",
    "optimizer.lr",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.weight_decay",
    "optimizer.eps",
    "schedule.steps",
    "schedule.warmup",
    "schedule.batch_size",
    "schedule.kind",
    "teacher.d_in",
    "teacher.d_out",
    "teacher.structure",
    "teacher.blocks",
    "teacher.diag_scale",
    "teacher.offdiag_std",
    "teacher.eps_rank",
    "teacher.eps_scale",
    "teacher.noise_std",
    "teacher.samples",
    "task.seq_len",
    "task.payload",
    "task.train_size",
    "task.test_size",
    "pretrain.steps",
    "pretrain.lr",
    "pretrain.batch_size",
];

/// Keys that may be absent from [`KEYS`]-style dumps because they have no
/// value by default.
const OPTIONAL_KEYS: [&str; 1] = ["pretrain.checkpoint"];

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.model.block;
        match key {
            "task" => self.task = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "model.d_model" => b.d_model = parse(key, value)?,
            "model.d_inner" => b.d_inner = parse(key, value)?,
            "model.n_state" => b.n_state = parse(key, value)?,
            "model.dt_rank" => b.dt_rank = parse(key, value)?,
            "model.conv_k" => b.conv_k = parse(key, value)?,
            "model.layers" => self.model.layers = parse(key, value)?,
            "model.vocab" => self.model.vocab = parse(key, value)?,
            "model.classes" => self.model.classes = parse(key, value)?,
            "spec.family" => self.spec.family = value.parse()?,
            "spec.target" => self.spec.target = value.parse()?,
            "spec.r_b_in" => self.spec.r_b_in = parse(key, value)?,
            "spec.r_b_out" => self.spec.r_b_out = parse(key, value)?,
            "spec.r_eps" => self.spec.r_eps = parse(key, value)?,
            "spec.rank" => self.spec.rank = parse(key, value)?,
            "spec.alpha" => self.spec.alpha = parse(key, value)?,
            "spec.train_head" => self.spec.train_head = parse_bool(key, value)?,
            "optimizer.lr" => self.optimizer.lr = parse(key, value)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, value)?,
            "optimizer.eps" => self.optimizer.eps = parse(key, value)?,
            "schedule.steps" => self.schedule.steps = parse(key, value)?,
            "schedule.warmup" => self.schedule.warmup = parse(key, value)?,
            "schedule.batch_size" => self.schedule.batch_size = parse(key, value)?,
            "schedule.kind" => self.schedule.kind = value.parse()?,
            "teacher.d_in" => self.teacher.d_in = parse(key, value)?,
            "teacher.d_out" => self.teacher.d_out = parse(key, value)?,
            "teacher.structure" => self.teacher.structure = value.parse()?,
            "teacher.blocks" => self.teacher.blocks = parse(key, value)?,
            "teacher.diag_scale" => self.teacher.diag_scale = parse(key, value)?,
            "teacher.offdiag_std" => self.teacher.offdiag_std = parse(key, value)?,
            "teacher.eps_rank" => self.teacher.eps_rank = parse(key, value)?,
            "teacher.eps_scale" => self.teacher.eps_scale = parse(key, value)?,
            "teacher.noise_std" => self.teacher.noise_std = parse(key, value)?,
            "teacher.samples" => self.teacher.samples = parse(key, value)?,
            "task.seq_len" => self.seq.seq_len = parse(key, value)?,
            "task.payload" => self.seq.payload = parse(key, value)?,
            "task.train_size" => self.seq.train_size = parse(key, value)?,
            "task.test_size" => self.seq.test_size = parse(key, value)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, value)?,
            "pretrain.checkpoint" => self.pretrain.checkpoint = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Textual value of a key, `None` for an unset optional key.
    pub fn get(&self, key: &str) -> Option<String> {
        let b = &self.model.block;
        Some(match key {
            "task" => self.task.to_string(),
            "seed" => self.seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "model.d_model" => b.d_model.to_string(),
            "model.d_inner" => b.d_inner.to_string(),
            "model.n_state" => b.n_state.to_string(),
            "model.dt_rank" => b.dt_rank.to_string(),
            "model.conv_k" => b.conv_k.to_string(),
            "model.layers" => self.model.layers.to_string(),
            "model.vocab" => self.model.vocab.to_string(),
            "model.classes" => self.model.classes.to_string(),
            "spec.family" => self.spec.family.to_string(),
            "spec.target" => self.spec.target.to_string(),
            "spec.r_b_in" => self.spec.r_b_in.to_string(),
            "spec.r_b_out" => self.spec.r_b_out.to_string(),
            "spec.r_eps" => self.spec.r_eps.to_string(),
            "spec.rank" => self.spec.rank.to_string(),
            "spec.alpha" => self.spec.alpha.to_string(),
            "spec.train_head" => self.spec.train_head.to_string(),
            "optimizer.lr" => self.optimizer.lr.to_string(),
            "optimizer.beta1" => self.optimizer.beta1.to_string(),
            "optimizer.beta2" => self.optimizer.beta2.to_string(),
            "optimizer.weight_decay" => self.optimizer.weight_decay.to_string(),
            "optimizer.eps" => self.optimizer.eps.to_string(),
            "schedule.steps" => self.schedule.steps.to_string(),
            "schedule.warmup" => self.schedule.warmup.to_string(),
            "schedule.batch_size" => self.schedule.batch_size.to_string(),
            "schedule.kind" => self.schedule.kind.to_string(),
            "teacher.d_in" => self.teacher.d_in.to_string(),
            "teacher.d_out" => self.teacher.d_out.to_string(),
            "teacher.structure" => self.teacher.structure.to_string(),
            "teacher.blocks" => self.teacher.blocks.to_string(),
            "teacher.diag_scale" => self.teacher.diag_scale.to_string(),
            "teacher.offdiag_std" => self.teacher.offdiag_std.to_string(),
            "teacher.eps_rank" => self.teacher.eps_rank.to_string(),
            "teacher.eps_scale" => self.teacher.eps_scale.to_string(),
            "teacher.noise_std" => self.teacher.noise_std.to_string(),
            "teacher.samples" => self.teacher.samples.to_string(),
            "task.seq_len" => self.seq.seq_len.to_string(),
            "task.payload" => self.seq.payload.to_string(),
            "task.train_size" => self.seq.train_size.to_string(),
            "task.test_size" => self.seq.test_size.to_string(),
            "pretrain.steps" => self.pretrain.steps.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.checkpoint" => self.pretrain.checkpoint.as_ref()?.display().to_string(),
            _ => return None,
        })
    }

    /// Parses the file format on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), n + 1) {
                return Err(Error::Config(format!(
                    "line {}: key `{key}` already set on line {prev}",
                    n + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The config in file format; `parse(to_text())` reproduces it.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS.iter().chain(OPTIONAL_KEYS.iter()) {
            if let Some(v) = self.get(key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    /// Flat JSON object of every set key, used as the checkpoint config echo.
    pub fn to_json(&self) -> serde_json::Value {
        let map = KEYS
            .iter()
            .chain(OPTIONAL_KEYS.iter())
            .filter_map(|k| self.get(k).map(|v| (k.to_string(), serde_json::Value::String(v))))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("config echo is not an object".into()))?;
        let mut cfg = Self::default();
        for (k, v) in obj {
            let s = v
                .as_str()
                .ok_or_else(|| Error::Config(format!("config echo value for `{k}` is not a string")))?;
            cfg.set(k, s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.schedule;
        if s.steps == 0 || s.batch_size == 0 {
            return bad("schedule.steps and schedule.batch_size must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("optimizer.eps must be positive and weight_decay non-negative".into());
        }
        match self.task {
            TaskKind::TeacherRegression => self.validate_teacher(),
            TaskKind::SeqTransfer => self.validate_seq(),
        }
    }

    fn validate_teacher(&self) -> Result<()> {
        let t = &self.teacher;
        if t.d_in == 0 || t.d_out == 0 || t.samples < 5 {
            return Err(Error::Config("teacher dims must be positive and samples >= 5".into()));
        }
        if t.d_out < t.d_in {
            return Err(Error::Config(format!(
                "teacher needs d_out >= d_in for a recoverable transform, got {}x{}",
                t.d_out, t.d_in
            )));
        }
        if t.blocks == 0 || t.d_in % t.blocks != 0 {
            return Err(Error::Config(format!(
                "teacher.blocks = {} does not divide d_in = {}",
                t.blocks, t.d_in
            )));
        }
        if t.eps_rank > t.d_in {
            return Err(Error::Config("teacher.eps_rank exceeds d_in".into()));
        }
        let sp = &self.spec;
        match sp.family {
            Family::Bitfit => {
                return Err(Error::Config("bitfit has no tensors to train on a bare projector".into()))
            }
            Family::Prodial if t.d_in % sp.r_b_in.max(1) != 0 || sp.r_b_in == 0 => {
                return Err(Error::Config(format!(
                    "spec.r_b_in = {} does not divide teacher.d_in = {}",
                    sp.r_b_in, t.d_in
                )))
            }
            Family::Prodial if sp.r_eps == 0 => return Err(Error::Config("r_eps must be positive".into())),
            Family::Lora | Family::Dora if sp.rank == 0 => {
                return Err(Error::Config("rank must be positive".into()))
            }
            _ => {}
        }
        if sp.target == Target::Ssm {
            return Err(Error::Config("target ssm needs a sequence model".into()));
        }
        Ok(())
    }

    fn validate_seq(&self) -> Result<()> {
        let m = &self.model;
        m.block.validate()?;
        if m.layers == 0 || m.classes < 2 {
            return Err(Error::Config("model.layers must be positive and classes >= 2".into()));
        }
        if m.vocab < 8 {
            return Err(Error::Config(format!("model.vocab must be at least 8, got {}", m.vocab)));
        }
        if m.classes > m.vocab - 1 {
            return Err(Error::Config("model.classes must not exceed vocab - 1".into()));
        }
        let q = &self.seq;
        if q.seq_len < 16 {
            return Err(Error::Config(format!("task.seq_len must be at least 16, got {}", q.seq_len)));
        }
        if q.payload == 0 || 2 * q.payload > q.seq_len {
            return Err(Error::Config("task.payload must be in 1..=seq_len/2".into()));
        }
        if q.train_size == 0 || q.test_size == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        let p = &self.pretrain;
        if p.checkpoint.is_none() && (p.steps == 0 || p.batch_size == 0 || p.lr <= 0.0) {
            return Err(Error::Config("pretrain needs positive steps, batch_size and lr".into()));
        }
        self.spec.validate(&m.block)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
