//! Projector adapters and the adapted model.
//!
//! A ProDiaL adapter rewrites a frozen projector `W` (`d_out x d_in`) as
//!
//! ```text
//! W' = row_scale(s, W D_b) + B_eps A_eps
//! D_b = I - relu(I * D_a) + (1 - I) * D_a
//! ```
//!
//! where `D_a` is block-diagonal with `r_b` square blocks and `*` is the
//! entrywise product. LoRA and DoRA are provided as baselines, and BitFit,
//! full fine-tuning and a frozen model are expressed as sets of directly
//! trainable tensors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, matmul, BlockLayout, Matrix};
use crate::mamba::{
    block_tensor_name, flatten_tokens, model_forward_graph, parse_block_tensor_name, BlockDims,
    Model, ModelDims, SSM_TENSORS,
};

/// Standard deviation of the Gaussian used for `A` matrices at init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Prodial,
    Lora,
    Dora,
    Bitfit,
    FullFt,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    InProj,
    OutProj,
    Both,
    Ssm,
    /// Every tensor of the model. Only meaningful for full fine-tuning.
    All,
}

/// One of the two projectors of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projector {
    In,
    Out,
}

impl Projector {
    pub const BOTH: [Projector; 2] = [Projector::In, Projector::Out];

    /// Tensor name inside a block.
    pub fn local_name(self) -> &'static str {
        match self {
            Projector::In => "w_in",
            Projector::Out => "w_out",
        }
    }

    /// `(d_out, d_in)` for these block dims.
    pub fn shape(self, dims: &BlockDims) -> (usize, usize) {
        match self {
            Projector::In => dims.in_proj_shape(),
            Projector::Out => dims.out_proj_shape(),
        }
    }
}

macro_rules! string_enum {
    ($ty:ty, $what:literal, [$($var:path => $s:literal),+ $(,)?]) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($var => $s),+ }
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
                    $($s => Ok($var),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

string_enum!(Family, "adapter family", [
    Family::Prodial => "prodial",
    Family::Lora => "lora",
    Family::Dora => "dora",
    Family::Bitfit => "bitfit",
    Family::FullFt => "full_ft",
    Family::Frozen => "frozen",
]);

string_enum!(Target, "adapter target", [
    Target::InProj => "in_proj",
    Target::OutProj => "out_proj",
    Target::Both => "both",
    Target::Ssm => "ssm",
    Target::All => "all",
]);

/// Which adapter family is applied to which part of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub family: Family,
    pub target: Target,
    /// Number of diagonal blocks for the in-projector (`d_in = d_model`).
    pub r_b_in: usize,
    /// Number of diagonal blocks for the out-projector (`d_in = d_inner`).
    pub r_b_out: usize,
    pub r_eps: usize,
    /// LoRA/DoRA rank.
    pub rank: usize,
    /// LoRA scale numerator; the update is multiplied by `alpha / rank`.
    pub alpha: f64,
    /// Whether the classification head is trained (and counted).
    pub train_head: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            family: Family::Prodial,
            target: Target::Both,
            r_b_in: 1,
            r_b_out: 1,
            r_eps: 4,
            rank: 4,
            alpha: 8.0,
            train_head: false,
        }
    }
}

impl AdapterSpec {
    /// True when the family wraps projectors in an adapter.
    pub fn uses_adapters(&self) -> bool {
        matches!(self.family, Family::Prodial | Family::Lora | Family::Dora)
    }

    pub fn targets(&self, p: Projector) -> bool {
        match self.target {
            Target::InProj => p == Projector::In,
            Target::OutProj => p == Projector::Out,
            Target::Both | Target::All => true,
            Target::Ssm => false,
        }
    }

    /// Projectors that get an adapter object.
    pub fn adapted_projectors(&self) -> Vec<Projector> {
        if !self.uses_adapters() {
            return Vec::new();
        }
        Projector::BOTH.into_iter().filter(|&p| self.targets(p)).collect()
    }

    pub fn r_b(&self, p: Projector) -> usize {
        match p {
            Projector::In => self.r_b_in,
            Projector::Out => self.r_b_out,
        }
    }

    pub fn validate(&self, dims: &BlockDims) -> Result<()> {
        if self.target == Target::All && self.family != Family::FullFt {
            return Err(Error::Config(format!(
                "target `all` only applies to full_ft, not {}",
                self.family
            )));
        }
        for p in self.adapted_projectors() {
            let (_, d_in) = p.shape(dims);
            match self.family {
                Family::Prodial => {
                    BlockLayout::new(d_in, self.r_b(p)).map_err(|_| {
                        Error::Config(format!(
                            "r_b = {} does not divide d_in = {d_in} of {}",
                            self.r_b(p),
                            p.local_name()
                        ))
                    })?;
                    if self.r_eps == 0 {
                        return Err(Error::Config("r_eps must be positive".into()));
                    }
                }
                _ => {
                    if self.rank == 0 {
                        return Err(Error::Config("rank must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether a base-model tensor is trained directly (not through an
    /// adapter) under this spec.
    pub fn trains_directly(&self, name: &str) -> bool {
        if name.starts_with("head.") && self.train_head {
            return true;
        }
        if self.target == Target::All {
            return self.family == Family::FullFt;
        }
        let Some((_, local)) = parse_block_tensor_name(name) else {
            return false;
        };
        match self.family {
            Family::Frozen => false,
            Family::Bitfit => local == "conv_bias",
            _ if self.target == Target::Ssm => SSM_TENSORS.contains(&local),
            Family::FullFt => Projector::BOTH
                .into_iter()
                .any(|p| self.targets(p) && p.local_name() == local),
            _ => false,
        }
    }
}

/// Closed-form count of trainable parameters for `spec` on a model.
pub fn param_count(spec: &AdapterSpec, dims: &ModelDims) -> usize {
    let b = &dims.block;
    let head = dims.classes * b.d_model + dims.classes;
    if spec.target == Target::All && spec.family == Family::FullFt {
        return dims.total_params();
    }
    let per_layer: usize = match (spec.family, spec.target) {
        (Family::Frozen, _) => 0,
        (Family::Bitfit, _) => b.d_inner,
        (_, Target::Ssm) => b.ssm_param_count(),
        (family, _) => Projector::BOTH
            .into_iter()
            .filter(|&p| spec.targets(p))
            .map(|p| {
                let (d_out, d_in) = p.shape(b);
                match family {
                    Family::Prodial => {
                        d_in * d_in / spec.r_b(p) + d_out + spec.r_eps * (d_in + d_out)
                    }
                    Family::Lora => spec.rank * (d_in + d_out),
                    Family::Dora => spec.rank * (d_in + d_out) + d_in,
                    _ => d_out * d_in,
                }
            })
            .sum(),
    };
    dims.layers * per_layer + if spec.train_head { head } else { 0 }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn off_diag_mask(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// `I - relu(I * D_a) + (1 - I) * D_a` for `D_a` assembled from `blocks`.
pub fn build_db(blocks: &[Matrix], layout: BlockLayout) -> Result<Matrix> {
    let mut d = linalg::block_diag_assemble(blocks, layout)?;
    db_in_place(&mut d);
    Ok(d)
}

fn db_in_place(d: &mut Matrix) {
    for i in 0..d.rows() {
        let v = d.get(i, i);
        d.set(i, i, 1.0 - linalg::relu(v));
    }
}

/// Records `D_b` on the tape from stacked blocks.
pub fn build_db_graph(g: &mut Graph, stacked: Var, layout: BlockLayout) -> Result<Var> {
    let n = layout.dim();
    let da = g.block_diag(stacked, layout)?;
    let eye = g.constant(Matrix::identity(n));
    let off = g.constant(off_diag_mask(n));
    let diag = g.hadamard(da, eye)?;
    let diag = g.relu(diag);
    let diag = g.sub(eye, diag)?;
    let rest = g.hadamard(da, off)?;
    g.add(diag, rest)
}

/// Trainable ProDiaL state for one projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProDiaLAdapter {
    pub layout: BlockLayout,
    /// The `r_b` blocks of `D_a` stacked vertically: `d_in x (d_in / r_b)`.
    pub blocks: Matrix,
    /// `1 x d_out` row scaling.
    pub s: Matrix,
    /// `r_eps x d_in`
    pub a_eps: Matrix,
    /// `d_out x r_eps`
    pub b_eps: Matrix,
    pub frozen_w: Matrix,
}

impl ProDiaLAdapter {
    pub fn init(frozen_w: Matrix, r_b: usize, r_eps: usize, rng: &mut impl Rng) -> Result<Self> {
        let (d_out, d_in) = frozen_w.shape();
        let layout = BlockLayout::new(d_in, r_b)?;
        Ok(Self {
            layout,
            blocks: Matrix::zeros(d_in, layout.block_size()),
            s: Matrix::ones(1, d_out),
            a_eps: gaussian(rng, r_eps, d_in, INIT_STD),
            b_eps: Matrix::zeros(d_out, r_eps),
            frozen_w,
        })
    }

    /// The blocks of `D_a` as separate matrices.
    pub fn block_list(&self) -> Vec<Matrix> {
        let bs = self.layout.block_size();
        (0..self.layout.num_blocks())
            .map(|b| self.blocks.slice_rows(b * bs, bs).expect("in range"))
            .collect()
    }

    pub fn d_b(&self) -> Result<Matrix> {
        let mut d = linalg::block_diag_from_stacked(&self.blocks, self.layout)?;
        db_in_place(&mut d);
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_out, d_in) = self.frozen_w.shape();
        let r = self.a_eps.rows();
        let ok = self.layout.dim() == d_in
            && self.blocks.shape() == (d_in, self.layout.block_size())
            && self.s.shape() == (1, d_out)
            && self.a_eps.cols() == d_in
            && self.b_eps.shape() == (d_out, r);
        if !ok {
            return Err(Error::shape(format!(
                "prodial adapter: W {d_out}x{d_in}, blocks {:?}, s {:?}, A {:?}, B {:?}",
                self.blocks.shape(),
                self.s.shape(),
                self.a_eps.shape(),
                self.b_eps.shape()
            )));
        }
        Ok(())
    }
}

/// `row_scale(s, W D_b) + B_eps A_eps`.
pub fn prodial_effective(ad: &ProDiaLAdapter) -> Result<Matrix> {
    ad.validate()?;
    let wd = matmul(&ad.frozen_w, &ad.d_b()?)?;
    let scaled = wd.row_scale(ad.s.data())?;
    scaled.add(&matmul(&ad.b_eps, &ad.a_eps)?)
}

/// Low-rank additive update `W + (alpha / r) B A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `r x d_in`
    pub a: Matrix,
    /// `d_out x r`
    pub b: Matrix,
    pub alpha: f64,
    pub frozen_w: Matrix,
}

impl LoraAdapter {
    pub fn init(frozen_w: Matrix, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let (d_out, d_in) = frozen_w.shape();
        Self {
            a: gaussian(rng, rank, d_in, INIT_STD),
            b: Matrix::zeros(d_out, rank),
            alpha,
            frozen_w,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

pub fn lora_effective(ad: &LoraAdapter) -> Result<Matrix> {
    let mut w = ad.frozen_w.clone();
    w.add_scaled_assign(&matmul(&ad.b, &ad.a)?, ad.scale())?;
    Ok(w)
}

/// Magnitude/direction update `m (W + B A) / ||col||`, column-wise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoraAdapter {
    /// `r x d_in`
    pub a: Matrix,
    /// `d_out x r`
    pub b: Matrix,
    /// `1 x d_in` column magnitudes.
    pub m: Matrix,
    pub frozen_w: Matrix,
}

impl DoraAdapter {
    pub fn init(frozen_w: Matrix, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        let (d_out, d_in) = frozen_w.shape();
        let norms = frozen_w.col_norms();
        if norms.iter().any(|&n| n == 0.0) {
            return Err(Error::Numerical("dora: frozen weight has a zero column".into()));
        }
        Ok(Self {
            a: gaussian(rng, rank, d_in, INIT_STD),
            b: Matrix::zeros(d_out, rank),
            m: Matrix::row_vector(&norms),
            frozen_w,
        })
    }
}

pub fn dora_effective(ad: &DoraAdapter) -> Result<Matrix> {
    let v = ad.frozen_w.add(&matmul(&ad.b, &ad.a)?)?;
    let norms = v.col_norms();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::Numerical("dora: zero column in W + BA".into()));
    }
    let k: Vec<f64> = ad.m.data().iter().zip(&norms).map(|(m, n)| m / n).collect();
    v.col_scale(&k)
}

/// An adapter wrapping one projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProjAdapter {
    Prodial(ProDiaLAdapter),
    Lora(LoraAdapter),
    Dora(DoraAdapter),
}

impl ProjAdapter {
    /// Builds the adapter `spec` prescribes for projector `p`.
    pub fn init(spec: &AdapterSpec, p: Projector, frozen_w: Matrix, rng: &mut impl Rng) -> Result<Self> {
        Ok(match spec.family {
            Family::Prodial => {
                ProjAdapter::Prodial(ProDiaLAdapter::init(frozen_w, spec.r_b(p), spec.r_eps, rng)?)
            }
            Family::Lora => ProjAdapter::Lora(LoraAdapter::init(frozen_w, spec.rank, spec.alpha, rng)),
            Family::Dora => ProjAdapter::Dora(DoraAdapter::init(frozen_w, spec.rank, rng)?),
            other => {
                return Err(Error::Config(format!("{other} does not use projector adapters")));
            }
        })
    }

    pub fn frozen_w(&self) -> &Matrix {
        match self {
            ProjAdapter::Prodial(a) => &a.frozen_w,
            ProjAdapter::Lora(a) => &a.frozen_w,
            ProjAdapter::Dora(a) => &a.frozen_w,
        }
    }

    pub fn effective(&self) -> Result<Matrix> {
        match self {
            ProjAdapter::Prodial(a) => prodial_effective(a),
            ProjAdapter::Lora(a) => lora_effective(a),
            ProjAdapter::Dora(a) => dora_effective(a),
        }
    }

    /// The dense weight that replaces the adapter at inference time.
    pub fn merge(&self) -> Result<Matrix> {
        self.effective()
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            ProjAdapter::Prodial(a) => vec![
                ("prodial.blocks", &a.blocks),
                ("prodial.s", &a.s),
                ("prodial.a_eps", &a.a_eps),
                ("prodial.b_eps", &a.b_eps),
            ],
            ProjAdapter::Lora(a) => vec![("lora.a", &a.a), ("lora.b", &a.b)],
            ProjAdapter::Dora(a) => vec![("dora.a", &a.a), ("dora.b", &a.b), ("dora.m", &a.m)],
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        match (self, name) {
            (ProjAdapter::Prodial(a), "prodial.blocks") => Some(&mut a.blocks),
            (ProjAdapter::Prodial(a), "prodial.s") => Some(&mut a.s),
            (ProjAdapter::Prodial(a), "prodial.a_eps") => Some(&mut a.a_eps),
            (ProjAdapter::Prodial(a), "prodial.b_eps") => Some(&mut a.b_eps),
            (ProjAdapter::Lora(a), "lora.a") => Some(&mut a.a),
            (ProjAdapter::Lora(a), "lora.b") => Some(&mut a.b),
            (ProjAdapter::Dora(a), "dora.a") => Some(&mut a.a),
            (ProjAdapter::Dora(a), "dora.b") => Some(&mut a.b),
            (ProjAdapter::Dora(a), "dora.m") => Some(&mut a.m),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }

    /// Adds the trainable tensors as leaves and records the effective
    /// weight. Returns the leaves (in [`params`](Self::params) order) and
    /// the effective weight.
    pub fn graph(&self, g: &mut Graph, trainable: bool) -> Result<(Vec<Var>, Var)> {
        let leaves: Vec<Var> = self
            .params()
            .into_iter()
            .map(|(_, m)| g.leaf(m.clone(), trainable))
            .collect();
        let eff = self.effective_graph(g, &leaves)?;
        Ok((leaves, eff))
    }

    /// Records the effective weight from caller-supplied handles for the
    /// trainable tensors, in [`params`](Self::params) order.
    pub fn effective_graph(&self, g: &mut Graph, leaves: &[Var]) -> Result<Var> {
        let want = self.params().len();
        if leaves.len() != want {
            return Err(Error::contract(format!(
                "adapter expects {want} tensors, got {}",
                leaves.len()
            )));
        }
        let w = g.constant(self.frozen_w().clone());
        match self {
            ProjAdapter::Prodial(a) => {
                let (blocks, s, a_eps, b_eps) = (leaves[0], leaves[1], leaves[2], leaves[3]);
                let db = build_db_graph(g, blocks, a.layout)?;
                let wd = g.matmul(w, db)?;
                let scaled = g.row_scale(s, wd)?;
                let eps = g.matmul(b_eps, a_eps)?;
                g.add(scaled, eps)
            }
            ProjAdapter::Lora(a) => {
                let ba = g.matmul(leaves[1], leaves[0])?;
                let ba = g.scale(ba, a.scale());
                g.add(w, ba)
            }
            ProjAdapter::Dora(_) => {
                let ba = g.matmul(leaves[1], leaves[0])?;
                let v = g.add(w, ba)?;
                let dir = g.col_normalize(v)?;
                g.col_scale(dir, leaves[2])
            }
        }
    }
}

/// Builds the adapter for one projector from a seed.
pub fn init_adapter(spec: &AdapterSpec, p: Projector, frozen_w: Matrix, seed: u64) -> Result<ProjAdapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ProjAdapter::init(spec, p, frozen_w, &mut rng)
}

/// Adapters attached to one block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapters {
    pub in_proj: Option<ProjAdapter>,
    pub out_proj: Option<ProjAdapter>,
}

impl LayerAdapters {
    pub fn get(&self, p: Projector) -> Option<&ProjAdapter> {
        match p {
            Projector::In => self.in_proj.as_ref(),
            Projector::Out => self.out_proj.as_ref(),
        }
    }

    fn get_mut(&mut self, p: Projector) -> Option<&mut ProjAdapter> {
        match p {
            Projector::In => self.in_proj.as_mut(),
            Projector::Out => self.out_proj.as_mut(),
        }
    }
}

/// A base model plus the adapters and trainable set a spec prescribes.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    pub base: Model,
    pub spec: AdapterSpec,
    pub layers: Vec<LayerAdapters>,
}

fn adapter_param_name(layer: usize, p: Projector, local: &str) -> String {
    format!("{}.{local}", block_tensor_name(layer, p.local_name()))
}

fn parse_adapter_param_name(name: &str) -> Option<(usize, Projector, &str)> {
    let (layer, rest) = parse_block_tensor_name(name)?;
    let (proj, local) = rest.split_once('.')?;
    let p = match proj {
        "w_in" => Projector::In,
        "w_out" => Projector::Out,
        _ => return None,
    };
    Some((layer, p, local))
}

impl AdaptedModel {
    /// Wraps `base`; adapter randomness comes from `seed` alone.
    pub fn new(base: Model, spec: AdapterSpec, seed: u64) -> Result<Self> {
        base.validate()?;
        spec.validate(&base.dims().block)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(base.blocks.len());
        for block in &base.blocks {
            let mut la = LayerAdapters::default();
            for p in spec.adapted_projectors() {
                let w = block.tensor(p.local_name()).expect("projector").clone();
                let ad = ProjAdapter::init(&spec, p, w, &mut rng)?;
                match p {
                    Projector::In => la.in_proj = Some(ad),
                    Projector::Out => la.out_proj = Some(ad),
                }
            }
            layers.push(la);
        }
        Ok(Self { base, spec, layers })
    }

    /// Names of every trainable tensor, base tensors first.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .base
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| self.spec.trains_directly(n))
            .collect();
        for (i, la) in self.layers.iter().enumerate() {
            for p in Projector::BOTH {
                if let Some(ad) = la.get(p) {
                    for (local, _) in ad.params() {
                        names.push(adapter_param_name(i, p, local));
                    }
                }
            }
        }
        names
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        if let Some((i, p, local)) = parse_adapter_param_name(name) {
            let ad = self.layers.get(i)?.get(p)?;
            return ad.params().into_iter().find(|(n, _)| *n == local).map(|(_, m)| m);
        }
        self.base.tensor(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if let Some((i, p, local)) = parse_adapter_param_name(name) {
            return self.layers.get_mut(i)?.get_mut(p)?.param_mut(local);
        }
        self.base.tensor_mut(name)
    }

    /// Sum of the sizes of all trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable_names()
            .iter()
            .map(|n| self.param(n).expect("listed").len())
            .sum()
    }

    /// Records the forward pass. Returns the logits and the leaves of the
    /// trainable tensors in [`trainable_names`](Self::trainable_names) order.
    pub fn forward_graph(&self, g: &mut Graph, flat: &[usize], seq_len: usize) -> Result<(Var, Vec<Var>)> {
        let spec = &self.spec;
        let mut vars = self.base.leaves(g, |n| spec.trains_directly(n));
        let mut trainable: Vec<Var> = self
            .base
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| spec.trains_directly(n))
            .map(|(n, _)| direct_var(&vars, &n))
            .collect();
        for (i, la) in self.layers.iter().enumerate() {
            for p in Projector::BOTH {
                if let Some(ad) = la.get(p) {
                    let (leaves, eff) = ad.graph(g, true)?;
                    trainable.extend(leaves);
                    match p {
                        Projector::In => vars.blocks[i].w_in = eff,
                        Projector::Out => vars.blocks[i].w_out = eff,
                    }
                }
            }
        }
        let logits = model_forward_graph(g, &self.base.dims().block, &vars, flat, seq_len)?;
        Ok((logits, trainable))
    }

    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Matrix> {
        let (flat, seq_len) = flatten_tokens(tokens, self.base.dims().vocab)?;
        let mut g = Graph::new();
        let (logits, _) = self.forward_graph(&mut g, &flat, seq_len)?;
        Ok(g.value(logits).clone())
    }

    /// The base model with every adapter folded into its projector.
    pub fn merge(&self) -> Result<Model> {
        let mut m = self.base.clone();
        for (i, la) in self.layers.iter().enumerate() {
            for p in Projector::BOTH {
                if let Some(ad) = la.get(p) {
                    *m.blocks[i].tensor_mut(p.local_name()).expect("projector") = ad.merge()?;
                }
            }
        }
        Ok(m)
    }
}

fn direct_var(vars: &crate::mamba::ModelVars, name: &str) -> Var {
    match name {
        "embedding" => vars.embedding,
        "head.weight" => vars.head_w,
        "head.bias" => vars.head_b,
        _ => {
            let (i, local) = parse_block_tensor_name(name).expect("block tensor");
            let b = &vars.blocks[i];
            match local {
                "w_in" => b.w_in,
                "conv_kernel" => b.conv_kernel,
                "conv_bias" => b.conv_bias,
                "w_x" => b.w_x,
                "w_delta" => b.w_delta,
                "a_log" => b.a_log,
                "d_skip" => b.d_skip,
                "w_out" => b.w_out,
                other => unreachable!("unknown block tensor {other}"),
            }
        }
    }
}
