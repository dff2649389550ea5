//! The causal Mamba block and a small stacked classifier built from it.
//!
//! Block data flow for an input `u` of shape `(B*L) x d_model`:
//!
//! ```text
//! [x, z]        = u W_in^T                  (in-projector, 2*d_inner wide)
//! x             = silu(conv(x))
//! [dt, B, C]    = x W_x^T
//! delta         = softplus(dt W_delta^T)
//! y             = scan(x, delta, A = -exp(a_log), B, C, D)
//! out           = u + (y * silu(z)) W_out^T (out-projector)
//! ```

pub mod conv;
pub mod ssm;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use ssm::{selective_scan, zoh_discretize, ScanVars, SeqTensor};

/// Block hyperparameters. `d_inner` is conventionally `2 * d_model`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub n_state: usize,
    pub dt_rank: usize,
    pub conv_k: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_model,
            self.d_inner,
            self.n_state,
            self.dt_rank,
            self.conv_k,
        ];
        if all.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("block dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(d_out, d_in)` of the in-projector.
    pub fn in_proj_shape(&self) -> (usize, usize) {
        (2 * self.d_inner, self.d_model)
    }

    /// `(d_out, d_in)` of the out-projector.
    pub fn out_proj_shape(&self) -> (usize, usize) {
        (self.d_model, self.d_inner)
    }

    /// Parameters of the SSM part: `W_x`, `W_delta`, `a_log`, `D` and the
    /// convolution kernel with its bias.
    pub fn ssm_param_count(&self) -> usize {
        let di = self.d_inner;
        (self.dt_rank + 2 * self.n_state) * di
            + di * self.dt_rank
            + di * self.n_state
            + di
            + di * self.conv_k
            + di
    }

    pub fn block_param_count(&self) -> usize {
        let (o1, i1) = self.in_proj_shape();
        let (o2, i2) = self.out_proj_shape();
        o1 * i1 + o2 * i2 + self.ssm_param_count()
    }
}

/// Tensors of the selective SSM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    /// `d_inner x N`; the state matrix is `A = -exp(a_log)`.
    pub a_log: Matrix,
    /// `(dt_rank + 2N) x d_inner`; produces the step seed, `B` and `C`.
    pub w_x: Matrix,
    /// `d_inner x dt_rank`
    pub w_delta: Matrix,
    /// `1 x d_inner` skip term.
    pub d_skip: Matrix,
    /// `d_inner x k` depthwise kernel.
    pub conv_kernel: Matrix,
    /// `1 x d_inner`
    pub conv_bias: Matrix,
}

/// All learnable tensors of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaBlockParams {
    pub dims: BlockDims,
    /// In-projector, `2*d_inner x d_model`.
    pub w_in: Matrix,
    pub ssm: SsmParams,
    /// Out-projector, `d_model x d_inner`.
    pub w_out: Matrix,
}

/// Tensor names inside a block, in storage order.
pub const BLOCK_TENSORS: [&str; 8] = [
    "w_in",
    "conv_kernel",
    "conv_bias",
    "w_x",
    "w_delta",
    "a_log",
    "d_skip",
    "w_out",
];

/// The subset of [`BLOCK_TENSORS`] that belongs to the SSM.
pub const SSM_TENSORS: [&str; 6] = ["conv_kernel", "conv_bias", "w_x", "w_delta", "a_log", "d_skip"];

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl MambaBlockParams {
    pub fn zeros(dims: BlockDims) -> Self {
        let di = dims.d_inner;
        Self {
            dims,
            w_in: Matrix::zeros(2 * di, dims.d_model),
            ssm: SsmParams {
                a_log: Matrix::zeros(di, dims.n_state),
                w_x: Matrix::zeros(dims.dt_rank + 2 * dims.n_state, di),
                w_delta: Matrix::zeros(di, dims.dt_rank),
                d_skip: Matrix::zeros(1, di),
                conv_kernel: Matrix::zeros(di, dims.conv_k),
                conv_bias: Matrix::zeros(1, di),
            },
            w_out: Matrix::zeros(dims.d_model, di),
        }
    }

    /// Random initialisation in the usual Mamba style: `a_log[c, s] = ln(s+1)`,
    /// `D = 1`, scaled Gaussian projections.
    pub fn init(dims: BlockDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let BlockDims {
            d_model,
            d_inner,
            n_state,
            dt_rank,
            conv_k,
        } = dims;
        let w_in = gaussian(rng, 2 * d_inner, d_model, 1.0 / (d_model as f64).sqrt());
        let bound = 1.0 / (conv_k as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound);
        let conv_kernel = Matrix::from_fn(d_inner, conv_k, |_, _| uni.sample(rng));
        let w_x = gaussian(rng, dt_rank + 2 * n_state, d_inner, 1.0 / (d_inner as f64).sqrt());
        let w_delta = gaussian(rng, d_inner, dt_rank, 0.5 / (dt_rank as f64).sqrt());
        let a_log = Matrix::from_fn(d_inner, n_state, |_, s| ((s + 1) as f64).ln());
        let w_out = gaussian(rng, d_model, d_inner, 0.5 / (d_inner as f64).sqrt());
        Ok(Self {
            dims,
            w_in,
            ssm: SsmParams {
                a_log,
                w_x,
                w_delta,
                d_skip: Matrix::ones(1, d_inner),
                conv_kernel,
                conv_bias: Matrix::zeros(1, d_inner),
            },
            w_out,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        Some(match name {
            "w_in" => &self.w_in,
            "conv_kernel" => &self.ssm.conv_kernel,
            "conv_bias" => &self.ssm.conv_bias,
            "w_x" => &self.ssm.w_x,
            "w_delta" => &self.ssm.w_delta,
            "a_log" => &self.ssm.a_log,
            "d_skip" => &self.ssm.d_skip,
            "w_out" => &self.w_out,
            _ => return None,
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        Some(match name {
            "w_in" => &mut self.w_in,
            "conv_kernel" => &mut self.ssm.conv_kernel,
            "conv_bias" => &mut self.ssm.conv_bias,
            "w_x" => &mut self.ssm.w_x,
            "w_delta" => &mut self.ssm.w_delta,
            "a_log" => &mut self.ssm.a_log,
            "d_skip" => &mut self.ssm.d_skip,
            "w_out" => &mut self.w_out,
            _ => return None,
        })
    }

    /// Checks every tensor against `dims`.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let want: [(&str, (usize, usize)); 8] = [
            ("w_in", (2 * d.d_inner, d.d_model)),
            ("conv_kernel", (d.d_inner, d.conv_k)),
            ("conv_bias", (1, d.d_inner)),
            ("w_x", (d.dt_rank + 2 * d.n_state, d.d_inner)),
            ("w_delta", (d.d_inner, d.dt_rank)),
            ("a_log", (d.d_inner, d.n_state)),
            ("d_skip", (1, d.d_inner)),
            ("w_out", (d.d_model, d.d_inner)),
        ];
        for (name, shape) in want {
            let got = self.tensor(name).expect("known name").shape();
            if got != shape {
                return Err(Error::shape(format!(
                    "{name} is {}x{}, dims require {}x{}",
                    got.0, got.1, shape.0, shape.1
                )));
            }
        }
        Ok(())
    }

    /// Adds every tensor as a leaf; `trainable(name)` decides which ones
    /// receive gradients.
    pub fn leaves(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> BlockVars {
        let mut leaf = |name: &str| g.leaf(self.tensor(name).expect("known").clone(), trainable(name));
        BlockVars {
            w_in: leaf("w_in"),
            conv_kernel: leaf("conv_kernel"),
            conv_bias: leaf("conv_bias"),
            w_x: leaf("w_x"),
            w_delta: leaf("w_delta"),
            a_log: leaf("a_log"),
            d_skip: leaf("d_skip"),
            w_out: leaf("w_out"),
        }
    }
}

/// Graph handles for the tensors a block forward reads. The projector
/// entries may be composed effective weights rather than raw leaves.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub w_in: Var,
    pub conv_kernel: Var,
    pub conv_bias: Var,
    pub w_x: Var,
    pub w_delta: Var,
    pub a_log: Var,
    pub d_skip: Var,
    pub w_out: Var,
}

/// Records one block on the tape. `u` holds `B` sequences of `seq_len` rows.
pub fn block_forward_graph(
    g: &mut Graph,
    dims: &BlockDims,
    p: &BlockVars,
    u: Var,
    seq_len: usize,
) -> Result<Var> {
    let di = dims.d_inner;
    let (r, n) = (dims.dt_rank, dims.n_state);
    let xz = g.matmul_nt(u, p.w_in)?;
    let x = g.slice_cols(xz, 0, di)?;
    let z = g.slice_cols(xz, di, di)?;
    let x = g.causal_conv1d(x, p.conv_kernel, p.conv_bias, seq_len)?;
    let x = g.silu(x);
    let x_dbl = g.matmul_nt(x, p.w_x)?;
    let dt = g.slice_cols(x_dbl, 0, r)?;
    let b = g.slice_cols(x_dbl, r, n)?;
    let c = g.slice_cols(x_dbl, r + n, n)?;
    let delta = g.matmul_nt(dt, p.w_delta)?;
    let delta = g.softplus(delta);
    let a = g.exp(p.a_log);
    let a = g.scale(a, -1.0);
    let y = g.selective_scan(
        ScanVars {
            x,
            delta,
            a,
            b,
            c,
            d: p.d_skip,
        },
        seq_len,
    )?;
    let gate = g.silu(z);
    let y = g.hadamard(y, gate)?;
    let out = g.matmul_nt(y, p.w_out)?;
    g.add(u, out)
}

/// Runs one block on a single `L x d_model` sequence.
pub fn block_forward(p: &MambaBlockParams, u: &Matrix) -> Result<Matrix> {
    p.validate()?;
    if u.cols() != p.dims.d_model || u.rows() == 0 {
        return Err(Error::shape(format!(
            "block input is {}x{}, expected Lx{}",
            u.rows(),
            u.cols(),
            p.dims.d_model
        )));
    }
    let mut g = Graph::new();
    let vars = p.leaves(&mut g, |_| false);
    let uv = g.constant(u.clone());
    let out = block_forward_graph(&mut g, &p.dims, &vars, uv, u.rows())?;
    Ok(g.value(out).clone())
}

/// Stack of blocks between an embedding table and a linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    /// `vocab x d_model`
    pub embedding: Matrix,
    pub blocks: Vec<MambaBlockParams>,
    /// `classes x d_model`
    pub head_w: Matrix,
    /// `1 x classes`
    pub head_b: Matrix,
}

/// Model hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub block: BlockDims,
    pub layers: usize,
    pub vocab: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn total_params(&self) -> usize {
        self.vocab * self.block.d_model
            + self.layers * self.block.block_param_count()
            + self.classes * self.block.d_model
            + self.classes
    }
}

impl Model {
    /// All-zero tensors with the right shapes.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.block.validate()?;
        let d = dims.block.d_model;
        Ok(Self {
            embedding: Matrix::zeros(dims.vocab, d),
            blocks: vec![MambaBlockParams::zeros(dims.block); dims.layers],
            head_w: Matrix::zeros(dims.classes, d),
            head_b: Matrix::zeros(1, dims.classes),
        })
    }

    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.block.validate()?;
        if dims.layers == 0 || dims.vocab == 0 || dims.classes == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {dims:?}")));
        }
        let d = dims.block.d_model;
        let embedding = gaussian(rng, dims.vocab, d, 1.0);
        let blocks = (0..dims.layers)
            .map(|_| MambaBlockParams::init(dims.block, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_w = gaussian(rng, dims.classes, d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            embedding,
            blocks,
            head_w,
            head_b: Matrix::zeros(1, dims.classes),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            block: self.blocks[0].dims,
            layers: self.blocks.len(),
            vocab: self.embedding.rows(),
            classes: self.head_w.rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .blocks
            .first()
            .ok_or_else(|| Error::shape("model has no blocks"))?
            .dims;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.dims != first {
                return Err(Error::shape(format!("block {i} dims differ from block 0")));
            }
            b.validate().map_err(|e| at_block(i, e))?;
        }
        let d = first.d_model;
        if self.embedding.cols() != d || self.head_w.cols() != d {
            return Err(Error::shape("embedding/head width must equal d_model"));
        }
        if self.head_b.shape() != (1, self.head_w.rows()) {
            return Err(Error::shape("head bias must be 1 x classes"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            for name in BLOCK_TENSORS {
                out.push((block_tensor_name(i, name), b.tensor(name).expect("known")));
            }
        }
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        match name {
            "embedding" => Some(&self.embedding),
            "head.weight" => Some(&self.head_w),
            "head.bias" => Some(&self.head_b),
            _ => {
                let (i, local) = parse_block_tensor_name(name)?;
                self.blocks.get(i)?.tensor(local)
            }
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        match name {
            "embedding" => Some(&mut self.embedding),
            "head.weight" => Some(&mut self.head_w),
            "head.bias" => Some(&mut self.head_b),
            _ => {
                let (i, local) = parse_block_tensor_name(name)?;
                self.blocks.get_mut(i)?.tensor_mut(local)
            }
        }
    }

    /// Rebuilds a model from named tensors, e.g. a loaded checkpoint.
    pub fn from_named(dims: ModelDims, mut lookup: impl FnMut(&str) -> Option<Matrix>) -> Result<Self> {
        let mut m = Model::zeros(dims)?;
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut missing = Vec::new();
        for name in names {
            match lookup(&name) {
                Some(t) => *m.tensor_mut(&name).expect("known") = t,
                None => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!("missing tensors: {}", missing.join(", "))));
        }
        m.validate()?;
        Ok(m)
    }
}

pub fn block_tensor_name(layer: usize, local: &str) -> String {
    format!("blocks.{layer}.{local}")
}

/// Splits `blocks.{i}.{local}` into its parts.
pub fn parse_block_tensor_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, local) = rest.split_once('.')?;
    Some((idx.parse().ok()?, local))
}

pub(crate) fn at_block(i: usize, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("block {i}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("block {i}: {m}")),
        Error::Contract(m) => Error::Contract(format!("block {i}: {m}")),
        other => other,
    }
}

/// Checks a batch of token sequences and flattens it.
pub fn flatten_tokens(tokens: &[Vec<usize>], vocab: usize) -> Result<(Vec<usize>, usize)> {
    let seq_len = tokens
        .first()
        .map(|t| t.len())
        .ok_or_else(|| Error::contract("empty batch"))?;
    if seq_len == 0 {
        return Err(Error::contract("empty sequence"));
    }
    let mut flat = Vec::with_capacity(tokens.len() * seq_len);
    for seq in tokens {
        if seq.len() != seq_len {
            return Err(Error::contract("sequences in a batch must share a length"));
        }
        for &t in seq {
            if t >= vocab {
                return Err(Error::contract(format!("token {t} out of range for vocab {vocab}")));
            }
            flat.push(t);
        }
    }
    Ok((flat, seq_len))
}

/// Graph handles for a whole model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub head_w: Var,
    pub head_b: Var,
}

/// Records embed -> blocks -> mean-pool -> head and returns `B x classes`
/// logits.
pub fn model_forward_graph(
    g: &mut Graph,
    dims: &BlockDims,
    vars: &ModelVars,
    flat_tokens: &[usize],
    seq_len: usize,
) -> Result<Var> {
    let mut h = g.gather_rows(vars.embedding, flat_tokens)?;
    for (i, b) in vars.blocks.iter().enumerate() {
        h = block_forward_graph(g, dims, b, h, seq_len).map_err(|e| at_block(i, e))?;
    }
    let pooled = g.segment_mean(h, seq_len)?;
    let logits = g.matmul_nt(pooled, vars.head_w)?;
    g.add_row(logits, vars.head_b)
}

impl Model {
    pub fn leaves(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> ModelVars {
        let embedding = g.leaf(self.embedding.clone(), trainable("embedding"));
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.leaves(g, |n| trainable(&block_tensor_name(i, n))))
            .collect();
        let head_w = g.leaf(self.head_w.clone(), trainable("head.weight"));
        let head_b = g.leaf(self.head_b.clone(), trainable("head.bias"));
        ModelVars {
            embedding,
            blocks,
            head_w,
            head_b,
        }
    }
}

/// Class logits for a batch of equal-length token sequences.
pub fn model_forward(m: &Model, tokens: &[Vec<usize>]) -> Result<Matrix> {
    let dims = m.dims();
    let (flat, seq_len) = flatten_tokens(tokens, dims.vocab)?;
    let mut g = Graph::new();
    let vars = m.leaves(&mut g, |_| false);
    let logits = model_forward_graph(&mut g, &dims.block, &vars, &flat, seq_len)?;
    Ok(g.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> BlockDims {
        BlockDims {
            d_model: 4,
            d_inner: 8,
            n_state: 3,
            dt_rank: 2,
            conv_k: 3,
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MambaBlockParams::init(dims(), &mut rng).unwrap();
        let out = block_forward(&p, &Matrix::zeros(5, 4)).unwrap();
        assert_eq!(out, Matrix::zeros(5, 4));
    }

    #[test]
    fn single_step_is_prefix_of_longer_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MambaBlockParams::init(dims(), &mut rng).unwrap();
        let u = Matrix::from_fn(4, 4, |i, j| ((i * 5 + j) as f64 * 0.61).sin());
        let full = block_forward(&p, &u).unwrap();
        let first = block_forward(&p, &u.slice_rows(0, 1).unwrap()).unwrap();
        assert_eq!(first.row(0), full.row(0));
    }

    #[test]
    fn block_rejects_bad_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MambaBlockParams::init(dims(), &mut rng).unwrap();
        assert!(matches!(block_forward(&p, &Matrix::zeros(3, 5)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let md = ModelDims {
            block: dims(),
            layers: 2,
            vocab: 6,
            classes: 3,
        };
        let mut m = Model::init(md, &mut rng).unwrap();
        m.head_w = Matrix::zeros(3, 4);
        m.head_b = Matrix::row_vector(&[0.1, -0.2, 0.3]);
        let logits = model_forward(&m, &[vec![0, 1, 2], vec![5, 4, 3]]).unwrap();
        for i in 0..2 {
            assert_eq!(logits.row(i), m.head_b.data());
        }
        assert_eq!(m.param_count(), md.total_params());
    }

    #[test]
    fn token_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let md = ModelDims {
            block: dims(),
            layers: 1,
            vocab: 6,
            classes: 3,
        };
        let m = Model::init(md, &mut rng).unwrap();
        assert!(matches!(model_forward(&m, &[vec![0, 6]]), Err(Error::Contract(_))));
    }

    #[test]
    fn names_round_trip() {
        assert_eq!(parse_block_tensor_name("blocks.12.w_out"), Some((12, "w_out")));
        assert_eq!(parse_block_tensor_name("head.weight"), None);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let md = ModelDims {
            block: dims(),
            layers: 2,
            vocab: 5,
            classes: 2,
        };
        let m = Model::init(md, &mut rng).unwrap();
        let rebuilt = Model::from_named(md, |n| m.tensor(n).cloned()).unwrap();
        assert_eq!(rebuilt, m);
        let err = Model::from_named(md, |n| if n == "head.bias" { None } else { m.tensor(n).cloned() });
        assert!(err.unwrap_err().to_string().contains("head.bias"));
    }
}
